"""
errors.py
Exception hierarchy shared by every stage. Each class carries the exit code
the CLI returns when it escapes a subcommand.
"""

from __future__ import annotations

from typing import Any, Optional


class MavericError(Exception):
    exit_code = 3


class InvalidArgumentError(MavericError, ValueError):
    pass


class InvalidStateError(MavericError, RuntimeError):
    pass


class InsufficientHistoryError(MavericError, ValueError):
    pass


class ManeuverRejectedError(MavericError):
    """Planned lane change would intersect the lead vehicle; caller stays in FOLLOW."""


class PathComplete(MavericError):
    """Signal: the ego has reached the end of its lane-change path."""


class ParseError(MavericError, ValueError):
    pass


class SimulationError(MavericError, RuntimeError):
    pass


class DegenerateStyleHeadError(MavericError, ValueError):
    pass


class InsufficientSpreadError(MavericError, ValueError):
    pass


class UndefinedCorrelationError(MavericError, ValueError):
    pass


class TrainingDivergedError(MavericError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, checkpoint: Optional[Any] = None):
        super().__init__(message)
        self.checkpoint = checkpoint   # last finite model, if any


class FitFailedError(MavericError, RuntimeError):
    exit_code = 4
