"""
state.py
Immutable values passed between the simulator, the controllers and the network.

  - VehicleState / WorldState  – one instant of the two-lane highway
  - LeadFeatures               – per-instant lead/right-lane measurements
  - FeatureWindow              – the Δt history fed to the subnetworks
  - ControlTargets             – network (or persona) setpoints (f̂, l̂, v̂, ŝ)
  - StyleEmbedding             – w plus posterior (μ, σ) and ADB score
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from errors import InvalidArgumentError

# ─── road geometry ───────────────────────────────────────────────────────
LANE_WIDTH = 3.7
VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 1.9
ROAD_Y_MIN = -LANE_WIDTH / 2
ROAD_Y_MAX = 1.5 * LANE_WIDTH


def lane_center(lane: int) -> float:
    return lane * LANE_WIDTH


def lane_of(y: float) -> int:
    return 1 if y > LANE_WIDTH / 2 else 0


class ControllerMode(str, Enum):
    VELOCITY = "VELOCITY"
    FOLLOW = "FOLLOW"
    LANE_CHANGE = "LANE_CHANGE"


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    v: float
    heading: float = 0.0
    lane: int = 0
    vid: int = 0
    kind: str = "ego"              # ego | lead | offlane
    v_set: float = 0.0             # scheduled cruising speed (traffic only)
    engaged_since: float = -1.0    # time the ego settled in behind this lead; -1 = never


@dataclass(frozen=True)
class WorldState:
    time: float
    ego: VehicleState
    traffic: tuple[VehicleState, ...]
    posted_speed: float
    ego_target_speed: float
    seed: int = 0
    lead_queue: tuple[float, ...] = ()
    lead_cycle: int = 0
    next_vid: int = 1
    offlane_next_x: float = 0.0
    offlane_count: int = 0
    spawned_leads: tuple[float, ...] = ()


class LeadFeatures(NamedTuple):
    v_ev: float
    v_lv: float
    d_x: float
    d_y: float
    lane: int
    d_right: float
    lead: Optional[VehicleState]
    rear_gap: Optional[float]      # bumper gap to the nearest right-lane vehicle behind


@dataclass(frozen=True)
class FeatureWindow:
    v_ev: np.ndarray
    v_lv: np.ndarray
    d_x: np.ndarray
    d_y: np.ndarray
    lane: np.ndarray
    d_right: np.ndarray

    def __post_init__(self):
        lengths = {len(a) for a in (self.v_ev, self.v_lv, self.d_x, self.d_y, self.lane, self.d_right)}
        if len(lengths) != 1:
            raise InvalidArgumentError(f"feature channels disagree on length: {sorted(lengths)}")

    @property
    def W(self) -> int:
        return len(self.v_ev)

    @classmethod
    def from_features(cls, feats: Sequence[LeadFeatures]) -> "FeatureWindow":
        cols = np.array([(f.v_ev, f.v_lv, f.d_x, f.d_y, f.lane, f.d_right) for f in feats], dtype=float)
        return cls(*(cols[:, i].copy() for i in range(6)))


@dataclass(frozen=True)
class ControlTargets:
    f_hat: float
    l_hat: float
    v_hat: float
    s_hat: float = float("nan")

    def __post_init__(self):
        for name in ("f_hat", "l_hat", "v_hat"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidArgumentError(f"{name} must be finite")
        if not 0.0 <= self.l_hat <= 1.0:
            raise InvalidArgumentError(f"l_hat must be a probability, got {self.l_hat}")
        if self.f_hat < 0 or self.v_hat < 0:
            raise InvalidArgumentError("f_hat and v_hat must be nonnegative")


@dataclass(frozen=True)
class StyleEmbedding:
    w: np.ndarray
    mu: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma: np.ndarray = field(default_factory=lambda: np.ones(3))
    adb_score: float = float("nan")

    def __post_init__(self):
        for name in ("w", "mu", "sigma"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (3,):
                raise InvalidArgumentError(f"{name} must be a 3-vector, got shape {arr.shape}")
            object.__setattr__(self, name, arr)
        if np.any(self.sigma <= 0):
            raise InvalidArgumentError("sigma must be positive elementwise")

    def to_dict(self) -> dict:
        return {
            "w": self.w.tolist(),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "adb_score": self.adb_score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StyleEmbedding":
        return cls(
            w=np.asarray(d["w"], dtype=float),
            mu=np.asarray(d.get("mu", [0.0, 0.0, 0.0]), dtype=float),
            sigma=np.asarray(d.get("sigma", [1.0, 1.0, 1.0]), dtype=float),
            adb_score=float(d.get("adb_score", float("nan"))),
        )


class Command(NamedTuple):
    accel: float
    steer: float
    mode: ControllerMode
    lane_change_started: bool = False
