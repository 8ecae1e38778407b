"""
metrics.py
Objective style measures over a driven trace, mimic accuracy between two
metric sets, and correlation statistics.

  - compute_metrics   – MetricSet from a trace frame (sim.TRACE_COLUMNS)
  - mimic_accuracy    – 1 − relative error per metric, floored at 0
  - condition_deltas  – signed AV − user difference per metric
  - correlate         – Pearson / Spearman r with a t-distribution p value

Per-event metrics are None when the trace has no such event.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from errors import InvalidArgumentError, ParseError, UndefinedCorrelationError

SLOWDOWN_DV = -1.0           # m/s drop over SLOWDOWN_SPAN_S counts as the ego slowing down
SLOWDOWN_SPAN_S = 1.0
SLOWDOWN_HOLD_S = 0.5        # and keeps dropping for at least this long

_REQUIRED = ("t", "v", "lane", "lead_present", "lead_id", "d_x", "rear_gap", "lane_change_flag")


@dataclass(frozen=True)
class MetricSet:
    mean_velocity: float
    mean_headway_time: Optional[float]
    distance_headway_merge_back: Optional[float]
    time_headway_merge_back: Optional[float]
    lane_change_count: int
    min_headway_distance: Optional[float]
    left_lane_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_FIELDS = tuple(f.name for f in fields(MetricSet))


def _mean(values: list[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def _check(frame: pd.DataFrame) -> None:
    missing = [c for c in _REQUIRED if c not in frame.columns]
    if missing:
        raise ParseError(f"trace is missing columns {missing}")
    if len(frame) == 0:
        raise ParseError("trace is empty")
    v = frame["v"].to_numpy(dtype=float)
    if not np.all(np.isfinite(v)) or np.any(v < 0):
        raise ParseError("trace speeds must be finite and nonnegative")
    if not frame["lane"].isin([0, 1]).all():
        raise ParseError("lane index must be 0 or 1")


def _steps(t: np.ndarray, seconds: float) -> int:
    if len(t) < 2:
        return 0
    dt = float(np.median(np.diff(t)))
    return max(int(round(seconds / dt)), 1) if dt > 0 else 0


def slowdown_onsets(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    """True where a sustained slowdown starts.

    The speed must sit more than |SLOWDOWN_DV| below its value SLOWDOWN_SPAN_S
    earlier, and keep doing so for SLOWDOWN_HOLD_S; shorter dips are speed
    jitter, not a reaction to the lead.
    """
    n = len(v)
    k, hold = _steps(t, SLOWDOWN_SPAN_S), max(_steps(t, SLOWDOWN_HOLD_S), 1)
    drop = np.zeros(n, dtype=bool)
    if 0 < k < n:
        drop[k:] = v[k:] - v[:-k] < SLOWDOWN_DV
    onset = np.zeros(n, dtype=bool)
    if n >= hold:
        onset[: n - hold + 1] = sliding_window_view(drop, hold).all(axis=1)
    return onset


def _min_headway(frame: pd.DataFrame) -> Optional[float]:
    """Mean over approach segments of the smallest gap before the ego reacts.

    A segment opens when a new lead appears and closes at the onset of the
    first sustained slowdown or at a lane-change initiation; segments whose
    lead disappears first are dropped.
    """
    lead_id = frame["lead_id"].to_numpy(dtype=int)
    d_x = frame["d_x"].to_numpy(dtype=float)
    flag = frame["lane_change_flag"].to_numpy(dtype=int)
    onset = slowdown_onsets(frame["v"].to_numpy(dtype=float), frame["t"].to_numpy(dtype=float))

    minima = []
    current: Optional[float] = None
    prev_id = -1
    for i in range(len(lead_id)):
        if lead_id[i] != prev_id:
            current = d_x[i] if lead_id[i] >= 0 else None
        elif current is not None:
            current = min(current, d_x[i])
        prev_id = lead_id[i]
        if current is None:
            continue
        if onset[i] or flag[i]:
            minima.append(current)
            current = None
    return _mean(minima)


def compute_metrics(frame: pd.DataFrame) -> MetricSet:
    _check(frame)
    v = frame["v"].to_numpy(dtype=float)
    lane = frame["lane"].to_numpy(dtype=int)
    lead = frame["lead_present"].to_numpy(dtype=bool)
    d_x = frame["d_x"].to_numpy(dtype=float)
    rear = frame["rear_gap"].to_numpy(dtype=float)
    flag_steps = np.flatnonzero(frame["lane_change_flag"].to_numpy(dtype=int))

    overtakes = [d_x[i] / v[i] for i in flag_steps if lane[i] == 0 and lead[i] and v[i] > 0]
    merges = [i for i in flag_steps if lane[i] == 1 and np.isfinite(rear[i])]

    return MetricSet(
        mean_velocity=float(v.mean()),
        mean_headway_time=_mean(overtakes),
        distance_headway_merge_back=_mean([rear[i] for i in merges]),
        time_headway_merge_back=_mean([rear[i] / v[i] for i in merges if v[i] > 0]),
        lane_change_count=int(len(flag_steps)),
        min_headway_distance=_min_headway(frame),
        left_lane_fraction=float((lane == 1).mean()),
    )


def mimic_accuracy(m_av: MetricSet, m_user: MetricSet) -> dict[str, Optional[float]]:
    """None marks a skipped metric (user value absent or zero)."""
    out: dict[str, Optional[float]] = {}
    for name in METRIC_FIELDS:
        a, u = getattr(m_av, name), getattr(m_user, name)
        if u is None or u == 0 or a is None:
            out[name] = None
        else:
            out[name] = max(0.0, 1.0 - abs(a - u) / abs(u))
    return out


def condition_deltas(m_av: MetricSet, m_user: MetricSet) -> dict[str, Optional[float]]:
    out: dict[str, Optional[float]] = {}
    for name in METRIC_FIELDS:
        a, u = getattr(m_av, name), getattr(m_user, name)
        out[name] = None if a is None or u is None else float(a - u)
    return out


def correlate(xs: Sequence[float], ys: Sequence[float], method: str = "pearson") -> tuple[float, float]:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgumentError("xs and ys must be 1-d series of equal length")
    n = len(x)
    if n < 3:
        raise InvalidArgumentError(f"correlation needs at least 3 points, got {n}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidArgumentError("correlation inputs must be finite")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("a series has zero variance")

    if method == "pearson":
        r = float(stats.pearsonr(x, y).statistic)
    elif method == "spearman":
        r = float(stats.spearmanr(x, y).statistic)
    else:
        raise InvalidArgumentError(f"unknown correlation method {method!r}")

    r = min(max(r, -1.0), 1.0)
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2))
