"""
controllers.py – low-level control beneath the learned setpoints
────────────────────────────────────────────────────────────────────────────
  • pi_velocity     – PI speed regulation with conditional-integration anti-windup
  • pi_follow       – PI gap + relative-speed regulation with a hard braking floor
  • plan_lane_change / track_path – cubic Bézier lane change tracked by Stanley
  • arbitrate       – VELOCITY / FOLLOW / LANE_CHANGE selection with λ and δ
  • ControllerStack – the per-rollout bundle (integrators + lane-change latch)
                      shared by the scripted personas and the learned policy
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from config import ControllersConfig, SimConfig
from errors import InvalidArgumentError, InvalidStateError, ManeuverRejectedError, PathComplete
from sim import lead_features
from state import (
    VEHICLE_LENGTH,
    VEHICLE_WIDTH,
    Command,
    ControllerMode,
    ControlTargets,
    LeadFeatures,
    VehicleState,
    WorldState,
    lane_center,
    lane_of,
)
from tools.log import get_logger

log = get_logger(__name__)

ControllerGains = ControllersConfig

DEFAULT_LIMITS = (-6.0, 4.0)
SETTLE_TOLERANCE = 0.1          # m, lateral error allowed when a lane change releases
SETTLE_HEADING = 0.02           # rad
MIN_STANLEY_SPEED = 1.0


# ─── longitudinal ────────────────────────────────────────────────────────
def _saturate(raw: float, limits: tuple[float, float]) -> float:
    return min(max(raw, limits[0]), limits[1])


def pi_velocity(
    ego: VehicleState,
    v_des: float,
    gains: ControllerGains,
    integrator_state: float = 0.0,
    dt: float = 0.1,
    limits: tuple[float, float] = DEFAULT_LIMITS,
) -> tuple[float, float]:
    e = v_des - ego.v
    integral = integrator_state + e * dt
    raw = gains.kp_v * e + gains.ki_v * integral
    accel = _saturate(raw, limits)
    if accel != raw and math.copysign(1.0, e) == math.copysign(1.0, raw):
        integral = integrator_state        # saturated: stop integrating in the same direction
    return accel, integral


def follow_floor(ego_speed: float, gains: ControllerGains) -> float:
    return max(gains.f_min, gains.tau_min * ego_speed)


def pi_follow(
    ego: VehicleState,
    lead: Optional[VehicleState],
    f_des: float,
    gains: ControllerGains,
    integrator_state: float = 0.0,
    dt: float = 0.1,
    limits: tuple[float, float] = DEFAULT_LIMITS,
) -> tuple[float, float]:
    if lead is None:
        raise InvalidStateError("follow controller needs a lead vehicle")
    gap = lead.x - ego.x - VEHICLE_LENGTH
    target = max(f_des, follow_floor(ego.v, gains))
    e_gap = gap - target
    e_v = lead.v - ego.v
    integral = integrator_state + e_gap * dt
    raw = gains.kp_f * e_gap + gains.kv_f * e_v + gains.ki_f * integral
    accel = _saturate(raw, limits)
    if accel != raw and math.copysign(1.0, e_gap) == math.copysign(1.0, raw):
        integral = integrator_state
    if gap < follow_floor(ego.v, gains):
        return limits[0], integrator_state
    return accel, integral


# ─── lateral ─────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class LaneChangePath:
    """Cubic Bézier from the source to the target lane centerline.

    Inner control points sit at L/3 and 2L/3 on the source and target
    centerlines, so x(s) is linear in s and both end tangents are road-parallel.
    """
    control_points: np.ndarray
    target_lane: int

    @classmethod
    def between(cls, x0: float, y0: float, y1: float, length: float, target_lane: int) -> "LaneChangePath":
        pts = np.array([
            [x0, y0],
            [x0 + length / 3, y0],
            [x0 + 2 * length / 3, y1],
            [x0 + length, y1],
        ])
        return cls(control_points=pts, target_lane=target_lane)

    @property
    def length(self) -> float:
        return float(self.control_points[3, 0] - self.control_points[0, 0])

    @property
    def x0(self) -> float:
        return float(self.control_points[0, 0])

    def point(self, s: float) -> tuple[float, float]:
        p0, p1, p2, p3 = self.control_points
        u = 1.0 - s
        pt = u**3 * p0 + 3 * u**2 * s * p1 + 3 * u * s**2 * p2 + s**3 * p3
        return float(pt[0]), float(pt[1])

    def tangent(self, s: float) -> tuple[float, float]:
        p0, p1, p2, p3 = self.control_points
        u = 1.0 - s
        d = 3 * u**2 * (p1 - p0) + 6 * u * s * (p2 - p1) + 3 * s**2 * (p3 - p2)
        return float(d[0]), float(d[1])

    def heading(self, s: float) -> float:
        dx, dy = self.tangent(s)
        return math.atan2(dy, dx)

    def progress(self, x: float) -> float:
        return (x - self.x0) / self.length


def stanley_steer(heading_error: float, cross_track: float, v: float, k: float, steer_max: float = 0.5) -> float:
    heading_error = math.atan2(math.sin(heading_error), math.cos(heading_error))
    steer = heading_error + math.atan2(k * cross_track, max(v, MIN_STANLEY_SPEED))
    return min(max(steer, -steer_max), steer_max)


def lane_keep_steer(ego: VehicleState, lane: int, stanley_k: float, steer_max: float = 0.5) -> float:
    return stanley_steer(-ego.heading, lane_center(lane) - ego.y, ego.v, stanley_k, steer_max)


def track_path(ego: VehicleState, path: LaneChangePath, stanley_k: float, steer_max: float = 0.5) -> float:
    s = path.progress(ego.x)
    if s >= 1.0:
        raise PathComplete(f"ego at x={ego.x:.2f} is past the path end")
    s = max(s, 0.0)
    _, py = path.point(s)
    theta = path.heading(s)
    cross_track = (py - ego.y) * math.cos(theta)
    return stanley_steer(theta - ego.heading, cross_track, ego.v, stanley_k, steer_max)


def plan_lane_change(
    ego: VehicleState,
    lead: Optional[VehicleState],
    target_lane: int,
    v: float,
    gains: Optional[ControllerGains] = None,
) -> LaneChangePath:
    gains = gains or ControllerGains()
    source = lane_of(ego.y)
    if target_lane not in (0, 1) or target_lane == source:
        raise InvalidArgumentError(f"target lane {target_lane} is not adjacent to lane {source}")
    length = max(gains.lane_change_speed_factor * v, gains.lane_change_min_length)
    path = LaneChangePath.between(ego.x, lane_center(source), lane_center(target_lane), length, target_lane)

    if lead is not None:
        duration = length / max(v, MIN_STANLEY_SPEED)
        for s in np.linspace(0.0, 1.0, 21):
            ex, ey = path.point(s)
            lx = lead.x + lead.v * s * duration
            overlapping = abs(ey - lead.y) < VEHICLE_WIDTH
            if overlapping and lx - ex - VEHICLE_LENGTH < gains.f_min:
                raise ManeuverRejectedError(
                    f"lead {lead.vid} would be {lx - ex - VEHICLE_LENGTH:.1f} m ahead inside the corridor"
                )
    return path


# ─── arbitration ─────────────────────────────────────────────────────────
class Decision(NamedTuple):
    mode: ControllerMode
    path: Optional[LaneChangePath] = None


def lane_change_legal(world: WorldState, target_lane: int, gains: ControllerGains) -> bool:
    ego = world.ego
    if target_lane not in (0, 1) or target_lane == lane_of(ego.y):
        return False
    horizon = gains.legal_closing_horizon_s
    for veh in world.traffic:
        if veh.lane != target_lane:
            continue
        if veh.x >= ego.x:
            gap = veh.x - ego.x - VEHICLE_LENGTH
            need = follow_floor(ego.v, gains) + max(0.0, ego.v - veh.v) * horizon
        else:
            gap = ego.x - veh.x - VEHICLE_LENGTH
            need = follow_floor(veh.v, gains) + max(0.0, veh.v - ego.v) * horizon
        if gap < need:
            return False
    return True


def arbitrate(
    world: WorldState,
    targets: ControlTargets,
    gains: ControllerGains,
    latch: Optional[LaneChangePath] = None,
    feats: Optional[LeadFeatures] = None,
    d_max: float = 500.0,
) -> Decision:
    if latch is not None:
        return Decision(ControllerMode.LANE_CHANGE, latch)
    feats = feats or lead_features(world, d_max)

    if targets.l_hat > gains.delta:
        target_lane = 1 - feats.lane
        if lane_change_legal(world, target_lane, gains):
            try:
                path = plan_lane_change(world.ego, feats.lead, target_lane, world.ego.v, gains)
                return Decision(ControllerMode.LANE_CHANGE, path)
            except ManeuverRejectedError as exc:
                log.debug("maneuver rejected: %s", exc)

    if feats.lead is not None and feats.d_x < gains.lam:
        return Decision(ControllerMode.FOLLOW)
    return Decision(ControllerMode.VELOCITY)


# ─── per-rollout stack ───────────────────────────────────────────────────
@dataclass
class ControllerStack:
    gains: ControllerGains
    sim: SimConfig = field(default_factory=SimConfig)
    v_integral: float = 0.0
    f_integral: float = 0.0
    path: Optional[LaneChangePath] = None

    @property
    def limits(self) -> tuple[float, float]:
        return self.sim.accel_min, self.sim.accel_max

    def act(self, world: WorldState, targets: ControlTargets, feats: Optional[LeadFeatures] = None) -> Command:
        feats = feats or lead_features(world, self.sim.d_max)
        ego, g = world.ego, self.gains

        decision = arbitrate(world, targets, g, self.path, feats, self.sim.d_max)
        started = self.path is None and decision.path is not None
        self.path = decision.path

        # lateral
        if self.path is not None:
            try:
                steer = track_path(ego, self.path, g.stanley_k, self.sim.steer_max)
            except PathComplete:
                target = self.path.target_lane
                steer = lane_keep_steer(ego, target, g.stanley_k, self.sim.steer_max)
                if abs(ego.y - lane_center(target)) < SETTLE_TOLERANCE and abs(ego.heading) < SETTLE_HEADING:
                    self.path = None
        else:
            steer = lane_keep_steer(ego, feats.lane, g.stanley_k, self.sim.steer_max)

        # longitudinal: speed PI, capped by the follow PI when a lead is in range
        accel, v_int = pi_velocity(ego, targets.v_hat, g, self.v_integral, self.sim.dt, self.limits)
        f_int = None
        in_range = feats.lead is not None and feats.d_x < g.lam
        if in_range and decision.mode is not ControllerMode.VELOCITY:
            f_des = max(targets.f_hat, g.f_min)
            a_f, f_candidate = pi_follow(ego, feats.lead, f_des, g, self.f_integral, self.sim.dt, self.limits)
            if a_f < accel:
                accel, f_int = a_f, f_candidate
        if f_int is None:
            self.v_integral = v_int
        else:
            self.f_integral = f_int

        if feats.lead is not None and feats.d_x < follow_floor(ego.v, g):
            accel = self.limits[0]
        return Command(accel, steer, decision.mode, started)
