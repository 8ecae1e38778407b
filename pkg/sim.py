"""
sim.py – deterministic two-lane highway
────────────────────────────────────────────────────────────────────────────
Kinematic bicycle ego plus constant-speed traffic on a divided highway.

  • lead vehicles (right lane) take their speeds from a shuffled six-speed
    schedule; a new lead appears `lead_spawn_ahead` metres ahead whenever no
    lead is left in front of the ego (passed, exited, or escaped)
  • off-lane vehicles cruise in the left lane at the posted speed with
    exponential spacing
  • `step_world` is pure: every random draw is seeded from the world's seed
    and a counter carried in the state, so identical inputs give identical
    traces

Lane 0 is the right lane (centerline y = 0), lane 1 the left (y = LANE_WIDTH).
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from config import SimConfig
from errors import InsufficientHistoryError, InvalidArgumentError, SimulationError
from state import (
    LANE_WIDTH,
    ROAD_Y_MAX,
    ROAD_Y_MIN,
    VEHICLE_LENGTH,
    VEHICLE_WIDTH,
    Command,
    FeatureWindow,
    LeadFeatures,
    VehicleState,
    WorldState,
    lane_center,
    lane_of,
)
from tools.log import get_logger

log = get_logger(__name__)

OFFLANE_HORIZON = 400.0       # off-lane vehicles are materialised this far ahead
OFFLANE_FIRST_GAP = 100.0
BEHIND_DROP = 150.0           # traffic this far behind the ego leaves the scene
COURTESY_GAP = 10.0
MAX_HEADING = math.pi / 2 - 1e-3

_OFFLANE_STREAM = 7           # rng stream tags
_SCHEDULE_STREAM = 11


# ─── lead schedule ───────────────────────────────────────────────────────
def spawn_lead_schedule(ego_target_speed: float, posted_speed: float, seed) -> list[float]:
    """Permutation of {0.85v_e, 0.9v_e, 0.97v_e, 0.9s, s, 1.1s}; same seed → same order."""
    for name, val in (("ego_target_speed", ego_target_speed), ("posted_speed", posted_speed)):
        if not (math.isfinite(val) and val > 0):
            raise InvalidArgumentError(f"{name} must be positive, got {val}")
    speeds = [
        0.85 * ego_target_speed,
        0.9 * ego_target_speed,
        0.97 * ego_target_speed,
        0.9 * posted_speed,
        posted_speed,
        1.1 * posted_speed,
    ]
    order = np.random.default_rng(seed).permutation(len(speeds))
    return [speeds[i] for i in order]


# ─── world construction ──────────────────────────────────────────────────
def initial_world(
    cfg: SimConfig,
    ego_target_speed: float,
    seed: int,
    posted_speed: Optional[float] = None,
) -> WorldState:
    posted = cfg.posted_speed_mps if posted_speed is None else posted_speed
    if not ego_target_speed > 0:
        raise InvalidArgumentError(f"ego_target_speed must be positive, got {ego_target_speed}")
    first_gap = np.random.default_rng([seed, _OFFLANE_STREAM, 0]).exponential(cfg.offlane_mean_spacing)
    world = WorldState(
        time=0.0,
        ego=VehicleState(x=0.0, y=lane_center(0), v=ego_target_speed, lane=0),
        traffic=(),
        posted_speed=posted,
        ego_target_speed=ego_target_speed,
        seed=seed,
        offlane_next_x=OFFLANE_FIRST_GAP + float(first_gap),
        offlane_count=1,
    )
    return _replenish(world, cfg)


def _next_lead_speed(world: WorldState) -> tuple[float, WorldState]:
    queue, cycle = world.lead_queue, world.lead_cycle
    if not queue:
        # schedule recycles with a fresh shuffle once all six speeds are used
        queue = tuple(spawn_lead_schedule(
            world.ego_target_speed, world.posted_speed, [world.seed, _SCHEDULE_STREAM, cycle]
        ))
        cycle += 1
    return queue[0], replace(world, lead_queue=queue[1:], lead_cycle=cycle)


def _replenish(world: WorldState, cfg: SimConfig) -> WorldState:
    """Spawn the next lead and any off-lane vehicles that have come into range."""
    ego = world.ego
    traffic = list(world.traffic)
    vid = world.next_vid

    if not any(veh.kind == "lead" and veh.x > ego.x for veh in traffic):
        speed, world = _next_lead_speed(world)
        traffic.append(VehicleState(
            x=ego.x + cfg.lead_spawn_ahead, y=lane_center(0), v=speed,
            lane=0, vid=vid, kind="lead", v_set=speed,
        ))
        world = replace(world, spawned_leads=world.spawned_leads + (speed,))
        vid += 1

    nx, count = world.offlane_next_x, world.offlane_count
    while nx < ego.x + OFFLANE_HORIZON:
        traffic.append(VehicleState(
            x=nx, y=lane_center(1), v=world.posted_speed,
            lane=1, vid=vid, kind="offlane", v_set=world.posted_speed,
        ))
        vid += 1
        gap = np.random.default_rng([world.seed, _OFFLANE_STREAM, count]).exponential(cfg.offlane_mean_spacing)
        nx += max(float(gap), 3 * VEHICLE_LENGTH)
        count += 1

    traffic.sort(key=lambda veh: (veh.x, veh.vid))
    return replace(world, traffic=tuple(traffic), next_vid=vid, offlane_next_x=nx, offlane_count=count)


# ─── stepping ────────────────────────────────────────────────────────────
def step_world(
    world: WorldState,
    ego_accel: float,
    ego_steer: float,
    dt: float,
    cfg: Optional[SimConfig] = None,
) -> WorldState:
    cfg = cfg or SimConfig()
    if not 0 < dt <= 0.5:
        raise InvalidArgumentError(f"dt must lie in (0, 0.5], got {dt}")
    if not (math.isfinite(ego_accel) and math.isfinite(ego_steer)):
        raise InvalidArgumentError(f"non-finite command accel={ego_accel} steer={ego_steer}")

    accel = min(max(ego_accel, cfg.accel_min), cfg.accel_max)
    steer = min(max(ego_steer, -cfg.steer_max), cfg.steer_max)

    # kinematic bicycle, exact for constant acceleration over the step
    ego = world.ego
    v_new = min(max(ego.v + accel * dt, 0.0), cfg.v_max)
    ds = 0.5 * (ego.v + v_new) * dt
    heading = ego.heading + ds / cfg.wheelbase * math.tan(steer)
    heading = min(max(heading, -MAX_HEADING), MAX_HEADING)
    mid = 0.5 * (ego.heading + heading)
    x = ego.x + ds * math.cos(mid)
    y = ego.y + ds * math.sin(mid)
    if not all(map(math.isfinite, (x, y, v_new, heading))):
        raise SimulationError(f"ego state became non-finite at t={world.time:.1f}")
    new_ego = replace(ego, x=x, y=y, v=v_new, heading=heading, lane=lane_of(y))

    t = world.time + dt
    traffic = []
    for veh in world.traffic:
        v = veh.v_set
        side_by_side = abs(veh.y - ego.y) < 0.75 * LANE_WIDTH
        if side_by_side and veh.x < ego.x and ego.x - veh.x - VEHICLE_LENGTH < COURTESY_GAP:
            v = min(v, v_new)
        nx = veh.x + v * dt

        engaged = veh.engaged_since
        if veh.kind == "lead":
            gap = nx - x - VEHICLE_LENGTH
            if veh.lane == new_ego.lane and 0 <= gap < cfg.lead_exit_gap:
                engaged = t if engaged < 0 else engaged
            else:
                engaged = -1.0
            exited = engaged >= 0 and t - engaged > cfg.lead_exit_after_s
            if exited or nx - x > cfg.d_max:
                log.debug("lead %d leaves the road at t=%.1f", veh.vid, t)
                continue
        elif nx - x > cfg.d_max + OFFLANE_HORIZON:
            continue
        if x - nx > BEHIND_DROP:
            continue
        traffic.append(replace(veh, x=nx, v=v, engaged_since=engaged))

    traffic.sort(key=lambda veh: (veh.x, veh.vid))
    stepped = replace(
        world,
        time=t,
        ego=new_ego,
        traffic=tuple(traffic),
        offlane_next_x=world.offlane_next_x + world.posted_speed * dt,
    )
    return _replenish(stepped, cfg)


# ─── observation ─────────────────────────────────────────────────────────
def lead_features(world: WorldState, d_max: float = 500.0) -> LeadFeatures:
    ego = world.ego
    lane = lane_of(ego.y)

    lead = None
    for veh in world.traffic:           # sorted by x, first hit is nearest
        if veh.lane == lane and veh.x > ego.x:
            lead = veh
            break
    if lead is not None and lead.x - ego.x - VEHICLE_LENGTH > d_max:
        lead = None

    right = [veh for veh in world.traffic if veh.lane == 0 and abs(veh.x - ego.x) <= d_max]
    nearest_right = min(right, key=lambda veh: (abs(veh.x - ego.x), veh.vid), default=None)
    d_right = nearest_right.x - ego.x if nearest_right is not None else -d_max

    behind = [veh for veh in right if veh.x <= ego.x and veh is not lead]
    rear_gap = ego.x - max(veh.x for veh in behind) - VEHICLE_LENGTH if behind else None

    if lead is None:
        return LeadFeatures(ego.v, world.posted_speed, d_max, 0.0, lane, d_right, None, rear_gap)
    return LeadFeatures(
        ego.v, lead.v, lead.x - ego.x - VEHICLE_LENGTH, lead.y - ego.y, lane, d_right, lead, rear_gap
    )


def observe(world_history: Sequence[WorldState], W: int, d_max: float = 500.0) -> FeatureWindow:
    if W <= 0:
        raise InvalidArgumentError(f"window length must be positive, got {W}")
    if len(world_history) < W:
        raise InsufficientHistoryError(f"need {W} states of history, have {len(world_history)}")
    return FeatureWindow.from_features([lead_features(w, d_max) for w in list(world_history)[-W:]])


def collided(world: WorldState) -> bool:
    ego = world.ego
    return any(
        abs(veh.x - ego.x) < VEHICLE_LENGTH and abs(veh.y - ego.y) < VEHICLE_WIDTH
        for veh in world.traffic
    )


def off_road(world: WorldState) -> bool:
    return not ROAD_Y_MIN <= world.ego.y <= ROAD_Y_MAX


# ─── episodes ────────────────────────────────────────────────────────────
class Driver(Protocol):
    def act(self, world: WorldState, window: FeatureWindow, feats: LeadFeatures) -> Command: ...


@dataclass
class Episode:
    frame: pd.DataFrame
    collisions: int
    offroad: int
    final_world: WorldState


TRACE_COLUMNS = [
    "t", "x", "y", "v", "heading", "lane", "lead_present", "lead_id", "lead_x", "lead_y", "lead_v",
    "d_x", "d_y", "d_right", "rear_gap", "lane_change_flag", "mode",
]


def _record(world: WorldState, feats: LeadFeatures, cmd: Command) -> tuple:
    ego, lead = world.ego, feats.lead
    return (
        world.time, ego.x, ego.y, ego.v, ego.heading, feats.lane,
        lead is not None, lead.vid if lead else -1,
        lead.x if lead else np.nan, lead.y if lead else np.nan, lead.v if lead else np.nan,
        feats.d_x, feats.d_y, feats.d_right,
        np.nan if feats.rear_gap is None else feats.rear_gap,
        int(cmd.lane_change_started), cmd.mode.value,
    )


def run_episode(
    driver: Driver,
    world: WorldState,
    cfg: SimConfig,
    duration_s: Optional[float] = None,
) -> Episode:
    duration = cfg.duration_s if duration_s is None else duration_s
    n_steps = int(round(duration / cfg.dt))
    W = cfg.window

    buffer: deque[LeadFeatures] = deque([lead_features(world, cfg.d_max)] * W, maxlen=W)
    rows: list[tuple] = []
    collisions = offroad = 0
    for _ in range(n_steps):
        feats = lead_features(world, cfg.d_max)
        buffer.append(feats)
        cmd = driver.act(world, FeatureWindow.from_features(buffer), feats)
        rows.append(_record(world, feats, cmd))
        world = step_world(world, cmd.accel, cmd.steer, cfg.dt, cfg)
        if collided(world):
            collisions += 1
            log.warning("⚠️ collision at t=%.1f", world.time)
        if off_road(world):
            offroad += 1

    frame = pd.DataFrame.from_records(rows, columns=TRACE_COLUMNS)
    return Episode(frame=frame, collisions=collisions, offroad=offroad, final_world=world)
