"""
agents/persona_agent.py
Scripted demonstrators standing in for human study drivers.

Each persona has an assigned ADB aggression score that maps linearly onto its
cruising speed, following distance, pass trigger and merge-back gap. The
persona emits setpoints (f, l, v) and drives through the same ControllerStack
as the learned policy, so demonstrations and rollouts share one actuator path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from config import MavericConfig, PersonasConfig, Scenario, config_hash
from controllers import ControllerStack
from errors import InvalidArgumentError
from sim import initial_world, run_episode
from state import (
    VEHICLE_LENGTH,
    Command,
    ControllerMode,
    ControlTargets,
    FeatureWindow,
    LeadFeatures,
    VehicleState,
    WorldState,
)
from tools.log import get_logger

log = get_logger(__name__)

ADB_MIN, ADB_MAX = 11.0, 55.0
SPEED_RANGE = (20.0, 36.0)
MIN_DEMO_S = 60.0

_PARAM_STREAM = 13
_JITTER_STREAM = 17


class PersonaParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    persona_id: str = "p00"
    adb_score: float = Field(..., ge=ADB_MIN, le=ADB_MAX)
    target_speed: float = Field(..., ge=SPEED_RANGE[0], le=SPEED_RANGE[1])
    desired_follow: float = Field(..., gt=0)
    pass_headway_time: float = Field(..., ge=0)
    merge_back_gap: float = Field(..., ge=0)
    speed_jitter: float = Field(0.5, ge=0)


# ─── persona construction ────────────────────────────────────────────────
def make_persona(
    adb_score: float,
    seed=None,
    cfg: Optional[PersonasConfig] = None,
    f_min: float = 5.0,
    persona_id: str = "p00",
) -> PersonaParams:
    """Linear ADB → behaviour map; `seed` scales each parameter by a ±jitter factor.

    The jitter factors depend on the seed only, so personas built from the same
    seed keep the ordering of the unjittered map.
    """
    cfg = cfg or PersonasConfig()
    if not (math.isfinite(adb_score) and ADB_MIN <= adb_score <= ADB_MAX):
        raise InvalidArgumentError(f"adb_score must lie in [{ADB_MIN:g}, {ADB_MAX:g}], got {adb_score}")

    a = (adb_score - ADB_MIN) / (ADB_MAX - ADB_MIN)
    values = np.array([
        22.0 + 12.0 * a,     # target_speed
        60.0 - 40.0 * a,     # desired_follow
        4.0 - 2.5 * a,       # pass_headway_time
        50.0 - 30.0 * a,     # merge_back_gap
    ])
    if seed is not None:
        j = cfg.param_jitter
        seed_key = list(seed) if isinstance(seed, (list, tuple)) else [seed]
        values = values * np.random.default_rng([*seed_key, _PARAM_STREAM]).uniform(1 - j, 1 + j, size=4)

    return PersonaParams(
        persona_id=persona_id,
        adb_score=float(adb_score),
        target_speed=float(np.clip(values[0], *SPEED_RANGE)),
        desired_follow=float(max(values[1], f_min)),
        pass_headway_time=float(values[2]),
        merge_back_gap=float(values[3]),
        speed_jitter=cfg.speed_jitter,
    )


# ─── rule-based driver ───────────────────────────────────────────────────
def _right_lane_ahead(world: WorldState) -> Optional[VehicleState]:
    ego = world.ego
    return next((veh for veh in world.traffic if veh.lane == 0 and veh.x > ego.x), None)


class PersonaDriver:
    """Pass slow leads inside the headway trigger, merge back once clear, else cruise."""

    def __init__(self, persona: PersonaParams, cfg: MavericConfig, seed: int = 0):
        self.persona = persona
        self.cfg = cfg
        self.stack = ControllerStack(cfg.controllers, cfg.sim)
        self._rng = np.random.default_rng([seed, _JITTER_STREAM])
        self._jitter = 0.0

    def wants_lane_change(self, feats: LeadFeatures, world: Optional[WorldState] = None) -> bool:
        """Pass trigger in the right lane, merge-back trigger in the left.

        Merging back needs `merge_back_gap` clear behind in the right lane and
        no right-lane vehicle ahead that would set off another pass straight
        away. Whether the gaps are safe is the controller's call.
        """
        p = self.persona
        margin = self.cfg.personas.pass_speed_margin
        if feats.lane == 0:
            if feats.lead is None:
                return False
            headway = feats.d_x / max(feats.v_ev, 0.1)
            return headway < p.pass_headway_time and feats.lead.v < p.target_speed - margin
        if feats.rear_gap is not None and feats.rear_gap <= p.merge_back_gap:
            return False
        ahead = _right_lane_ahead(world) if world is not None else None
        if ahead is None:
            return True
        headway = (ahead.x - world.ego.x - VEHICLE_LENGTH) / max(feats.v_ev, 0.1)
        return headway >= p.pass_headway_time or ahead.v >= p.target_speed - margin

    def _advance_jitter(self) -> None:
        # Ornstein-Uhlenbeck, Euler-Maruyama step
        dt = self.cfg.sim.dt
        theta = self.cfg.personas.ou_theta
        sigma = self.persona.speed_jitter
        self._jitter += -theta * self._jitter * dt + sigma * math.sqrt(dt) * self._rng.standard_normal()

    def act(self, world: WorldState, window: FeatureWindow, feats: LeadFeatures) -> Command:
        targets = ControlTargets(
            f_hat=self.persona.desired_follow,
            l_hat=1.0 if self.wants_lane_change(feats, world) else 0.0,
            v_hat=max(self.persona.target_speed + self._jitter, 0.0),
        )
        cmd = self.stack.act(world, targets, feats)
        self._advance_jitter()
        return cmd


# ─── demonstrations ──────────────────────────────────────────────────────
@dataclass
class DemonstrationTrace:
    persona: PersonaParams
    scenario: Scenario
    frame: pd.DataFrame            # sim.TRACE_COLUMNS + label_l, l_mask, label_f, label_v
    config_hash: str = ""
    collisions: int = 0
    offroad: int = 0

    @property
    def duration_s(self) -> float:
        t = self.frame["t"].to_numpy()
        return float(t[-1] - t[0]) + (float(t[1] - t[0]) if len(t) > 1 else 0.0)

    def sidecar(self) -> dict:
        return {
            "persona_id": self.persona.persona_id,
            "adb_score": self.persona.adb_score,
            "seed": self.scenario.seed,
            "scenario": self.scenario.model_dump(),
            "persona": self.persona.model_dump(),
            "config_hash": self.config_hash,
            "collisions": self.collisions,
            "offroad": self.offroad,
        }


def attach_labels(frame: pd.DataFrame, cfg: MavericConfig) -> pd.DataFrame:
    """Add training labels to a simulated trace.

    label_l smears each lane-change initiation over the following
    `label_smear_s`; l_mask drops the rest of an active lane change, where the
    latched controller ignores l. label_f is the gap during steady following
    only, NaN elsewhere.
    """
    out = frame.copy()
    smear = int(round(cfg.learn.label_smear_s / cfg.sim.dt))
    flags = out["lane_change_flag"].to_numpy(dtype=float)
    label_l = np.minimum(np.convolve(flags, np.ones(smear + 1))[: len(flags)], 1.0)

    in_change = out["mode"].to_numpy() == ControllerMode.LANE_CHANGE.value
    steady = (
        (out["mode"].to_numpy() == ControllerMode.FOLLOW.value)
        & out["lead_present"].to_numpy(dtype=bool)
        & (np.abs(out["v"].to_numpy() - out["lead_v"].to_numpy()) < cfg.personas.steady_follow_dv)
    )

    out["label_l"] = label_l
    out["l_mask"] = np.where(in_change & (label_l == 0), 0.0, 1.0)
    out["label_f"] = np.where(steady, out["d_x"].to_numpy(), np.nan)
    out["label_v"] = out["v"].to_numpy(dtype=float)
    return out


def generate_demonstrations(
    persona: PersonaParams,
    scenario: Scenario,
    duration: Optional[float] = None,
    cfg: Optional[MavericConfig] = None,
) -> DemonstrationTrace:
    cfg = cfg or MavericConfig()
    duration = scenario.duration_s if duration is None else duration
    if duration < MIN_DEMO_S:
        raise InvalidArgumentError(f"demonstrations need at least {MIN_DEMO_S:g} s, got {duration}")

    world = initial_world(cfg.sim, persona.target_speed, scenario.seed, scenario.posted_speed_mps)
    driver = PersonaDriver(persona, cfg, seed=scenario.seed)
    episode = run_episode(driver, world, cfg.sim, duration)
    if episode.collisions or episode.offroad:
        log.warning(
            "⚠️ persona %s: %d collision steps, %d off-road steps",
            persona.persona_id, episode.collisions, episode.offroad,
        )
    log.info(
        "✅ persona %s (adb %.1f): %d steps, %d lane changes",
        persona.persona_id, persona.adb_score, len(episode.frame),
        int(episode.frame["lane_change_flag"].sum()),
    )
    return DemonstrationTrace(
        persona=persona,
        scenario=scenario.model_copy(update={"persona_id": persona.persona_id, "duration_s": duration}),
        frame=attach_labels(episode.frame, cfg),
        config_hash=config_hash(cfg),
        collisions=episode.collisions,
        offroad=episode.offroad,
    )
