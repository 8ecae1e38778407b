"""
agents/maveric_agent.py
The learned policy: style network setpoints executed through ControllerStack,
and rollouts under the four study conditions.

  • mimic       – the user's own embedding
  • aggressive  – shifted +Δ ADB along the aggression gradient (clamped)
  • cautious    – shifted −Δ ADB
  • perp        – one-σ ellipse sample in the plane orthogonal to the gradient
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from config import MavericConfig, Scenario, config_hash
from controllers import ControllerStack
from errors import InvalidArgumentError
from network import MavericModel, predict_style, predict_targets, predict_velocity
from sim import Episode, initial_world, run_episode
from state import Command, FeatureWindow, LeadFeatures, StyleEmbedding, WorldState
from stylespace import perpendicular_sample, shift_style
from tools.log import get_logger

log = get_logger(__name__)

CONDITIONS = ("mimic", "aggressive", "cautious", "perp")


class MavericDriver:
    def __init__(self, model: MavericModel, w: np.ndarray, cfg: MavericConfig):
        self.model = model
        self.w = np.asarray(w, dtype=float)
        self.stack = ControllerStack(cfg.controllers, cfg.sim)

    def act(self, world: WorldState, window: FeatureWindow, feats: LeadFeatures) -> Command:
        targets = predict_targets(self.model, self.w, window)
        return self.stack.act(world, targets, feats)


def free_road_speed(model: MavericModel, w: np.ndarray, cfg: MavericConfig,
                    posted_speed: Optional[float] = None) -> float:
    """v̂ with no lead in sight; seeds the lead-speed schedule of a rollout."""
    W = model.window
    posted = cfg.sim.posted_speed_mps if posted_speed is None else posted_speed
    v_hat, _ = predict_velocity(model, w, np.full(W, posted), np.zeros(W), np.full(W, cfg.sim.d_max))
    return float(np.clip(v_hat, 1.0, cfg.sim.v_max))


def condition_embedding(
    model: MavericModel,
    w: np.ndarray,
    condition: str,
    cfg: MavericConfig,
    angle: float = 0.0,
    delta_adb: Optional[float] = None,
    training_embeddings: Optional[np.ndarray] = None,
) -> np.ndarray:
    shift = cfg.stylespace.aggression_shift if delta_adb is None else abs(delta_adb)
    if condition == "mimic":
        return np.asarray(w, dtype=float).copy()
    if condition == "aggressive":
        return shift_style(model, w, shift, cfg.stylespace)
    if condition == "cautious":
        return shift_style(model, w, -shift, cfg.stylespace)
    if condition == "perp":
        emb = model.embeddings if training_embeddings is None else training_embeddings
        return perpendicular_sample(model, w, emb, angle)
    raise InvalidArgumentError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")


@dataclass
class Rollout:
    persona_id: str
    condition: str
    angle: float
    w: np.ndarray
    s_hat: float
    episode: Episode
    scenario: Scenario
    config_hash: str

    def sidecar(self) -> dict:
        return {
            "persona_id": self.persona_id,
            "condition": self.condition,
            "angle": self.angle,
            "w": self.w.tolist(),
            "s_hat": self.s_hat,
            "seed": self.scenario.seed,
            "scenario": self.scenario.model_dump(),
            "config_hash": self.config_hash,
            "collisions": self.episode.collisions,
            "offroad": self.episode.offroad,
        }


def rollout(
    model: MavericModel,
    embedding: StyleEmbedding | np.ndarray,
    condition: str,
    cfg: MavericConfig,
    scenario: Scenario,
    angle: float = 0.0,
    delta_adb: Optional[float] = None,
    training_embeddings: Optional[np.ndarray] = None,
    duration_s: Optional[float] = None,
) -> Rollout:
    w0 = embedding.w if isinstance(embedding, StyleEmbedding) else np.asarray(embedding, dtype=float)
    w = condition_embedding(model, w0, condition, cfg, angle, delta_adb, training_embeddings)
    v_free = free_road_speed(model, w, cfg, scenario.posted_speed_mps)
    world = initial_world(cfg.sim, v_free, scenario.seed, scenario.posted_speed_mps)
    episode = run_episode(MavericDriver(model, w, cfg), world, cfg.sim,
                          scenario.duration_s if duration_s is None else duration_s)
    s_hat = predict_style(model, w)
    if episode.collisions:
        log.warning("⚠️ %s/%s: %d collision steps", scenario.persona_id, condition, episode.collisions)
    log.info(
        "✅ rollout %s/%s ŝ=%.1f v_free=%.1f mean v=%.2f",
        scenario.persona_id, condition, s_hat, v_free, episode.frame["v"].mean(),
    )
    return Rollout(
        persona_id=scenario.persona_id,
        condition=condition,
        angle=float(angle) if condition == "perp" else 0.0,
        w=w,
        s_hat=s_hat,
        episode=episode,
        scenario=scenario,
        config_hash=config_hash(cfg),
    )
