"""
config.py
Pydantic models for the single JSON experiment config, plus the loader that
applies `--set section.field=value` overrides and the xxhash config digest
stamped into every artifact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable, Literal, Optional

import xxhash
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import InvalidArgumentError

# ─── ENV ─────────────────────────────────────────────────────────────────
load_dotenv()
DEFAULT_CONFIG_PATH = os.getenv("MAVERIC_CONFIG")

MPH_TO_MPS = 0.44704
POSTED_SPEED_MPS = round(55 * MPH_TO_MPS, 3)     # 24.587


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SimConfig(_Section):
    dt: float = Field(0.1, gt=0, le=0.5)
    window_s: float = Field(3.0, gt=0)
    posted_speed_mps: float = Field(POSTED_SPEED_MPS, gt=0)
    duration_s: float = Field(600.0, gt=0)
    d_max: float = Field(500.0, gt=0)
    accel_min: float = Field(-6.0, lt=0)
    accel_max: float = Field(4.0, gt=0)
    steer_max: float = Field(0.5, gt=0)
    v_max: float = Field(45.0, gt=0)
    wheelbase: float = Field(2.7, gt=0)
    offlane_mean_spacing: float = Field(400.0, gt=0)
    lead_spawn_ahead: float = Field(250.0, gt=0)
    lead_exit_gap: float = Field(100.0, gt=0)
    lead_exit_after_s: float = Field(30.0, gt=0)

    @property
    def window(self) -> int:
        return int(round(self.window_s / self.dt))


class ControllersConfig(_Section):
    kp_v: float = Field(0.8, gt=0)
    ki_v: float = Field(0.05, gt=0)
    kp_f: float = Field(0.4, gt=0)
    ki_f: float = Field(0.02, gt=0)
    kv_f: float = Field(1.2, gt=0)            # relative-speed gain of the follow PI
    stanley_k: float = Field(2.0, gt=0)
    lam: float = Field(80.0, gt=0)            # λ, follow-mode switch distance
    delta: float = Field(0.5, gt=0, lt=1)     # δ, lane-change probability threshold
    f_min: float = Field(5.0, gt=0)
    tau_min: float = Field(0.5, gt=0)
    lane_change_speed_factor: float = Field(2.5, gt=0)
    lane_change_min_length: float = Field(30.0, gt=0)
    legal_closing_horizon_s: float = Field(3.0, gt=0)


class PersonasConfig(_Section):
    speed_jitter: float = Field(0.5, ge=0)
    ou_theta: float = Field(0.5, gt=0)
    param_jitter: float = Field(0.1, ge=0, lt=1)
    pass_speed_margin: float = Field(1.5, ge=0)
    steady_follow_dv: float = Field(1.0, gt=0)


class LearnConfig(_Section):
    embedding_dim: int = 3
    hidden_width: int = Field(64, gt=0)
    hidden_layers: int = Field(2, gt=0)
    c2: float = Field(5.0, ge=0)
    c4: float = Field(0.01 / 55**2, ge=0)
    lr: float = Field(1e-3, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    batch_size: int = Field(256, gt=0)
    epochs: int = Field(200, gt=0)
    patience: int = Field(20, gt=0)
    # validation terms watched for early stopping
    early_stop_terms: list[Literal["L1", "L2", "L3", "L4", "L5"]] = Field(default_factory=lambda: ["L1", "L3"], min_length=1)
    val_fraction: float = Field(0.15, gt=0, lt=1)
    label_smear_s: float = Field(0.5, ge=0)
    pos_weight_cap: float = Field(50.0, ge=1)
    speed_scale: float = Field(40.0, gt=0)
    gap_scale: float = Field(500.0, gt=0)
    lateral_scale: float = Field(3.7, gt=0)
    fit_epochs: int = Field(60, gt=0)
    fit_lr: float = Field(1e-2, ge=0)

    @field_validator("embedding_dim")
    @classmethod
    def _three_dims(cls, v: int) -> int:
        if v != 3:
            raise ValueError("style embeddings are fixed at 3 dimensions")
        return v


class StylespaceConfig(_Section):
    aggression_shift: float = Field(15.0, gt=0)
    adb_min: float = 11.0
    adb_max: float = 55.0
    perp_angles: int = Field(12, gt=0)


class MavericConfig(_Section):
    seed: int = Field(0, ge=0)
    sim: SimConfig = Field(default_factory=SimConfig)
    controllers: ControllersConfig = Field(default_factory=ControllersConfig)
    personas: PersonasConfig = Field(default_factory=PersonasConfig)
    learn: LearnConfig = Field(default_factory=LearnConfig)
    stylespace: StylespaceConfig = Field(default_factory=StylespaceConfig)


class Scenario(_Section):
    """On-disk scenario record: {posted_speed_mps, duration_s, seed, persona_id}."""
    posted_speed_mps: float = Field(POSTED_SPEED_MPS, gt=0)
    duration_s: float = Field(600.0, gt=0)
    seed: int = Field(0, ge=0)
    persona_id: str = "p00"


# ─── loading ─────────────────────────────────────────────────────────────
def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    """Apply `a.b.c=value` assignments in place and return `data`."""
    for item in overrides:
        if "=" not in item:
            raise InvalidArgumentError(f"override must look like section.field=value: {item!r}")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise InvalidArgumentError(f"cannot descend into {key!r} in {path!r}")
        node[keys[-1]] = _parse_value(raw.strip())
    return data


def load_config(
    path: Optional[str | Path] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
) -> MavericConfig:
    path = path or DEFAULT_CONFIG_PATH
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise InvalidArgumentError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"config {path} is not valid JSON: {exc}") from exc
    apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    try:
        return MavericConfig.model_validate(data)
    except ValidationError as exc:
        raise InvalidArgumentError(str(exc)) from exc


def config_hash(cfg: MavericConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return xxhash.xxh64(canonical.encode()).hexdigest()
