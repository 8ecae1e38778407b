"""
tools/checkpoint.py
Versioned JSON checkpoints for the style network plus the small embedding
files passed between `fit-user`, `shift`, `perp` and `rollout`.

Dumps use sorted keys and Python's shortest round-trip float repr, so
save → load → save reproduces the same bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

import numpy as np
import xxhash

from errors import ParseError
from network import SUBNETS, MavericModel, MLP, Normalization
from state import StyleEmbedding

CHECKPOINT_VERSION = 2


def _array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.tolist()}


def _unarray(d: dict) -> np.ndarray:
    arr = np.asarray(d["data"], dtype=float)
    return arr.reshape(d["shape"])


def model_to_dict(model: MavericModel, config: Optional[dict] = None, config_hash: str = "") -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config": config or {},
        "config_hash": config_hash,
        "normalization": {
            "speed_scale": model.norm.speed_scale,
            "gap_scale": model.norm.gap_scale,
            "lateral_scale": model.norm.lateral_scale,
            "adb_min": model.norm.adb_min,
            "adb_max": model.norm.adb_max,
        },
        "window": model.window,
        "pos_weight": model.pos_weight,
        "subnets": {
            name: [
                {"weight": _array(l.weight.detach().numpy()), "bias": _array(l.bias.detach().numpy())}
                for l in model.subnets[name].layers
            ]
            for name in SUBNETS
        },
        "embeddings": {
            "persona_ids": list(model.persona_ids),
            "adb_scores": model.adb_scores.tolist(),
            "table": _array(model.embeddings),
        },
    }


def model_from_dict(d: dict) -> MavericModel:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {d.get('version')!r}")
    try:
        subnets = {
            name: MLP.from_arrays([(_unarray(l["weight"]), _unarray(l["bias"])) for l in d["subnets"][name]])
            for name in SUBNETS
        }
        emb = d["embeddings"]
        return MavericModel(
            subnets,
            _unarray(emb["table"]),
            list(emb["persona_ids"]),
            np.asarray(emb["adb_scores"], dtype=float),
            int(d["window"]),
            Normalization(**d["normalization"]),
            float(d["pos_weight"]),
        )
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}") from exc


def dumps(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(model: MavericModel, path: str | Path, config: Optional[dict] = None,
                    config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(model_to_dict(model, config, config_hash)))
    return path


def load_checkpoint(path: str | Path) -> tuple[MavericModel, dict]:
    """Returns the model and the raw checkpoint dict (config, config_hash, …)."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    return model_from_dict(raw), raw


def file_checksum(path: str | Path) -> str:
    return xxhash.xxh64(Path(path).read_bytes()).hexdigest()


# ─── embedding files ─────────────────────────────────────────────────────
def save_embedding(embedding: StyleEmbedding, path: str | Path, **meta: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {**meta, **embedding.to_dict()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_embedding(path: str | Path) -> tuple[StyleEmbedding, dict]:
    try:
        raw = json.loads(Path(path).read_text())
        return StyleEmbedding.from_dict(raw), raw
    except OSError as exc:
        raise ParseError(f"cannot read embedding {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise ParseError(f"malformed embedding file {path}: {exc}") from exc
