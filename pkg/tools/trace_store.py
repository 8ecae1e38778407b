"""
tools/trace_store.py
JSON Lines trace files and their sidecar metadata.

  <stem>.jsonl      one record per simulation step
  <stem>.meta.json  persona / scenario / config hash / safety counters
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from agents.persona_agent import DemonstrationTrace, PersonaParams
from config import Scenario
from errors import ParseError
from sim import TRACE_COLUMNS
from tools.log import get_logger

log = get_logger(__name__)

LABEL_COLUMNS = ["label_l", "l_mask", "label_f", "label_v"]


def _num(x: Any) -> Optional[float]:
    x = float(x)
    return None if math.isnan(x) else x


def _record(row: dict, config_hash: str = "") -> dict:
    rec = {
        "t": float(row["t"]),
        "config_hash": config_hash,
        "ego": {
            "x": float(row["x"]), "y": float(row["y"]), "v": float(row["v"]),
            "lane": int(row["lane"]), "heading": float(row["heading"]),
        },
        "lead": None,
        "d_x": float(row["d_x"]),
        "d_y": float(row["d_y"]),
        "d_right": float(row["d_right"]),
        "rear_gap": _num(row["rear_gap"]),
        "lane_change_flag": int(row["lane_change_flag"]),
        "mode": str(row["mode"]),
    }
    if bool(row["lead_present"]):
        rec["lead"] = {
            "id": int(row["lead_id"]),
            "x": float(row["lead_x"]), "y": float(row["lead_y"]), "v": float(row["lead_v"]),
        }
    if "label_v" in row:
        rec["labels"] = {
            "l": float(row["label_l"]),
            "l_mask": float(row["l_mask"]),
            "f": _num(row["label_f"]),
            "v": float(row["label_v"]),
        }
    return rec


def _row(rec: dict) -> dict:
    ego, lead = rec["ego"], rec.get("lead")
    row = {
        "t": rec["t"], "x": ego["x"], "y": ego["y"], "v": ego["v"],
        "heading": ego.get("heading", 0.0), "lane": ego["lane"],
        "lead_present": lead is not None,
        "lead_id": lead.get("id", -1) if lead else -1,
        "lead_x": lead["x"] if lead else np.nan,
        "lead_y": lead["y"] if lead else np.nan,
        "lead_v": lead["v"] if lead else np.nan,
        "d_x": rec["d_x"], "d_y": rec["d_y"],
        "d_right": rec.get("d_right", np.nan),
        "rear_gap": np.nan if rec.get("rear_gap") is None else rec["rear_gap"],
        "lane_change_flag": rec["lane_change_flag"],
        "mode": rec.get("mode", "VELOCITY"),
    }
    labels = rec.get("labels")
    if labels is not None:
        row.update(
            label_l=labels["l"], l_mask=labels.get("l_mask", 1.0),
            label_f=np.nan if labels.get("f") is None else labels["f"], label_v=labels["v"],
        )
    return row


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name.removesuffix(".jsonl") + ".meta.json")


def write_frame(frame: pd.DataFrame, path: str | Path, meta: dict) -> Path:
    path = Path(path)
    digest = str(meta.get("config_hash", ""))
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in frame.to_dict(orient="records"):
            fh.write(json.dumps(_record(row, digest), separators=(",", ":")) + "\n")
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.debug("wrote %d records → %s", len(frame), path)
    return path


def read_frame(path: str | Path) -> tuple[pd.DataFrame, dict]:
    path = Path(path)
    rows = []
    hashes = set()
    try:
        with path.open() as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    rows.append(_row(rec))
                    hashes.add(rec.get("config_hash", ""))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ParseError(f"{path}:{lineno}: malformed trace record ({exc})") from exc
    except OSError as exc:
        raise ParseError(f"cannot read trace {path}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: trace is empty")

    meta_path = sidecar_path(path)
    try:
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path}: malformed sidecar ({exc})") from exc
    hashes.discard("")
    stamped = meta.get("config_hash") or None
    if len(hashes) > 1 or (stamped and hashes and hashes != {stamped}):
        raise ParseError(f"{path}: records disagree on config_hash {sorted(hashes)} (sidecar {stamped!r})")
    if hashes and not stamped:
        meta["config_hash"] = next(iter(hashes))

    columns = TRACE_COLUMNS + [c for c in LABEL_COLUMNS if c in rows[0]]
    return pd.DataFrame.from_records(rows, columns=columns), meta


def write_trace(trace: DemonstrationTrace, path: str | Path) -> Path:
    return write_frame(trace.frame, path, trace.sidecar())


def read_trace(path: str | Path) -> DemonstrationTrace:
    frame, meta = read_frame(path)
    missing = [c for c in LABEL_COLUMNS if c not in frame.columns]
    if missing:
        raise ParseError(f"{path}: demonstration trace has no labels {missing}")
    try:
        persona = PersonaParams.model_validate(meta["persona"])
        scenario = Scenario.model_validate(meta["scenario"])
    except (KeyError, ValidationError) as exc:
        raise ParseError(f"{sidecar_path(path)}: sidecar lacks persona/scenario ({exc})") from exc
    return DemonstrationTrace(
        persona=persona,
        scenario=scenario,
        frame=frame,
        config_hash=meta.get("config_hash", ""),
        collisions=int(meta.get("collisions", 0)),
        offroad=int(meta.get("offroad", 0)),
    )


def list_traces(directory: str | Path) -> list[Path]:
    return sorted(Path(directory).glob("*.jsonl"))
