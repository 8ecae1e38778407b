"""
pipeline.py
Stage functions shared by the CLI subcommands and the LangGraph workflow.
Each stage reads and writes files only; every artifact carries the config hash.

  gen_data → train_model → fit_user → run_rollout → evaluate → build_report
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from agents.maveric_agent import CONDITIONS, rollout
from agents.persona_agent import ADB_MAX, ADB_MIN, generate_demonstrations, make_persona
from config import MavericConfig, Scenario, config_hash
from errors import InvalidArgumentError, MavericError, UndefinedCorrelationError
from metrics import METRIC_FIELDS, MetricSet, compute_metrics, condition_deltas, correlate, mimic_accuracy
from network import predict_style
from state import StyleEmbedding
from stylespace import perpendicular_sample, project_on_gradient, shift_style
from tools.checkpoint import load_checkpoint, load_embedding, save_checkpoint, save_embedding
from tools.log import get_logger
from tools.trace_store import list_traces, read_frame, read_trace, write_frame, write_trace
from tools.tracking import TrainingTracker
from training import build_dataset, fit_new_user, train

log = get_logger(__name__)

_SEED_BOUND = 2**31 - 1


def adb_grid(n: int, offset: float = 0.0) -> list[float]:
    """n scores spread over [11, 55]; offset in (0, 1) shifts them between grid points."""
    if n <= 0:
        raise InvalidArgumentError(f"need at least one persona, got {n}")
    if n == 1:
        return [0.5 * (ADB_MIN + ADB_MAX)]
    span = ADB_MAX - ADB_MIN
    if offset:
        return [ADB_MIN + span * (i + offset) / n for i in range(n)]
    return [ADB_MIN + span * i / (n - 1) for i in range(n)]


def _flat(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flat(v, key + "."))
        else:
            out[key] = v
    return out


# ─── stages ──────────────────────────────────────────────────────────────
def gen_data(
    cfg: MavericConfig,
    out_dir: str | Path,
    n_personas: int,
    seed: int,
    duration_s: Optional[float] = None,
    posted_speed: Optional[float] = None,
    id_prefix: str = "p",
    adb_scores: Optional[Sequence[float]] = None,
) -> list[Path]:
    scores = list(adb_scores) if adb_scores else adb_grid(n_personas)
    rng = np.random.default_rng(seed)
    task_seeds = rng.integers(0, _SEED_BOUND, size=len(scores))
    out_dir = Path(out_dir)
    paths = []
    for i, (adb, task_seed) in enumerate(zip(scores, task_seeds)):
        pid = f"{id_prefix}{i:02d}"
        persona = make_persona(adb, seed=int(task_seed), cfg=cfg.personas,
                               f_min=cfg.controllers.f_min, persona_id=pid)
        scenario = Scenario(
            posted_speed_mps=posted_speed or cfg.sim.posted_speed_mps,
            duration_s=duration_s or cfg.sim.duration_s,
            seed=int(task_seed),
            persona_id=pid,
        )
        trace = generate_demonstrations(persona, scenario, cfg=cfg)
        paths.append(write_trace(trace, out_dir / f"{pid}.jsonl"))
    log.info("✅ wrote %d traces → %s", len(paths), out_dir)
    return paths


def train_model(
    cfg: MavericConfig,
    data_dir: str | Path,
    out_path: str | Path,
    seed: int,
    log_path: Optional[str | Path] = None,
) -> Path:
    traces = [read_trace(p) for p in list_traces(data_dir)]
    dataset = build_dataset(traces, cfg.sim.window, cfg.learn.val_fraction)
    digest = config_hash(cfg)
    out_path = Path(out_path)
    log_path = Path(log_path) if log_path else out_path.with_suffix(".log.csv")
    tracker = TrainingTracker(log_path, digest, _flat(cfg.model_dump(mode="json")))
    try:
        result = train(dataset, cfg, seed=seed, sink=tracker)
    except MavericError as exc:
        checkpoint = getattr(exc, "checkpoint", None)
        if checkpoint is not None:
            save_checkpoint(checkpoint, out_path.with_suffix(".diverged.json"), cfg.model_dump(mode="json"), digest)
        raise
    finally:
        tracker.close()
    save_checkpoint(result.model, out_path, cfg.model_dump(mode="json"), digest)
    log.info("✅ checkpoint → %s (best epoch %d)", out_path, result.best_epoch)
    return out_path


def fit_user(cfg: MavericConfig, ckpt_path: str | Path, trace_path: str | Path,
             out_path: str | Path, seed: int) -> Path:
    model, _ = load_checkpoint(ckpt_path)
    trace = read_trace(trace_path)
    embedding = fit_new_user(model, trace, cfg, seed=seed)
    return save_embedding(
        embedding, out_path,
        persona_id=trace.persona.persona_id,
        persona_adb=trace.persona.adb_score,
        config_hash=config_hash(cfg),
    )


def shift_embedding(cfg: MavericConfig, ckpt_path: str | Path, embedding_path: str | Path,
                    delta_adb: float, out_path: str | Path) -> Path:
    model, _ = load_checkpoint(ckpt_path)
    emb, meta = load_embedding(embedding_path)
    w = shift_style(model, emb.w, delta_adb, cfg.stylespace)
    return _save_derived(model, cfg, emb, meta, w, out_path, delta_adb=delta_adb)


def perp_embedding(cfg: MavericConfig, ckpt_path: str | Path, embedding_path: str | Path,
                   angle_rad: float, out_path: str | Path) -> Path:
    model, _ = load_checkpoint(ckpt_path)
    emb, meta = load_embedding(embedding_path)
    w = perpendicular_sample(model, emb.w, model.embeddings, angle_rad)
    return _save_derived(model, cfg, emb, meta, w, out_path, angle_rad=angle_rad)


def _save_derived(model, cfg, emb: StyleEmbedding, meta: dict, w: np.ndarray, out_path, **extra) -> Path:
    derived = StyleEmbedding(w=w, mu=emb.mu, sigma=emb.sigma, adb_score=predict_style(model, w))
    keep = {k: meta[k] for k in ("persona_id", "persona_adb") if k in meta}
    return save_embedding(derived, out_path, **keep, **extra, config_hash=config_hash(cfg))


def run_rollout(
    cfg: MavericConfig,
    ckpt_path: str | Path,
    embedding_path: str | Path,
    condition: str,
    out_path: str | Path,
    seed: int,
    angle_rad: float = 0.0,
    delta_adb: Optional[float] = None,
    duration_s: Optional[float] = None,
    posted_speed: Optional[float] = None,
) -> Path:
    model, _ = load_checkpoint(ckpt_path)
    emb, meta = load_embedding(embedding_path)
    scenario = Scenario(
        posted_speed_mps=posted_speed or cfg.sim.posted_speed_mps,
        duration_s=duration_s or cfg.sim.duration_s,
        seed=seed,
        persona_id=meta.get("persona_id", Path(embedding_path).stem),
    )
    result = rollout(model, emb, condition, cfg, scenario, angle=angle_rad, delta_adb=delta_adb)
    return write_frame(result.episode.frame, out_path, result.sidecar())


# ─── evaluation ──────────────────────────────────────────────────────────
def evaluate(cfg: MavericConfig, data_dir: str | Path, rollouts_dir: str | Path, out_csv: str | Path) -> pd.DataFrame:
    """One row per (persona, condition[, angle]): AV metrics, user metrics, accuracies, deltas."""
    users: dict[str, MetricSet] = {}
    rows = []
    for path in list_traces(rollouts_dir):
        frame, meta = read_frame(path)
        pid = meta.get("persona_id")
        if pid is None:
            raise InvalidArgumentError(f"{path}: rollout sidecar has no persona_id")
        if pid not in users:
            user_frame, _ = read_frame(Path(data_dir) / f"{pid}.jsonl")
            users[pid] = compute_metrics(user_frame)
        m_user = users[pid]
        m_av = compute_metrics(frame)
        row = {
            "persona_id": pid,
            "condition": meta.get("condition", "mimic"),
            "angle": float(meta.get("angle", 0.0)),
            "s_hat": meta.get("s_hat"),
            "collisions": int(meta.get("collisions", 0)),
        }
        row.update(m_av.to_dict())
        row.update({f"user_{k}": v for k, v in m_user.to_dict().items()})
        row.update({f"acc_{k}": v for k, v in mimic_accuracy(m_av, m_user).items()})
        row.update({f"delta_{k}": v for k, v in condition_deltas(m_av, m_user).items()})
        row["config_hash"] = config_hash(cfg)
        rows.append(row)
    if not rows:
        raise InvalidArgumentError(f"no rollout traces in {rollouts_dir}")
    df = pd.DataFrame(rows).sort_values(["persona_id", "condition", "angle"], kind="stable")
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out_csv, index=False)
    log.info("✅ eval rows %d → %s", len(df), out_csv)
    return df


def _safe_correlate(xs, ys, method: str) -> Optional[dict]:
    try:
        r, p = correlate(xs, ys, method)
    except (UndefinedCorrelationError, InvalidArgumentError) as exc:
        log.info("correlation skipped: %s", exc)
        return None
    return {"r": r, "p": p, "n": len(xs)}


def ordering_fraction(df: pd.DataFrame, metric: str) -> Optional[float]:
    pivot = df[df["condition"].isin(["aggressive", "mimic", "cautious"])].pivot_table(
        index="persona_id", columns="condition", values=metric, aggfunc="mean"
    )
    pivot = pivot.dropna()
    if pivot.empty or not {"aggressive", "mimic", "cautious"} <= set(pivot.columns):
        return None
    ordered = (pivot["aggressive"] > pivot["mimic"]) & (pivot["mimic"] > pivot["cautious"])
    return float(ordered.mean())


def build_report(
    cfg: MavericConfig,
    eval_csv: str | Path,
    ckpt_path: str | Path,
    embeddings_dir: str | Path,
    out_json: str | Path,
) -> dict:
    model, _ = load_checkpoint(ckpt_path)
    df = pd.read_csv(eval_csv)

    proj, adb = [], []
    for path in sorted(Path(embeddings_dir).glob("*.json")):
        emb, meta = load_embedding(path)
        if "persona_adb" in meta and "delta_adb" not in meta and "angle_rad" not in meta:
            proj.append(project_on_gradient(model, emb.w))
            adb.append(float(meta["persona_adb"]))

    mimic = df[df["condition"] == "mimic"]
    accuracy = {k: (None if mimic[f"acc_{k}"].dropna().empty else float(mimic[f"acc_{k}"].dropna().mean()))
                for k in METRIC_FIELDS}

    perp = []
    for pid, group in df[df["condition"] == "perp"].groupby("persona_id"):
        entry = {"persona_id": pid}
        for metric in ("min_headway_distance", "left_lane_fraction"):
            sub = group[["angle", metric]].dropna()
            entry[metric] = _safe_correlate(sub["angle"].tolist(), sub[metric].tolist(), "spearman")
        s_hat = group["s_hat"].dropna()
        entry["s_hat_spread"] = float(s_hat.max() - s_hat.min()) if not s_hat.empty else None
        perp.append(entry)

    report = {
        "config_hash": config_hash(cfg),
        "projection_vs_adb": {
            "pearson": _safe_correlate(proj, adb, "pearson"),
            "spearman": _safe_correlate(proj, adb, "spearman"),
        },
        "ordering": {
            "mean_velocity": ordering_fraction(df, "mean_velocity"),
            "lane_change_count": ordering_fraction(df, "lane_change_count"),
        },
        "mimic_accuracy": accuracy,
        "perpendicular": perp,
        "collisions": int(df["collisions"].sum()),
        "conditions": sorted(set(df["condition"]) & set(CONDITIONS)),
    }
    out_json = Path(out_json)
    out_json.parent.mkdir(parents=True, exist_ok=True)
    out_json.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("✅ report → %s", out_json)
    return report
