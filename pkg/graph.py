"""
 End-to-end style pipeline – LangGraph
 ------------------------------------------------
 • router     – picks the next unfinished stage
 • gen_data   – training personas + held-out personas
 • train      – joint training, checkpoint + CSV log
 • fit_users  – frozen-network embedding fits for held-out personas
 • rollouts   – four study conditions per held-out persona
 • evaluate   – metrics / accuracy CSV
 • report     – correlation and ordering summary (END)
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from langgraph.graph import END, StateGraph

from agents.maveric_agent import CONDITIONS
from config import MavericConfig
from pipeline import adb_grid, build_report, evaluate, fit_user, gen_data, run_rollout, train_model
from router import PipelineState, router_node
from stylespace import sweep_angles
from tools.log import get_logger
from tools.trace_store import list_traces, sidecar_path

log = get_logger(__name__)


def _cfg(s: PipelineState) -> MavericConfig:
    return MavericConfig.model_validate(s.get("config", {}))


def _fail(s: PipelineState, stage: str, exc: Exception) -> PipelineState:
    log.error("%s stage error: %s", stage, exc)
    return {**s, "error": f"{stage}: {exc}", "exception": exc}


# ─── Decide edge ─────────────────────────────────────────────────────────
def decide_next(s: PipelineState) -> Literal["gen_data", "train", "fit_users", "rollouts", "evaluate", "report"]:
    return s.get("next_node", "report")  # type: ignore[return-value]


# ─── Stage nodes ─────────────────────────────────────────────────────────
def gen_data_node(s: PipelineState) -> PipelineState:
    log.info(">>> gen_data")
    try:
        cfg, out = _cfg(s), Path(s["out_dir"])
        seed = s["seed"]
        train_dir, test_dir = out / "data" / "train", out / "data" / "test"
        gen_data(cfg, train_dir, s["n_train"], seed, s.get("duration_s"), id_prefix="p")
        gen_data(cfg, test_dir, s["n_test"], seed + 1, s.get("duration_s"), id_prefix="t",
                 adb_scores=adb_grid(s["n_test"], offset=0.5))
        return {**s, "gen_done": True, "train_dir": str(train_dir), "test_dir": str(test_dir)}
    except Exception as exc:
        return _fail(s, "gen_data", exc)


def train_node(s: PipelineState) -> PipelineState:
    log.info(">>> train")
    try:
        ckpt = Path(s["out_dir"]) / "ckpt.json"
        train_model(_cfg(s), s["train_dir"], ckpt, s["seed"])
        return {**s, "train_done": True, "ckpt": str(ckpt)}
    except Exception as exc:
        return _fail(s, "train", exc)


def fit_users_node(s: PipelineState) -> PipelineState:
    log.info(">>> fit_users")
    try:
        cfg = _cfg(s)
        emb_dir = Path(s["out_dir"]) / "embeddings"
        for trace in list_traces(s["test_dir"]):
            pid = trace.name.removesuffix(".jsonl")
            fit_user(cfg, s["ckpt"], trace, emb_dir / f"{pid}.json", s["seed"])
        return {**s, "fit_done": True, "embeddings_dir": str(emb_dir)}
    except Exception as exc:
        return _fail(s, "fit_users", exc)


def rollouts_node(s: PipelineState) -> PipelineState:
    log.info(">>> rollouts")
    try:
        cfg = _cfg(s)
        roll_dir = Path(s["out_dir"]) / "rollouts"
        angles = sweep_angles(s.get("angles", cfg.stylespace.perp_angles))
        for trace in list_traces(s["test_dir"]):
            pid = trace.name.removesuffix(".jsonl")
            meta = json.loads(sidecar_path(trace).read_text())
            seed = int(meta["seed"])                      # same traffic as the user's demonstration
            emb = Path(s["embeddings_dir"]) / f"{pid}.json"
            duration = s.get("rollout_duration_s") or meta["scenario"]["duration_s"]
            for condition in CONDITIONS[:3]:
                run_rollout(cfg, s["ckpt"], emb, condition, roll_dir / f"{pid}.{condition}.jsonl",
                            seed, duration_s=duration)
            for k, angle in enumerate(angles):
                run_rollout(cfg, s["ckpt"], emb, "perp", roll_dir / f"{pid}.perp{k:02d}.jsonl",
                            seed, angle_rad=float(angle), duration_s=duration)
        return {**s, "rollouts_done": True, "rollouts_dir": str(roll_dir)}
    except Exception as exc:
        return _fail(s, "rollouts", exc)


def evaluate_node(s: PipelineState) -> PipelineState:
    log.info(">>> evaluate")
    try:
        eval_csv = Path(s["out_dir"]) / "eval.csv"
        evaluate(_cfg(s), s["test_dir"], s["rollouts_dir"], eval_csv)
        return {**s, "eval_done": True, "eval_csv": str(eval_csv)}
    except Exception as exc:
        return _fail(s, "evaluate", exc)


# ─── Report node ─────────────────────────────────────────────────────────
def report_node(s: PipelineState) -> PipelineState:
    log.info("--- report ---")
    if s.get("error"):
        log.error("pipeline stopped: %s", s["error"])
        return {**s, "report": {"error": s["error"]}}
    try:
        report = build_report(_cfg(s), s["eval_csv"], s["ckpt"], s["embeddings_dir"],
                              Path(s["out_dir"]) / "report.json")
    except Exception as exc:
        return {**_fail(s, "report", exc), "report": {"error": str(exc)}}
    return {**s, "report": report}


# ─── Build graph ─────────────────────────────────────────────────────────
_STAGES = {
    "gen_data": gen_data_node,
    "train": train_node,
    "fit_users": fit_users_node,
    "rollouts": rollouts_node,
    "evaluate": evaluate_node,
}

workflow = StateGraph(PipelineState)
workflow.add_node("router", router_node)
for name, node in _STAGES.items():
    workflow.add_node(name, node)
workflow.add_node("report", report_node)

workflow.set_entry_point("router")
workflow.add_conditional_edges("router", decide_next, {**{k: k for k in _STAGES}, "report": "report"})
for leaf in _STAGES:
    workflow.add_edge(leaf, "router")
workflow.add_edge("report", END)
workflow = workflow.compile()


def run_pipeline(
    cfg: MavericConfig,
    out_dir: str | Path,
    seed: int,
    n_train: int = 6,
    n_test: int = 3,
    duration_s: Optional[float] = None,
    rollout_duration_s: Optional[float] = None,
    angles: Optional[int] = None,
) -> PipelineState:
    init: PipelineState = {
        "out_dir": str(out_dir),
        "seed": seed,
        "config": cfg.model_dump(mode="json"),
        "n_train": n_train,
        "n_test": n_test,
        "duration_s": duration_s,
        "rollout_duration_s": rollout_duration_s,
        "angles": angles or cfg.stylespace.perp_angles,
        "error": None,
        "exception": None,
        "report": None,
    }
    # router → stage → router … five stages plus the report
    return workflow.invoke(init, {"recursion_limit": 4 * len(_STAGES) + 4})
