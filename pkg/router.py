# router.py
"""
Router node for the pipeline workflow.

Looks at the stage flags in the state and picks the next stage:

• "gen_data"  – demonstration traces for training and held-out personas
• "train"     – joint network + embedding training
• "fit_users" – embedding-only fits for the held-out personas
• "rollouts"  – mimic / aggressive / cautious / perpendicular sweep
• "evaluate"  – metrics CSV
• "report"    – correlations and orderings; also taken on any error
"""

from __future__ import annotations

from typing import Optional, TypedDict

from route_schema import RouteDecision
from tools.log import get_logger

log = get_logger(__name__)


class PipelineState(TypedDict, total=False):
    # run parameters
    out_dir: str
    seed: int
    config: dict
    n_train: int
    n_test: int
    duration_s: Optional[float]
    rollout_duration_s: Optional[float]
    angles: int
    # stage flags
    gen_done: bool
    train_done: bool
    fit_done: bool
    rollouts_done: bool
    eval_done: bool
    # artifacts
    train_dir: str
    test_dir: str
    ckpt: str
    embeddings_dir: str
    rollouts_dir: str
    eval_csv: str
    report: Optional[dict]
    error: Optional[str]
    exception: Optional[BaseException]   # the stage error itself, for its exit code
    next_node: str


_ORDER = (
    ("gen_done", "gen_data"),
    ("train_done", "train"),
    ("fit_done", "fit_users"),
    ("rollouts_done", "rollouts"),
    ("eval_done", "evaluate"),
)


def route(state: PipelineState) -> RouteDecision:
    if state.get("error"):
        return RouteDecision(step="report", reason="error")
    for flag, stage in _ORDER:
        if not state.get(flag):
            return RouteDecision(step=stage, reason=f"{flag} unset")
    return RouteDecision(step="report", reason="all stages done")


def router_node(state: PipelineState) -> PipelineState:
    decision = route(state)
    log.info("🧭 Router decision → %s (%s)", decision.step, decision.reason)
    return {**state, "next_node": decision.step}
