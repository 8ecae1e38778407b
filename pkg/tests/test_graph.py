import json

import pytest

from config import MavericConfig
from errors import TrainingDivergedError
from graph import decide_next, report_node, run_pipeline
from route_schema import RouteDecision
from router import route, router_node

_FLAGS = ("gen_done", "train_done", "fit_done", "rollouts_done", "eval_done")


def test_router_walks_the_stages_in_order():
    state = {}
    seen = []
    for flag in _FLAGS:
        seen.append(route(state).step)
        state[flag] = True
    assert seen == ["gen_data", "train", "fit_users", "rollouts", "evaluate"]
    assert route(state).step == "report"


def test_error_short_circuits_to_report():
    decision = route({"gen_done": True, "error": "train: boom"})
    assert decision == RouteDecision(step="report", reason="error")


def test_router_node_sets_next_node():
    out = router_node({"gen_done": True})
    assert out["next_node"] == "train"
    assert decide_next(out) == "train"
    assert decide_next({}) == "report"


def test_report_node_carries_the_error():
    out = report_node({"error": "fit_users: no traces"})
    assert out["report"] == {"error": "fit_users: no traces"}


def test_failing_stage_stops_the_workflow(tmp_path):
    cfg = MavericConfig.model_validate({"sim": {"window_s": 0.5}})
    # a single training persona cannot be trained on
    state = run_pipeline(cfg, tmp_path, seed=0, n_train=1, n_test=1, duration_s=60.0)
    assert state["error"].startswith("train:")
    assert state["gen_done"] and not state.get("train_done")
    assert not (tmp_path / "report.json").exists()


@pytest.mark.slow
def test_pipeline_smoke(tmp_path):
    cfg = MavericConfig.model_validate({
        "sim": {"window_s": 0.5},
        "learn": {"hidden_width": 8, "epochs": 3, "patience": 3, "batch_size": 128, "fit_epochs": 3},
    })
    state = run_pipeline(cfg, tmp_path, seed=1, n_train=3, n_test=3, duration_s=60.0,
                         rollout_duration_s=20.0, angles=3)
    assert state.get("error") is None
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config_hash"] == state["report"]["config_hash"]
    assert report["conditions"] == ["aggressive", "cautious", "mimic", "perp"]
    assert len(report["perpendicular"]) == 3
    assert len(list((tmp_path / "rollouts").glob("*.jsonl"))) == 3 * (3 + 3)


def test_stage_error_is_kept_with_its_type(tmp_path):
    cfg = MavericConfig.model_validate({
        "sim": {"window_s": 0.5},
        "learn": {"hidden_width": 6, "epochs": 2, "patience": 2, "batch_size": 128, "lr": 1e300},
    })
    state = run_pipeline(cfg, tmp_path, seed=0, n_train=2, n_test=1, duration_s=60.0)
    assert state["error"].startswith("train:")
    assert isinstance(state["exception"], TrainingDivergedError)
    assert state["exception"].exit_code == 4


@pytest.mark.slow
@pytest.mark.parametrize("seed", [7, 8, 9])
def test_default_pipeline_meets_the_study_targets(tmp_path, seed):
    state = run_pipeline(MavericConfig(), tmp_path, seed=seed, n_train=6, n_test=9)
    assert state.get("error") is None
    report = json.loads((tmp_path / "report.json").read_text())

    assert report["collisions"] == 0
    acc = report["mimic_accuracy"]
    assert acc["mean_velocity"] >= 0.90
    for metric in ("mean_headway_time", "distance_headway_merge_back",
                   "time_headway_merge_back", "lane_change_count"):
        assert acc[metric] >= 0.75, metric

    assert report["ordering"]["mean_velocity"] >= 0.8
    assert report["ordering"]["lane_change_count"] >= 0.7

    pearson = report["projection_vs_adb"]["pearson"]
    assert pearson["n"] >= 9
    assert pearson["r"] >= 0.8

    perp = report["perpendicular"]
    assert len(perp) == 9
    assert all(entry["s_hat_spread"] < 1e-9 for entry in perp)
    rs = [abs(entry[metric]["r"]) for entry in perp
          for metric in ("min_headway_distance", "left_lane_fraction") if entry[metric]]
    assert max(rs) >= 0.4
