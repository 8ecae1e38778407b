import math

import numpy as np
import pandas as pd
import pytest

from agents.persona_agent import PersonaDriver, attach_labels, generate_demonstrations, make_persona
from config import MavericConfig, Scenario
from errors import InvalidArgumentError
from sim import lead_features
from state import LANE_WIDTH, VEHICLE_LENGTH, ControllerMode, VehicleState, WorldState


@pytest.mark.parametrize(
    "adb,speed,follow",
    [(11.0, 22.0, 60.0), (55.0, 34.0, 20.0), (33.0, 28.0, 40.0)],
)
def test_adb_map_endpoints(adb, speed, follow):
    p = make_persona(adb)
    assert p.target_speed == pytest.approx(speed)
    assert p.desired_follow == pytest.approx(follow)


def test_aggressive_persona_passes_sooner_and_merges_tighter():
    cautious, aggressive = make_persona(11.0), make_persona(55.0)
    assert aggressive.pass_headway_time < cautious.pass_headway_time
    assert aggressive.merge_back_gap < cautious.merge_back_gap


@pytest.mark.parametrize("adb", [10.9, 55.1, math.nan])
def test_out_of_range_score_rejected(adb):
    with pytest.raises(InvalidArgumentError):
        make_persona(adb)


def test_jitter_is_seeded_and_keeps_ordering():
    for seed in range(10):
        low, high = make_persona(20.0, seed=seed), make_persona(40.0, seed=seed)
        assert low.target_speed < high.target_speed
        assert low.desired_follow > high.desired_follow
        assert high.desired_follow >= 5.0
    assert make_persona(30.0, seed=4) == make_persona(30.0, seed=4)
    assert make_persona(30.0, seed=4) != make_persona(30.0, seed=5)


def test_trace_length_matches_duration(tiny_traces):
    for trace in tiny_traces:
        assert len(trace.frame) == 600
        assert trace.duration_s == pytest.approx(60.0)


def test_labels_are_consistent(tiny_traces):
    for trace in tiny_traces:
        f = trace.frame
        assert np.array_equal(f["label_v"].to_numpy(), f["v"].to_numpy())
        assert set(np.unique(f["label_l"])) <= {0.0, 1.0}
        assert np.all(f.loc[f["lane_change_flag"] == 1, "label_l"] == 1.0)
        labelled = f["label_f"].notna()
        assert np.all(f.loc[labelled, "mode"] == ControllerMode.FOLLOW.value)
        assert np.array_equal(f.loc[labelled, "label_f"].to_numpy(), f.loc[labelled, "d_x"].to_numpy())


def test_label_smear_and_mask():
    cfg = MavericConfig()
    frame = pd.DataFrame({
        "lane_change_flag": [0, 1, 0, 0, 0, 0, 0, 0, 0, 0],
        "mode": ["VELOCITY"] + ["LANE_CHANGE"] * 9,
        "lead_present": [False] * 10,
        "v": [25.0] * 10,
        "lead_v": [np.nan] * 10,
        "d_x": [500.0] * 10,
    })
    out = attach_labels(frame, cfg)
    # initiation step plus the following 0.5 s
    assert out["label_l"].tolist() == [0, 1, 1, 1, 1, 1, 1, 0, 0, 0]
    assert out["l_mask"].tolist() == [1, 1, 1, 1, 1, 1, 1, 0, 0, 0]
    assert out["label_f"].isna().all()


def test_never_passing_persona_changes_no_lanes(tiny_cfg):
    persona = make_persona(55.0, persona_id="x").model_copy(update={"pass_headway_time": 0.0})
    trace = generate_demonstrations(persona, Scenario(duration_s=60.0, seed=8), cfg=tiny_cfg)
    assert trace.frame["lane_change_flag"].sum() == 0
    assert (trace.frame["lane"] == 0).all()


def test_demonstrations_are_deterministic(tiny_cfg):
    persona = make_persona(40.0, seed=2)
    scenario = Scenario(duration_s=60.0, seed=2)
    a = generate_demonstrations(persona, scenario, cfg=tiny_cfg)
    b = generate_demonstrations(persona, scenario, cfg=tiny_cfg)
    pd.testing.assert_frame_equal(a.frame, b.frame)
    assert a.sidecar() == b.sidecar()


def test_short_demonstrations_rejected(tiny_cfg):
    with pytest.raises(InvalidArgumentError):
        generate_demonstrations(make_persona(30.0), Scenario(duration_s=30.0), cfg=tiny_cfg)


def test_sidecar_carries_persona_and_config_hash(tiny_traces):
    meta = tiny_traces[0].sidecar()
    assert meta["persona_id"] == "p00"
    assert meta["persona"]["adb_score"] == 11.0
    assert meta["scenario"]["seed"] == 100
    assert len(meta["config_hash"]) == 16


@pytest.mark.slow
def test_full_length_traces_are_safe_and_ordered():
    cfg = MavericConfig()
    scenario = Scenario(seed=21)
    cautious = generate_demonstrations(make_persona(11.0, persona_id="c"), scenario, cfg=cfg)
    aggressive = generate_demonstrations(make_persona(55.0, persona_id="a"), scenario, cfg=cfg)
    for trace in (cautious, aggressive):
        assert len(trace.frame) == 6000
        assert trace.collisions == 0
        assert trace.offroad == 0
    assert aggressive.frame["v"].mean() > cautious.frame["v"].mean()
    assert aggressive.frame["lane_change_flag"].sum() >= cautious.frame["lane_change_flag"].sum()


# ─── lane-change triggers ────────────────────────────────────────────────
def _left_lane_world(*traffic: VehicleState) -> WorldState:
    return WorldState(
        time=0.0,
        ego=VehicleState(x=1000.0, y=LANE_WIDTH, v=34.0, lane=1),
        traffic=tuple(sorted(traffic, key=lambda veh: veh.x)),
        posted_speed=29.0,
        ego_target_speed=34.0,
    )


def _right_lane_vehicle(x: float, v: float, vid: int) -> VehicleState:
    return VehicleState(x=x, y=0.0, v=v, lane=0, vid=vid, kind="lead", v_set=v)


def test_merges_back_with_a_fresh_lead_far_ahead():
    # the lead just passed has dropped out of the scene, the next one spawned 250 m ahead
    driver = PersonaDriver(make_persona(55.0), MavericConfig())
    world = _left_lane_world(_right_lane_vehicle(1250.0, 28.0, 1))
    feats = lead_features(world)
    assert feats.d_right > 0 and feats.rear_gap is None
    assert driver.wants_lane_change(feats, world)


def test_stays_left_until_the_passed_lead_is_clear():
    persona = make_persona(55.0)
    driver = PersonaDriver(persona, MavericConfig())
    close = _left_lane_world(_right_lane_vehicle(1000.0 - VEHICLE_LENGTH - 0.5 * persona.merge_back_gap, 28.0, 1))
    assert not driver.wants_lane_change(lead_features(close), close)
    clear = _left_lane_world(_right_lane_vehicle(1000.0 - VEHICLE_LENGTH - 2.0 * persona.merge_back_gap, 28.0, 1))
    assert driver.wants_lane_change(lead_features(clear), clear)


def test_stays_left_while_still_overtaking_a_slow_vehicle():
    persona = make_persona(55.0)
    driver = PersonaDriver(persona, MavericConfig())
    # slow right-lane vehicle 10 m ahead would trigger another pass at once
    world = _left_lane_world(_right_lane_vehicle(1000.0 + VEHICLE_LENGTH + 10.0, 25.0, 1))
    assert not driver.wants_lane_change(lead_features(world), world)


def test_right_lane_pass_trigger_needs_a_slow_close_lead():
    persona = make_persona(33.0)
    driver = PersonaDriver(persona, MavericConfig())
    ego = VehicleState(x=0.0, y=0.0, v=persona.target_speed, lane=0)

    def world_with(gap: float, v: float) -> WorldState:
        return WorldState(0.0, ego, (_right_lane_vehicle(gap + VEHICLE_LENGTH, v, 1),), 29.0, persona.target_speed)

    slow = persona.target_speed - 5.0
    near = world_with(0.5 * persona.pass_headway_time * persona.target_speed, slow)
    far = world_with(2.0 * persona.pass_headway_time * persona.target_speed, slow)
    fast = world_with(0.5 * persona.pass_headway_time * persona.target_speed, persona.target_speed)
    assert driver.wants_lane_change(lead_features(near), near)
    assert not driver.wants_lane_change(lead_features(far), far)
    assert not driver.wants_lane_change(lead_features(fast), fast)


def test_every_lane_change_label_is_followed_by_a_lane_change(tiny_traces, tiny_cfg):
    horizon = int(round(15.0 / tiny_cfg.sim.dt))
    smear = int(round(tiny_cfg.learn.label_smear_s / tiny_cfg.sim.dt))
    for trace in tiny_traces:
        lane = trace.frame["lane"].to_numpy()
        labelled = np.flatnonzero(trace.frame["label_l"].to_numpy() == 1.0)
        for i in labelled[labelled + horizon < len(lane)]:
            span = lane[max(i - smear, 0): i + horizon + 1]
            assert span.min() != span.max(), f"{trace.persona.persona_id}: no lane change after step {i}"


@pytest.mark.slow
def test_speed_and_passing_grow_with_aggression():
    cfg = MavericConfig()
    velocity, changes = [], []
    for adb in (11.0, 22.0, 33.0, 44.0, 55.0):
        persona = make_persona(adb, persona_id=f"a{int(adb)}")
        traces = [generate_demonstrations(persona, Scenario(seed=seed), cfg=cfg) for seed in (31, 32, 33)]
        velocity.append(np.mean([t.frame["v"].mean() for t in traces]))
        changes.append(np.mean([t.frame["lane_change_flag"].sum() for t in traces]))
        for t in traces:
            assert (t.frame["lane"] == 1).mean() < 0.5
    assert np.all(np.diff(velocity) > 0), velocity
    assert np.all(np.diff(changes) >= 0), changes
