import json

import numpy as np
import pandas as pd
import pytest

from cli_runner import build_parser, main
from tools.checkpoint import file_checksum, load_embedding

TINY = [
    "--set", "sim.window_s=0.5",
    "--set", "learn.hidden_width=6",
    "--set", "learn.epochs=2",
    "--set", "learn.patience=2",
    "--set", "learn.batch_size=128",
    "--set", "learn.fit_epochs=2",
]


def test_no_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_unknown_condition_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["rollout", "--ckpt", "c", "--embedding", "e", "--out", "o", "--condition", "reckless"])
    assert exc.value.code == 2


def test_parser_collects_overrides():
    args = build_parser().parse_args(["train", "--data", "d", "--out", "o", *TINY, "--seed", "4"])
    assert args.overrides[0] == "sim.window_s=0.5"
    assert len(args.overrides) == 6
    assert args.seed == 4


def test_missing_config_exits_3(tmp_path):
    code = main(["gen-data", "--personas", "2", "--out", str(tmp_path), "--config", str(tmp_path / "nope.json")])
    assert code == 3


def test_bad_override_exits_3(tmp_path):
    assert main(["gen-data", "--personas", "2", "--out", str(tmp_path), "--set", "learn.embedding_dim=4"]) == 3


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = main(["gen-data", "--personas", "2", "--out", str(out), "--duration-s", "60", "--seed", "5", *TINY])
    assert code == 0
    return out


def test_gen_data_writes_traces_and_sidecars(data_dir):
    assert sorted(p.name for p in data_dir.iterdir()) == [
        "p00.jsonl", "p00.meta.json", "p01.jsonl", "p01.meta.json",
    ]
    meta = json.loads((data_dir / "p01.meta.json").read_text())
    assert meta["adb_score"] == 55.0
    assert len(meta["config_hash"]) == 16
    assert len((data_dir / "p00.jsonl").read_text().splitlines()) == 600


def test_training_twice_gives_identical_checkpoints(tmp_path, data_dir):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["train", "--data", str(data_dir), "--out", str(a), "--seed", "5", *TINY]) == 0
    assert main(["train", "--data", str(data_dir), "--out", str(b), "--seed", "5", *TINY]) == 0
    assert file_checksum(a) == file_checksum(b)
    log = pd.read_csv(tmp_path / "a.log.csv")
    assert {"epoch", "L1", "val_loss"} <= set(log.columns)


def test_divergence_exits_4_and_keeps_a_checkpoint(tmp_path, data_dir):
    out = tmp_path / "ckpt.json"
    with np.errstate(all="ignore"):
        code = main(["train", "--data", str(data_dir), "--out", str(out), *TINY, "--set", "learn.lr=1e300"])
    assert code == 4
    assert (tmp_path / "ckpt.diverged.json").exists()
    assert not out.exists()


def test_fit_shift_and_perp_chain(tmp_path, data_dir):
    ckpt = tmp_path / "ckpt.json"
    assert main(["train", "--data", str(data_dir), "--out", str(ckpt), *TINY]) == 0

    user = tmp_path / "user.json"
    assert main(["fit-user", "--ckpt", str(ckpt), "--trace", str(data_dir / "p00.jsonl"),
                 "--out", str(user), *TINY]) == 0
    emb, meta = load_embedding(user)
    assert meta["persona_id"] == "p00"

    shifted = tmp_path / "shifted.json"
    assert main(["shift", "--ckpt", str(ckpt), "--embedding", str(user), "--delta-adb", "5",
                 "--out", str(shifted), *TINY]) == 0
    moved, moved_meta = load_embedding(shifted)
    assert moved_meta["delta_adb"] == 5.0
    assert moved.adb_score == pytest.approx(np.clip(emb.adb_score + 5.0, 11.0, 55.0), abs=1e-9)

    perp = tmp_path / "perp.json"
    assert main(["perp", "--ckpt", str(ckpt), "--embedding", str(user), "--angle-deg", "90",
                 "--out", str(perp), *TINY]) == 3       # only two training embeddings: no spread estimate
    assert not perp.exists()

    roll = tmp_path / "rollouts" / "p00.mimic.jsonl"
    assert main(["rollout", "--ckpt", str(ckpt), "--embedding", str(user), "--condition", "mimic",
                 "--duration-s", "20", "--out", str(roll), *TINY]) == 0
    side = json.loads((tmp_path / "rollouts" / "p00.mimic.meta.json").read_text())
    assert side["condition"] == "mimic"
    assert side["persona_id"] == "p00"

    eval_csv = tmp_path / "eval.csv"
    assert main(["eval", "--data", str(data_dir), "--rollouts", str(tmp_path / "rollouts"),
                 "--out", str(eval_csv), *TINY]) == 0
    df = pd.read_csv(eval_csv)
    assert df["condition"].tolist() == ["mimic"]
    assert "acc_mean_velocity" in df.columns


def test_pipeline_divergence_exits_4(tmp_path):
    code = main(["pipeline", "--out", str(tmp_path), "--personas", "2", "--test-personas", "1",
                 "--duration-s", "60", *TINY, "--set", "learn.lr=1e300"])
    assert code == 4
    assert (tmp_path / "ckpt.diverged.json").exists()
