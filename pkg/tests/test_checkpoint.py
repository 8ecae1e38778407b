import json

import numpy as np
import pytest

from conftest import jitter
from errors import ParseError
from network import predict_follow, predict_style
from state import StyleEmbedding
from tools.checkpoint import (
    CHECKPOINT_VERSION,
    file_checksum,
    load_checkpoint,
    load_embedding,
    model_to_dict,
    save_checkpoint,
    save_embedding,
)


@pytest.fixture
def noisy_model(tiny_model):
    return jitter(tiny_model, np.random.default_rng(8), 0.1)


def test_save_load_save_is_byte_identical(tmp_path, noisy_model):
    first = save_checkpoint(noisy_model, tmp_path / "a.json", config={"seed": 3}, config_hash="abc")
    model, raw = load_checkpoint(first)
    second = save_checkpoint(model, tmp_path / "b.json", config=raw["config"], config_hash=raw["config_hash"])
    assert first.read_bytes() == second.read_bytes()
    assert file_checksum(first) == file_checksum(second)


def test_loaded_model_predicts_the_same(tmp_path, noisy_model):
    model, raw = load_checkpoint(save_checkpoint(noisy_model, tmp_path / "m.json"))
    assert raw["version"] == CHECKPOINT_VERSION
    assert model.persona_ids == noisy_model.persona_ids
    assert model.weights_checksum() == noisy_model.weights_checksum()
    rng = np.random.default_rng(9)
    for _ in range(5):
        w = rng.standard_normal(3)
        v_lv = rng.uniform(15, 35, model.window)
        assert predict_follow(model, w, v_lv) == predict_follow(noisy_model, w, v_lv)
        assert predict_style(model, w) == predict_style(noisy_model, w)


def test_wrong_version_rejected(tmp_path, tiny_model):
    payload = model_to_dict(tiny_model)
    payload["version"] = CHECKPOINT_VERSION + 1
    path = tmp_path / "future.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(ParseError):
        load_checkpoint(path)


@pytest.mark.parametrize("content", ["{not json", '{"version": 1}'])
def test_garbage_checkpoint_rejected(tmp_path, content):
    path = tmp_path / "bad.json"
    path.write_text(content)
    with pytest.raises(ParseError):
        load_checkpoint(path)


def test_missing_checkpoint_rejected(tmp_path):
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "absent.json")


def test_embedding_round_trip(tmp_path):
    emb = StyleEmbedding(
        w=np.array([0.1, -2.0, 3.5]), mu=np.array([0.0, 1.0, 2.0]),
        sigma=np.array([0.5, 0.25, 1.0]), adb_score=37.5,
    )
    path = save_embedding(emb, tmp_path / "emb" / "user.json", user_id="u01")
    back, raw = load_embedding(path)
    assert np.array_equal(back.w, emb.w)
    assert np.array_equal(back.sigma, emb.sigma)
    assert back.adb_score == 37.5
    assert raw["user_id"] == "u01"


def test_malformed_embedding_rejected(tmp_path):
    path = tmp_path / "e.json"
    path.write_text('{"mu": [0, 0, 0]}')
    with pytest.raises(ParseError):
        load_embedding(path)
