import numpy as np
import pytest
import torch

from agents.persona_agent import generate_demonstrations, make_persona
from config import MavericConfig, Scenario
from network import Batch, MavericModel, Windows

TINY_LEARN = {
    "hidden_width": 6,
    "hidden_layers": 2,
    "epochs": 2,
    "patience": 2,
    "batch_size": 128,
    "fit_epochs": 2,
}


def make_tiny_cfg(**learn) -> MavericConfig:
    """Five-step windows and a narrow network: quick to train, same code paths."""
    return MavericConfig.model_validate({
        "seed": 3,
        "sim": {"window_s": 0.5, "duration_s": 60.0},
        "learn": {**TINY_LEARN, **learn},
    })


def random_windows(rng: np.random.Generator, n: int, W: int) -> Windows:
    return Windows(
        v_ev=rng.uniform(15.0, 35.0, (n, W)),
        v_lv=rng.uniform(15.0, 35.0, (n, W)),
        d_x=rng.uniform(5.0, 500.0, (n, W)),
        d_y=rng.choice([-3.7, 0.0, 3.7], (n, W)),
        lane=rng.integers(0, 2, (n, W)).astype(float),
        d_right=rng.uniform(-500.0, 500.0, (n, W)),
    )


def jitter(model: MavericModel, rng: np.random.Generator, scale: float) -> MavericModel:
    """Add N(0, scale²) noise to every parameter in place, embeddings included."""
    with torch.no_grad():
        for param in model.parameters():
            param += torch.as_tensor(scale * rng.standard_normal(tuple(param.shape)))
    return model


def random_batch(model: MavericModel, rng: np.random.Generator, n: int = 8, pos_weight: float = 1.0) -> Batch:
    label_f = rng.uniform(10.0, 80.0, n)
    label_f[::3] = np.nan
    return Batch(
        windows=random_windows(rng, n, model.window),
        pid=rng.integers(0, len(model.persona_ids), n),
        label_f=label_f,
        label_l=rng.integers(0, 2, n).astype(float),
        l_mask=(rng.uniform(size=n) > 0.2).astype(float),
        label_v=rng.uniform(18.0, 34.0, n),
        adb=rng.uniform(11.0, 55.0, n),
        eps=rng.standard_normal((n, 3)),
        pos_weight=pos_weight,
    )


@pytest.fixture
def cfg() -> MavericConfig:
    return MavericConfig()


@pytest.fixture
def tiny_cfg() -> MavericConfig:
    return make_tiny_cfg()


@pytest.fixture
def tiny_model() -> MavericModel:
    cfg = make_tiny_cfg()
    rng = np.random.default_rng(5)
    return MavericModel.init(cfg.learn, cfg.sim.window, ["a", "b", "c", "d"], [11.0, 25.0, 40.0, 55.0], rng)


@pytest.fixture(scope="session")
def tiny_traces():
    """Three 60 s demonstrations (cautious, middle, aggressive) under the tiny config."""
    cfg = make_tiny_cfg()
    traces = []
    for i, adb in enumerate((11.0, 33.0, 55.0)):
        pid = f"p{i:02d}"
        persona = make_persona(adb, seed=100 + i, cfg=cfg.personas, persona_id=pid)
        scenario = Scenario(duration_s=60.0, seed=100 + i, persona_id=pid)
        traces.append(generate_demonstrations(persona, scenario, cfg=cfg))
    return traces
