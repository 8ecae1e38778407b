import numpy as np
import pytest
import torch

from config import StylespaceConfig
from errors import DegenerateStyleHeadError, InsufficientSpreadError
from network import predict_style
from stylespace import (
    aggression_gradient,
    perpendicular_sample,
    plane_basis,
    project_on_gradient,
    shift_style,
    style_gradient,
    sweep_angles,
)


def at_score(model, score, seed=0):
    """An embedding whose predicted ADB score is exactly `score`."""
    w = np.random.default_rng(seed).standard_normal(3)
    return shift_style(model, w, score - predict_style(model, w))


def test_gradient_is_unit_and_constant(tiny_model):
    g = aggression_gradient(tiny_model)
    assert np.linalg.norm(g) == pytest.approx(1.0, abs=1e-15)
    assert np.array_equal(g, aggression_gradient(tiny_model))


def test_gradient_matches_finite_differences(tiny_model):
    rng = np.random.default_rng(1)
    w = rng.standard_normal(3)
    h = 1e-6
    num = np.array([
        (predict_style(tiny_model, w + h * e) - predict_style(tiny_model, w - h * e)) / (2 * h)
        for e in np.eye(3)
    ])
    g = aggression_gradient(tiny_model)
    cos = num @ g / np.linalg.norm(num)
    assert np.arccos(min(cos, 1.0)) < 1e-6
    assert num == pytest.approx(style_gradient(tiny_model), rel=1e-6)


def test_zero_style_head_is_degenerate(tiny_model):
    with torch.no_grad():
        tiny_model.subnets["S"].layers[0].weight.zero_()
    with pytest.raises(DegenerateStyleHeadError):
        aggression_gradient(tiny_model)
    with pytest.raises(DegenerateStyleHeadError):
        shift_style(tiny_model, np.zeros(3), 5.0)


def test_unclamped_shift_is_exact(tiny_model):
    rng = np.random.default_rng(2)
    for _ in range(10):
        w = at_score(tiny_model, rng.uniform(20.0, 45.0), seed=int(rng.integers(1000)))
        delta = rng.uniform(-9.0, 9.0)
        shifted = shift_style(tiny_model, w, delta)
        assert abs(predict_style(tiny_model, shifted) - predict_style(tiny_model, w) - delta) < 1e-9


@pytest.mark.parametrize("start,delta,end", [(50.0, 15.0, 55.0), (20.0, -15.0, 11.0), (30.0, 15.0, 45.0)])
def test_shift_clamps_to_scale(tiny_model, start, delta, end):
    w = at_score(tiny_model, start)
    assert predict_style(tiny_model, shift_style(tiny_model, w, delta)) == pytest.approx(end, abs=1e-9)


def test_clamped_shift_is_idempotent(tiny_model):
    top = shift_style(tiny_model, at_score(tiny_model, 50.0), 15.0)
    again = shift_style(tiny_model, top, 15.0)
    assert predict_style(tiny_model, again) == pytest.approx(55.0, abs=1e-9)


def test_zero_shift_is_identity(tiny_model):
    w = np.array([0.3, -1.2, 0.8])
    assert np.array_equal(shift_style(tiny_model, w, 0.0), w)


def test_custom_scale_bounds(tiny_model):
    cfg = StylespaceConfig(adb_min=20.0, adb_max=40.0)
    w = at_score(tiny_model, 35.0)
    assert predict_style(tiny_model, shift_style(tiny_model, w, 15.0, cfg)) == pytest.approx(40.0, abs=1e-9)


def test_plane_basis_is_orthonormal():
    rng = np.random.default_rng(3)
    for g in [np.array([1.0, 0.0, 0.0]), *(v / np.linalg.norm(v) for v in rng.standard_normal((5, 3)))]:
        u1, u2 = plane_basis(g)
        m = np.vstack([g, u1, u2])
        assert m @ m.T == pytest.approx(np.eye(3), abs=1e-12)


def test_perpendicular_samples_keep_style(tiny_model):
    rng = np.random.default_rng(4)
    train_emb = rng.standard_normal((6, 3))
    w = rng.standard_normal(3)
    s = predict_style(tiny_model, w)
    for angle in sweep_angles(12):
        w_perp = perpendicular_sample(tiny_model, w, train_emb, angle)
        assert abs(predict_style(tiny_model, w_perp) - s) < 1e-9
        assert not np.allclose(w_perp, w)


def test_opposite_angles_are_symmetric(tiny_model):
    rng = np.random.default_rng(5)
    train_emb = rng.standard_normal((6, 3))
    w = rng.standard_normal(3)
    a = perpendicular_sample(tiny_model, w, train_emb, 0.0)
    b = perpendicular_sample(tiny_model, w, train_emb, np.pi)
    assert (a + b) / 2 == pytest.approx(w, abs=1e-12)
    u1, _ = plane_basis(aggression_gradient(tiny_model))
    assert np.cross(a - w, u1) == pytest.approx(np.zeros(3), abs=1e-12)


def test_ellipse_radii_are_projection_spreads(tiny_model):
    rng = np.random.default_rng(6)
    train_emb = rng.standard_normal((8, 3))
    u1, u2 = plane_basis(aggression_gradient(tiny_model))
    w = np.zeros(3)
    assert np.linalg.norm(perpendicular_sample(tiny_model, w, train_emb, 0.0)) == pytest.approx(np.std(train_emb @ u1))
    assert np.linalg.norm(perpendicular_sample(tiny_model, w, train_emb, np.pi / 2)) == pytest.approx(np.std(train_emb @ u2))


def test_perpendicular_needs_spread(tiny_model):
    with pytest.raises(InsufficientSpreadError):
        perpendicular_sample(tiny_model, np.zeros(3), np.ones((2, 3)), 0.0)
    with pytest.raises(InsufficientSpreadError):
        perpendicular_sample(tiny_model, np.zeros(3), np.ones((5, 3)), 0.0)
    g = aggression_gradient(tiny_model)
    collinear = np.outer(np.arange(5.0), g)
    with pytest.raises(InsufficientSpreadError):
        perpendicular_sample(tiny_model, np.zeros(3), collinear, 0.0)


def test_projection_on_gradient(tiny_model):
    g = aggression_gradient(tiny_model)
    u1, u2 = plane_basis(g)
    assert project_on_gradient(tiny_model, 2.5 * g) == pytest.approx(2.5)
    assert project_on_gradient(tiny_model, 2.5 * g + 3 * u1 - u2) == pytest.approx(2.5)


def test_sweep_angles_cover_the_circle():
    angles = sweep_angles(12)
    assert len(angles) == 12
    assert angles[0] == 0.0
    assert np.diff(angles) == pytest.approx(np.full(11, np.pi / 6))
