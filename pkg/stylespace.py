"""
stylespace.py
Moves through the embedding space of a trained model.

The style head is affine, so ∇_w ŝ is one constant vector. Shifting along it
changes ŝ by an exact amount; sampling in the plane orthogonal to it leaves ŝ
untouched while other behaviour changes.
"""

from __future__ import annotations

import numpy as np

from config import StylespaceConfig
from errors import DegenerateStyleHeadError, InsufficientSpreadError
from network import MavericModel, predict_style

_PARALLEL_TOL = 1e-6
_MIN_SPREAD = 1e-12


def style_gradient(model: MavericModel) -> np.ndarray:
    """Raw ∇_w ŝ in ADB points per unit of w."""
    grad = model.norm.adb_span * model.style_weights()
    if not np.linalg.norm(grad) > 0:
        raise DegenerateStyleHeadError("style head has zero gradient; aggression direction is undefined")
    return grad


def aggression_gradient(model: MavericModel) -> np.ndarray:
    grad = style_gradient(model)
    return grad / np.linalg.norm(grad)


def shift_style(model: MavericModel, w: np.ndarray, delta_adb: float,
                cfg: StylespaceConfig | None = None) -> np.ndarray:
    cfg = cfg or StylespaceConfig()
    w = np.asarray(w, dtype=float)
    grad = style_gradient(model)
    if delta_adb == 0:
        return w.copy()
    s = predict_style(model, w)
    target = min(max(s + delta_adb, cfg.adb_min), cfg.adb_max)
    return w + (target - s) * grad / float(grad @ grad)


def plane_basis(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (u1, u2) spanning the plane orthogonal to unit vector g."""
    for axis in np.eye(3):
        u1 = axis - (axis @ g) * g
        norm = np.linalg.norm(u1)
        if norm > _PARALLEL_TOL:
            u1 = u1 / norm
            return u1, np.cross(g, u1)
    raise DegenerateStyleHeadError("could not build a basis orthogonal to the aggression gradient")


def perpendicular_sample(
    model: MavericModel,
    w: np.ndarray,
    training_embeddings: np.ndarray,
    angle: float,
) -> np.ndarray:
    """Point on the one-standard-deviation ellipse around w, orthogonal to the gradient."""
    emb = np.atleast_2d(np.asarray(training_embeddings, dtype=float))
    if emb.shape[0] < 3:
        raise InsufficientSpreadError(f"need at least 3 training embeddings, got {emb.shape[0]}")
    g = aggression_gradient(model)
    u1, u2 = plane_basis(g)
    sigma1 = float(np.std(emb @ u1))
    sigma2 = float(np.std(emb @ u2))
    if sigma1 < _MIN_SPREAD or sigma2 < _MIN_SPREAD:
        raise InsufficientSpreadError("training embeddings have no spread in the orthogonal plane")
    return np.asarray(w, dtype=float) + sigma1 * np.cos(angle) * u1 + sigma2 * np.sin(angle) * u2


def project_on_gradient(model: MavericModel, w: np.ndarray) -> float:
    return float(np.asarray(w, dtype=float) @ aggression_gradient(model))


def sweep_angles(n: int) -> np.ndarray:
    return np.arange(n) * (2 * np.pi / n)
