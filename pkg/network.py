"""
network.py – the style network
────────────────────────────────────────────────────────────────────────────
  • F  follow predictor      [w, v_lv]                         → f̂   (softplus)
  • C  lane-change predictor [w, v_ev, v_lv, d_x, lane, d_right] → l̂, z_l (2-way softmax)
  • V  velocity predictor    [w, v_lv, d_y, d_x]               → v̂, z_v (softplus)
  • S  style head            w                                 → ŝ   (single affine layer)
  • M  posterior network     [v_lv, z_l, z_v, f̂, l̂, v̂, ŝ]       → μ, log σ

Every subnet is a torch MLP held in float64; gradients come from autograd.
Inputs are scaled by the constants in `Normalization`, which travel with the
checkpoint.
"""
from __future__ import annotations

import copy
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
import xxhash
from torch import nn

from config import LearnConfig
from errors import InvalidArgumentError
from state import ControlTargets, FeatureWindow, StyleEmbedding

EMBED_DIM = 3
SUBNETS = ("F", "C", "V", "S", "M")
LOSS_TERMS = ("L1", "L2", "L3", "L4", "L5")
DTYPE = torch.float64


def as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == DTYPE else a.to(DTYPE)
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


# ─── subnets ─────────────────────────────────────────────────────────────
class MLP(nn.Module):
    """ReLU hidden layers and a linear output layer.

    Calling it returns (output, z) where z is the last hidden activation
    (the input itself when there is no hidden layer).
    """

    def __init__(self, sizes: list[int]):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.Linear(fan_in, fan_out, dtype=DTYPE) for fan_in, fan_out in zip(sizes[:-1], sizes[1:])
        )

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, zero_out_rows: Optional[slice] = None) -> "MLP":
        """He-normal weights drawn from `rng`, zero biases."""
        mlp = cls(sizes)
        with torch.no_grad():
            for layer in mlp.layers:
                fan_out, fan_in = layer.weight.shape
                layer.weight.copy_(as_tensor(rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in)))
                layer.bias.zero_()
            if zero_out_rows is not None:
                mlp.layers[-1].weight[zero_out_rows] = 0.0
        return mlp

    @classmethod
    def from_arrays(cls, layers: list[tuple[np.ndarray, np.ndarray]]) -> "MLP":
        if not layers:
            raise InvalidArgumentError("a subnet needs at least one layer")
        mlp = cls([layers[0][0].shape[1], *(weight.shape[0] for weight, _ in layers)])
        with torch.no_grad():
            for layer, (weight, bias) in zip(mlp.layers, layers):
                layer.weight.copy_(as_tensor(weight))
                layer.bias.copy_(as_tensor(bias))
        return mlp

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_features

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = x
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        return self.layers[-1](h), h


# ─── model ───────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Normalization:
    speed_scale: float = 40.0
    gap_scale: float = 500.0
    lateral_scale: float = 3.7
    adb_min: float = 11.0
    adb_max: float = 55.0

    @property
    def adb_span(self) -> float:
        return self.adb_max - self.adb_min

    @classmethod
    def from_config(cls, learn: LearnConfig) -> "Normalization":
        return cls(learn.speed_scale, learn.gap_scale, learn.lateral_scale)


class Windows(NamedTuple):
    """Batched feature windows, each channel shaped (N, W)."""
    v_ev: np.ndarray
    v_lv: np.ndarray
    d_x: np.ndarray
    d_y: np.ndarray
    lane: np.ndarray
    d_right: np.ndarray

    @classmethod
    def from_feature_window(cls, fw: FeatureWindow) -> "Windows":
        return cls(*(np.atleast_2d(np.asarray(a, dtype=float)) for a in
                     (fw.v_ev, fw.v_lv, fw.d_x, fw.d_y, fw.lane, fw.d_right)))

    def take(self, idx) -> "Windows":
        return Windows(*(a[idx] for a in self))


@dataclass
class Forward:
    w: torch.Tensor
    a_f: torch.Tensor
    f_n: torch.Tensor
    a_c: torch.Tensor
    l_hat: torch.Tensor
    z_l: torch.Tensor
    a_v: torch.Tensor
    v_n: torch.Tensor
    z_v: torch.Tensor
    s_n: torch.Tensor
    mu: Optional[torch.Tensor] = None
    log_sigma: Optional[torch.Tensor] = None


class MavericModel(nn.Module):
    """The five subnets plus one learned embedding row per training persona."""

    def __init__(
        self,
        subnets: dict[str, MLP] | nn.ModuleDict,
        embeddings,
        persona_ids: list[str],
        adb_scores: Iterable[float],
        window: int,
        norm: Optional[Normalization] = None,
        pos_weight: float = 1.0,
    ):
        super().__init__()
        # a ModuleDict built from another one shares its subnets
        self.subnets = nn.ModuleDict(subnets)
        self.E = nn.Parameter(as_tensor(embeddings).detach().clone().reshape(-1, EMBED_DIM))
        self.persona_ids = list(persona_ids)
        self.adb_scores = np.asarray(list(adb_scores), dtype=float)
        self.window = window
        self.norm = norm or Normalization()
        self.pos_weight = pos_weight

    @classmethod
    def init(
        cls,
        learn: LearnConfig,
        window: int,
        persona_ids: list[str],
        adb_scores: Iterable[float],
        rng: np.random.Generator,
    ) -> "MavericModel":
        H = [learn.hidden_width] * learn.hidden_layers
        d, W = EMBED_DIM, window
        subnets = {
            "F": MLP.init([d + W, *H, 1], rng),
            "C": MLP.init([d + 5 * W, *H, 2], rng, zero_out_rows=slice(None)),
            "V": MLP.init([d + 3 * W, *H, 1], rng),
            "S": MLP.init([d, 1], rng),
            "M": MLP.init([W + 2 * learn.hidden_width + 4, *H, 2 * d], rng, zero_out_rows=slice(d, None)),
        }
        # embeddings start from the N(0, I) prior
        embeddings = rng.standard_normal((len(persona_ids), d))
        return cls(subnets, embeddings, persona_ids, adb_scores, window, Normalization.from_config(learn))

    @property
    def embeddings(self) -> np.ndarray:
        """Copy of the embedding table, (P, 3)."""
        return self.E.detach().numpy().copy()

    def copy(self) -> "MavericModel":
        return copy.deepcopy(self)

    def with_embeddings(self, embeddings, persona_ids: list[str]) -> "MavericModel":
        """Share the subnet weights, swap the embedding table."""
        return MavericModel(
            self.subnets, embeddings, persona_ids, np.full(len(persona_ids), np.nan),
            self.window, self.norm, self.pos_weight,
        )

    def embedding_of(self, persona_id: str) -> np.ndarray:
        try:
            return self.embeddings[self.persona_ids.index(persona_id)]
        except ValueError:
            raise InvalidArgumentError(f"unknown persona {persona_id!r}") from None

    def weights_checksum(self) -> str:
        """Digest of the subnet weights only (the embedding table is excluded)."""
        h = xxhash.xxh64()
        for key, param in self.subnets.named_parameters():
            h.update(key.encode())
            h.update(param.detach().numpy().tobytes())
        return h.hexdigest()

    def style_weights(self) -> np.ndarray:
        """The style head's weight row, ŝ per unit of w before ADB scaling."""
        return self.subnets["S"].layers[0].weight.detach().numpy()[0].copy()

    def forward(self, w: torch.Tensor, win: Windows, with_posterior: bool = True) -> Forward:
        _check_window(self, win)
        n, nets = self.norm, self.subnets
        v_ev, v_lv, d_x, d_y, lane, d_right = (as_tensor(ch) for ch in win)
        vlv = v_lv / n.speed_scale
        dx = d_x / n.gap_scale

        a_f, _ = nets["F"](torch.cat([w, vlv], dim=1))
        a_c, z_l = nets["C"](torch.cat([w, v_ev / n.speed_scale, vlv, dx, lane, d_right / n.gap_scale], dim=1))
        a_v, z_v = nets["V"](torch.cat([w, vlv, d_y / n.lateral_scale, dx], dim=1))
        s_n, _ = nets["S"](w)
        out = Forward(
            w=w,
            a_f=a_f, f_n=F.softplus(a_f),
            a_c=a_c, l_hat=torch.sigmoid(a_c[:, 1:2] - a_c[:, 0:1]), z_l=z_l,
            a_v=a_v, v_n=F.softplus(a_v), z_v=z_v,
            s_n=s_n,
        )
        if with_posterior:
            a_m, _ = nets["M"](torch.cat([vlv, z_l, z_v, out.f_n, out.l_hat, out.v_n, s_n], dim=1))
            out.mu, out.log_sigma = a_m[:, :EMBED_DIM], a_m[:, EMBED_DIM:]
        return out


@contextmanager
def frozen_subnets(model: MavericModel) -> Iterator[MavericModel]:
    """Stop gradients into the subnet weights for the duration of the block."""
    flags = [p.requires_grad for p in model.subnets.parameters()]
    model.subnets.requires_grad_(False)
    try:
        yield model
    finally:
        for p, flag in zip(model.subnets.parameters(), flags):
            p.requires_grad_(flag)


# ─── forward pass ────────────────────────────────────────────────────────
def _check_window(model: MavericModel, win: Windows) -> None:
    for name, arr in zip(Windows._fields, win):
        if arr.ndim != 2 or arr.shape[1] != model.window:
            raise InvalidArgumentError(f"{name} window must have length {model.window}, got shape {arr.shape}")


def _check_w(w) -> torch.Tensor:
    w = torch.atleast_2d(as_tensor(w))
    if w.ndim != 2 or w.shape[1] != EMBED_DIM:
        raise InvalidArgumentError(f"embedding must have {EMBED_DIM} components, got shape {tuple(w.shape)}")
    return w


def forward(model: MavericModel, w, win: Windows, with_posterior: bool = True) -> Forward:
    return model(_check_w(w), win, with_posterior)


# ─── public predictors ───────────────────────────────────────────────────
def _windows(model: MavericModel, **channels) -> Windows:
    W = model.window
    filled = {}
    for name in Windows._fields:
        arr = channels.get(name)
        if arr is None:
            default = -model.norm.gap_scale if name == "d_right" else 0.0
            arr = np.full(W, default)
        filled[name] = np.atleast_2d(np.asarray(arr, dtype=float))
    rows = {a.shape[0] for a in filled.values()}
    if len(rows) != 1:
        raise InvalidArgumentError("window channels disagree on batch size")
    return Windows(**filled)


def _as_w(w):
    return w.w if isinstance(w, StyleEmbedding) else w


def _scalar(t: torch.Tensor) -> float:
    return float(t[0, 0])


@torch.no_grad()
def predict_follow(model: MavericModel, w, v_lv_window) -> float:
    out = forward(model, _as_w(w), _windows(model, v_lv=v_lv_window), with_posterior=False)
    return _scalar(out.f_n) * model.norm.gap_scale


@torch.no_grad()
def predict_lane(model: MavericModel, w, v_ev_window, v_lv_window, d_x_window,
                 lane_window=None, d_right_window=None) -> tuple[float, np.ndarray]:
    win = _windows(model, v_ev=v_ev_window, v_lv=v_lv_window, d_x=d_x_window,
                   lane=lane_window, d_right=d_right_window)
    out = forward(model, _as_w(w), win, with_posterior=False)
    return _scalar(out.l_hat), out.z_l[0].numpy().copy()


@torch.no_grad()
def predict_velocity(model: MavericModel, w, v_lv_window, d_y_window, d_x_window) -> tuple[float, np.ndarray]:
    win = _windows(model, v_lv=v_lv_window, d_y=d_y_window, d_x=d_x_window)
    out = forward(model, _as_w(w), win, with_posterior=False)
    return _scalar(out.v_n) * model.norm.speed_scale, out.z_v[0].numpy().copy()


@torch.no_grad()
def style_score(model: MavericModel, w) -> np.ndarray:
    """ŝ in ADB points for a batch of embeddings."""
    s_n, _ = model.subnets["S"](_check_w(w))
    return model.norm.adb_min + model.norm.adb_span * s_n[:, 0].numpy()


def predict_style(model: MavericModel, w) -> float:
    return float(style_score(model, _as_w(w))[0])


@torch.no_grad()
def predict_targets(model: MavericModel, w, window: FeatureWindow) -> ControlTargets:
    out = forward(model, _as_w(w), Windows.from_feature_window(window), with_posterior=False)
    n = model.norm
    return ControlTargets(
        f_hat=_scalar(out.f_n) * n.gap_scale,
        l_hat=_scalar(out.l_hat),
        v_hat=_scalar(out.v_n) * n.speed_scale,
        s_hat=n.adb_min + n.adb_span * _scalar(out.s_n),
    )


@torch.no_grad()
def infer_posterior(model: MavericModel, v_lv, z_l, z_v, targets: ControlTargets) -> tuple[np.ndarray, np.ndarray]:
    n = model.norm
    heads = [
        targets.f_hat / n.gap_scale,
        targets.l_hat,
        targets.v_hat / n.speed_scale,
        (targets.s_hat - n.adb_min) / n.adb_span,
    ]
    x = np.hstack([np.atleast_2d(np.asarray(v_lv, dtype=float)) / n.speed_scale,
                   np.atleast_2d(z_l), np.atleast_2d(z_v), [heads]])
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("posterior inputs must be finite")
    if x.shape[1] != model.subnets["M"].in_dim:
        raise InvalidArgumentError(f"posterior input has {x.shape[1]} features, expected {model.subnets['M'].in_dim}")
    a_m, _ = model.subnets["M"](as_tensor(x))
    a_m = a_m[0].numpy()
    return a_m[:EMBED_DIM].copy(), np.exp(a_m[EMBED_DIM:])


# ─── loss ────────────────────────────────────────────────────────────────
@dataclass
class Batch:
    windows: Windows
    pid: np.ndarray               # (N,) index into the embedding table
    label_f: np.ndarray           # (N,) metres, NaN where unlabelled
    label_l: np.ndarray           # (N,) {0, 1}
    l_mask: np.ndarray            # (N,) {0, 1}
    label_v: np.ndarray           # (N,) m/s
    adb: np.ndarray               # (N,) ADB points
    eps: np.ndarray               # (N, 3) reparameterisation noise
    pos_weight: float = 1.0

    def __len__(self) -> int:
        return len(self.pid)


@dataclass
class LossResult:
    total: torch.Tensor
    parts: dict[str, float]

    @property
    def value(self) -> float:
        return float(self.total.detach())


def total_loss(
    batch: Batch,
    model: MavericModel,
    learn: Optional[LearnConfig] = None,
    terms: Iterable[str] = LOSS_TERMS,
) -> LossResult:
    """L = L1 + c2·L2 + L3 + c4·L4 + L5 over the requested terms.

    The entropy of the fixed N(0, I) prior is constant and left out. Terms not
    requested contribute zero and build no graph.
    """
    learn = learn or LearnConfig()
    terms = set(terms)
    n = model.norm
    w = model.E[torch.as_tensor(batch.pid, dtype=torch.long)]
    out = model(w, batch.windows, with_posterior="L5" in terms)
    losses = dict.fromkeys(LOSS_TERMS, torch.zeros((), dtype=DTYPE))

    if "L1" in terms:
        label_f = as_tensor(batch.label_f)
        mask = torch.isfinite(label_f).to(DTYPE)
        r = (out.f_n[:, 0] - torch.nan_to_num(label_f / n.gap_scale)) * mask
        losses["L1"] = (r**2).sum() / max(float(mask.sum()), 1.0)

    if "L2" in terms:
        m = as_tensor(batch.l_mask)
        ce = F.binary_cross_entropy_with_logits(
            out.a_c[:, 1] - out.a_c[:, 0], as_tensor(batch.label_l),
            weight=m, pos_weight=as_tensor(batch.pos_weight), reduction="sum",
        )
        losses["L2"] = ce / max(float(m.sum()), 1.0)

    if "L3" in terms:
        losses["L3"] = ((out.v_n[:, 0] - as_tensor(batch.label_v) / n.speed_scale) ** 2).mean()

    if "L4" in terms:
        s_hat = n.adb_min + n.adb_span * out.s_n[:, 0]
        losses["L4"] = ((s_hat - as_tensor(batch.adb)) ** 2).mean()

    if "L5" in terms:
        w_hat = out.mu + torch.exp(out.log_sigma) * as_tensor(batch.eps)
        losses["L5"] = ((w_hat - w) ** 2).mean()

    total = losses["L1"] + learn.c2 * losses["L2"] + losses["L3"] + learn.c4 * losses["L4"] + losses["L5"]
    return LossResult(total=total, parts={k: float(v.detach()) for k, v in losses.items()})
