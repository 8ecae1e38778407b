"""
training.py
Joint training of the five subnets and the per-persona embedding table, and
embedding-only fitting for a new user against a frozen network.

  - build_dataset  – sliding windows over demonstration traces with a
                     per-trace temporal validation split
  - train          – minibatch Adam, early stopping on the validation
                     follow and velocity losses
  - fit_new_user   – optimise a fresh w on L1 + L2 + L3 only
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np
import pandas as pd
import torch
from numpy.lib.stride_tricks import sliding_window_view

from agents.persona_agent import MIN_DEMO_S, DemonstrationTrace
from config import MavericConfig
from errors import FitFailedError, InvalidArgumentError, InvalidStateError, TrainingDivergedError
from network import (
    LOSS_TERMS,
    Batch,
    LossResult,
    MavericModel,
    Windows,
    forward,
    frozen_subnets,
    predict_style,
    total_loss,
)
from state import StyleEmbedding
from tools.log import get_logger

log = get_logger(__name__)

_TRAIN_STREAM = 23
_FIT_STREAM = 29
FIT_TERMS = ("L1", "L2", "L3")


# ─── dataset ─────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Dataset:
    persona_ids: tuple[str, ...]
    persona_adb: np.ndarray       # (P,)
    windows: Windows              # (N, W) per channel
    pid: np.ndarray               # (N,)
    label_f: np.ndarray
    label_l: np.ndarray
    l_mask: np.ndarray
    label_v: np.ndarray
    is_val: np.ndarray            # (N,) bool

    def __len__(self) -> int:
        return len(self.pid)

    @property
    def window(self) -> int:
        return self.windows.v_ev.shape[1]

    @property
    def train_index(self) -> np.ndarray:
        return np.flatnonzero(~self.is_val)

    @property
    def val_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_val)

    def pos_weight(self, cap: float, idx: Optional[np.ndarray] = None) -> float:
        idx = self.train_index if idx is None else idx
        m = self.l_mask[idx]
        pos = float((m * self.label_l[idx]).sum())
        neg = float((m * (1.0 - self.label_l[idx])).sum())
        return 1.0 if pos == 0 else min(neg / pos, cap)

    def batch(self, idx: np.ndarray, eps: np.ndarray, pos_weight: float = 1.0) -> Batch:
        return Batch(
            windows=self.windows.take(idx),
            pid=self.pid[idx],
            label_f=self.label_f[idx],
            label_l=self.label_l[idx],
            l_mask=self.l_mask[idx],
            label_v=self.label_v[idx],
            adb=self.persona_adb[self.pid[idx]],
            eps=eps,
            pos_weight=pos_weight,
        )


def _padded_windows(values: np.ndarray, W: int) -> np.ndarray:
    # leading edge is padded with the first sample, as the rollout buffer is
    padded = np.concatenate([np.full(W - 1, values[0]), values])
    return sliding_window_view(padded, W).copy()


def trace_windows(frame: pd.DataFrame, W: int, posted_speed: float) -> Windows:
    v_lv = frame["lead_v"].to_numpy(dtype=float)
    v_lv = np.where(np.isfinite(v_lv), v_lv, posted_speed)
    channels = {
        "v_ev": frame["v"].to_numpy(dtype=float),
        "v_lv": v_lv,
        "d_x": frame["d_x"].to_numpy(dtype=float),
        "d_y": frame["d_y"].to_numpy(dtype=float),
        "lane": frame["lane"].to_numpy(dtype=float),
        "d_right": frame["d_right"].to_numpy(dtype=float),
    }
    return Windows(**{k: _padded_windows(v, W) for k, v in channels.items()})


def build_dataset(traces: Sequence[DemonstrationTrace], W: int, val_fraction: float = 0.15) -> Dataset:
    if not traces:
        raise InvalidArgumentError("no demonstration traces given")
    ids: list[str] = []
    adb: list[float] = []
    parts: dict[str, list[np.ndarray]] = {k: [] for k in ("pid", "label_f", "label_l", "l_mask", "label_v", "is_val")}
    wins: list[Windows] = []

    for trace in traces:
        pid = trace.persona.persona_id
        if pid not in ids:
            ids.append(pid)
            adb.append(trace.persona.adb_score)
        frame = trace.frame
        T = len(frame)
        n_val = int(math.ceil(val_fraction * T)) if val_fraction > 0 else 0
        wins.append(trace_windows(frame, W, trace.scenario.posted_speed_mps))
        parts["pid"].append(np.full(T, ids.index(pid)))
        parts["label_f"].append(frame["label_f"].to_numpy(dtype=float))
        parts["label_l"].append(frame["label_l"].to_numpy(dtype=float))
        parts["l_mask"].append(frame["l_mask"].to_numpy(dtype=float))
        parts["label_v"].append(frame["label_v"].to_numpy(dtype=float))
        parts["is_val"].append(np.arange(T) >= T - n_val)

    return Dataset(
        persona_ids=tuple(ids),
        persona_adb=np.asarray(adb, dtype=float),
        windows=Windows(*(np.concatenate(ch) for ch in zip(*wins))),
        **{k: np.concatenate(v) for k, v in parts.items()},
    )


# ─── training ────────────────────────────────────────────────────────────
class EpochSink(Protocol):
    def log_epoch(self, row: dict) -> None: ...


@dataclass
class TrainResult:
    model: MavericModel
    history: pd.DataFrame
    best_epoch: int


def init_model(dataset: Dataset, cfg: MavericConfig, rng: np.random.Generator) -> MavericModel:
    model = MavericModel.init(cfg.learn, dataset.window, list(dataset.persona_ids), dataset.persona_adb, rng)
    model.pos_weight = dataset.pos_weight(cfg.learn.pos_weight_cap)
    return model


def training_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, _TRAIN_STREAM])


def make_optimizer(params: Iterable[torch.Tensor], lr: float, cfg: MavericConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(cfg.learn.momentum, cfg.learn.beta2), eps=1e-8)


def _finite(res: LossResult, params: Iterable[torch.Tensor]) -> bool:
    if not math.isfinite(res.value):
        return False
    return all(bool(torch.isfinite(p.grad).all()) for p in params if p.grad is not None)


def train(
    dataset: Dataset,
    cfg: MavericConfig,
    seed: Optional[int] = None,
    sink: Optional[EpochSink] = None,
) -> TrainResult:
    """Minibatch Adam over all five terms.

    The checkpoint kept is the one with the lowest validation loss over
    `learn.early_stop_terms` (follow and velocity regression by default).
    """
    if len(dataset.persona_ids) < 2:
        raise InvalidArgumentError(f"training needs at least 2 personas, got {len(dataset.persona_ids)}")
    learn = cfg.learn
    seed = cfg.seed if seed is None else seed
    rng = training_rng(seed)
    model = init_model(dataset, cfg, rng)

    train_idx, val_idx = dataset.train_index, dataset.val_index
    if len(val_idx) == 0:
        val_idx = train_idx
    val_batch = dataset.batch(val_idx, rng.standard_normal((len(val_idx), 3)), model.pos_weight)

    opt = make_optimizer(model.parameters(), learn.lr, cfg)
    best, best_val, best_epoch, stale = model.copy(), math.inf, 0, 0
    rows = []

    for epoch in range(1, learn.epochs + 1):
        model.train()
        order = rng.permutation(train_idx)
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        train_total = 0.0
        for start in range(0, len(order), learn.batch_size):
            idx = order[start:start + learn.batch_size]
            batch = dataset.batch(idx, rng.standard_normal((len(idx), 3)), model.pos_weight)
            opt.zero_grad()
            res = total_loss(batch, model, learn)
            res.total.backward()
            if not _finite(res, model.parameters()):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}", checkpoint=best
                )
            opt.step()
            for k in LOSS_TERMS:
                sums[k] += res.parts[k] * len(idx)
            train_total += res.value * len(idx)
            log.debug("epoch %d batch %d loss %.6f", epoch, start // learn.batch_size, res.value)

        model.eval()
        with torch.no_grad():
            val = total_loss(val_batch, model, learn)
        if not math.isfinite(val.value):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}", checkpoint=best)

        n = max(len(train_idx), 1)
        row = {"epoch": epoch, **{k: sums[k] / n for k in LOSS_TERMS}, "train_loss": train_total / n}
        row.update({f"val_{k}": val.parts[k] for k in LOSS_TERMS})
        row["val_loss"] = val.value
        row["val_stop"] = sum(val.parts[k] for k in learn.early_stop_terms)
        rows.append(row)
        if sink is not None:
            sink.log_epoch(row)
        log.info(
            "epoch %3d  L1 %.5f  L2 %.4f  L3 %.5f  L4 %.2f  L5 %.4f  val %.5f  stop %.5f",
            epoch, row["L1"], row["L2"], row["L3"], row["L4"], row["L5"], val.value, row["val_stop"],
        )

        if row["val_stop"] < best_val:
            best, best_val, best_epoch, stale = model.copy(), row["val_stop"], epoch, 0
        else:
            stale += 1
            if stale >= learn.patience:
                log.info("✅ early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    return TrainResult(model=best, history=pd.DataFrame(rows), best_epoch=best_epoch)


# ─── new-user fitting ────────────────────────────────────────────────────
def fit_new_user(
    frozen: MavericModel,
    trace: DemonstrationTrace,
    cfg: MavericConfig,
    seed: Optional[int] = None,
) -> StyleEmbedding:
    """Learn only w for an unseen driver; every subnet weight stays bit-identical."""
    if trace.duration_s < MIN_DEMO_S - 1e-9:
        raise InvalidArgumentError(f"fitting needs at least {MIN_DEMO_S:g} s of driving, got {trace.duration_s:.1f}")
    learn = cfg.learn
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, _FIT_STREAM])

    ds = build_dataset([trace], frozen.window, val_fraction=0.0)
    user = frozen.with_embeddings(rng.standard_normal((1, 3)), [trace.persona.persona_id])
    opt = make_optimizer([user.E], learn.fit_lr, cfg)
    before = frozen.weights_checksum()

    N = len(ds)
    zeros = np.zeros((N, 3))
    with frozen_subnets(frozen):
        for epoch in range(learn.fit_epochs):
            order = rng.permutation(N)
            for start in range(0, N, learn.batch_size):
                idx = order[start:start + learn.batch_size]
                opt.zero_grad()
                res = total_loss(ds.batch(idx, zeros[: len(idx)], frozen.pos_weight), user, learn, terms=FIT_TERMS)
                res.total.backward()
                if not _finite(res, [user.E]):
                    raise FitFailedError(f"non-finite fitting loss at epoch {epoch + 1}")
                opt.step()

    if frozen.weights_checksum() != before:
        raise InvalidStateError("network weights changed while fitting a user embedding")

    w = user.embeddings
    with torch.no_grad():
        fwd = forward(user, np.repeat(w, N, axis=0), ds.windows)
        mu = fwd.mu.mean(dim=0).numpy()
        sigma = torch.exp(fwd.log_sigma).mean(dim=0).numpy()
    embedding = StyleEmbedding(w=w[0], mu=mu, sigma=sigma, adb_score=predict_style(frozen, w[0]))
    log.info("✅ fitted %s: w=%s  ŝ=%.1f", trace.persona.persona_id, np.round(embedding.w, 3), embedding.adb_score)
    return embedding
