"""Recalibration network: a one-hidden-layer MLP over snapshot embeddings.

Training minimises ``prediction_loss + lam * alignment`` where the alignment
term compares the recalibrated (hidden-layer) representation of a snapshot
minibatch with that of a minibatch drawn from the temporal representation
bank, both passed through the same hidden layer. Posterior-level ablation
losses (KL, Bhattacharyya) compare output posteriors instead.
The bank is used only during training.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .losses import (
    ALIGNMENT_LOSSES,
    cross_entropy,
    ordinal_class_probs,
    ordinal_decode,
    ordinal_loss,
)
from .nn import Adam, Linear, Module
from .tensor import Tensor

log = logging.getLogger(__name__)

FEATURE_LOSSES = ("mmd", "coral")
POSTERIOR_LOSSES = ("kl", "bhattacharyya")


class RecalModel(Module):
    """``input -> ReLU(hidden) -> output``; 2 logits (chest) or K-1 cumulative logits (knee)."""

    def __init__(self, input_dim: int = 512, hidden: int = 128, output: int = 2, seed: int | None = 0):
        rng = None if seed is None else np.random.default_rng([seed, 11])
        self.fc1 = Linear(input_dim, hidden, rng)
        self.fc2 = Linear(hidden, output, rng)
        self.input_dim = input_dim

    def hidden(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"RecalModel expects N x {self.input_dim} inputs, got {x.shape}")
        return T.relu(self.fc1(x))

    def forward(self, x) -> Tensor:
        return self.fc2(self.hidden(x))


def posteriors(logits: Tensor, task: str) -> Tensor:
    """Differentiable class posteriors: softmax (chest) or per-threshold Bernoullis (knee)."""
    if task == "chest":
        return T.softmax(logits, axis=1)
    p = T.sigmoid(logits)
    return T.stack([p, 1.0 - p], axis=2)


def alignment_loss(model: RecalModel, x_batch, bank_batch, loss: str, task: str) -> Tensor:
    if loss in FEATURE_LOSSES:
        return ALIGNMENT_LOSSES[loss](model.hidden(x_batch), model.hidden(bank_batch))
    if loss not in POSTERIOR_LOSSES:
        raise ConfigurationError(f"unknown alignment loss {loss!r}")
    P = posteriors(model(x_batch), task)
    Q = posteriors(model(bank_batch), task)
    if task == "chest":
        return ALIGNMENT_LOSSES[loss](P, Q)
    k1 = P.shape[1]
    terms = [ALIGNMENT_LOSSES[loss](P[:, k, :], Q[:, k, :]) for k in range(k1)]
    return T.tsum(T.stack(terms)) / k1


def prediction_loss(model: RecalModel, x, labels, task: str) -> Tensor:
    logits = model(x)
    return cross_entropy(logits, labels) if task == "chest" else ordinal_loss(logits, labels)


def composed_loss(model, x, labels, bank_batch, lam: float, loss: str, task: str) -> tuple[Tensor, Tensor, Tensor | None]:
    pred = prediction_loss(model, x, labels, task)
    if lam == 0 or bank_batch is None:
        return pred, pred, None
    align = alignment_loss(model, x, bank_batch, loss, task)
    return lam * align + pred, pred, align


@dataclass
class RecalConfig:
    task: str = "chest"
    lam: float = 0.5
    loss: str = "mmd"
    hidden: int = 128
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 16
    bank_batch: int = 32
    n_grades: int = 5
    weight_decay: float = 0.0

    @property
    def output_dim(self) -> int:
        return 2 if self.task == "chest" else self.n_grades - 1

    def validate(self) -> None:
        if self.task not in ("chest", "knee"):
            raise ConfigurationError(f"task must be chest or knee, got {self.task!r}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be nonnegative, got {self.lam}")
        if self.loss not in ALIGNMENT_LOSSES:
            raise ConfigurationError(f"alignment loss must be one of {sorted(ALIGNMENT_LOSSES)}, got {self.loss!r}")


@dataclass
class TrainState:
    epoch: int = 0
    history: list[dict[str, float]] = field(default_factory=list)

    def record(self, epoch: int, pred: float, align: float, lam: float) -> None:
        self.epoch = epoch
        self.history.append({"epoch": epoch, "pred_loss": pred, "mmd_loss": align, "total": pred + lam * align})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["epoch", "pred_loss", "mmd_loss", "total"], lineterminator="\n")
        writer.writeheader()
        for row in self.history:
            writer.writerow({k: (repr(float(v)) if k != "epoch" else v) for k, v in row.items()})
        return buf.getvalue()


@dataclass
class FinetuneResult:
    model: RecalModel
    state: TrainState
    config: RecalConfig
    param_trace: list[dict[str, np.ndarray]] = field(default_factory=list)


def _full_losses(model, X, y, bank, cfg: RecalConfig) -> tuple[float, float]:
    pred = prediction_loss(model, X, y, cfg.task).item()
    if bank is None or len(bank) == 0:
        return pred, 0.0
    return pred, alignment_loss(model, X, bank, cfg.loss, cfg.task).item()


def finetune(
    X: np.ndarray,
    labels,
    bank: np.ndarray | None,
    config: RecalConfig | None = None,
    seed: int = 0,
    trace: bool = False,
) -> FinetuneResult:
    """Train a :class:`RecalModel` on snapshot embeddings ``X`` with labels.

    Each step draws a fresh uniform minibatch from ``bank`` for the alignment
    term. Shuffling and bank sampling use separate random streams, so with
    ``lam = 0`` the parameter trajectory equals a run without any bank.
    The history holds full-data losses before training (epoch 0) and after
    each epoch; the alignment column is always recorded.
    """
    cfg = config or RecalConfig()
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if cfg.lam > 0 and (bank is None or len(bank) == 0):
        raise ConfigurationError("lambda > 0 requires a nonempty temporal representation bank")
    if bank is not None and len(bank) and np.asarray(bank).shape[1] != X.shape[1]:
        raise DimensionError(f"bank width {np.asarray(bank).shape[1]} != embedding width {X.shape[1]}")
    model = RecalModel(X.shape[1], cfg.hidden, cfg.output_dim, seed)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng([seed, 21])
    bank_rng = np.random.default_rng([seed, 22])
    state = TrainState()
    state.record(0, *_full_losses(model, X, labels, bank, cfg), cfg.lam)
    params_seen = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(X))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            bank_batch = None
            if cfg.lam > 0:
                pick = bank_rng.choice(len(bank), size=min(cfg.bank_batch, len(bank)), replace=False)
                bank_batch = bank[np.sort(pick)]
            total, _, _ = composed_loss(model, X[idx], labels[idx], bank_batch, cfg.lam, cfg.loss, cfg.task)
            opt.zero_grad()
            total.backward()
            opt.step()
            if trace:
                params_seen.append(model.state_dict())
        state.record(epoch, *_full_losses(model, X, labels, bank, cfg), cfg.lam)
    return FinetuneResult(model, state, cfg, params_seen)


def predict(model: RecalModel, embeddings, task: str = "chest") -> dict[str, np.ndarray]:
    """Chest: class probabilities. Knee: decoded grades plus per-grade probabilities."""
    logits = model(np.atleast_2d(np.asarray(embeddings, dtype=np.float64))).data
    if task == "chest":
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return {"probs": probs, "pred": probs.argmax(axis=1)}
    return {"probs": ordinal_class_probs(logits), "pred": ordinal_decode(logits)}


def recalibrated(model: RecalModel, embeddings) -> np.ndarray:
    return model.hidden(np.asarray(embeddings, dtype=np.float64)).data


def matched_pair_distances(
    snapshot: np.ndarray,
    temporal: np.ndarray,
    snapshot_labels,
    temporal_labels,
) -> dict[str, float]:
    """Mean Euclidean distances between snapshot and temporal representations.

    Row ``i`` of ``snapshot`` and of ``temporal`` belong to the same patient.
    ``d_matched`` averages over those pairs, ``d_same_class`` over unmatched
    pairs sharing the outcome, ``d_cross_class`` over pairs with different
    outcomes.
    """
    snapshot, temporal = np.asarray(snapshot, dtype=np.float64), np.asarray(temporal, dtype=np.float64)
    if len(snapshot) == 0 or snapshot.shape != temporal.shape:
        raise DimensionError(f"need equally many nonempty matched rows, got {snapshot.shape} and {temporal.shape}")
    ys, yt = np.asarray(snapshot_labels), np.asarray(temporal_labels)
    diff = snapshot[:, None, :] - temporal[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    matched = np.eye(len(snapshot), dtype=bool)
    same = (ys[:, None] == yt[None, :]) & ~matched
    cross = ys[:, None] != yt[None, :]

    def avg(mask):
        return float(dist[mask].mean()) if mask.any() else float("nan")

    return {"d_matched": avg(matched), "d_same_class": avg(same), "d_cross_class": avg(cross)}
