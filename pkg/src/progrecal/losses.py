"""Distribution-alignment and prediction losses.

``mmd_loss`` is the mean-matching reduction of MMD: the squared Euclidean
distance between the column means of two embedding batches. CORAL, KL and
Bhattacharyya are the alignment alternatives used in the loss ablation; the
latter two compare batch-mean class posteriors rather than features.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

EPS = 1e-12


def _pair(X, Y, name: str, min_rows: int = 1) -> tuple[Tensor, Tensor]:
    X, Y = T.as_tensor(X), T.as_tensor(Y)
    if X.ndim != 2 or Y.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D batches, got {X.shape} and {Y.shape}")
    if X.shape[1] != Y.shape[1]:
        raise DimensionError(f"{name}: feature widths differ, {X.shape} vs {Y.shape}")
    if X.shape[0] < min_rows or Y.shape[0] < min_rows:
        raise ContractError(f"{name}: needs at least {min_rows} row(s) per batch, got {X.shape[0]} and {Y.shape[0]}")
    return X, Y


def mmd_loss(X, Y) -> Tensor:
    """``|| mean(X) - mean(Y) ||^2`` over rows."""
    X, Y = _pair(X, Y, "mmd_loss")
    diff = T.mean(X, axis=0) - T.mean(Y, axis=0)
    return T.tsum(diff * diff)


def _covariance(X: Tensor) -> Tensor:
    n = X.shape[0]
    centred = X - T.broadcast_to(T.mean(X, axis=0, keepdims=True), X.shape)
    return T.matmul(T.transpose(centred), centred) / (n - 1)


def coral_loss(X, Y) -> Tensor:
    """``|| Cov(X) - Cov(Y) ||_F^2 / (4 d^2)`` with unbiased covariances."""
    X, Y = _pair(X, Y, "coral_loss", min_rows=2)
    d = X.shape[1]
    diff = _covariance(X) - _covariance(Y)
    return T.tsum(diff * diff) / (4.0 * d * d)


def _check_posteriors(P: Tensor, name: str) -> None:
    rows = P.data.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-9) or np.any(P.data < 0):
        raise ContractError(f"{name}: rows must be probability vectors (max row-sum error {np.abs(rows - 1).max():.2e})")


def kl_posterior_loss(P, Q) -> Tensor:
    """KL(mean(P) || mean(Q)) between batch-mean class posteriors.

    Both means are floored by adding ``EPS`` to every class, which keeps the
    value finite and, since the floored vectors have equal mass, nonnegative.
    """
    P, Q = _pair(P, Q, "kl_posterior_loss")
    _check_posteriors(P, "kl_posterior_loss")
    _check_posteriors(Q, "kl_posterior_loss")
    p = T.mean(P, axis=0) + EPS
    q = T.mean(Q, axis=0) + EPS
    return T.relu(T.tsum(p * (T.log(p) - T.log(q))))


def bhattacharyya_posterior_loss(P, Q) -> Tensor:
    """``-ln sum_c sqrt(p_c q_c)`` between batch-mean class posteriors."""
    P, Q = _pair(P, Q, "bhattacharyya_posterior_loss")
    _check_posteriors(P, "bhattacharyya_posterior_loss")
    _check_posteriors(Q, "bhattacharyya_posterior_loss")
    C = P.shape[1]
    p = (T.mean(P, axis=0) + EPS) / (1.0 + C * EPS)
    q = (T.mean(Q, axis=0) + EPS) / (1.0 + C * EPS)
    # sum sqrt(p q) = 1 - H^2 for normalised p, q; this form is exactly 0 when p == q
    hellinger_sq = 0.5 * T.tsum((T.sqrt(p) - T.sqrt(q)) ** 2)
    return T.relu(-T.log(1.0 - hellinger_sq))


def _labels(labels, n: int, n_classes: int, name: str) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"{name}: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"{name}: labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(logits, labels) -> Tensor:
    logits = T.as_tensor(logits)
    n, C = logits.shape
    labels = _labels(labels, n, C, "cross_entropy")
    logp = T.log_softmax(logits, axis=1)
    return -T.mean(logp[np.arange(n), labels])


def ordinal_targets(grades, n_grades: int) -> np.ndarray:
    """Cumulative binary targets ``t[i, k] = 1[grade_i > k]`` for k < K-1."""
    grades = np.asarray(grades)
    return (grades[:, None] > np.arange(n_grades - 1)[None, :]).astype(np.float64)


def ordinal_loss(logits, grades) -> Tensor:
    """Mean binary cross-entropy of the K-1 cumulative-link logits."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise DimensionError(f"ordinal_loss: logits must be N x (K-1) with K >= 2, got {logits.shape}")
    n, k1 = logits.shape
    grades = _labels(grades, n, k1 + 1, "ordinal_loss")
    targets = T.Tensor(ordinal_targets(grades, k1 + 1))
    return T.mean(T.softplus(logits) - targets * logits)


def ordinal_decode(logits) -> np.ndarray:
    """Predicted grade = number of cumulative probabilities above 1/2."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (z > 0.0).sum(axis=1).astype(np.int64)


def ordinal_class_probs(logits) -> np.ndarray:
    """Per-grade probabilities from cumulative sigmoids, clipped and renormalised."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    exceed = 1.0 / (1.0 + np.exp(-z))
    n = z.shape[0]
    upper = np.concatenate([np.ones((n, 1)), exceed], axis=1)
    lower = np.concatenate([exceed, np.zeros((n, 1))], axis=1)
    probs = np.clip(upper - lower, 0.0, None) + EPS
    return probs / probs.sum(axis=1, keepdims=True)


def _check_weight(weight: float) -> float:
    if weight < 0:
        raise ContractError(f"loss weights must be nonnegative, got {weight}")
    return float(weight)


def compose_chest(ce: Tensor, mmd: Tensor, lam: float = 0.5) -> Tensor:
    return _check_weight(lam) * mmd + ce


def compose_knee(ordinal: Tensor, mmd: Tensor, lam: float = 0.5) -> Tensor:
    return _check_weight(lam) * mmd + ordinal


def pretrain_objective(reconstruction: Tensor, contrastive: Tensor, lam_rec: float = 1.0, lam_con: float = 1.0) -> Tensor:
    return _check_weight(lam_rec) * reconstruction + _check_weight(lam_con) * contrastive


ALIGNMENT_LOSSES = {
    "mmd": mmd_loss,
    "coral": coral_loss,
    "kl": kl_posterior_loss,
    "bhattacharyya": bhattacharyya_posterior_loss,
}
