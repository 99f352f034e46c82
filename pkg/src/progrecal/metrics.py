"""Evaluation metrics for binary outcome and ordinal grade prediction.

Undefined values (zero denominators, missing classes) are reported as
``None`` and never coerced to 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError


class UndefinedMetricError(ContractError):
    """The metric has no value for this input (e.g. a single class)."""


def roc_auc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _safe_ratio(num: float, den: float) -> float | None:
    return None if den == 0 else float(num) / float(den)


def confusion_matrix(pred, true, n_classes: int) -> np.ndarray:
    """``cm[i, j]`` counts samples with true class i predicted as j."""
    pred, true = np.asarray(pred, dtype=np.int64), np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ContractError(f"{pred.shape[0]} predictions for {true.shape[0]} labels")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ContractError(f"class ids must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def binary_suite(pred, labels) -> dict[str, float | None]:
    cm = confusion_matrix(pred, labels, 2)
    tn, fp, fn, tp = cm[0, 0], cm[0, 1], cm[1, 0], cm[1, 1]
    return {
        "sensitivity": _safe_ratio(tp, tp + fn),
        "specificity": _safe_ratio(tn, tn + fp),
        "f1": _safe_ratio(2 * tp, 2 * tp + fp + fn),
    }


def cohen_kappa(pred, true, n_classes: int) -> float | None:
    cm = confusion_matrix(pred, true, n_classes).astype(np.float64)
    n = cm.sum()
    if n == 0:
        return None
    p_o = np.trace(cm) / n
    p_e = float((cm.sum(axis=0) * cm.sum(axis=1)).sum()) / (n * n)
    return _safe_ratio(p_o - p_e, 1.0 - p_e)


def micro_f1(pred, true, n_classes: int) -> float | None:
    cm = confusion_matrix(pred, true, n_classes)
    tp = np.trace(cm)
    fp = cm.sum() - tp  # every miss is one FP and one FN in single-label problems
    return _safe_ratio(2 * tp, 2 * tp + 2 * fp)


def balanced_accuracy(pred, true, n_classes: int) -> float | None:
    cm = confusion_matrix(pred, true, n_classes)
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        return None
    return float(np.mean(np.diag(cm)[present] / support[present]))


def ova_auc(scores, true, n_classes: int) -> float | None:
    """Macro average of one-vs-all AUCs over classes where both sides exist."""
    scores, true = np.asarray(scores, dtype=np.float64), np.asarray(true)
    values = []
    for c in range(n_classes):
        positive = true == c
        if positive.any() and (~positive).any():
            values.append(roc_auc(scores[:, c], positive))
    return float(np.mean(values)) if values else None


def ovo_auc(scores, true, a: int, b: int) -> float | None:
    """Pairwise AUC between grades ``a`` and ``b`` (average of both directions).

    Only samples whose true grade is ``a`` or ``b`` are used.
    """
    scores, true = np.asarray(scores, dtype=np.float64), np.asarray(true)
    keep = (true == a) | (true == b)
    if not (true[keep] == a).any() or not (true[keep] == b).any():
        return None
    s, t = scores[keep], true[keep]
    return 0.5 * (roc_auc(s[:, b], t == b) + roc_auc(s[:, a], t == a))


def multiclass_suite(pred, true, scores=None, n_classes: int = 5) -> dict[str, float | None]:
    out: dict[str, float | None] = {
        "micro_f1": micro_f1(pred, true, n_classes),
        "balanced_accuracy": balanced_accuracy(pred, true, n_classes),
        "kappa": cohen_kappa(pred, true, n_classes),
        "ova_auc": None,
        "ovo_auc_1_2": None,
        "ovo_auc_2_3": None,
    }
    if scores is not None:
        out["ova_auc"] = ova_auc(scores, true, n_classes)
        out["ovo_auc_1_2"] = ovo_auc(scores, true, 1, 2)
        out["ovo_auc_2_3"] = ovo_auc(scores, true, 2, 3)
    return out


@dataclass
class EvalReport:
    metrics: dict[str, float | None]
    confusion: list[list[int]]
    class_counts: list[int]
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self, keys=None) -> str:
        keys = keys or sorted(self.metrics)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["" if self.metrics.get(k) is None else f"{self.metrics[k]:.6f}" for k in keys])
        return buf.getvalue()


def evaluate_binary(prob_positive, labels, threshold: float = 0.5, config=None) -> EvalReport:
    prob_positive, labels = np.asarray(prob_positive), np.asarray(labels).astype(np.int64)
    pred = (prob_positive >= threshold).astype(np.int64)
    metrics: dict[str, float | None] = dict(binary_suite(pred, labels))
    try:
        metrics["auc"] = roc_auc(prob_positive, labels)
    except UndefinedMetricError:
        metrics["auc"] = None
    metrics["accuracy"] = float((pred == labels).mean()) if labels.size else None
    cm = confusion_matrix(pred, labels, 2)
    return EvalReport(metrics, cm.tolist(), np.bincount(labels, minlength=2).tolist(), dict(config or {}))


def evaluate_ordinal(pred, true, scores, n_classes: int = 5, config=None) -> EvalReport:
    metrics = multiclass_suite(pred, true, scores, n_classes)
    cm = confusion_matrix(pred, true, n_classes)
    counts = np.bincount(np.asarray(true, dtype=np.int64), minlength=n_classes)
    return EvalReport(metrics, cm.tolist(), counts.tolist(), dict(config or {}))
