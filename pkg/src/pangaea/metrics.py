"""Evaluation metrics and score normalizations, implemented literally.

Every function keeps to its formula: accuracy as an indicator mean, F1 from
the 2TP/(pos+pred_pos) form, AUC as the strict pairwise comparison (ties
count zero), and the percentage / min-max / signed normalizations used to
aggregate results across tasks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (ContractError, DegenerateDataWarning,
                     DegenerateNormalizationError, UndefinedMetricError)

TASK_KINDS = ("classification", "regression", "ranking-score")


@dataclass
class EvalBatch:
    y: np.ndarray
    y_hat: np.ndarray
    task_kind: str

    def __post_init__(self):
        self.y = np.asarray(self.y)
        self.y_hat = np.asarray(self.y_hat)
        if self.task_kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.task_kind!r}")
        if self.y.shape != self.y_hat.shape or self.y.ndim != 1:
            raise ContractError(
                f"y and y_hat must be equal-length vectors, got {self.y.shape} vs {self.y_hat.shape}")
        if self.y.size == 0:
            raise ContractError("an evaluation batch cannot be empty")

    @property
    def n(self) -> int:
        return self.y.size


def _require(b: EvalBatch, kind: str, op: str):
    if b.task_kind != kind:
        raise ContractError(f"{op} needs a {kind} batch, got {b.task_kind}")


def metric_acc(b: EvalBatch) -> float:
    _require(b, "classification", "accuracy")
    return float(np.mean(b.y == b.y_hat))


def _binary_f1(y: np.ndarray, y_hat: np.ndarray, positive) -> float:
    tp = np.sum((y == positive) & (y_hat == positive))
    denom = np.sum(y == positive) + np.sum(y_hat == positive)
    if denom == 0:
        warnings.warn("F1 denominator is zero; scored as 0", DegenerateDataWarning)
        return 0.0
    return float(2.0 * tp / denom)


def metric_f1(b: EvalBatch, average: str = "binary") -> float:
    _require(b, "classification", "F1")
    if average == "binary":
        return _binary_f1(b.y, b.y_hat, positive=1)
    if average == "weighted":
        classes, support = np.unique(b.y, return_counts=True)
        scores = np.array([_binary_f1(b.y, b.y_hat, positive=c) for c in classes])
        return float(np.sum(scores * support) / np.sum(support))
    raise ContractError(f"unknown F1 average {average!r}")


def metric_mse(b: EvalBatch) -> float:
    _require(b, "regression", "MSE")
    d = b.y.astype(np.float64) - b.y_hat.astype(np.float64)
    return float(np.mean(d * d))


def metric_mae(b: EvalBatch) -> float:
    _require(b, "regression", "MAE")
    return float(np.mean(np.abs(b.y.astype(np.float64) - b.y_hat.astype(np.float64))))


def metric_rmse(b: EvalBatch) -> float:
    return float(np.sqrt(metric_mse(b)))


def metric_auc(b: EvalBatch) -> float:
    """Fraction of (positive, negative) pairs ranked strictly correctly."""
    _require(b, "ranking-score", "AUC")
    labels = b.y
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("AUC labels must be binary 0/1")
    pos = np.sort(b.y_hat[labels == 1].astype(np.float64))
    neg = b.y_hat[labels == 0].astype(np.float64)
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    # for each negative score, count positives strictly above it
    wins = pos.size - np.searchsorted(pos, neg, side="right")
    return float(wins.sum() / (pos.size * neg.size))


def percentage(x: float, x0: float, direction: str = "higher-better") -> float:
    """Relative performance against a reference, on the 100-percent scale."""
    if x0 == 0:
        raise ContractError("reference value must be nonzero")
    if direction == "higher-better":
        return (x - x0) / x0 * 100.0 + 100.0
    if direction == "lower-better":
        return (x0 - x) / x0 * 100.0 + 100.0
    raise ContractError(f"unknown direction {direction!r}")


def improvement(x: float, x0: float, direction: str = "higher-better") -> float:
    return percentage(x, x0, direction) - 100.0


def minmax_norm(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    lo, hi = xs.min(), xs.max()
    if hi == lo:
        raise DegenerateNormalizationError("cannot min-max normalize a constant list")
    return (xs - lo) / (hi - lo)


def signed_norm(xs, x0: float) -> np.ndarray:
    """Map scores to [-1, 1] around a reference: below scales by the
    min-side span, at-or-above by the max-side span."""
    xs = np.asarray(xs, dtype=np.float64)
    lo, hi = xs.min(), xs.max()
    out = np.zeros_like(xs)
    below = xs < x0
    above = xs > x0
    if below.any():
        out[below] = -(xs[below] - x0) / (lo - x0)
    if above.any():
        if hi == x0:
            raise AssertionError("unreachable: above-side member implies hi > x0")
        out[above] = (xs[above] - x0) / (hi - x0)
    if (xs >= x0).any() and hi == x0:
        warnings.warn("all at-or-above values equal the reference; mapped to 0",
                      DegenerateDataWarning)
    return out
