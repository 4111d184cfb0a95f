"""Unweighted F1 / unweighted average recall over a confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    counts: np.ndarray

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int) -> "ConfusionMatrix":
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
        return cls(cm)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self) -> str:
        return "\n".join(",".join(str(int(v)) for v in row) for row in self.counts) + "\n"


def _as_counts(cm) -> np.ndarray:
    return np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)


def per_class_f1(cm) -> tuple[np.ndarray, np.ndarray]:
    """F1 per class and a mask of classes with no support in truth or predictions."""
    c = _as_counts(cm)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    empty = denom == 0
    return np.where(empty, 0.0, 2 * tp / np.where(empty, 1.0, denom)), empty


def per_class_recall(cm) -> tuple[np.ndarray, np.ndarray]:
    c = _as_counts(cm)
    support = c.sum(axis=1)
    empty = support == 0
    return np.where(empty, 0.0, np.diag(c) / np.where(empty, 1.0, support)), empty


def uf1(cm) -> float:
    """Mean per-class F1; classes that never appear contribute 0."""
    return float(per_class_f1(cm)[0].mean())


def uar(cm) -> float:
    """Mean per-class recall; classes with no true samples contribute 0."""
    return float(per_class_recall(cm)[0].mean())
