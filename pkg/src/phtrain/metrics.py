"""Confusion matrices, mean recall / mean accuracy and epoch trace tables.

Two readings of the mean-accuracy formula are provided:

* :func:`mean_accuracy_literal` evaluates ``(1/C) sum_i TP_i / (TP_i+FN_i+FP_i+TN_i)``
  exactly as written. Every denominator is the total sample count, so the value
  is ``overall_accuracy / C`` and never exceeds ``1/C``.
* :func:`mean_accuracy_per_class` averages the per-class (one-vs-rest) accuracy
  ``(TP_i+TN_i)/total``. Reports use this one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = [
    "ConfusionMatrix",
    "mean_recall",
    "mean_accuracy_literal",
    "mean_accuracy_per_class",
    "overall_accuracy",
    "evaluate",
    "loss_trace_report",
    "TraceRow",
]


class ConfusionMatrix:
    """C x C integer counts indexed ``counts[true][predicted]``."""

    def __init__(self, num_classes: int, counts=None):
        if num_classes < 1:
            raise DataError("num_classes must be >= 1")
        self.num_classes = int(num_classes)
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.array(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes):
                raise DataError(f"counts must have shape {(num_classes, num_classes)}, got {counts.shape}")
            if (counts < 0).any():
                raise DataError("confusion counts must be non-negative")
            self.counts = counts

    @classmethod
    def from_labels(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        cm = cls(num_classes)
        cm.update(y_true, y_pred)
        return cm

    def _check(self, label) -> int:
        label = int(label)
        if not 0 <= label < self.num_classes:
            raise DataError(f"label {label} out of range [0, {self.num_classes})")
        return label

    def accumulate(self, true_label, predicted_label) -> "ConfusionMatrix":
        self.counts[self._check(true_label), self._check(predicted_label)] += 1
        return self

    def update(self, y_true, y_pred) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64).ravel()
        y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
        if y_true.shape != y_pred.shape:
            raise DataError("y_true and y_pred differ in length")
        c = self.num_classes
        if y_true.size and (y_true.min() < 0 or y_true.max() >= c or y_pred.min() < 0 or y_pred.max() >= c):
            raise DataError(f"labels out of range [0, {c})")
        np.add.at(self.counts, (y_true, y_pred), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fn - self.fp

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix(num_classes={self.num_classes}, total={self.total})"


def mean_recall(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class recall.

    Classes without support are left out of the average (with a warning).
    """
    support = cm.tp + cm.fn
    mask = support > 0
    if not mask.any():
        raise DataError("mean recall undefined on an empty confusion matrix")
    if not mask.all():
        missing = np.flatnonzero(~mask).tolist()
        warnings.warn(f"classes {missing} have no support; excluded from mean recall", RuntimeWarning, stacklevel=2)
    return float(np.mean(cm.tp[mask] / support[mask]))


def _require_samples(cm: ConfusionMatrix) -> int:
    total = cm.total
    if total == 0:
        raise DataError("accuracy undefined on an empty confusion matrix")
    return total


def mean_accuracy_literal(cm: ConfusionMatrix) -> float:
    _require_samples(cm)
    denom = cm.tp + cm.fn + cm.fp + cm.tn  # == total for every class
    return float(np.mean(cm.tp / denom))


def mean_accuracy_per_class(cm: ConfusionMatrix) -> float:
    total = _require_samples(cm)
    return float(np.mean((cm.tp + cm.tn) / total))


def overall_accuracy(cm: ConfusionMatrix) -> float:
    total = _require_samples(cm)
    return float(cm.tp.sum() / total)


def evaluate(cm: ConfusionMatrix) -> dict:
    """Metric dict used in traces and summaries."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        recall = mean_recall(cm)
    return {
        "mean_accuracy": mean_accuracy_per_class(cm),
        "mean_recall": recall,
        "overall_accuracy": overall_accuracy(cm),
        "mean_accuracy_literal": mean_accuracy_literal(cm),
    }


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    loss: float
    mean_accuracy: float | None
    mean_recall: float | None
    marker: str = ""


def loss_trace_report(record) -> list[TraceRow]:
    """Flatten a run record into one row per global epoch.

    Visits (IIL) and rounds (FL) contribute their epochs in order; the last
    epoch of every segment except the final one carries the boundary marker.
    For FL rounds the replica losses/metrics are averaged, weighted by the
    replicas' training sample counts.
    """
    rows: list[TraceRow] = []
    segments = list(getattr(record, "segments", []) or [])
    for k, seg in enumerate(segments):
        losses, metrics = seg.combined()
        for e, loss in enumerate(losses):
            m = metrics[e] if e < len(metrics) else None
            marker = ""
            if e == len(losses) - 1 and k < len(segments) - 1:
                marker = seg.boundary_marker(segments[k + 1])
            rows.append(
                TraceRow(
                    epoch=len(rows) + 1,
                    loss=float(loss),
                    mean_accuracy=None if m is None else m["mean_accuracy"],
                    mean_recall=None if m is None else m["mean_recall"],
                    marker=marker,
                )
            )
    return rows
