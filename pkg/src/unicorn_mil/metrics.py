"""Classification metrics: accuracy, per-class F1, macro-F1, confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    per_class_f1: list[float]
    confusion: np.ndarray  # raw counts, rows = true class
    confusion_normalized: np.ndarray  # rows sum to 1 where nonempty
    absent_classes: list[int]  # absent from both truths and predictions
    n_samples: int


def compute_metrics(truths, predictions, n_classes: int = 5) -> Metrics:
    """Macro-F1 averages the per-class F1 of classes present in either the
    truths or the predictions; classes absent from both are reported with
    F1 = 0 and flagged in ``absent_classes``.
    """
    truths = np.asarray(truths, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if truths.size == 0:
        raise DataError("compute_metrics on empty input")
    if truths.shape != predictions.shape:
        raise DataError("truths and predictions differ in length")
    if truths.max() >= n_classes or predictions.max() >= n_classes or truths.min() < 0 or predictions.min() < 0:
        raise DataError(f"labels outside 0..{n_classes - 1}")

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(truths, predictions):
        confusion[t, p] += 1

    row_sums = confusion.sum(axis=1, keepdims=True)
    normalized = np.divide(
        confusion, row_sums, out=np.zeros_like(confusion, dtype=np.float64),
        where=row_sums > 0,
    )

    per_class_f1 = []
    present = []
    for c in range(n_classes):
        tp = confusion[c, c]
        fn = confusion[c].sum() - tp
        fp = confusion[:, c].sum() - tp
        denom = 2 * tp + fp + fn
        per_class_f1.append(2 * tp / denom if denom else 0.0)
        if confusion[c].sum() or confusion[:, c].sum():
            present.append(c)

    macro_f1 = float(np.mean([per_class_f1[c] for c in present])) if present else 0.0
    return Metrics(
        accuracy=float(np.trace(confusion) / truths.size),
        macro_f1=macro_f1,
        per_class_f1=[float(f) for f in per_class_f1],
        confusion=confusion,
        confusion_normalized=normalized,
        absent_classes=[c for c in range(n_classes) if c not in present],
        n_samples=int(truths.size),
    )
