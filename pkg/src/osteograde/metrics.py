"""Ordinal evaluation metrics: accuracy, MAE, quadratic weighted kappa.

The confusion matrix convention here is O[p][t]: rows index the predicted
grade, columns the true grade, so row sums are prediction counts and
column sums are class counts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError

NUM_GRADES = 5


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        arr = self.as_array()
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise DataError(f"confusion matrix must be square, got {arr.shape}")
        if np.any(arr < 0):
            raise DataError("confusion matrix counts must be non-negative")

    @property
    def k(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.as_array().sum())

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    mae: float
    qwk: float
    per_class_accuracy: tuple[float, ...]


def _check_grades(grades, k: int, what: str) -> np.ndarray:
    arr = np.asarray(list(grades))
    if arr.size == 0:
        raise DataError(f"{what}: empty grade sequence")
    if arr.dtype.kind not in "iu" or arr.min() < 0 or arr.max() >= k:
        raise DataError(f"{what}: grades must be integers in 0..{k - 1}")
    return arr.astype(np.int64)


def confusion(true_grades, predicted_grades, k: int = NUM_GRADES) -> ConfusionMatrix:
    """Count contingencies; entry [p][t] counts true-t samples predicted p."""
    t = _check_grades(true_grades, k, "true grades")
    p = _check_grades(predicted_grades, k, "predicted grades")
    if len(t) != len(p):
        raise DataError(f"length mismatch: {len(t)} true vs {len(p)} predicted")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (p, t), 1)
    return ConfusionMatrix(tuple(tuple(int(x) for x in row) for row in counts))


def accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of predictions matching the ground truth (diagonal mass)."""
    arr = cm.as_array()
    total = arr.sum()
    if total < 1:
        raise DataError("accuracy undefined for an empty confusion matrix")
    return float(np.trace(arr) / total)


def per_class_accuracy(cm: ConfusionMatrix) -> tuple[float, ...]:
    """Diagonal over column sum per true grade; nan where a grade is absent."""
    arr = cm.as_array()
    col = arr.sum(axis=0)
    out = []
    for g in range(cm.k):
        out.append(float(arr[g, g] / col[g]) if col[g] > 0 else float("nan"))
    return tuple(out)


def mae(true_grades, predicted_grades, k: int = NUM_GRADES) -> float:
    """Mean absolute grade distance between truth and prediction."""
    t = _check_grades(true_grades, k, "true grades")
    p = _check_grades(predicted_grades, k, "predicted grades")
    if len(t) != len(p):
        raise DataError(f"length mismatch: {len(t)} true vs {len(p)} predicted")
    return float(np.abs(t - p).mean())


def qwk(cm: ConfusionMatrix) -> float:
    """Quadratic weighted kappa: chance-adjusted agreement with
    (p - t)^2 / (k - 1)^2 disagreement weights.

    The expected matrix is the outer product of the two marginal
    histograms, scaled to the same total as the observed counts.
    """
    arr = cm.as_array().astype(np.float64)
    total = arr.sum()
    if total < 1:
        raise DataError("kappa undefined for an empty confusion matrix")
    k = cm.k
    grid = np.arange(k)
    w = (grid[:, None] - grid[None, :]) ** 2 / (k - 1) ** 2
    pred_hist = arr.sum(axis=1)
    true_hist = arr.sum(axis=0)
    expected = np.outer(pred_hist, true_hist) / total
    denom = float((w * expected).sum())
    if denom == 0.0:
        raise DataError("kappa undefined: all mass on one identical grade for both raters")
    return float(1.0 - (w * arr).sum() / denom)


def predict_grade(probabilities) -> int:
    """Argmax grade, ties broken toward the lower grade."""
    return int(np.argmax(np.asarray(probabilities)))


def report_from_labels(
    true_grades,
    predicted_grades,
    k: int = NUM_GRADES,
    undefined_qwk: float | None = None,
) -> tuple[MetricsReport, ConfusionMatrix]:
    """Bundle all metrics; an undefined kappa raises unless a fallback
    value (typically nan) is supplied."""
    cm = confusion(true_grades, predicted_grades, k)
    try:
        kappa = qwk(cm)
    except DataError:
        if undefined_qwk is None:
            raise
        kappa = undefined_qwk
    return (
        MetricsReport(
            accuracy=accuracy(cm),
            mae=mae(true_grades, predicted_grades, k),
            qwk=kappa,
            per_class_accuracy=per_class_accuracy(cm),
        ),
        cm,
    )


def write_report_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerow(["accuracy", f"{report.accuracy:.10g}"])
        writer.writerow(["mae", f"{report.mae:.10g}"])
        writer.writerow(["qwk", f"{report.qwk:.10g}"])
        for g, v in enumerate(report.per_class_accuracy):
            writer.writerow([f"per_class_accuracy_{g}", f"{v:.10g}"])


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    arr = cm.as_array()
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pred\\true"] + [str(g) for g in range(cm.k)])
        for p in range(cm.k):
            writer.writerow([str(p)] + [str(int(x)) for x in arr[p]])


def read_confusion_csv(path) -> ConfusionMatrix:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise DataError(f"cannot read confusion matrix: {e}") from e
    if not rows or len(rows) < 2:
        raise DataError(f"{path}: not a confusion matrix CSV")
    k = len(rows[0]) - 1
    if len(rows) != k + 1:
        raise DataError(f"{path}: expected {k + 1} rows, found {len(rows)}")
    try:
        counts = tuple(tuple(int(x) for x in row[1:]) for row in rows[1:])
    except ValueError as e:
        raise DataError(f"{path}: non-integer count: {e}") from e
    return ConfusionMatrix(counts)
