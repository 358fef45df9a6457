"""Pixel-level confusion counting and overlap metrics (IoU, F1, accuracy, precision, recall)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
        )


@dataclass
class MetricsReport:
    iou: float
    f1: float
    accuracy: float
    precision: float
    recall: float
    aggregation: str
    n_images: int

    def to_dict(self) -> dict:
        return {
            "iou": self.iou,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "aggregation": self.aggregation,
            "n_images": self.n_images,
        }


def _check_binary(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return arr.astype(bool)


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """Count pixel-level TP/FP/FN/TN between two binary masks of equal shape."""
    pred = _check_binary(pred, "pred")
    truth = _check_binary(truth, "truth")
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    return ConfusionCounts(tp, fp, fn, tn)


def metrics_from_counts(
    counts: ConfusionCounts,
    aggregation: str = "pooled",
    n_images: int = 1,
    empty_value: float = 1.0,
) -> MetricsReport:
    """Derive overlap metrics from pooled confusion counts.

    Zero-denominator conventions (configurable via ``empty_value``, default 1.0):
    an empty prediction against an empty truth scores ``empty_value`` for
    precision/recall/F1/IoU (correct rejection); an empty prediction against a
    non-empty truth (or vice versa) scores 0.
    """
    if counts.total <= 0:
        raise ValueError("cannot derive metrics from zero pixels")
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    accuracy = (tp + tn) / counts.total
    precision = tp / (tp + fp) if tp + fp > 0 else (empty_value if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn > 0 else (empty_value if fp == 0 else 0.0)
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else empty_value
    iou = tp / (tp + fp + fn) if tp + fp + fn > 0 else empty_value
    return MetricsReport(iou, f1, accuracy, precision, recall, aggregation, n_images)


def evaluate_set(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    aggregation: str = "pooled",
    empty_value: float = 1.0,
) -> MetricsReport:
    """Evaluate (prediction, truth) mask pairs.

    ``pooled`` sums confusion counts over all images before deriving metrics;
    ``mean_per_image`` averages per-image metrics.
    """
    if not pairs:
        raise ValueError("empty evaluation set")
    if aggregation not in ("pooled", "mean_per_image"):
        raise ValueError(f"unknown aggregation {aggregation!r}")

    per_image = [confusion(pred, truth) for pred, truth in pairs]
    if aggregation == "pooled":
        total = per_image[0]
        for c in per_image[1:]:
            total = total + c
        return metrics_from_counts(total, "pooled", len(pairs), empty_value)

    reports = [metrics_from_counts(c, "mean_per_image", 1, empty_value) for c in per_image]
    n = len(reports)
    return MetricsReport(
        iou=sum(r.iou for r in reports) / n,
        f1=sum(r.f1 for r in reports) / n,
        accuracy=sum(r.accuracy for r in reports) / n,
        precision=sum(r.precision for r in reports) / n,
        recall=sum(r.recall for r in reports) / n,
        aggregation="mean_per_image",
        n_images=n,
    )
