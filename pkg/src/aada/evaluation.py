"""Confusion matrices and the metrics derived from them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import IGNORE


@dataclass
class ConfusionMatrix:
    """Pixel counts with rows = reference class, columns = predicted class."""

    class_count: int
    counts: np.ndarray = field(default=None)
    ignored_pixels: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.class_count, self.class_count), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, ref: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        ref = np.asarray(ref)
        if pred.shape != ref.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
        l = self.class_count
        valid = ref != IGNORE
        self.ignored_pixels += int((~valid).sum())
        r = ref[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        if r.size and (r.max() >= l or r.min() < 0 or p.max() >= l or p.min() < 0):
            raise ValueError(f"label out of range for {l} classes")
        self.counts += np.bincount(r * l + p, minlength=l * l).reshape(l, l)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_count != self.class_count:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.class_count, self.counts + other.counts, self.ignored_pixels + other.ignored_pixels)

    def tp_fp_fn(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(0) - tp
        fn = self.counts.sum(1) - tp
        return tp, fp, fn

    def to_csv(self, path: str | Path) -> None:
        np.savetxt(path, self.counts, fmt="%d", delimiter=",")


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, ref: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, ref)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the denominator is zero."""
    tp, fp, fn = cm.tp_fp_fn()
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    tp, fp, fn = cm.tp_fp_fn()
    denom = tp + 0.5 * (fp + fn)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def metrics(cm: ConfusionMatrix) -> dict:
    """Per-class IoU and F1, overall accuracy, and means over present classes.

    Classes absent from both reference and prediction are NaN per class and
    excluded from the means.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    iou = iou_per_class(cm)
    f1 = f1_per_class(cm)
    return {
        "iou": iou.tolist(),
        "f1": f1.tolist(),
        "oa": float(np.trace(cm.counts) / cm.total),
        "mean_iou": float(np.nanmean(iou)),
        "mean_f1": float(np.nanmean(f1)),
        "pixels": cm.total,
        "ignored_pixels": cm.ignored_pixels,
    }


def positive_transfer_rate(pairs) -> Fraction:
    """Fraction of (before, after) pairs where ``after`` strictly improves."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no metric pairs")
    return Fraction(sum(1 for before, after in pairs if after > before), len(pairs))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats between two class distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for v in (p, q):
        if v.shape != p.shape or v.ndim != 1 or (v < 0).any() or abs(v.sum() - 1.0) > 1e-6:
            raise ValueError("inputs must be probability vectors of equal length")
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return max(0.0, 0.5 * kl(p, m) + 0.5 * kl(q, m))


def histogram_distribution(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    return counts / counts.sum()


def write_metrics(path: str | Path, values: dict) -> None:
    Path(path).write_text(json.dumps(values, indent=2, sort_keys=True))
