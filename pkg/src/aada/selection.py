"""Unsupervised checkpoint choice by mean prediction entropy on target tiles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data import DataError, DomainDataset
from .inference import predict_full
from .losses import pixel_entropy


@dataclass
class CheckpointRecord:
    epoch: int
    mean_entropy: float | None = None
    checkpoint_path: str | None = None
    # in-memory classifier state when no path is written
    state: dict[str, Any] | None = field(default=None, repr=False, compare=False)


class SelectionError(ValueError):
    pass


def evaluate_checkpoint_entropy(
    model, target: DomainDataset, subsample: float = 1.0, rng: np.random.Generator | None = None
) -> float:
    """Mean normalised entropy over every pixel of every target tile.

    Uses plain forward passes in evaluation mode. ``subsample`` < 1 scores a
    random subset of the tiles.
    """
    if not target.samples:
        raise DataError("empty target dataset")
    samples = target.samples
    if subsample < 1.0:
        rng = rng or np.random.default_rng(0)
        k = max(1, int(round(subsample * len(samples))))
        idx = np.sort(rng.choice(len(samples), size=k, replace=False))
        samples = [samples[i] for i in idx]
    total, count = 0.0, 0
    for s in samples:
        e = pixel_entropy(predict_full(model, s.channels).astype(np.float64), class_axis=-1)
        total += float(e.sum())
        count += e.size
    return total / count


def select_parameters(history: list[CheckpointRecord]) -> CheckpointRecord:
    """Record with the lowest mean entropy; ties go to the later epoch."""
    eligible = [r for r in history if r.mean_entropy is not None]
    if not eligible:
        raise SelectionError("no checkpoint carries a mean entropy")
    return min(eligible, key=lambda r: (r.mean_entropy, -r.epoch))


def select_last(history: list[CheckpointRecord]) -> CheckpointRecord:
    if not history:
        raise SelectionError("empty history")
    return max(history, key=lambda r: r.epoch)


def selection_report(history: list[CheckpointRecord], selected: CheckpointRecord, **extra) -> dict:
    report = {
        "selected_epoch": selected.epoch,
        "mean_entropy": selected.mean_entropy,
        "per_epoch": [
            {"epoch": r.epoch, "mean_entropy": r.mean_entropy, "checkpoint_path": r.checkpoint_path}
            for r in history
            if r.mean_entropy is not None
        ],
    }
    report.update(extra)
    return report


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
