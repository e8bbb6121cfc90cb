"""Training objectives and the per-class weighting they depend on.

Score tensors are class probabilities shaped (B, l, H, W); label tensors are
(B, H, W) int64 with 255 marking ignored pixels. Discriminator maps are
probabilities of any shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import IGNORE
from .evaluation import ConfusionMatrix, iou_per_class

EPS = 1e-12

__all__ = [
    "ClassWeights",
    "LossWeights",
    "DivergenceError",
    "iou_per_class",
    "ace_weights",
    "weighted_ce",
    "focal_loss",
    "adv_gen_loss",
    "adv_disc_loss",
    "disc_reg_loss",
    "joint_loss",
    "disc_total_loss",
    "mean_entropy",
    "pixel_entropy",
]


class DivergenceError(FloatingPointError):
    """A loss became non-finite."""


@dataclass
class ClassWeights:
    w: np.ndarray
    kappa: float = 0.0

    @classmethod
    def uniform(cls, class_count: int) -> "ClassWeights":
        return cls(np.ones(class_count), 0.0)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.w, dtype=dtype)


@dataclass
class LossWeights:
    omega_T: float = 2.0
    omega_G: float = 2.0
    rho: float = 4.0

    def __post_init__(self):
        if min(self.omega_T, self.omega_G, self.rho) < 0:
            raise ValueError("loss weights must be non-negative")


def ace_weights(ious: np.ndarray | ConfusionMatrix, kappa: float) -> ClassWeights:
    """Class weights ``(1 - (IoU_c - mean IoU)) ** kappa``.

    NaN entries mark absent classes; they get weight 1 and are left out of the
    mean.
    """
    if isinstance(ious, ConfusionMatrix):
        ious = iou_per_class(ious)
    ious = np.asarray(ious, dtype=np.float64)
    present = ~np.isnan(ious)
    w = np.ones_like(ious)
    if present.any():
        mean = ious[present].mean()
        w[present] = (1.0 - (ious[present] - mean)) ** kappa
    return ClassWeights(w, kappa)


def _ref_probability(scores: torch.Tensor, labels: torch.Tensor):
    valid = labels != IGNORE
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    p_ref = scores.gather(1, safe.unsqueeze(1)).squeeze(1)
    return p_ref, safe, valid


def weighted_ce(scores: torch.Tensor, labels: torch.Tensor, weights: ClassWeights | torch.Tensor | None = None) -> torch.Tensor:
    """Class-weighted cross-entropy averaged over non-ignored pixels."""
    p_ref, safe, valid = _ref_probability(scores, labels)
    nll = -torch.log(p_ref.clamp_min(EPS))
    if weights is not None:
        w = weights.tensor(scores.dtype) if isinstance(weights, ClassWeights) else weights.to(scores.dtype)
        nll = nll * w[safe]
    n_p = valid.sum()
    if n_p == 0:
        return scores.sum() * 0.0
    return torch.where(valid, nll, torch.zeros_like(nll)).sum() / n_p


def focal_loss(scores: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Multi-class focal loss averaged over non-ignored pixels."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p_ref, _, valid = _ref_probability(scores, labels)
    nll = -torch.log(p_ref.clamp_min(EPS))
    if gamma != 0:
        nll = (1.0 - p_ref) ** gamma * nll
    n_p = valid.sum()
    if n_p == 0:
        return scores.sum() * 0.0
    return torch.where(valid, nll, torch.zeros_like(nll)).sum() / n_p


def adv_gen_loss(p_transformed: torch.Tensor) -> torch.Tensor:
    """Adapter loss: transformed images should be judged as target."""
    return -torch.log(p_transformed.clamp_min(EPS)).mean()


def adv_disc_loss(p_target: torch.Tensor, p_transformed: torch.Tensor) -> torch.Tensor:
    """Discriminator loss; both log terms share one normaliser, the cell count of one map set."""
    if p_target.shape != p_transformed.shape:
        raise ValueError("discriminator maps must have the same shape")
    real = torch.log(p_target.clamp_min(EPS))
    fake = torch.log((1.0 - p_transformed).clamp_min(EPS))
    return -(real + fake).mean()


def disc_reg_loss(p_target: torch.Tensor, p_transformed: torch.Tensor) -> torch.Tensor:
    """Sum over both map sets of the standard deviation of their cells (divisor: cells - 1)."""
    total = 0.0
    for p in (p_target, p_transformed):
        if p.numel() < 2:
            raise ValueError("need at least two discriminator cells per set")
        total = total + p.reshape(-1).std(unbiased=True)
    return total


def _check_finite(*values):
    for v in values:
        f = v.detach() if isinstance(v, torch.Tensor) else torch.tensor(float(v))
        if not torch.isfinite(f).all():
            raise DivergenceError(f"non-finite loss component: {float(f)}")


def joint_loss(sup_transformed, sup_source, adv_gen, lw: LossWeights):
    _check_finite(sup_transformed, sup_source, adv_gen)
    return lw.omega_T * sup_transformed + sup_source + lw.omega_G * adv_gen


def disc_total_loss(adv_disc, reg, rho: float):
    _check_finite(adv_disc, reg)
    return adv_disc + rho * reg


def pixel_entropy(scores: torch.Tensor | np.ndarray, class_axis: int = 1):
    """Normalised per-pixel entropy in [0, 1]; 0 * log 0 is taken as 0."""
    if isinstance(scores, np.ndarray):
        l = scores.shape[class_axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(scores > 0, scores * np.log(np.where(scores > 0, scores, 1.0)), 0.0)
        return -terms.sum(axis=class_axis) / math.log(l)
    l = scores.shape[class_axis]
    terms = torch.where(scores > 0, scores * torch.log(torch.where(scores > 0, scores, torch.ones_like(scores))), torch.zeros_like(scores))
    return -terms.sum(dim=class_axis) / math.log(l)


def mean_entropy(maps, class_axis: int = 1) -> float:
    """Mean normalised entropy over all pixels of one map or a list of maps."""
    if isinstance(maps, (list, tuple)):
        total, count = 0.0, 0
        for m in maps:
            e = pixel_entropy(m, class_axis)
            total += float(e.sum())
            count += int(np.prod(e.shape))
        return total / count
    e = pixel_entropy(maps, class_axis)
    return float(e.mean())
