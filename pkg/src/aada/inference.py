"""Tiled prediction with test-time augmentation and score upsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .networks import ENCODER_STRIDE

TTA_VARIANTS = ("identity", "hflip", "vflip", "rot180")


@dataclass
class TilingPlan:
    window: int = 256
    overlap: int = 128
    tta: tuple[str, ...] = TTA_VARIANTS
    batch_size: int = 8

    def __post_init__(self):
        if not 0 <= self.overlap < self.window:
            raise ValueError("overlap must be in [0, window)")
        unknown = set(self.tta) - set(TTA_VARIANTS)
        if unknown or not self.tta:
            raise ValueError(f"unknown TTA variants {sorted(unknown)}")

    @property
    def stride(self) -> int:
        return self.window - self.overlap


def window_starts(length: int, window: int, stride: int) -> list[int]:
    """Window offsets along one axis; the last window is clamped to the edge."""
    if length <= window:
        return [0]
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def _transform(x: torch.Tensor, variant: str) -> torch.Tensor:
    if variant == "hflip":
        return x.flip(-1)
    if variant == "vflip":
        return x.flip(-2)
    if variant == "rot180":
        return x.flip(-1).flip(-2)
    return x


def _pad_mode(pad_h: int, pad_w: int, h: int, w: int) -> str:
    # reflection needs the pad to be shorter than the image
    return "reflect" if pad_h < h and pad_w < w else "replicate"


# every variant is its own inverse
_inverse = _transform


@torch.no_grad()
def sliding_window_predict(model, image, plan: TilingPlan | None = None, return_counts: bool = False):
    """Average class scores over overlapping windows and TTA variants.

    ``image`` is an HxWxN array (or a RasterSample). Images smaller than the
    window are reflection-padded. Returns ``(scores HxWxl, labels HxW)`` and,
    if requested, the per-pixel contribution count.
    """
    plan = plan or TilingPlan()
    channels = getattr(image, "channels", image)
    h, w, _ = channels.shape
    x = torch.from_numpy(np.ascontiguousarray(channels.transpose(2, 0, 1), dtype=np.float32))[None]
    pad_h, pad_w = max(0, plan.window - h), max(0, plan.window - w)
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode=_pad_mode(pad_h, pad_w, h, w))
    hp, wp = x.shape[-2:]
    was_training = model.training
    model.eval()
    ys = window_starts(hp, plan.window, plan.stride)
    xs = window_starts(wp, plan.window, plan.stride)
    acc = None
    counts = torch.zeros(hp, wp, dtype=torch.float64)
    jobs = [(y0, x0, v) for y0 in ys for x0 in xs for v in plan.tta]
    for i in range(0, len(jobs), plan.batch_size):
        chunk = jobs[i : i + plan.batch_size]
        batch = torch.cat([_transform(x[..., y0 : y0 + plan.window, x0 : x0 + plan.window], v) for y0, x0, v in chunk])
        probs = model(batch).double()
        if acc is None:
            acc = torch.zeros(probs.shape[1], hp, wp, dtype=torch.float64)
        for (y0, x0, v), p in zip(chunk, probs):
            acc[:, y0 : y0 + plan.window, x0 : x0 + plan.window] += _inverse(p, v)
            counts[y0 : y0 + plan.window, x0 : x0 + plan.window] += 1
    model.train(was_training)
    scores = (acc / counts).permute(1, 2, 0).numpy()[:h, :w]
    labels = np.argmax(scores, axis=-1)
    if return_counts:
        return scores, labels, counts.numpy()[:h, :w]
    return scores, labels


@torch.no_grad()
def predict_full(model, channels: np.ndarray) -> np.ndarray:
    """Single forward pass over a whole tile; returns HxWxl scores.

    The tile is reflection-padded up to a multiple of the encoder stride.
    """
    h, w, _ = channels.shape
    x = torch.from_numpy(np.ascontiguousarray(channels.transpose(2, 0, 1), dtype=np.float32))[None]
    ph, pw = (-h) % ENCODER_STRIDE, (-w) % ENCODER_STRIDE
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode=_pad_mode(ph, pw, h, w))
    was_training = model.training
    model.eval()
    probs = model(x)[0, :, :h, :w]
    model.train(was_training)
    return probs.permute(1, 2, 0).numpy()


def upsample_scores(scores: np.ndarray, factor: float | None = None, size: tuple[int, int] | None = None):
    """Bilinearly upsample each class plane, then take the per-pixel argmax.

    Pass either a scale ``factor`` or an explicit output ``size``. A factor
    of at most 1 skips interpolation. Returns ``(labels, upsampled_scores)``.
    """
    h, w, _ = scores.shape
    if size is None:
        if factor is None:
            raise ValueError("give factor or size")
        if factor <= 1.0:
            return np.argmax(scores, axis=-1), scores
        size = (int(round(h * factor)), int(round(w * factor)))
    if tuple(size) == (h, w):
        return np.argmax(scores, axis=-1), scores
    t = torch.from_numpy(np.ascontiguousarray(scores.transpose(2, 0, 1), dtype=np.float64))[None]
    up = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
    return np.argmax(up, axis=-1), up
