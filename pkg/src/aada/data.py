"""Raster samples, per-domain normalisation, resampling, augmentation and batching."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

IGNORE = 255
HEIGHT_DIVISOR = 30.0
MAX_CROP_RETRIES = 10


class DataError(ValueError):
    """Raised for malformed or insufficient raster data."""


@dataclass
class RasterSample:
    """One multi-channel tile with its label map.

    ``labels`` is ``None`` for unlabelled data. Label value 255 marks pixels
    that are excluded from losses and metrics.
    """

    channels: np.ndarray
    labels: np.ndarray | None
    gsd: float
    domain_id: str = ""

    def __post_init__(self):
        if self.channels.ndim != 3:
            raise DataError(f"channels must be HxWxN, got shape {self.channels.shape}")
        if self.labels is not None and self.labels.shape != self.channels.shape[:2]:
            raise DataError(f"labels shape {self.labels.shape} does not match channels {self.channels.shape[:2]}")
        if not self.gsd > 0:
            raise DataError(f"gsd must be positive, got {self.gsd}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[0], self.channels.shape[1]

    @property
    def n_channels(self) -> int:
        return self.channels.shape[2]


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    height_channel: int | None = None
    height_divisor: float = HEIGHT_DIVISOR

    def apply(self, channels: np.ndarray) -> np.ndarray:
        out = (channels.astype(np.float64) - self.mean) / self.std
        if self.height_channel is not None:
            out[..., self.height_channel] = channels[..., self.height_channel] / self.height_divisor
        return out.astype(np.float32)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "height_channel": self.height_channel,
            "height_divisor": self.height_divisor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), d.get("height_channel"), d.get("height_divisor", HEIGHT_DIVISOR))


@dataclass
class DomainDataset:
    samples: list[RasterSample]
    class_count: int
    normalization_stats: NormalizationStats | None = None
    height_channel: int | None = None
    name: str = ""
    # target labels kept for scoring only; training code refuses them
    labels_for_evaluation_only: bool = False

    def __post_init__(self):
        if self.samples:
            n = self.samples[0].n_channels
            for s in self.samples:
                if s.n_channels != n:
                    raise DataError("all samples must share the channel count")
                if s.labels is not None:
                    bad = (s.labels != IGNORE) & (s.labels >= self.class_count)
                    if bad.any():
                        raise DataError(f"label values must be < {self.class_count} or {IGNORE}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_channels(self) -> int:
        return self.samples[0].n_channels

    @property
    def gsd(self) -> float:
        return self.samples[0].gsd

    @property
    def labelled(self) -> bool:
        return bool(self.samples) and all(s.labels is not None for s in self.samples)

    def class_histogram(self) -> np.ndarray:
        counts = np.zeros(self.class_count, dtype=np.int64)
        for s in self.samples:
            if s.labels is None:
                continue
            lab = s.labels[s.labels != IGNORE].astype(np.int64)
            counts += np.bincount(lab, minlength=self.class_count)[: self.class_count]
        return counts

    def unlabelled(self) -> "DomainDataset":
        return replace(self, samples=[replace(s, labels=None) for s in self.samples], labels_for_evaluation_only=False)


@dataclass
class AugmentConfig:
    sigma: float = 0.1
    patch_size: int = 256
    rotation: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.patch_size <= 0 or self.patch_size % 32:
            raise ValueError("patch_size must be a positive multiple of 32")


def compute_stats(dataset: DomainDataset, height_channel: int | None = None) -> NormalizationStats:
    if not dataset.samples:
        raise DataError("cannot normalise an empty dataset")
    n = dataset.n_channels
    total = np.zeros(n)
    total_sq = np.zeros(n)
    count = 0
    for s in dataset.samples:
        x = s.channels.reshape(-1, n).astype(np.float64)
        total += x.sum(0)
        count += x.shape[0]
    mean = total / count
    for s in dataset.samples:
        x = s.channels.reshape(-1, n).astype(np.float64)
        total_sq += ((x - mean) ** 2).sum(0)
    std = np.sqrt(total_sq / count)
    for c in range(n):
        if c == height_channel:
            continue
        if std[c] < 1e-12:
            warnings.warn(f"channel {c} has zero variance; using std=1", RuntimeWarning, stacklevel=2)
            std[c] = 1.0
    if height_channel is not None:
        mean[height_channel] = 0.0
        std[height_channel] = 1.0
    return NormalizationStats(mean, std, height_channel)


def normalize_dataset(
    dataset: DomainDataset, height_channel: int | None = None, stats: NormalizationStats | None = None
) -> DomainDataset:
    """Standardise every channel with per-domain statistics.

    The height channel, if given, is divided by 30 m instead. Pass ``stats``
    to reuse frozen statistics (e.g. at inference time).
    """
    if not dataset.samples:
        raise DataError("cannot normalise an empty dataset")
    if stats is None:
        stats = compute_stats(dataset, height_channel)
    samples = [replace(s, channels=stats.apply(s.channels)) for s in dataset.samples]
    return replace(dataset, samples=samples, normalization_stats=stats, height_channel=stats.height_channel)


def _resize(arr: np.ndarray, size: tuple[int, int], order: int) -> np.ndarray:
    """Resize the first two axes; order 1 = bilinear, order 0 = nearest."""
    import torch
    import torch.nn.functional as F

    if order == 0:
        h, w = arr.shape[:2]
        rows = np.minimum((np.arange(size[0]) * (h / size[0])).astype(np.int64), h - 1)
        cols = np.minimum((np.arange(size[1]) * (w / size[1])).astype(np.int64), w - 1)
        return arr[rows][:, cols]
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def resample_sample(sample: RasterSample, gsd: float, keep_labels: bool = True) -> RasterSample:
    """Bilinear channels, nearest-neighbour labels, at a new ground sampling distance."""
    if gsd == sample.gsd:
        return sample if keep_labels else replace(sample, labels=None)
    factor = sample.gsd / gsd
    h, w = sample.shape
    size = (max(1, int(round(h * factor))), max(1, int(round(w * factor))))
    channels = _resize(sample.channels, size, order=1)
    labels = _resize(sample.labels, size, order=0) if (keep_labels and sample.labels is not None) else None
    return RasterSample(channels, labels, gsd, sample.domain_id)


def resample_dataset(dataset: DomainDataset, gsd: float, keep_labels: bool = True) -> DomainDataset:
    return replace(dataset, samples=[resample_sample(s, gsd, keep_labels) for s in dataset.samples])


def resample_to_common_gsd(
    source: DomainDataset, target: DomainDataset
) -> tuple[DomainDataset, DomainDataset, float]:
    """Bring both domains to the coarser of the two ground sampling distances.

    Target labels are dropped when the target is resampled; score predictions
    against the original-resolution target after upsampling.
    """
    gs, gt = source.gsd, target.gsd
    if not (gs > 0 and gt > 0):
        raise DataError("gsd must be positive")
    if gt > gs:
        return resample_dataset(source, gt), target, gt
    if gt < gs:
        return source, resample_dataset(target, gs, keep_labels=False), gs
    return source, target, gs


def jitter_channels(channels: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Per-channel affine jitter: scale ~ N(1, sigma), offset ~ N(0, sigma)."""
    n = channels.shape[-1]
    scale = rng.normal(1.0, sigma, size=n)
    offset = rng.normal(0.0, sigma, size=n)
    return (channels * scale + offset).astype(np.float32)


def _rotated_crop(sample: RasterSample, p: int, angle: float, rng: np.random.Generator):
    h, w = sample.shape
    c, s = math.cos(angle), math.sin(angle)
    extent = p * (abs(c) + abs(s))
    if extent + 2 > min(h, w):
        return None
    half = extent / 2 + 1
    cy = rng.uniform(half, h - half)
    cx = rng.uniform(half, w - half)
    offs = np.arange(p) - (p - 1) / 2
    v, u = np.meshgrid(offs, offs, indexing="ij")
    rows = cy + c * v - s * u
    cols = cx + s * v + c * u
    coords = np.stack([rows, cols])
    channels = np.stack(
        [ndimage.map_coordinates(sample.channels[..., k], coords, order=1, mode="nearest") for k in range(sample.n_channels)],
        axis=-1,
    )
    labels = None
    if sample.labels is not None:
        labels = sample.labels[np.clip(np.rint(rows).astype(int), 0, h - 1), np.clip(np.rint(cols).astype(int), 0, w - 1)]
    return channels.astype(np.float32), labels


def _axis_crop(sample: RasterSample, p: int, rng: np.random.Generator):
    h, w = sample.shape
    y = int(rng.integers(0, h - p + 1))
    x = int(rng.integers(0, w - p + 1))
    labels = None if sample.labels is None else sample.labels[y : y + p, x : x + p].copy()
    return sample.channels[y : y + p, x : x + p].copy(), labels


def augment_patch(sample: RasterSample, cfg: AugmentConfig, rng: np.random.Generator) -> RasterSample:
    """Crop a randomly placed, randomly rotated patch and jitter its channels."""
    p = cfg.patch_size
    h, w = sample.shape
    if h < p or w < p:
        raise DataError(f"sample {h}x{w} smaller than patch size {p}")
    crop = None
    if cfg.rotation:
        for _ in range(MAX_CROP_RETRIES):
            crop = _rotated_crop(sample, p, rng.uniform(0.0, 2 * math.pi), rng)
            if crop is not None:
                break
    if crop is None:
        crop = _axis_crop(sample, p, rng)
    channels, labels = crop
    if cfg.sigma > 0:
        channels = jitter_channels(channels, cfg.sigma, rng)
    return RasterSample(channels, labels, sample.gsd, sample.domain_id)


def make_batch(
    dataset: DomainDataset, batch_size: int, cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray | None]:
    """Draw ``batch_size`` augmented patches.

    Returns images as (B, N, P, P) float32 and labels as (B, P, P) int64, or
    ``None`` for labels when the dataset is unlabelled.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not dataset.samples:
        raise DataError("empty dataset")
    patches = [augment_patch(dataset.samples[int(rng.integers(len(dataset)))], cfg, rng) for _ in range(batch_size)]
    images = np.stack([pt.channels.transpose(2, 0, 1) for pt in patches]).astype(np.float32)
    if any(pt.labels is None for pt in patches):
        return images, None
    labels = np.stack([pt.labels for pt in patches]).astype(np.int64)
    return images, labels


def worker_rng(seed: int, worker_id: int) -> np.random.Generator:
    """Independent stream for a data-loading worker."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(worker_id,)))


# -- on-disk layout ---------------------------------------------------------


@dataclass
class DomainMeta:
    gsd: float
    class_count: int
    channel_names: list[str] = field(default_factory=list)
    height_channel: int | None = None
    extra: dict = field(default_factory=dict)


def save_domain(dataset: DomainDataset, directory: str | Path, channel_names: list[str] | None = None, extra: dict | None = None) -> Path:
    """Write ``<tile>.img.npy`` / ``<tile>.lbl.npy`` pairs plus ``meta.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(dataset.samples):
        np.save(directory / f"tile{i:04d}.img.npy", s.channels, allow_pickle=False)
        if s.labels is not None:
            np.save(directory / f"tile{i:04d}.lbl.npy", s.labels, allow_pickle=False)
    meta = {
        "gsd": dataset.gsd,
        "class_count": dataset.class_count,
        "channel_names": channel_names or [f"band{k}" for k in range(dataset.n_channels)],
        "height_channel": dataset.height_channel,
        "labels_for_evaluation_only": dataset.labels_for_evaluation_only,
    }
    if dataset.normalization_stats is not None:
        meta["normalization_stats"] = dataset.normalization_stats.to_dict()
    if extra:
        meta.update(extra)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_meta(directory: str | Path) -> dict:
    path = Path(directory) / "meta.json"
    if not path.is_file():
        raise DataError(f"missing {path}")
    return json.loads(path.read_text())


def load_domain(directory: str | Path, require_labels: bool = False) -> DomainDataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    meta = load_meta(directory)
    samples = []
    for img_path in sorted(directory.glob("*.img.npy")):
        tile = img_path.name[: -len(".img.npy")]
        lbl_path = directory / f"{tile}.lbl.npy"
        labels = np.load(lbl_path) if lbl_path.is_file() else None
        if labels is None and require_labels:
            raise DataError(f"missing labels for tile {tile} in {directory}")
        samples.append(RasterSample(np.load(img_path), labels, float(meta["gsd"]), directory.name))
    if not samples:
        raise DataError(f"no *.img.npy tiles in {directory}")
    stats = meta.get("normalization_stats")
    return DomainDataset(
        samples,
        int(meta["class_count"]),
        NormalizationStats.from_dict(stats) if stats else None,
        meta.get("height_channel"),
        name=directory.name,
        labels_for_evaluation_only=bool(meta.get("labels_for_evaluation_only", False)),
    )
