"""Procedural two-domain raster scenes with exact labels.

Scenes contain sealed ground, buildings, low vegetation, trees and a rare
vehicle class, rendered as three spectral bands plus a height band in metres.
The target domain can differ by a channel-wise affine transform, per-class
colour and texture changes, and skewed class frequencies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import DataError, DomainDataset, RasterSample

CLASS_NAMES = ("sealed_ground", "building", "low_vegetation", "high_vegetation", "vehicle")
GROUND, BUILDING, LOW_VEG, TREE, VEHICLE = range(5)
CHANNEL_NAMES = ["red", "green", "nir", "ndsm"]
HEIGHT_CHANNEL = 3
TILE_SIZE = 512
NOMINAL_GSD = 0.2

DEFAULT_FREQUENCIES = (0.30, 0.24, 0.26, 0.185, 0.015)


@dataclass
class ClassAppearance:
    color: tuple[float, float, float]
    texture: float
    grain: float


SOURCE_LOOK = {
    GROUND: ClassAppearance((0.45, 0.44, 0.30), 0.02, 3.0),
    BUILDING: ClassAppearance((0.55, 0.35, 0.35), 0.02, 1.0),
    LOW_VEG: ClassAppearance((0.25, 0.50, 0.70), 0.05, 1.5),
    TREE: ClassAppearance((0.15, 0.35, 0.60), 0.09, 1.0),
    VEHICLE: ClassAppearance((0.80, 0.80, 0.75), 0.02, 1.0),
}


@dataclass
class SynthShiftConfig:
    """Description of a synthetic source/target pair.

    ``class_colors`` and ``texture_scale`` override the source appearance of
    individual classes in the target; ``frequency_scale`` multiplies the
    target area fraction of individual classes before renormalisation.
    """

    class_count: int = 5
    rare_fraction: float = 0.015
    frequencies: tuple[float, ...] = DEFAULT_FREQUENCIES
    channel_mix: tuple[tuple[float, ...], ...] | None = None
    channel_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    class_colors: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    texture_scale: dict[int, float] = field(default_factory=dict)
    frequency_scale: dict[int, float] = field(default_factory=dict)
    source_tiles: int = 8
    target_tiles: int = 8
    tile_size: int = TILE_SIZE
    gsd: float = NOMINAL_GSD
    name: str = "custom"

    def __post_init__(self):
        if self.class_count < 3 or self.class_count > len(CLASS_NAMES):
            raise ValueError(f"class_count must be in [3, {len(CLASS_NAMES)}]")
        if not 0.0 < self.rare_fraction < 0.02:
            raise ValueError("rare_fraction must be in (0, 0.02)")

    @classmethod
    def preset(cls, name: str, **overrides) -> "SynthShiftConfig":
        if name == "none":
            cfg = cls(name=name)
        elif name == "radiometric":
            cfg = cls(
                name=name,
                channel_mix=((0.65, 0.0, 0.35), (0.35, 0.65, 0.0), (0.0, 0.35, 0.65)),
                channel_gain=(1.2, 0.9, 0.85),
                channel_offset=(0.05, 0.0, -0.05),
                class_colors={LOW_VEG: (0.30, 0.47, 0.62), TREE: (0.20, 0.33, 0.55)},
                texture_scale={TREE: 0.7, LOW_VEG: 1.4},
            )
        elif name == "skewed":
            cfg = cls.preset("radiometric", frequency_scale={LOW_VEG: 5.0, BUILDING: 0.2})
            cfg.name = name
        else:
            raise ValueError(f"unknown shift preset {name!r}")
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def class_fractions(self, target: bool) -> np.ndarray:
        f = np.asarray(self.frequencies[: self.class_count], dtype=np.float64)
        rare = self.class_count - 1
        if target:
            f = f * np.array([self.frequency_scale.get(c, 1.0) for c in range(self.class_count)])
        common = f[:rare] / f[:rare].sum() * (1.0 - self.rare_fraction)
        return np.append(common, self.rare_fraction)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "class_count": self.class_count,
            "rare_fraction": self.rare_fraction,
            "frequencies": list(self.frequencies),
            "channel_mix": None if self.channel_mix is None else [list(r) for r in self.channel_mix],
            "channel_gain": list(self.channel_gain),
            "channel_offset": list(self.channel_offset),
            "class_colors": {str(k): list(v) for k, v in self.class_colors.items()},
            "texture_scale": {str(k): v for k, v in self.texture_scale.items()},
            "frequency_scale": {str(k): v for k, v in self.frequency_scale.items()},
            "source_tiles": self.source_tiles,
            "target_tiles": self.target_tiles,
            "tile_size": self.tile_size,
            "gsd": self.gsd,
        }


def _smooth_noise(rng: np.random.Generator, shape, grain: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), grain, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _rect_mask(shape, cy, cx, half_h, half_w, angle):
    h, w = shape
    r0, r1 = max(0, int(cy - half_h - half_w)), min(h, int(cy + half_h + half_w) + 1)
    c0, c1 = max(0, int(cx - half_h - half_w)), min(w, int(cx + half_h + half_w) + 1)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    ca, sa = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = ca * dy + sa * dx
    v = -sa * dy + ca * dx
    return (slice(r0, r1), slice(c0, c1)), (np.abs(u) <= half_h) & (np.abs(v) <= half_w)


def render_labels(fractions: np.ndarray, size: int, rng: np.random.Generator):
    """Place objects until each class reaches its area fraction.

    Returns the label map and the nDSM in metres.
    """
    l = len(fractions)
    shape = (size, size)
    area = size * size
    labels = np.full(shape, -1, dtype=np.int64)
    height = np.zeros(shape)
    quota = np.rint(np.asarray(fractions) * area).astype(np.int64)

    def paint(cls, max_tries, draw):
        count = 0
        for _ in range(max_tries):
            if count >= quota[cls]:
                break
            sl, mask, h = draw()
            free = mask & (labels[sl] < 0)
            room = quota[cls] - count
            n_free = int(free.sum())
            if n_free == 0 or n_free > 1.5 * room + 40:
                continue
            labels[sl][free] = cls
            height[sl][free] = h[free] if isinstance(h, np.ndarray) else h
            count += n_free

    if l > BUILDING and BUILDING < l - 1:

        def building():
            cy, cx = rng.uniform(0, size, 2)
            hh, hw = rng.uniform(8, 22, 2)
            sl, mask = _rect_mask(shape, cy, cx, hh, hw, rng.uniform(0, math.pi))
            return sl, mask, rng.uniform(6.0, 15.0)

        paint(BUILDING, 4000, building)

    if l > TREE and TREE < l - 1:

        def tree():
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(5, 13)
            r0, r1 = max(0, int(cy - r)), min(size, int(cy + r) + 1)
            c0, c1 = max(0, int(cx - r)), min(size, int(cx + r) + 1)
            yy, xx = np.mgrid[r0:r1, c0:c1]
            d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (r * r)
            top = rng.uniform(5.0, 18.0)
            return (slice(r0, r1), slice(c0, c1)), d2 <= 1.0, top * np.sqrt(np.clip(1 - d2, 0, 1)) + 1.0

        paint(TREE, 20000, tree)

    rare = l - 1

    def vehicle():
        cy, cx = rng.uniform(4, size - 4, 2)
        sl, mask = _rect_mask(shape, cy, cx, 5.0, 2.5, rng.choice([0.0, math.pi / 2]) + rng.normal(0, 0.1))
        return sl, mask, 1.5

    paint(rare, 20000, vehicle)

    # low vegetation takes the highest values of a smooth field among the
    # free pixels; ground fills the rest
    free_idx = np.flatnonzero(labels < 0)
    if LOW_VEG < rare:
        field_ = _smooth_noise(rng, shape, 12.0)
        order = np.argsort(-field_.flat[free_idx], kind="stable")
        labels.flat[free_idx[order[: min(quota[LOW_VEG], free_idx.size)]]] = LOW_VEG
    labels[labels < 0] = GROUND
    return labels, height


def render_appearance(
    labels: np.ndarray, height: np.ndarray, cfg: SynthShiftConfig, target: bool, rng: np.random.Generator
) -> np.ndarray:
    shape = labels.shape
    img = np.zeros(shape + (3,))
    for cls in range(cfg.class_count):
        look = SOURCE_LOOK[cls if cls < cfg.class_count - 1 else VEHICLE]
        mask = labels == cls
        if not mask.any():
            continue
        color = np.asarray(look.color)
        texture = look.texture
        if target:
            color = np.asarray(cfg.class_colors.get(cls, look.color))
            texture *= cfg.texture_scale.get(cls, 1.0)
        tex = _smooth_noise(rng, shape, look.grain)
        for k in range(3):
            img[..., k][mask] = color[k] + texture * tex[mask] * (1.0 + 0.3 * k)
    # per-object colour variation for buildings and vehicles
    for cls in (BUILDING, cfg.class_count - 1):
        if cls >= cfg.class_count:
            continue
        comp, n = ndimage.label(labels == cls)
        if n:
            jitter = rng.normal(0, 0.05 if cls == BUILDING else 0.15, size=(n + 1, 3))
            jitter[0] = 0
            img += jitter[comp]
    img += rng.normal(0, 0.01, img.shape)
    if target:
        if cfg.channel_mix is not None:
            img = img @ np.asarray(cfg.channel_mix, dtype=np.float64).T
        img = img * np.asarray(cfg.channel_gain) + np.asarray(cfg.channel_offset)
    ndsm = height + rng.normal(0, 0.3, shape)
    return np.concatenate([img, ndsm[..., None]], axis=-1).astype(np.float32)


def render_tile(cfg: SynthShiftConfig, target: bool, rng: np.random.Generator) -> RasterSample:
    labels, height = render_labels(cfg.class_fractions(target), cfg.tile_size, rng)
    channels = render_appearance(labels, height, cfg, target, rng)
    return RasterSample(channels, labels.astype(np.uint8), cfg.gsd, "target" if target else "source")


def render_domain(cfg: SynthShiftConfig, target: bool, n_tiles: int, rng: np.random.Generator) -> DomainDataset:
    samples = [render_tile(cfg, target, rng) for _ in range(n_tiles)]
    return DomainDataset(
        samples,
        cfg.class_count,
        height_channel=HEIGHT_CHANNEL,
        name="target" if target else "source",
        labels_for_evaluation_only=target,
    )


def synth_domain_pair(shift: SynthShiftConfig, rng: np.random.Generator) -> tuple[DomainDataset, DomainDataset]:
    """Render a labelled source domain and a shifted target domain.

    Target labels are flagged evaluation-only; training routines refuse to
    read them.
    """
    if not 3 <= shift.class_count <= len(CLASS_NAMES):
        raise DataError(f"invalid class count {shift.class_count}")
    source = render_domain(shift, False, shift.source_tiles, rng)
    target = render_domain(shift, True, shift.target_tiles, rng)
    return source, target
