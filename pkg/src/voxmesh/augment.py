"""Tumor remove/synthesize augmentation over VolumeRecords.

The pipeline measures the mean intensity difference between tumor and healthy
liver, "removes" the real tumor by subtracting it, then paints new tumors:
random ellipsoids inside the liver, intensity-shifted by the measured delta,
with optionally blurred boundaries.  Background voxels are never touched,
neither intensities nor labels, and with a fixed seed the pipeline is a pure
function of (record, config).

The applied delta is snapped to 1/256 steps before use: CT intensities are
integer-valued, so the quantized shift keeps sigma=0 synthesis exactly
invertible by a later remove at the same delta (full-precision shifts would
lose the last mantissa bit on roughly half the voxels).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .data_io import VolumeRecord
from .errors import AugmentError

DELTA_STEP = 1.0 / 256.0


@dataclass(frozen=True)
class SynthConfig:
    """How synthetic tumors are drawn: count range, per-axis radii, blur, seed."""

    n_tumors: tuple = (1, 3)
    radius_range: tuple = (2.5, 4.5)  # radii below ~1.7*sigma blur away entirely
    blur_sigma: float = 1.5
    seed: int = 0
    label_threshold: float = 0.5
    default_delta: float | None = None

    def __post_init__(self):
        if self.n_tumors[0] < 1 or self.n_tumors[1] < self.n_tumors[0]:
            raise AugmentError(f"bad tumor count range {self.n_tumors}")
        if self.radius_range[0] < 1.0:
            raise AugmentError(f"radii must be >= 1 voxel, got {self.radius_range}")


def quantize_delta(delta):
    """Snap an intensity shift to 1/256 steps (see module docstring)."""
    return float(np.float32(round(delta / DELTA_STEP) * DELTA_STEP))


def intensity_delta(rec):
    """mean(image | tumor) - mean(image | healthy liver)."""
    tumor = rec.labels == 2
    liver = rec.labels == 1
    if not tumor.any():
        raise AugmentError(f"{rec.id}: no tumor voxels to measure")
    if not liver.any():
        raise AugmentError(f"{rec.id}: no non-tumor liver voxels to measure")
    t = float(rec.image[tumor].sum(dtype=np.float64) / tumor.sum())
    l = float(rec.image[liver].sum(dtype=np.float64) / liver.sum())
    return t - l


def remove_tumor(rec, delta):
    """Subtract ``delta`` on tumor voxels and relabel them as liver.

    Every other voxel is bitwise untouched.
    """
    tumor = rec.labels == 2
    image = rec.image.copy()
    image[tumor] -= np.float32(delta)
    labels = rec.labels.copy()
    labels[tumor] = 1
    return VolumeRecord(image, labels, rec.id)


def _ellipsoid(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def synthesize_tumor(rec, delta, cfg):
    """Paint random tumors inside the liver of a tumor-free record.

    Samples ellipsoid centers uniformly over liver voxels and per-axis radii
    uniformly from the configured range; the union is clipped to the liver.
    The soft weight is the (optionally) blurred binary mask, clamped to [0,1]
    and re-clipped to the liver, so voxels outside the liver are bitwise
    unchanged in both image and labels.
    """
    if (rec.labels == 2).any():
        raise AugmentError(f"{rec.id}: record already has tumor; remove it first")
    liver = rec.labels == 1
    if not liver.any():
        raise AugmentError(f"{rec.id}: empty liver, nowhere to synthesize")
    rng = np.random.default_rng(cfg.seed)
    liver_idx = np.argwhere(liver)
    n = int(rng.integers(cfg.n_tumors[0], cfg.n_tumors[1] + 1))
    shape = rec.labels.shape
    mask = np.zeros(shape, dtype=bool)
    for _ in range(n):
        for attempt in range(10):
            c = liver_idx[rng.integers(len(liver_idx))]
            radii = rng.uniform(cfg.radius_range[0], cfg.radius_range[1], 3)
            ball = _ellipsoid(shape, c, radii) & liver
            if ball.any():
                mask |= ball
                break
        else:  # pragma: no cover - centers lie in the liver, so balls are never empty
            warnings.warn(f"{rec.id}: degenerate synthetic tumor skipped after 10 tries")

    if cfg.blur_sigma > 0:
        w = gaussian_filter(mask.astype(np.float32), sigma=cfg.blur_sigma, mode="constant")
        w = np.clip(w, 0.0, 1.0)
        w *= liver
    else:
        w = mask.astype(np.float32)
    image = rec.image + np.float32(delta) * w
    labels = rec.labels.copy()
    grown = (w >= cfg.label_threshold) & liver
    if not grown.any():
        warnings.warn(
            f"{rec.id}: synthetic tumor vanished below the label threshold "
            f"(radii {cfg.radius_range} too small for sigma {cfg.blur_sigma})"
        )
    labels[grown] = 2
    return VolumeRecord(image.astype(np.float32), labels, rec.id)


def augment_pipeline(rec, cfg):
    """Measure delta, remove the real tumor, synthesize new ones.

    Tumor-free inputs use ``cfg.default_delta`` (an error if unset).  The
    applied delta is quantized; see :func:`quantize_delta`.
    """
    if (rec.labels == 2).any():
        delta = intensity_delta(rec)
    elif cfg.default_delta is not None:
        delta = cfg.default_delta
    else:
        raise AugmentError(
            f"{rec.id}: tumor-free record and no default_delta configured"
        )
    delta = quantize_delta(delta)
    cleaned = remove_tumor(rec, delta)
    return synthesize_tumor(cleaned, delta, cfg)


def with_seed(cfg, seed):
    return replace(cfg, seed=int(seed))
