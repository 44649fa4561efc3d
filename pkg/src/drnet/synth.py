"""Synthetic speckled image-pair generation and patch extraction.

Real multi-temporal SAR scenes are replaced by a controlled model: a
smooth reflectance field, an elliptical change region whose reflectance is
multiplied by a contrast factor in the second acquisition, and independent
multiplicative gamma speckle (mean 1, shape = number of looks) on each
acquisition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, GenerationError, ShapeError
from .tensor import Rng


@dataclass
class ImagePair:
    """Two co-registered non-negative single-channel intensity images."""

    i1: np.ndarray
    i2: np.ndarray
    looks: float = 0.0
    change_fraction: float = 0.0

    def __post_init__(self):
        if self.i1.shape != self.i2.shape:
            raise ShapeError(
                f"pair extents differ: {self.i1.shape} vs {self.i2.shape}"
            )
        if (self.i1 < 0).any() or (self.i2 < 0).any():
            raise ArgumentError("intensities must be >= 0")

    @property
    def shape(self):
        return self.i1.shape


@dataclass
class PatchSet:
    """Fixed-size 2-channel patches with labels and source coordinates."""

    patches: np.ndarray  # (B, 2, p, p)
    labels: np.ndarray   # (B,) in {0, 1}
    coords: np.ndarray   # (B, 2) as (row, col)


def _smooth_field(rng: Rng, height: int, width: int) -> np.ndarray:
    """Bilinearly upsampled coarse uniform grid (8x), min-max scaled later."""
    factor = 8
    gh = (height + factor - 1) // factor + 1
    gw = (width + factor - 1) // factor + 1
    grid = rng.uniform(gh * gw).reshape(gh, gw)
    ys = np.arange(height) / factor
    xs = np.arange(width) / factor
    y0 = np.minimum(ys.astype(np.int64), gh - 2)
    x0 = np.minimum(xs.astype(np.int64), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0[:, None], x0[None, :]]
    g01 = grid[y0[:, None], x0[None, :] + 1]
    g10 = grid[y0[:, None] + 1, x0[None, :]]
    g11 = grid[y0[:, None] + 1, x0[None, :] + 1]
    return (
        (1 - fy) * (1 - fx) * g00
        + (1 - fy) * fx * g01
        + fy * (1 - fx) * g10
        + fy * fx * g11
    )


def _ellipse(height: int, width: int, cy: float, cx: float, a: float, b: float,
             theta: float) -> np.ndarray:
    yy = np.arange(height)[:, None] - cy
    xx = np.arange(width)[None, :] - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * xx + st * yy
    v = -st * xx + ct * yy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _grow_mask(rng: Rng, height: int, width: int, fraction: float,
               max_attempts: int = 500) -> np.ndarray:
    lo = 0.8 * fraction
    hi = 1.2 * fraction
    mask = np.zeros((height, width), dtype=bool)
    target_px = fraction * height * width
    for _ in range(max_attempts):
        frac = mask.mean()
        if frac >= lo:
            return mask
        remaining = max((fraction - frac) * height * width, 9.0)
        base_radius = np.sqrt(remaining / np.pi)
        draws = rng.uniform(5)
        cy = draws[0] * (height - 1)
        cx = draws[1] * (width - 1)
        a = np.clip(base_radius * (0.5 + 0.6 * draws[2]), 2.0, min(height, width) / 3)
        b = np.clip(base_radius * (0.5 + 0.6 * draws[3]), 2.0, min(height, width) / 3)
        theta = draws[4] * np.pi
        candidate = mask | _ellipse(height, width, cy, cx, a, b, theta)
        if candidate.mean() <= hi:
            mask = candidate
    raise GenerationError(
        f"could not reach change fraction {fraction} within {max_attempts} attempts"
    )


def generate_pair(height: int, width: int, change_fraction: float, looks: float,
                  contrast: float, rng: Rng):
    """Synthesise (ImagePair, change mask); deterministic given the rng.

    The second image multiplies the masked region's reflectance by
    ``contrast`` before applying its own speckle, so the pair differs
    statistically only inside the mask.
    """
    if height < 32 or width < 32:
        raise ArgumentError("extents must be >= 32")
    if not 0.0 < change_fraction <= 0.3:
        raise ArgumentError(
            f"change_fraction must be in (0, 0.3], got {change_fraction}"
        )
    if looks < 1:
        raise ArgumentError(f"looks must be >= 1, got {looks}")
    if contrast < 1:
        raise ArgumentError(f"contrast must be >= 1, got {contrast}")

    field = _smooth_field(rng, height, width)
    lo, hi = field.min(), field.max()
    span = hi - lo if hi > lo else 1.0
    base = 20.0 + 180.0 * (field - lo) / span
    mask = _grow_mask(rng, height, width, change_fraction)
    speckle1 = rng.gamma(looks, height * width).reshape(height, width) / looks
    speckle2 = rng.gamma(looks, height * width).reshape(height, width) / looks
    i1 = base * speckle1
    base2 = np.where(mask, base * contrast, base)
    i2 = base2 * speckle2
    pair = ImagePair(i1, i2, looks=looks, change_fraction=change_fraction)
    return pair, mask.astype(np.uint8)


def extract_patches(pair: ImagePair, coords: np.ndarray, patch_size: int,
                    labels: np.ndarray | None = None) -> PatchSet:
    """Edge-replicated 2-channel patches centred on the coordinates.

    Intensities are rescaled to [0, 1] by the pair's global maximum so both
    channels share one scale.
    """
    if patch_size % 2 == 0 or patch_size < 1:
        raise ArgumentError(f"patch size must be odd and >= 1, got {patch_size}")
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coords must be (N, 2), got {coords.shape}")
    h, w = pair.shape
    bad = (
        (coords[:, 0] < 0) | (coords[:, 0] >= h)
        | (coords[:, 1] < 0) | (coords[:, 1] >= w)
    )
    if bad.any():
        first = coords[np.nonzero(bad)[0][0]]
        raise ArgumentError(f"coordinate {tuple(first)} outside image {h}x{w}")
    half = patch_size // 2
    global_max = max(float(pair.i1.max()), float(pair.i2.max()))
    scale = 1.0 / global_max if global_max > 0 else 1.0
    p1 = np.pad(pair.i1, half, mode="edge") * scale
    p2 = np.pad(pair.i2, half, mode="edge") * scale
    rows = coords[:, 0][:, None] + np.arange(patch_size)[None, :]
    cols = coords[:, 1][:, None] + np.arange(patch_size)[None, :]
    ch1 = p1[rows[:, :, None], cols[:, None, :]]
    ch2 = p2[rows[:, :, None], cols[:, None, :]]
    patches = np.stack([ch1, ch2], axis=1)
    if labels is None:
        labels = np.zeros(coords.shape[0], dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (coords.shape[0],):
        raise ShapeError("labels must be one per coordinate")
    return PatchSet(patches, labels, coords)
