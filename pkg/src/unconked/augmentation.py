"""Multiview training batches: photometric + spatial augmentation with exact
correspondence tracking, RoI estimation, and RoI-restricted point sampling.

A batch holds one reference image plus N augmented views. Anchor points are
sampled once on the reference and warped into every view; anchors that leave
a view are flagged invalid, never resampled, so correspondence ids stay
stable across views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, RoiEstimationError
from .geometry import (
    AffineRanges,
    AffineTransform,
    PointSet,
    sample_affine,
    warp_image,
    warp_points,
)

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class RoIMask:
    mask: np.ndarray  # (H, W) bool
    source: str = "estimated"  # "loaded" | "estimated"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError("RoI mask must be 2-D")

    @property
    def population(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def full(cls, shape: tuple[int, int]) -> "RoIMask":
        return cls(np.ones(shape, dtype=bool), source="estimated")


def luminance(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image.astype(np.float64)
    return image[..., :3].astype(np.float64) @ _LUMA


def estimate_roi(image: np.ndarray, luminance_threshold: float = 0.06) -> RoIMask:
    """Estimate the imaged field: bright pixels, morphologically closed,
    largest connected component, holes filled.

    Raises RoiEstimationError when nothing exceeds the threshold.
    """
    bright = luminance(image) > luminance_threshold
    if not bright.any():
        raise RoiEstimationError("no pixels above luminance threshold")
    # pad by the structure radius so closing cannot erode at the frame edge
    padded = np.pad(bright, 2, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones((5, 5)))[2:-2, 2:-2]
    labels, n = ndimage.label(closed)
    if n == 0:
        raise RoiEstimationError("RoI empty after morphological closing")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    biggest = int(np.argmax(sizes)) + 1
    mask = ndimage.binary_fill_holes(labels == biggest)
    return RoIMask(mask, source="estimated")


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    spread = maxc - minc
    safe = np.where(spread > 0, spread, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.select([maxc == r, maxc == g], [bc - gc, 2.0 + rc - bc], default=4.0 + gc - rc)
    h = np.where(spread > 0, (h / 6.0) % 1.0, 0.0)
    s = np.where(maxc > 0, spread / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h, s, maxc], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


@dataclass
class HsvRanges:
    """HSV jitter intervals: additive hue shift in degrees (wraps), and
    multiplicative saturation/value factors."""

    hue_deg: tuple[float, float] = (0.0, 0.0)
    saturation: tuple[float, float] = (1.0, 1.0)
    value: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        for name in ("hue_deg", "saturation", "value"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"invalid {name} range ({lo}, {hi})")
        if self.saturation[0] < 0 or self.value[0] < 0:
            raise ConfigError("saturation/value factors must be non-negative")


@dataclass
class NoiseSpec:
    std: float = 0.0
    prob: float = 0.0

    def __post_init__(self):
        if self.std < 0 or not 0 <= self.prob <= 1:
            raise ConfigError("invalid noise spec")


def color_jitter(
    rng: np.random.Generator,
    image: np.ndarray,
    hsv_ranges: HsvRanges,
    noise: NoiseSpec,
) -> np.ndarray:
    """Perturb an RGB image in HSV space, then maybe add Gaussian noise.

    Draw order is fixed (hue, saturation, value, noise coin, noise field)
    so a seeded generator reproduces the output. Result is clipped to [0, 1].
    """
    dh = rng.uniform(*hsv_ranges.hue_deg) / 360.0
    fs = rng.uniform(*hsv_ranges.saturation)
    fv = rng.uniform(*hsv_ranges.value)
    out = image.astype(np.float64, copy=True)
    if dh != 0.0 or fs != 1.0 or fv != 1.0:
        hsv = _rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * fs, 0.0, 1.0)
        hsv[..., 2] = np.clip(hsv[..., 2] * fv, 0.0, 1.0)
        out = _hsv_to_rgb(hsv)
    if noise.prob > 0 and rng.random() < noise.prob:
        out = out + rng.normal(0.0, noise.std, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_points(rng: np.random.Generator, roi: RoIMask, count: int) -> PointSet:
    """Draw ``count`` distinct pixel locations uniformly from the RoI."""
    flat = np.flatnonzero(roi.mask)
    if count > len(flat):
        raise ValueError(f"requested {count} points but RoI has {len(flat)} pixels")
    chosen = rng.choice(flat, size=count, replace=False)
    ys, xs = np.unravel_index(chosen, roi.mask.shape)
    coords = np.stack([xs, ys], axis=1).astype(np.float64)
    return PointSet(coords, np.arange(count, dtype=np.int64))


@dataclass
class View:
    image: np.ndarray
    affine: AffineTransform
    validity_mask: np.ndarray


@dataclass
class ViewBatch:
    """One reference image plus N augmented views with tracked points."""

    reference: np.ndarray
    views: list[View]
    anchor_points: PointSet
    per_view_points: list[PointSet]
    valid_flags: np.ndarray  # (n_views, n_points) bool
    roi: RoIMask

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_images(self) -> int:
        return len(self.views) + 1


def point_flags(
    points: PointSet, validity_mask: np.ndarray, image_size: tuple[int, int]
) -> np.ndarray:
    """A warped point is usable when it has full bilinear support inside the
    image and its nearest pixel is covered by the view's validity mask."""
    w, h = image_size
    x, y = points.coords[:, 0], points.coords[:, 1]
    with np.errstate(invalid="ignore"):
        inside = points.valid & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xi = np.clip(np.floor(np.nan_to_num(x) + 0.5).astype(int), 0, w - 1)
    yi = np.clip(np.floor(np.nan_to_num(y) + 0.5).astype(int), 0, h - 1)
    return inside & validity_mask[yi, xi]


def build_view_batch(
    image: np.ndarray,
    roi: RoIMask,
    n_views: int,
    affine_ranges: AffineRanges,
    hsv_ranges: HsvRanges,
    noise: NoiseSpec,
    point_count: int,
    aug_rng: np.random.Generator,
    sample_rng: np.random.Generator,
    interpolation: str = "bilinear",
) -> ViewBatch:
    """Assemble a multiview batch.

    Anchors are sampled once on the reference (RoI-restricted) and carried
    into each view by that view's affine; correspondences that exit a view
    are masked via ``valid_flags`` rather than resampled. Two generators keep
    spatial/photometric draws (aug_rng) independent from point sampling
    (sample_rng).
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an RGB image (H, W, 3)")
    h, w = image.shape[:2]
    if roi.mask.shape != (h, w):
        raise ValueError("RoI shape does not match image")
    anchors = sample_points(sample_rng, roi, point_count)
    views: list[View] = []
    per_view_points: list[PointSet] = []
    flags = np.zeros((n_views, point_count), dtype=bool)
    for v in range(n_views):
        affine = sample_affine(aug_rng, affine_ranges, (w, h))
        warped, mask = warp_image(affine, image, interpolation=interpolation)
        colored = color_jitter(aug_rng, warped, hsv_ranges, noise)
        colored = np.where(mask[..., None], colored, 0.0).astype(np.float32)
        pts = warp_points(affine, anchors)
        flags[v] = point_flags(pts, mask, (w, h))
        views.append(View(colored, affine, mask))
        per_view_points.append(pts)
    return ViewBatch(
        reference=image.astype(np.float32, copy=False),
        views=views,
        anchor_points=anchors,
        per_view_points=per_view_points,
        valid_flags=flags,
        roi=roi,
    )
