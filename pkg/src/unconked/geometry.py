"""Planar transforms, point/image warping, and robust homography estimation.

Coordinates are (x, y) in pixel units with x along image columns and y along
rows; pixel centers sit at integer coordinates, so ``image[y, x]`` is the
sample at (x, y). Affine matrices are 2x3, homographies 3x3, both acting on
column vectors (x, y, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError

_MIN_AFFINE_DET = 1e-8
_MIN_HOMOGRAPHY_DET = 1e-10
_W_EPS = 1e-12


@dataclass(frozen=True)
class AffineTransform:
    """2x3 affine map in pixel units.

    ``image_size`` records the (width, height) the transform was sampled
    for; it is metadata only and may be None for hand-built transforms.
    """

    matrix: np.ndarray
    image_size: Optional[tuple[int, int]] = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) <= _MIN_AFFINE_DET:
            raise ValueError("affine transform is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, image_size: Optional[tuple[int, int]] = None) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), image_size)

    @classmethod
    def from_params(
        cls,
        rotation_deg: float = 0.0,
        shear_deg: tuple[float, float] = (0.0, 0.0),
        scale: float = 1.0,
        translation: tuple[float, float] = (0.0, 0.0),
        center: tuple[float, float] = (0.0, 0.0),
        image_size: Optional[tuple[int, int]] = None,
    ) -> "AffineTransform":
        """Compose rotation @ shear @ scale about ``center``, then translate."""
        th = math.radians(rotation_deg)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        shr = np.array(
            [[1.0, math.tan(math.radians(shear_deg[0]))],
             [math.tan(math.radians(shear_deg[1])), 1.0]]
        )
        lin = rot @ shr @ (scale * np.eye(2))
        c = np.asarray(center, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64) + c - lin @ c
        return cls(np.hstack([lin, t[:, None]]), image_size)

    def as_3x3(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.as_3x3())
        return AffineTransform(inv[:2, :], self.image_size)

    def apply(self, coords: np.ndarray) -> np.ndarray:
        """Map an (N, 2) coordinate array through the transform."""
        coords = np.asarray(coords, dtype=np.float64)
        return coords @ self.matrix[:, :2].T + self.matrix[:, 2]


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, normalized so the bottom-right entry is 1 when
    that entry is nonzero."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography matrix must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) <= _MIN_HOMOGRAPHY_DET:
            raise ValueError("homography is singular")
        if abs(m[2, 2]) > _W_EPS:
            m = m / m[2, 2]
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def from_affine(cls, affine: AffineTransform) -> "Homography":
        return cls(affine.as_3x3())

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map (N, 2) coords with homogeneous division.

        Returns (mapped_coords, valid) where valid is False for points whose
        homogeneous w is ~0; their coordinates are set to NaN, not dropped.
        """
        coords = np.asarray(coords, dtype=np.float64)
        homog = np.hstack([coords, np.ones((len(coords), 1))])
        q = homog @ self.matrix.T
        w = q[:, 2]
        valid = np.abs(w) > _W_EPS
        out = np.full_like(coords, np.nan)
        out[valid] = q[valid, :2] / w[valid, None]
        return out, valid

    def orientation_preserved(self) -> bool:
        return float(np.linalg.det(self.matrix[:2, :2])) > 0.0

    def anisotropy(self) -> float:
        """Ratio of max/min singular value of the upper-left 2x2 block."""
        s = np.linalg.svd(self.matrix[:2, :2], compute_uv=False)
        return float(s[0] / max(s[-1], 1e-12))

    def is_plausible(self, max_anisotropy: float = 20.0) -> bool:
        """Degeneracy screen: orientation preserved, bounded anisotropy."""
        return self.orientation_preserved() and self.anisotropy() < max_anisotropy

    def to_flat_string(self) -> str:
        """Row-major serialization: 9 whitespace-separated decimals."""
        return " ".join(f"{v:.17g}" for v in self.matrix.ravel())

    @classmethod
    def from_flat_string(cls, text: str) -> "Homography":
        vals = [float(t) for t in text.split()]
        if len(vals) != 9:
            raise ValueError(f"expected 9 values, got {len(vals)}")
        return cls(np.array(vals).reshape(3, 3))


@dataclass
class PointSet:
    """Planar points with stable correspondence ids.

    ``valid`` marks points that survived warping; invalid points keep their
    id but carry NaN coordinates.
    """

    coords: np.ndarray
    ids: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if len(self.ids) != len(self.coords):
            raise ValueError("coords and ids length mismatch")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("point ids must be unique within a set")
        if self.valid is None:
            self.valid = np.ones(len(self.coords), dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
            if len(self.valid) != len(self.coords):
                raise ValueError("valid mask length mismatch")

    def __len__(self) -> int:
        return len(self.coords)

    @classmethod
    def from_coords(cls, coords: np.ndarray) -> "PointSet":
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        return cls(coords, np.arange(len(coords), dtype=np.int64))


@dataclass
class AffineRanges:
    """Uniform sampling intervals for random affine parameters.

    ``translate_frac`` is the signed fraction of image width/height; shear is
    drawn independently per axis. A zero-width interval at the identity value
    for every field yields the identity transform.
    """

    rotation_deg: tuple[float, float] = (0.0, 0.0)
    translate_frac: tuple[float, float] = (0.0, 0.0)
    scale: tuple[float, float] = (1.0, 1.0)
    shear_deg: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for name in ("rotation_deg", "translate_frac", "scale", "shear_deg"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ConfigError(f"{name} range must be finite")
            if lo > hi:
                raise ConfigError(f"{name} range has min > max: ({lo}, {hi})")
        if self.scale[0] <= 0:
            raise ConfigError("scale range must be positive")

    @classmethod
    def symmetric(cls, rotation=0.0, translate=0.0, scale=(1.0, 1.0), shear=0.0):
        return cls(
            rotation_deg=(-rotation, rotation),
            translate_frac=(-translate, translate),
            scale=tuple(scale),
            shear_deg=(-shear, shear),
        )


def sample_affine(
    rng: np.random.Generator,
    ranges: AffineRanges,
    image_size: tuple[int, int],
) -> AffineTransform:
    """Draw a random affine about the image center.

    Parameters are drawn uniformly in a fixed order (rotation, shear x/y,
    scale, translation x/y) so a seeded generator reproduces the transform.
    """
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ConfigError(f"image_size must be positive, got {image_size}")
    rot = rng.uniform(*ranges.rotation_deg)
    shear = (rng.uniform(*ranges.shear_deg), rng.uniform(*ranges.shear_deg))
    scale = rng.uniform(*ranges.scale)
    tx = rng.uniform(*ranges.translate_frac) * w
    ty = rng.uniform(*ranges.translate_frac) * h
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    return AffineTransform.from_params(
        rotation_deg=rot, shear_deg=shear, scale=scale,
        translation=(tx, ty), center=center, image_size=(w, h),
    )


def warp_points(transform: AffineTransform | Homography, points: PointSet) -> PointSet:
    """Map a PointSet through an affine or homography; ids are preserved.

    Points whose homogeneous w vanishes are flagged invalid (NaN coords),
    never dropped.
    """
    if isinstance(transform, AffineTransform):
        coords = transform.apply(points.coords)
        valid = points.valid.copy()
    else:
        coords, ok = transform.apply(points.coords)
        valid = points.valid & ok
    return PointSet(coords, points.ids.copy(), valid)


def _inverse_map_grid(transform, out_size: tuple[int, int]):
    """Backward-map every output pixel center; returns (xs, ys, defined)."""
    w, h = out_size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    flat = np.stack([xs.ravel(), ys.ravel()], axis=1)
    if isinstance(transform, AffineTransform):
        src = transform.inverse().apply(flat)
        defined = np.ones(len(flat), dtype=bool)
    else:
        src, defined = transform.inverse().apply(flat)
    sx = src[:, 0].reshape(h, w)
    sy = src[:, 1].reshape(h, w)
    return sx, sy, defined.reshape(h, w)


def bilinear_lookup(image: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinear sample at real-valued (xs, ys); returns (values, in_bounds).

    Out-of-bounds samples come back as 0. A sample is in-bounds when it lies
    within [0, W-1] x [0, H-1].
    """
    h, w = image.shape[:2]
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1) & np.isfinite(xs) & np.isfinite(ys)
    x = np.clip(np.nan_to_num(xs), 0, w - 1)
    y = np.clip(np.nan_to_num(ys), 0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    vals = (
        image[y0, x0] * (1 - fx) * (1 - fy)
        + image[y0, x1] * fx * (1 - fy)
        + image[y1, x0] * (1 - fx) * fy
        + image[y1, x1] * fx * fy
    )
    vals = np.where(valid[..., None] if image.ndim == 3 else valid, vals, 0.0)
    return vals.astype(image.dtype, copy=False), valid


def nearest_lookup(image: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Nearest-neighbor sample (half-up rounding); returns (values, in_bounds)."""
    h, w = image.shape[:2]
    xi = np.floor(np.nan_to_num(xs) + 0.5).astype(np.intp)
    yi = np.floor(np.nan_to_num(ys) + 0.5).astype(np.intp)
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & np.isfinite(xs) & np.isfinite(ys)
    xi = np.clip(xi, 0, w - 1)
    yi = np.clip(yi, 0, h - 1)
    vals = image[yi, xi]
    vals = np.where(valid[..., None] if image.ndim == 3 else valid, vals, 0)
    return vals.astype(image.dtype, copy=False), valid


def warp_image(
    transform: AffineTransform | Homography,
    image: np.ndarray,
    out_size: Optional[tuple[int, int]] = None,
    interpolation: str = "bilinear",
) -> tuple[np.ndarray, np.ndarray]:
    """Warp an image by backward mapping.

    Output pixel p takes the value at transform^-1(p); pixels whose source
    falls outside the input are 0 and marked False in the returned validity
    mask.

    Returns:
        (warped, validity_mask) with warped shaped like the input (up to
        out_size) and validity_mask boolean (H, W).
    """
    if interpolation not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if out_size is None:
        out_size = (image.shape[1], image.shape[0])
    sx, sy, defined = _inverse_map_grid(transform, out_size)
    lookup = bilinear_lookup if interpolation == "bilinear" else nearest_lookup
    vals, in_bounds = lookup(image, sx, sy)
    mask = in_bounds & defined
    if image.ndim == 3:
        vals = np.where(mask[..., None], vals, 0)
    else:
        vals = np.where(mask, vals, 0)
    return vals.astype(image.dtype, copy=False), mask


def resize_image(image: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with the half-pixel-center convention.

    Output pixel p samples the source at (p + 0.5) * (src / out) - 0.5, the
    exact inverse of :func:`rescale_coords`.
    """
    w_out, h_out = out_size
    h_in, w_in = image.shape[:2]
    if (w_in, h_in) == (w_out, h_out):
        return image.copy()
    ys, xs = np.mgrid[0:h_out, 0:w_out].astype(np.float64)
    sx = (xs + 0.5) * (w_in / w_out) - 0.5
    sy = (ys + 0.5) * (h_in / h_out) - 0.5
    sx = np.clip(sx, 0, w_in - 1)
    sy = np.clip(sy, 0, h_in - 1)
    vals, _ = bilinear_lookup(image, sx, sy)
    return vals


def rescale_coords(
    coords: np.ndarray,
    from_size: tuple[int, int],
    to_size: tuple[int, int],
) -> np.ndarray:
    """Map (x, y) coords between image resolutions, per-axis scale factors."""
    coords = np.asarray(coords, dtype=np.float64)
    fx = to_size[0] / from_size[0]
    fy = to_size[1] / from_size[1]
    out = np.empty_like(coords)
    out[:, 0] = (coords[:, 0] + 0.5) * fx - 0.5
    out[:, 1] = (coords[:, 1] + 0.5) * fy - 0.5
    return out


@dataclass
class RansacConfig:
    """Knobs for robust homography estimation.

    ``min_inliers`` counts total inliers (the 4-point sample included), so a
    perfect 4-correspondence set is recoverable at the default.
    """

    reproj_threshold_px: float = 5.0
    max_iters: int = 2000
    min_inliers: int = 4
    confidence: float = 0.999
    max_anisotropy: float = 20.0

    def __post_init__(self):
        if self.reproj_threshold_px <= 0 or self.max_iters < 1:
            raise ConfigError("invalid RANSAC configuration")
        if not 0 < self.confidence < 1:
            raise ConfigError("confidence must be in (0, 1)")
        if self.min_inliers < 4:
            raise ConfigError("min_inliers must be at least 4")


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization: centroid 0, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / max(d, 1e-12)
    t = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    normed = (pts - centroid) * s
    return normed, t


def _dlt(src_n: np.ndarray, dst_n: np.ndarray) -> Optional[np.ndarray]:
    """Direct linear transform on pre-normalized correspondences."""
    n = len(src_n)
    a = np.zeros((2 * n, 9))
    x, y = src_n[:, 0], src_n[:, 1]
    u, v = dst_n[:, 0], dst_n[:, 1]
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v
    try:
        _, sv, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    if sv[7] < 1e-12:  # rank-deficient system: degenerate configuration
        return None
    return vt[-1].reshape(3, 3)


def fit_homography_dlt(src: np.ndarray, dst: np.ndarray) -> Optional[Homography]:
    """Least-squares homography via Hartley-normalized DLT (>= 4 points)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4 or len(src) != len(dst):
        return None
    src_n, t_src = _normalize_points(src)
    dst_n, t_dst = _normalize_points(dst)
    hn = _dlt(src_n, dst_n)
    if hn is None:
        return None
    h = np.linalg.inv(t_dst) @ hn @ t_src
    if abs(np.linalg.det(h)) <= _MIN_HOMOGRAPHY_DET or abs(h[2, 2]) <= _W_EPS:
        return None
    return Homography(h)


def _has_collinear_triple(pts: np.ndarray, eps: float = 1e-9) -> bool:
    """True when any 3 of the (4) points are (near-)collinear."""
    scale = max(np.ptp(pts, axis=0).max(), 1e-12)
    q = pts / scale
    n = len(q)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a = q[j] - q[i]
                b = q[k] - q[i]
                if abs(a[0] * b[1] - a[1] * b[0]) < eps:
                    return True
    return False


def _transfer_errors(h: Homography, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    mapped, valid = h.apply(src)
    err = np.full(len(src), np.inf)
    d = mapped[valid] - dst[valid]
    err[valid] = np.sqrt((d ** 2).sum(axis=1))
    return err


def estimate_homography_ransac(
    src_points: np.ndarray,
    dst_points: np.ndarray,
    config: Optional[RansacConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> Optional[tuple[Homography, np.ndarray]]:
    """RANSAC fit of a src -> dst homography.

    Candidate models from 4-point samples are screened for sample
    collinearity and homography degeneracy; the best model is refit by
    least squares (normalized DLT) on all of its inliers. Returns
    (homography, inlier_indices) or None when no model reaches
    ``config.min_inliers`` — the caller counts the pair as unregistered.
    """
    cfg = config or RansacConfig()
    rng = rng if rng is not None else np.random.default_rng()
    src = np.asarray(src_points, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst_points, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        return None

    best_count = 0
    best_h: Optional[Homography] = None
    best_inliers: Optional[np.ndarray] = None
    needed = cfg.max_iters
    it = 0
    while it < min(cfg.max_iters, needed):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        if _has_collinear_triple(src[idx]) or _has_collinear_triple(dst[idx]):
            continue
        h = fit_homography_dlt(src[idx], dst[idx])
        if h is None or not h.is_plausible(cfg.max_anisotropy):
            continue
        err = _transfer_errors(h, src, dst)
        inliers = err < cfg.reproj_threshold_px
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_h = h
            best_inliers = inliers
            ratio = count / n
            if ratio >= 1.0:
                break
            denom = math.log(max(1.0 - ratio ** 4, 1e-15))
            needed = min(cfg.max_iters, int(math.ceil(math.log(1 - cfg.confidence) / denom)))

    if best_h is None or best_inliers is None or best_count < max(4, cfg.min_inliers):
        return None

    refined = fit_homography_dlt(src[best_inliers], dst[best_inliers])
    if refined is not None and refined.is_plausible(cfg.max_anisotropy):
        err = _transfer_errors(refined, src, dst)
        inliers = err < cfg.reproj_threshold_px
        if int(inliers.sum()) >= max(4, cfg.min_inliers):
            return refined, np.flatnonzero(inliers)
    # refit rejected its own inlier set: keep the best sampled model
    return best_h, np.flatnonzero(best_inliers)
