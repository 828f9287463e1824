"""Quantitative evaluation: control-point registration score with AUC,
mask-overlap metrics, overlap-restricted SSIM/structure metrics, keypoint
distance statistics, synthetic-pair generation, and registration-count
normalized aggregation.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .augmentation import HsvRanges, NoiseSpec, RoIMask, color_jitter, luminance, sample_points
from .geometry import (
    AffineRanges,
    AffineTransform,
    Homography,
    PointSet,
    sample_affine,
    warp_image,
    warp_points,
)
from .registration import MatchSet, RegistrationResult, select_top_matches

logger = logging.getLogger(__name__)

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 windows


@dataclass
class ControlPointPair:
    """Id-aligned control points in the fixed and moving source frames."""

    fixed_pts: PointSet
    moving_pts: PointSet

    def __post_init__(self):
        if len(self.fixed_pts) != len(self.moving_pts):
            raise ValueError("control point sets differ in cardinality")
        if not np.array_equal(np.sort(self.fixed_pts.ids), np.sort(self.moving_pts.ids)):
            raise ValueError("control point ids are not bijective")

    def __len__(self) -> int:
        return len(self.fixed_pts)

    def aligned_coords(self) -> tuple[np.ndarray, np.ndarray]:
        order_f = np.argsort(self.fixed_pts.ids)
        order_m = np.argsort(self.moving_pts.ids)
        return self.fixed_pts.coords[order_f], self.moving_pts.coords[order_m]


def registration_score(
    homography: Homography,
    control_points: ControlPointPair,
    max_threshold: int = 25,
) -> dict:
    """Single-pair registration score: mean control-point error plus the
    indicator success curve over integer thresholds 1..max and its mean (the
    AUC contribution of this pair)."""
    if len(control_points) == 0:
        raise ValueError("empty control point set")
    fixed, moving = control_points.aligned_coords()
    mapped, valid = homography.apply(moving)
    err = np.full(len(fixed), np.inf)
    d = mapped[valid] - fixed[valid]
    err[valid] = np.sqrt((d ** 2).sum(axis=1))
    mean_error = float(err.mean()) if valid.all() else float("inf")
    thresholds = np.arange(1, max_threshold + 1)
    curve = (mean_error <= thresholds).astype(np.float64)
    return {
        "mean_error_px": mean_error,
        "success_curve": curve,
        "auc": float(curve.mean()),
    }


def success_curve(errors: Sequence[float], max_threshold: int = 25) -> dict:
    """Pair-set success curve: fraction of pairs with mean error <= t for
    t = 1..max_threshold; AUC is the mean of the curve. Failed pairs enter
    as infinite error."""
    if len(errors) == 0:
        raise ValueError("no pairs to score")
    err = np.asarray(errors, dtype=np.float64)
    thresholds = np.arange(1, max_threshold + 1)
    curve = np.array([(err <= t).mean() for t in thresholds])
    return {"thresholds": thresholds, "curve": curve, "auc": float(curve.mean())}


def overlap_metrics(
    mask_fixed: np.ndarray,
    mask_moving: np.ndarray,
    homography: Homography,
) -> dict:
    """IoU / DICE / IoM between the fixed mask and the moving mask warped
    into the fixed frame (nearest neighbor)."""
    a = np.asarray(mask_fixed, dtype=bool)
    if not a.any() or not np.asarray(mask_moving, dtype=bool).any():
        warnings.warn("empty mask in overlap metrics", stacklevel=2)
        return {"iou": 0.0, "dice": 0.0, "iom": 0.0}
    warped, support = warp_image(
        homography,
        np.asarray(mask_moving, dtype=np.float32),
        out_size=(a.shape[1], a.shape[0]),
        interpolation="nearest",
    )
    b = (warped > 0.5) & support
    inter = float(np.count_nonzero(a & b))
    if inter == 0:
        return {"iou": 0.0, "dice": 0.0, "iom": 0.0}
    na, nb = float(a.sum()), float(b.sum())
    union = na + nb - inter
    return {
        "iou": inter / union,
        "dice": 2.0 * inter / (na + nb),
        "iom": inter / min(na, nb),
    }


def _gauss(x: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(x, _SSIM_SIGMA, truncate=_SSIM_RADIUS / _SSIM_SIGMA)


def structural_metrics(
    fixed_image: np.ndarray,
    moving_image: np.ndarray,
    homography: Homography,
    roi_overlap: Optional[np.ndarray] = None,
) -> dict:
    """SSIM and its structure component between the fixed image and the
    warped moving image, restricted to windows fully inside the overlap
    region, both rescaled from [-1, 1] to [0, 1].

    ``roi_overlap`` optionally restricts further (boolean, fixed frame);
    without it only the warp support is used.
    """
    gray_f = luminance(fixed_image)
    gray_m = luminance(moving_image)
    h, w = gray_f.shape
    warped, support = warp_image(homography, gray_m, out_size=(w, h), interpolation="bilinear")
    overlap = support if roi_overlap is None else (support & np.asarray(roi_overlap, dtype=bool))
    valid = ndimage.minimum_filter(overlap.astype(np.uint8), size=2 * _SSIM_RADIUS + 1) > 0
    if not valid.any():
        warnings.warn("empty overlap in structural metrics", stacklevel=2)
        return {"ssim": 0.0, "sm": 0.0}
    x = gray_f
    y = warped
    mu_x = _gauss(x)
    mu_y = _gauss(y)
    var_x = np.maximum(_gauss(x * x) - mu_x ** 2, 0.0)
    var_y = np.maximum(_gauss(y * y) - mu_y ** 2, 0.0)
    cov = _gauss(x * y) - mu_x * mu_y
    c3 = _SSIM_C2 / 2.0
    ssim_map = ((2 * mu_x * mu_y + _SSIM_C1) * (2 * cov + _SSIM_C2)) / (
        (mu_x ** 2 + mu_y ** 2 + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    )
    sm_map = (cov + c3) / (np.sqrt(var_x) * np.sqrt(var_y) + c3)
    ssim = float(np.clip(ssim_map[valid].mean(), -1.0, 1.0))
    sm = float(np.clip(sm_map[valid].mean(), -1.0, 1.0))
    return {"ssim": (ssim + 1.0) / 2.0, "sm": (sm + 1.0) / 2.0}


def keypoint_distance_stats(
    matches: MatchSet,
    true_transform: AffineTransform,
) -> dict:
    """Distance between matched keypoints after re-projecting the moving
    keypoints into the fixed frame with the known transform (fixed->moving
    convention, so the inverse is applied). Uses source-resolution
    coordinates when the match set carries resolution metadata."""
    if len(matches) == 0:
        raise ValueError("no matches to measure")
    if matches.source_sizes is not None and matches.inference_size is not None:
        coords_f, coords_m = matches.matched_source_coords()
    else:
        coords_f, coords_m = matches.matched_coords()
    back = true_transform.inverse().apply(coords_m)
    dists = np.sqrt(((back - coords_f) ** 2).sum(axis=1))
    return {
        "mean_px": float(dists.mean()),
        "median_px": float(np.median(dists)),
        "per_match": dists,
    }


def keypoint_distance_sweep(
    matches: MatchSet,
    true_transform: AffineTransform,
    fractions: Sequence[float] = (0.1, 0.25, 0.5, 0.75, 1.0),
) -> list[dict]:
    """Distance stats per kept-match fraction (closest descriptors first)."""
    out = []
    for frac in fractions:
        m = max(1, int(round(frac * len(matches))))
        stats = keypoint_distance_stats(select_top_matches(matches, m), true_transform)
        out.append({
            "fraction": float(frac),
            "matches": m,
            "mean_px": stats["mean_px"],
            "median_px": stats["median_px"],
        })
    return out


@dataclass
class SyntheticPair:
    fixed: np.ndarray
    moving: np.ndarray
    true_transform: AffineTransform  # fixed -> moving coordinates
    control_points: ControlPointPair
    mode: str


def _color_params_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))


def make_synthetic_pair(
    rng: np.random.Generator,
    image: np.ndarray,
    roi: RoIMask,
    mode: str,
    affine_ranges: Optional[AffineRanges] = None,
    hsv_ranges: Optional[HsvRanges] = None,
    noise: Optional[NoiseSpec] = None,
    control_count: int = 5000,
    _shared: Optional[dict] = None,
) -> SyntheticPair:
    """Build one synthetic registration pair from a single image.

    Modes: ``color`` (photometric jitter only, identity transform),
    ``geometric`` (affine only), ``full`` (both). Control points are sampled
    uniformly in the RoI of the fixed image and carried through the exact
    transform. ``_shared`` lets the triplet generator pin spatial and color
    parameters across modes.
    """
    if mode not in ("color", "geometric", "full"):
        raise ValueError(f"unknown synthetic mode {mode!r}")
    h, w = image.shape[:2]
    affine_ranges = affine_ranges or AffineRanges(
        rotation_deg=(-45, 45), scale=(0.9, 1.1), shear_deg=(-10, 10)
    )
    hsv_ranges = hsv_ranges or HsvRanges((-18, 18), (0.8, 1.2), (0.8, 1.2))
    noise = noise or NoiseSpec(std=0.05, prob=0.25)

    shared = _shared if _shared is not None else {}
    if "affine" not in shared:
        shared["affine"] = sample_affine(rng, affine_ranges, (w, h))
    if "color_seed" not in shared:
        shared["color_seed"] = int(rng.integers(0, 2 ** 62))
    if "control" not in shared:
        shared["control"] = sample_points(rng, roi, control_count)

    fixed = image.astype(np.float32)
    if mode == "color":
        transform = AffineTransform.identity((w, h))
        moving = color_jitter(_color_params_rng(shared["color_seed"]), fixed, hsv_ranges, noise)
    else:
        transform = shared["affine"]
        moving, support = warp_image(transform, fixed, interpolation="bilinear")
        if mode == "full":
            moving = color_jitter(_color_params_rng(shared["color_seed"]), moving, hsv_ranges, noise)
            moving = np.where(support[..., None], moving, 0.0).astype(np.float32)

    fixed_pts = shared["control"]
    moving_pts = warp_points(transform, fixed_pts)
    return SyntheticPair(
        fixed=fixed,
        moving=moving.astype(np.float32),
        true_transform=transform,
        control_points=ControlPointPair(fixed_pts, moving_pts),
        mode=mode,
    )


def make_synthetic_triplet(
    rng: np.random.Generator,
    image: np.ndarray,
    roi: RoIMask,
    affine_ranges: Optional[AffineRanges] = None,
    hsv_ranges: Optional[HsvRanges] = None,
    noise: Optional[NoiseSpec] = None,
    control_count: int = 5000,
) -> dict[str, SyntheticPair]:
    """Color / geometric / full pairs sharing spatial and color parameters,
    so the three results are directly comparable."""
    shared: dict = {}
    out = {}
    for mode in ("color", "geometric", "full"):
        out[mode] = make_synthetic_pair(
            rng, image, roi, mode,
            affine_ranges=affine_ranges, hsv_ranges=hsv_ranges, noise=noise,
            control_count=control_count, _shared=shared,
        )
    return out


def evaluate_records(
    records,
    descriptor_state,
    keypoint_source,
    config,
    max_threshold: Optional[int] = None,
) -> dict:
    """Run registration + metrics over manifest pair records.

    Per-pair exceptions are recorded, never aborting the batch. The report
    carries one entry per pair, the registration-count-normalized aggregate,
    and success curves (overall and per category) whenever control points
    are available.
    """
    from . import io as uio
    from .detector import roi_or_empty
    from .registration import register_pair

    max_t = max_threshold if max_threshold is not None else config.evaluation.max_threshold_px
    pair_entries: list[dict] = []
    agg_inputs: list[tuple[RegistrationResult, Optional[MetricBundle]]] = []
    errors_by_cat: dict[str, list[float]] = {}
    sweeps: list[list[dict]] = []

    for index, rec in enumerate(records):
        entry: dict = {"name": rec.name, "category": rec.category}
        try:
            fixed = uio.load_image(rec.fixed)
            moving = uio.load_image(rec.moving)
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=config.seeds.ransac, spawn_key=(index,))
            )
            result = register_pair(fixed, moving, descriptor_state, keypoint_source, config, rng)
            entry.update(
                success=result.success,
                failure_reason=result.failure_reason,
                keypoints_detected=list(result.keypoints_detected),
                matches_used=result.matches_used,
                inlier_count=result.inlier_count,
                homography=result.homography.to_flat_string() if result.homography else None,
            )
            bundle = MetricBundle()
            pair_error = float("inf")
            if result.success:
                h = result.homography
                if rec.mask_fixed and rec.mask_moving:
                    masks = (uio.load_mask(rec.mask_fixed), uio.load_mask(rec.mask_moving))
                    entry["mask_source"] = "vessel"
                else:
                    masks = (roi_or_empty(fixed), roi_or_empty(moving))
                    entry["mask_source"] = "roi"
                ov = overlap_metrics(masks[0], masks[1], h)
                roi_m_warped, support = warp_image(
                    h, masks[1].astype(np.float32),
                    out_size=(fixed.shape[1], fixed.shape[0]), interpolation="nearest",
                )
                overlap_region = masks[0] & (roi_m_warped > 0.5) & support
                st = structural_metrics(fixed, moving, h, overlap_region)
                bundle = MetricBundle(iou=ov["iou"], dice=ov["dice"], iom=ov["iom"],
                                      sm=st["sm"], ssim=st["ssim"])
                entry["metrics"] = {**ov, **st}
                if rec.control_points:
                    fixed_pts, moving_pts = uio.load_control_points(rec.control_points)
                    score = registration_score(h, ControlPointPair(fixed_pts, moving_pts), max_t)
                    bundle.mean_control_error_px = score["mean_error_px"]
                    pair_error = score["mean_error_px"]
                    entry["mean_control_error_px"] = score["mean_error_px"]
                    entry["auc"] = score["auc"]
                if rec.true_transform is not None and result.matches is not None and len(result.matches) > 0:
                    true_t = AffineTransform(np.asarray(rec.true_transform, dtype=float).reshape(2, 3))
                    stats = keypoint_distance_stats(result.matches, true_t)
                    entry["keypoint_distance"] = {
                        "mean_px": stats["mean_px"], "median_px": stats["median_px"],
                    }
                    sweeps.append(keypoint_distance_sweep(result.matches, true_t))
            agg_inputs.append((result, bundle))
            if rec.control_points:
                errors_by_cat.setdefault(rec.category or "all", []).append(pair_error)
                if (rec.category or "all") != "all":
                    errors_by_cat.setdefault("all", []).append(pair_error)
        except Exception as exc:  # noqa: BLE001 - per-pair isolation is the contract
            logger.exception("pair %s failed", rec.name)
            entry.update(success=False, error=f"{type(exc).__name__}: {exc}")
            agg_inputs.append((
                RegistrationResult(False, None, 0, 0, (0, 0), failure_reason="exception"),
                None,
            ))
        pair_entries.append(entry)

    report: dict = {
        "schema_version": 1,
        "pairs_total": len(records),
        "pairs": pair_entries,
    }
    agg = aggregate(agg_inputs, len(records))
    report["aggregate"] = {
        "pairs_registered": agg.pairs_registered,
        "raw": agg.raw,
        "normalized": agg.normalized,
        "mean_control_error_px": agg.mean_control_error_px,
        "lpips": agg.lpips,
    }
    if errors_by_cat:
        report["success_curves"] = {
            cat: {
                "thresholds": curve["thresholds"].tolist(),
                "curve": curve["curve"].tolist(),
                "auc": curve["auc"],
            }
            for cat, errs in sorted(errors_by_cat.items())
            for curve in [success_curve(errs, max_t)]
        }
    if sweeps:
        fractions = [s["fraction"] for s in sweeps[0]]
        report["keypoint_distance_sweep"] = [
            {
                "fraction": frac,
                "mean_px": float(np.mean([sw[i]["mean_px"] for sw in sweeps])),
                "median_px": float(np.mean([sw[i]["median_px"] for sw in sweeps])),
            }
            for i, frac in enumerate(fractions)
        ]
    return report


@dataclass
class MetricBundle:
    iou: float = 0.0
    dice: float = 0.0
    iom: float = 0.0
    sm: float = 0.0
    ssim: float = 0.0
    mean_control_error_px: Optional[float] = None


_NORMALIZED_METRICS = ("iou", "dice", "iom", "sm", "ssim")


@dataclass
class AggregateReport:
    pairs_total: int
    pairs_registered: int
    raw: dict
    normalized: dict
    mean_control_error_px: Optional[float]
    lpips: str = "unavailable"


def aggregate(
    results: Sequence[tuple[RegistrationResult, Optional[MetricBundle]]],
    totals: int,
) -> AggregateReport:
    """Registration-count-normalized aggregation.

    Raw means run over registered pairs only; normalized values multiply by
    the registered fraction, so a failed pair contributes zero.
    """
    if totals <= 0:
        raise ValueError("totals must be positive")
    if len(results) > totals:
        raise ValueError("more results than total pairs")
    registered = [mb for (res, mb) in results if res.success and mb is not None]
    n_reg = sum(1 for res, _ in results if res.success)
    raw = {}
    normalized = {}
    frac = n_reg / totals
    for name in _NORMALIZED_METRICS:
        vals = [getattr(mb, name) for mb in registered]
        raw[name] = float(np.mean(vals)) if vals else 0.0
        normalized[name] = raw[name] * frac
    errors = [
        mb.mean_control_error_px
        for mb in registered
        if mb.mean_control_error_px is not None and math.isfinite(mb.mean_control_error_px)
    ]
    mean_err = float(np.mean(errors)) if errors else None
    return AggregateReport(
        pairs_total=totals,
        pairs_registered=n_reg,
        raw=raw,
        normalized=normalized,
        mean_control_error_px=mean_err,
    )
