"""End-to-end pair registration: detect, describe, match, fit, rescale.

Both images are resized to the inference size, keypoints come from the
configured keypoint source (learned heatmap or the heuristic baseline),
descriptors are matched mutual-nearest-neighbor, and the surviving matches
are rescaled to source resolution before robust homography fitting. The
fitted homography maps moving-image coordinates into the fixed frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import RunConfig
from .descriptor import DescriptorState, describe, sample_descriptors
from .geometry import (
    Homography,
    PointSet,
    estimate_homography_ransac,
    rescale_coords,
    resize_image,
)

logger = logging.getLogger(__name__)


@dataclass
class MatchSet:
    """Mutual-nearest-neighbor matches sorted by ascending distance.

    Points live at inference resolution (``inference_size``);
    ``source_sizes`` records the original (fixed, moving) dimensions for
    rescaling.
    """

    pairs: np.ndarray      # (M, 2) indices into (points_a, points_b)
    distances: np.ndarray  # (M,) unit-norm Euclidean in [0, 2]
    points_a: Optional[PointSet] = None
    points_b: Optional[PointSet] = None
    source_sizes: Optional[tuple[tuple[int, int], tuple[int, int]]] = None
    inference_size: Optional[tuple[int, int]] = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if len(self.pairs) != len(self.distances):
            raise ValueError("pairs/distances length mismatch")

    def __len__(self) -> int:
        return len(self.pairs)

    def matched_coords(self) -> tuple[np.ndarray, np.ndarray]:
        if self.points_a is None or self.points_b is None:
            raise ValueError("match set carries no point coordinates")
        return (
            self.points_a.coords[self.pairs[:, 0]],
            self.points_b.coords[self.pairs[:, 1]],
        )

    def matched_source_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Matched coordinates rescaled to the recorded source resolutions."""
        if self.source_sizes is None or self.inference_size is None:
            raise ValueError("match set carries no resolution metadata")
        coords_a, coords_b = self.matched_coords()
        return (
            rescale_coords(coords_a, self.inference_size, self.source_sizes[0]),
            rescale_coords(coords_b, self.inference_size, self.source_sizes[1]),
        )


def match_descriptors(
    desc_a: np.ndarray,
    desc_b: np.ndarray,
    points_a: Optional[PointSet] = None,
    points_b: Optional[PointSet] = None,
    source_sizes=None,
    inference_size=None,
    ratio: float = 0.0,
) -> MatchSet:
    """Mutual nearest neighbors under Euclidean distance on unit vectors.

    ``ratio`` > 0 additionally applies a Lowe-style ratio test (off by
    default). Empty inputs give an empty MatchSet.
    """
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    if len(desc_a) == 0 or len(desc_b) == 0:
        return MatchSet(np.empty((0, 2)), np.empty(0), points_a, points_b,
                        source_sizes, inference_size)
    d2 = np.clip(2.0 - 2.0 * desc_a @ desc_b.T, 0.0, None)
    dist = np.sqrt(d2)
    nn_ab = dist.argmin(axis=1)
    nn_ba = dist.argmin(axis=0)
    ia = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(desc_a)))
    ib = nn_ab[ia]
    dd = dist[ia, ib]
    if ratio > 0 and dist.shape[1] >= 2:
        part = np.partition(dist[ia], 1, axis=1)
        second = part[:, 1]
        keep = dd <= ratio * np.maximum(second, 1e-12)
        ia, ib, dd = ia[keep], ib[keep], dd[keep]
    order = np.lexsort((ia, dd))
    pairs = np.stack([ia[order], ib[order]], axis=1)
    return MatchSet(pairs, dd[order], points_a, points_b, source_sizes, inference_size)


def select_top_matches(matches: MatchSet, m: int) -> MatchSet:
    """Keep the first min(m, |pairs|) matches by ascending distance."""
    if m < 1:
        raise ValueError("m must be >= 1")
    n = min(m, len(matches))
    return MatchSet(
        matches.pairs[:n].copy(),
        matches.distances[:n].copy(),
        matches.points_a,
        matches.points_b,
        matches.source_sizes,
        matches.inference_size,
    )


@dataclass
class RegistrationResult:
    success: bool
    homography: Optional[Homography]
    inlier_count: int
    matches_used: int
    keypoints_detected: tuple[int, int]
    matches: Optional[MatchSet] = None
    inlier_indices: Optional[np.ndarray] = None
    failure_reason: Optional[str] = None

    def __post_init__(self):
        if self.success and (self.homography is None or not self.homography.is_plausible()):
            raise ValueError("successful registration requires a plausible homography")


def _failure(reason: str, keypoints=(0, 0), matches_used=0, matches=None) -> RegistrationResult:
    return RegistrationResult(
        success=False,
        homography=None,
        inlier_count=0,
        matches_used=matches_used,
        keypoints_detected=keypoints,
        matches=matches,
        failure_reason=reason,
    )


def register_pair(
    fixed_image: np.ndarray,
    moving_image: np.ndarray,
    descriptor_state: DescriptorState,
    keypoint_source,
    config: RunConfig,
    rng: Optional[np.random.Generator] = None,
) -> RegistrationResult:
    """Register a (fixed, moving) pair; the result homography maps moving
    source-resolution coordinates into the fixed frame.

    Any detection/matching shortfall returns an unsuccessful result rather
    than raising; unreadable inputs are the caller's IO errors, distinct
    from registration failure.
    """
    inf = config.inference
    size = inf.image_size
    k = inf.k_keypoints if inf.k_keypoints > 0 else None
    rng = rng if rng is not None else np.random.default_rng(config.seeds.ransac)

    fixed_small = resize_image(fixed_image.astype(np.float32), (size, size))
    moving_small = resize_image(moving_image.astype(np.float32), (size, size))

    field_f = describe(descriptor_state.network, fixed_small)
    field_m = describe(descriptor_state.network, moving_small)
    kps_f = keypoint_source.detect(fixed_small, field_f, k)
    kps_m = keypoint_source.detect(moving_small, field_m, k)
    n_detected = (len(kps_f), len(kps_m))
    if len(kps_f) < 4 or len(kps_m) < 4:
        return _failure("too few keypoints", n_detected)

    desc_f = sample_descriptors(field_f, kps_f.points)
    desc_m = sample_descriptors(field_m, kps_m.points)
    src_fixed = (fixed_image.shape[1], fixed_image.shape[0])
    src_moving = (moving_image.shape[1], moving_image.shape[0])
    matches = match_descriptors(
        desc_f, desc_m, kps_f.points, kps_m.points,
        source_sizes=(src_fixed, src_moving),
        inference_size=(size, size),
        ratio=inf.ratio_test,
    )
    if inf.m_matches > 0:
        matches = select_top_matches(matches, inf.m_matches)
    if len(matches) < 4:
        return _failure("too few matches", n_detected, len(matches), matches)

    pts_fixed_src, pts_moving_src = matches.matched_source_coords()
    fit = estimate_homography_ransac(
        pts_moving_src, pts_fixed_src, config.ransac.to_config(), rng
    )
    if fit is None:
        return _failure("ransac failed", n_detected, len(matches), matches)
    homography, inliers = fit
    return RegistrationResult(
        success=True,
        homography=homography,
        inlier_count=int(len(inliers)),
        matches_used=len(matches),
        keypoints_detected=n_detected,
        matches=matches,
        inlier_indices=inliers,
    )
