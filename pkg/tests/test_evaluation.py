import numpy as np
import pytest

from conftest import vessel_image
from unconked.augmentation import estimate_roi
from unconked.evaluation import (
    ControlPointPair,
    MetricBundle,
    aggregate,
    keypoint_distance_stats,
    make_synthetic_pair,
    make_synthetic_triplet,
    overlap_metrics,
    registration_score,
    structural_metrics,
    success_curve,
)
from unconked.geometry import AffineTransform, Homography, PointSet
from unconked.registration import MatchSet, RegistrationResult


def cp_pair(fixed, moving):
    ids = np.arange(len(fixed))
    return ControlPointPair(PointSet(fixed, ids), PointSet(moving, ids.copy()))


def translation_h(tx, ty):
    return Homography(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))


class TestRegistrationScore:
    def test_exact_mapping(self):
        rng = np.random.default_rng(0)
        fixed = rng.uniform(0, 100, (30, 2))
        h = translation_h(5.0, -3.0)
        moving = fixed - np.array([5.0, -3.0])
        score = registration_score(h, cp_pair(fixed, moving))
        assert score["mean_error_px"] == pytest.approx(0.0, abs=1e-9)
        assert score["auc"] == 1.0

    def test_shift_beyond_threshold(self):
        fixed = np.random.default_rng(1).uniform(0, 50, (10, 2))
        moving = fixed + np.array([30.0, 0.0])
        score = registration_score(Homography.identity(), cp_pair(fixed, moving))
        assert score["mean_error_px"] == pytest.approx(30.0)
        assert score["success_curve"].sum() == 0
        assert score["auc"] == 0.0

    def test_set_curve_two_pairs(self):
        # frozen from direct curve summation: errors {5, 40} over 25 thresholds
        out = success_curve([5.0, 40.0], max_threshold=25)
        assert out["curve"][:4].tolist() == [0.0] * 4
        assert out["curve"][4:].tolist() == [0.5] * 21
        assert out["auc"] == pytest.approx(0.42)

    def test_auc_monotone_under_noise(self):
        rng = np.random.default_rng(2)
        fixed = rng.uniform(10, 90, (50, 2))
        aucs = []
        for noise in (0.0, 5.0, 15.0, 40.0):
            errs = []
            for trial in range(20):
                jitter = rng.uniform(-noise, noise, fixed.shape)
                score = registration_score(
                    Homography.identity(), cp_pair(fixed, fixed + jitter)
                )
                errs.append(score["mean_error_px"])
            aucs.append(success_curve(errs)["auc"])
        assert all(b <= a + 1e-9 for a, b in zip(aucs, aucs[1:]))

    def test_empty_control_points_rejected(self):
        with pytest.raises(ValueError):
            registration_score(Homography.identity(), cp_pair(np.empty((0, 2)), np.empty((0, 2))))


class TestOverlapMetrics:
    def test_identical_masks_identity(self):
        mask = np.zeros((20, 20), bool)
        mask[5:15, 5:15] = True
        out = overlap_metrics(mask, mask, Homography.identity())
        assert out == {"iou": 1.0, "dice": 1.0, "iom": 1.0}

    def test_disjoint_masks(self):
        a = np.zeros((20, 20), bool); a[:5, :5] = True
        b = np.zeros((20, 20), bool); b[15:, 15:] = True
        out = overlap_metrics(a, b, Homography.identity())
        assert out == {"iou": 0.0, "dice": 0.0, "iom": 0.0}

    def test_nested_pixel_count_oracle(self):
        a = np.zeros((30, 30), bool); a[0:10, 0:10] = True      # 100 px
        b = np.zeros((30, 30), bool); b[0:5, 0:10] = True       # 50 px inside a
        out = overlap_metrics(a, b, Homography.identity())
        assert out["iou"] == pytest.approx(0.5)
        assert out["dice"] == pytest.approx(2 / 3)
        assert out["iom"] == pytest.approx(1.0)

    def test_ordering_invariant_on_random_masks(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            a = rng.random((16, 16)) > 0.5
            b = rng.random((16, 16)) > 0.5
            out = overlap_metrics(a, b, Homography.identity())
            assert out["iom"] >= out["dice"] - 1e-12
            assert out["dice"] >= out["iou"] - 1e-12

    def test_empty_mask_warns_zero(self):
        a = np.zeros((8, 8), bool)
        b = np.ones((8, 8), bool)
        with pytest.warns(UserWarning):
            out = overlap_metrics(a, b, Homography.identity())
        assert out == {"iou": 0.0, "dice": 0.0, "iom": 0.0}

    def test_swap_invariance_with_inverse(self):
        rng = np.random.default_rng(9)
        a = np.zeros((40, 40), bool)
        a[8:30, 6:28] = True
        b = np.zeros((40, 40), bool)
        b[12:36, 10:34] = True
        h = Homography(AffineTransform.from_params(
            rotation_deg=6.0, translation=(1.5, -2.0), center=(19.5, 19.5)
        ).as_3x3())
        fwd = overlap_metrics(a, b, h)
        rev = overlap_metrics(b, a, h.inverse())
        for key in ("iou", "dice", "iom"):
            assert fwd[key] == pytest.approx(rev[key], abs=0.01)


class TestStructuralMetrics:
    def test_self_pair_ones(self):
        img = vessel_image(0, 48)
        out = structural_metrics(img, img, Homography.identity())
        assert out["ssim"] == pytest.approx(1.0, abs=1e-6)
        assert out["sm"] == pytest.approx(1.0, abs=1e-6)

    def test_inverted_image_antisymmetric_structure(self):
        # high local variance so the anticorrelation dominates the stabilizer
        noise = np.random.default_rng(1).random((48, 48)).astype(np.float32)
        img = np.stack([noise] * 3, axis=-1)
        out = structural_metrics(img, 1.0 - img, Homography.identity())
        assert out["sm"] == pytest.approx(0.0, abs=0.02)

    def test_constant_bias_keeps_structure(self):
        img = vessel_image(2, 48) * 0.8
        biased = np.clip(img + 0.1, 0, 1)
        out = structural_metrics(img, biased, Homography.identity())
        assert out["sm"] == pytest.approx(1.0, abs=1e-3)
        assert out["ssim"] < 0.995

    def test_empty_overlap_warns_zero(self):
        img = vessel_image(3, 32)
        far = translation_h(100.0, 0.0)
        with pytest.warns(UserWarning):
            out = structural_metrics(img, img, far)
        assert out == {"ssim": 0.0, "sm": 0.0}

    def test_swap_invariance(self):
        # both views interpolate once from a shared scene, so neither
        # direction of the comparison is interpolation-free
        from unconked.geometry import warp_image

        scene = vessel_image(4, 96)
        t_a = AffineTransform.from_params(rotation_deg=5.0, translation=(1.5, -1.0),
                                          center=(47.5, 47.5))
        t_b = AffineTransform.from_params(rotation_deg=-6.0, translation=(-2.0, 1.0),
                                          center=(47.5, 47.5))
        img_a, _ = warp_image(t_a, scene)
        img_b, _ = warp_image(t_b, scene)
        h_ba = Homography(t_a.as_3x3() @ np.linalg.inv(t_b.as_3x3()))
        fwd = structural_metrics(img_a, img_b, h_ba)
        rev = structural_metrics(img_b, img_a, h_ba.inverse())
        assert fwd["ssim"] == pytest.approx(rev["ssim"], abs=0.01)
        assert fwd["sm"] == pytest.approx(rev["sm"], abs=0.01)


def matches_with_residuals(true_transform, residuals, rng):
    """MatchSet whose i-th match has exactly residuals[i] px of error in the
    fixed frame under true_transform (fixed->moving)."""
    n = len(residuals)
    fixed = rng.uniform(20, 80, (n, 2))
    angles = rng.uniform(0, 2 * np.pi, n)
    offsets = np.stack([np.cos(angles), np.sin(angles)], axis=1) * np.asarray(residuals)[:, None]
    moving = true_transform.apply(fixed + offsets)
    pairs = np.stack([np.arange(n), np.arange(n)], axis=1)
    return MatchSet(pairs, np.zeros(n),
                    PointSet.from_coords(fixed), PointSet.from_coords(moving))


class TestKeypointDistanceStats:
    def test_perfect_matches_near_zero(self):
        rng = np.random.default_rng(5)
        t = AffineTransform.from_params(rotation_deg=15.0, translation=(3.0, -2.0))
        m = matches_with_residuals(t, np.zeros(20), rng)
        out = keypoint_distance_stats(m, t)
        assert out["mean_px"] < 1e-9

    def test_single_gross_mismatch(self):
        rng = np.random.default_rng(6)
        t = AffineTransform.identity()
        m = matches_with_residuals(t, [1.0] * 9 + [100.0], rng)
        out = keypoint_distance_stats(m, t)
        assert out["median_px"] == pytest.approx(1.0, abs=1e-9)
        assert out["mean_px"] == pytest.approx(10.9, abs=1e-6)
        assert out["mean_px"] > 10 * out["median_px"]

    def test_direct_computation(self):
        rng = np.random.default_rng(7)
        m = matches_with_residuals(AffineTransform.identity(), [1.0, 2.0, 100.0], rng)
        out = keypoint_distance_stats(m, AffineTransform.identity())
        assert out["mean_px"] == pytest.approx(34.3333333, abs=1e-6)
        assert out["median_px"] == pytest.approx(2.0, abs=1e-9)

    def test_empty_matches_rejected(self):
        empty = MatchSet(np.empty((0, 2)), np.empty(0))
        with pytest.raises(ValueError):
            keypoint_distance_stats(empty, AffineTransform.identity())


@pytest.fixture(scope="module")
def image_and_roi():
    img = vessel_image(10, 96)
    return img, estimate_roi(img)


class TestSyntheticPairs:

    def test_color_mode_identity_transform(self, image_and_roi):
        img, roi = image_and_roi
        pair = make_synthetic_pair(np.random.default_rng(0), img, roi, "color",
                                   control_count=500)
        np.testing.assert_array_equal(pair.true_transform.matrix,
                                      [[1, 0, 0], [0, 1, 0]])
        score = registration_score(Homography.identity(), pair.control_points)
        assert score["auc"] == 1.0
        assert not np.array_equal(pair.moving, pair.fixed)  # jitter applied

    def test_geometric_mode_reproducible(self, image_and_roi):
        img, roi = image_and_roi
        a = make_synthetic_pair(np.random.default_rng(42), img, roi, "geometric",
                                control_count=100)
        b = make_synthetic_pair(np.random.default_rng(42), img, roi, "geometric",
                                control_count=100)
        np.testing.assert_array_equal(a.true_transform.matrix, b.true_transform.matrix)
        np.testing.assert_array_equal(a.moving, b.moving)
        np.testing.assert_array_equal(a.control_points.fixed_pts.coords,
                                      b.control_points.fixed_pts.coords)

    def test_triplet_shares_parameters(self, image_and_roi):
        img, roi = image_and_roi
        triplet = make_synthetic_triplet(np.random.default_rng(7), img, roi,
                                         control_count=200)
        np.testing.assert_array_equal(
            triplet["full"].true_transform.matrix,
            triplet["geometric"].true_transform.matrix,
        )
        # color params shared: the color pair's moving equals jitter(fixed),
        # generated from the same seed as full's jitter
        assert triplet["color"].mode == "color"
        np.testing.assert_array_equal(
            triplet["color"].control_points.fixed_pts.coords,
            triplet["full"].control_points.fixed_pts.coords,
        )

    def test_control_points_round_trip(self, image_and_roi):
        img, roi = image_and_roi
        pair = make_synthetic_pair(np.random.default_rng(3), img, roi, "geometric",
                                   control_count=300)
        from unconked.geometry import warp_points
        back = warp_points(pair.true_transform.inverse(), pair.control_points.moving_pts)
        np.testing.assert_allclose(back.coords, pair.control_points.fixed_pts.coords,
                                   atol=1e-6)

    def test_five_thousand_control_points_default(self, image_and_roi):
        img, roi = image_and_roi
        pair = make_synthetic_pair(np.random.default_rng(4), img, roi, "geometric")
        assert len(pair.control_points) == 5000

    def test_unknown_mode_rejected(self, image_and_roi):
        img, roi = image_and_roi
        with pytest.raises(ValueError):
            make_synthetic_pair(np.random.default_rng(0), img, roi, "elastic")


def reg_result(success):
    h = Homography.identity() if success else None
    return RegistrationResult(success, h, 10 if success else 0, 10, (50, 50))


class TestAggregate:
    def test_all_registered_normalized_equals_raw(self):
        results = [(reg_result(True), MetricBundle(iou=0.8, dice=0.7, iom=0.9, sm=0.6, ssim=0.5))
                   for _ in range(4)]
        report = aggregate(results, totals=4)
        assert report.pairs_registered == 4
        assert report.normalized == report.raw

    def test_half_registered_halves_metrics(self):
        ok = (reg_result(True), MetricBundle(iou=0.8))
        bad = (reg_result(False), None)
        report = aggregate([ok, bad], totals=2)
        assert report.raw["iou"] == pytest.approx(0.8)
        assert report.normalized["iou"] == pytest.approx(0.4)

    def test_zero_registered_all_zero(self):
        report = aggregate([(reg_result(False), None)] * 3, totals=3)
        assert all(v == 0.0 for v in report.normalized.values())
        assert report.pairs_registered == 0

    def test_zero_totals_rejected(self):
        with pytest.raises(ValueError):
            aggregate([], totals=0)

    def test_more_results_than_totals_rejected(self):
        with pytest.raises(ValueError):
            aggregate([(reg_result(True), MetricBundle())] * 3, totals=2)

    def test_lpips_reported_unavailable(self):
        report = aggregate([(reg_result(True), MetricBundle())], totals=1)
        assert report.lpips == "unavailable"
