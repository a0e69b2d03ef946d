import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from lidarup.geometry import PointCloud
from lidarup.metrics import (
    EvalProtocol,
    apply_protocol,
    chamfer,
    chamfer_terms,
    depth_error_percent,
    emd_auction,
    emd_auction_details,
    evaluate_pair,
    outlier_mask,
)


def brute_chamfer(pa: np.ndarray, pb: np.ndarray) -> float:
    d2 = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=2)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def hungarian_emd(pa: np.ndarray, pb: np.ndarray) -> float:
    d2 = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(d2)
    return float(d2[rows, cols].mean())


class TestChamfer:
    def test_two_point_oracle(self):
        # {(0,0,0)} vs {(1,0,0)}: each direction contributes 1.0
        a = PointCloud(np.zeros((1, 3)))
        b = PointCloud(np.array([[1.0, 0.0, 0.0]]))
        assert chamfer(a, b) == pytest.approx(2.0, abs=1e-15)

    def test_identical_clouds_zero(self, rng):
        pts = rng.normal(size=(50, 3))
        assert chamfer(PointCloud(pts), PointCloud(pts.copy())) == 0.0

    def test_asymmetric_structure_oracle(self):
        # a = {0, 2}, b = {0}: sizes equalized first, so a drops one point.
        # With seed 0 the survivor determines the value: either 0 or 8.
        a = PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
        b = PointCloud(np.array([[0.0, 0, 0]]))
        assert chamfer(a, b, seed=0) in (0.0, 8.0)

    def test_matches_brute_force(self, rng):
        for _ in range(25):
            na = rng.integers(1, 40)
            pa = rng.normal(size=(na, 3)) * rng.uniform(0.5, 3.0)
            pb = rng.normal(size=(na, 3)) + rng.uniform(-2, 2, size=3)
            got = chamfer(PointCloud(pa), PointCloud(pb))
            assert got == pytest.approx(brute_chamfer(pa, pb), abs=1e-12)

    def test_terms_shapes(self, rng):
        a = PointCloud(rng.normal(size=(30, 3)))
        b = PointCloud(rng.normal(size=(12, 3)))
        d_ab, d_ba = chamfer_terms(a, b, seed=4)
        assert d_ab.shape == (12,) and d_ba.shape == (12,)
        assert (d_ab >= 0).all() and (d_ba >= 0).all()

    def test_equalize_deterministic(self, rng):
        a = PointCloud(rng.normal(size=(60, 3)))
        b = PointCloud(rng.normal(size=(25, 3)))
        assert chamfer(a, b, seed=7) == chamfer(a, b, seed=7)

    def test_empty_rejected(self):
        a = PointCloud(np.zeros((0, 3)))
        b = PointCloud(np.ones((2, 3)))
        with pytest.raises(ValueError, match="non-empty"):
            chamfer(a, b)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 30))
    @settings(max_examples=40, deadline=None)
    def test_brute_force_property(self, seed, n):
        r = np.random.default_rng(seed)
        pa = r.uniform(-5, 5, size=(n, 3))
        pb = r.uniform(-5, 5, size=(n, 3))
        assert chamfer(PointCloud(pa), PointCloud(pb)) == pytest.approx(
            brute_chamfer(pa, pb), abs=1e-12
        )


class TestEmdAuction:
    def test_permutation_is_exact_zero(self, rng):
        pts = rng.normal(size=(40, 3))
        perm = rng.permutation(40)
        value, assign, _, _ = emd_auction_details(
            PointCloud(pts), PointCloud(pts[perm]), epsilon=1e-9
        )
        # the shuffle must be undone exactly, making the value a true zero
        assert np.array_equal(pts[perm][assign], pts)
        assert value == 0.0

    def test_two_point_oracle(self):
        a = PointCloud(np.array([[0.0, 0, 0], [10.0, 0, 0]]))
        b = PointCloud(np.array([[10.5, 0, 0], [0.5, 0, 0]]))
        # optimal pairing: 0 -> 0.5 and 10 -> 10.5, mean cost 0.25
        value, assign, costs, _ = emd_auction_details(a, b, epsilon=1e-6)
        assert value == pytest.approx(0.25, abs=1e-9)
        assert assign.tolist() == [1, 0]
        assert np.allclose(costs, [0.25, 0.25])

    def test_within_bound_of_hungarian(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 50))
            pa = rng.uniform(-3, 3, size=(n, 3))
            pb = rng.uniform(-3, 3, size=(n, 3))
            value, _, _, eps_final = emd_auction_details(PointCloud(pa), PointCloud(pb))
            exact = hungarian_emd(pa, pb)
            # total cost within n * eps of optimal, so the mean is within eps
            assert value >= exact - 1e-12
            assert value - exact <= eps_final + 1e-12

    def test_small_epsilon_matches_hungarian(self, rng):
        for _ in range(10):
            n = int(rng.integers(2, 25))
            pa = rng.uniform(-2, 2, size=(n, 3))
            pb = rng.uniform(-2, 2, size=(n, 3))
            value = emd_auction(PointCloud(pa), PointCloud(pb), epsilon=1e-9 / n)
            assert value == pytest.approx(hungarian_emd(pa, pb), abs=1e-7)

    def test_assignment_is_bijection(self, rng):
        pa = rng.normal(size=(30, 3))
        pb = rng.normal(size=(30, 3))
        _, assign, _, _ = emd_auction_details(PointCloud(pa), PointCloud(pb))
        assert np.array_equal(np.sort(assign), np.arange(30))

    def test_emd_at_least_directed_chamfer(self, rng):
        # any bijection costs at least the nearest-neighbor lower bound
        pa = rng.normal(size=(25, 3))
        pb = rng.normal(size=(25, 3)) + 0.5
        a, b = PointCloud(pa), PointCloud(pb)
        d_ab, d_ba = chamfer_terms(a, b)
        assert emd_auction(a, b) >= max(d_ab.mean(), d_ba.mean()) - 1e-12

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError, match="equal cloud sizes"):
            emd_auction(PointCloud(np.zeros((2, 3))), PointCloud(np.zeros((3, 3))))

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            emd_auction(PointCloud(np.zeros((0, 3))), PointCloud(np.zeros((0, 3))))

    def test_epsilon_validation(self, rng):
        pts = rng.normal(size=(4, 3))
        with pytest.raises(ValueError, match="epsilon"):
            emd_auction(PointCloud(pts), PointCloud(pts), epsilon=0.0)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 16))
    @settings(max_examples=30, deadline=None)
    def test_exactness_property(self, seed, n):
        r = np.random.default_rng(seed)
        pa = r.uniform(-4, 4, size=(n, 3))
        pb = r.uniform(-4, 4, size=(n, 3))
        value = emd_auction(PointCloud(pa), PointCloud(pb), epsilon=1e-10)
        assert value == pytest.approx(hungarian_emd(pa, pb), abs=n * 1e-10 + 1e-9)


class TestDepthError:
    def test_oracles(self):
        assert depth_error_percent(9.4, 10.0) == pytest.approx(6.0, abs=1e-12)
        assert depth_error_percent(10.13, 10.0) == pytest.approx(1.3, abs=1e-9)
        assert depth_error_percent(10.0, 10.0) == 0.0

    def test_true_depth_validated(self):
        with pytest.raises(ValueError, match="positive"):
            depth_error_percent(5.0, 0.0)


class TestOutlierMask:
    def test_tukey_oracle(self):
        errs = np.array([1.0, 1.0, 1.0, 1.0, 100.0])
        mask = outlier_mask(errs)
        assert mask.tolist() == [False, False, False, False, True]

    def test_uniform_errors_no_outliers(self):
        assert not outlier_mask(np.full(10, 3.3)).any()

    def test_fence_is_strict(self):
        # Q1 = Q3 = 0 puts the fence at 0: equal values stay in, any
        # positive value is out
        mask = outlier_mask(np.array([0.0, 0.0, 0.0, 0.0, 1.0]))
        assert mask.tolist() == [False, False, False, False, True]

    def test_validation(self):
        with pytest.raises(ValueError):
            outlier_mask(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            outlier_mask(np.array([]))


class TestEvalProtocol:
    def test_describe(self):
        assert EvalProtocol().describe() == "raw"
        p = EvalProtocol(
            crop=((-5.0, 5.0), (-np.inf, np.inf), (0.0, 3.0)),
            target_points=1000,
            remove_ground=True,
        )
        desc = p.describe()
        assert desc.startswith("ground-removed+crop[")
        assert desc.endswith("+downsample1000")

    def test_crop_inclusive(self):
        cloud = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [1.1, 0, 0]]))
        proto = EvalProtocol(crop=((0.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)))
        out = apply_protocol(cloud, proto)
        assert len(out) == 2

    def test_downsample_seeded(self, rng):
        cloud = PointCloud(rng.normal(size=(500, 3)))
        proto = EvalProtocol(target_points=100, seed=5)
        a = apply_protocol(cloud, proto)
        b = apply_protocol(cloud, proto)
        assert np.array_equal(a.points, b.points)
        assert len(a) == 100

    def test_downsample_noop_when_small(self, rng):
        cloud = PointCloud(rng.normal(size=(50, 3)))
        out = apply_protocol(cloud, EvalProtocol(target_points=100))
        assert len(out) == 50

    def test_ground_removal_needs_plane(self, rng):
        from lidarup.association import Plane

        pts = np.vstack([np.zeros((10, 3)), np.array([[0.0, 0.0, 2.0]] * 5)])
        cloud = PointCloud(pts)
        proto = EvalProtocol(remove_ground=True)
        # without a plane nothing is removed
        assert len(apply_protocol(cloud, proto)) == 15
        plane = Plane(np.array([0.0, 0.0, 1.0]), 0.0)
        out = apply_protocol(cloud, proto, ground=plane)
        assert len(out) == 5
        assert np.allclose(out.points[:, 2], 2.0)

    def test_order_ground_then_crop_then_downsample(self, rng):
        from lidarup.association import Plane

        # crop keeps z <= 1.5: if downsampling ran first the far points
        # could survive; the fixed order makes the result exact
        pts = np.vstack(
            [
                np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200), np.zeros(200)]),
                np.column_stack([rng.uniform(-1, 1, 40), rng.uniform(-1, 1, 40), np.full(40, 1.0)]),
                np.column_stack([rng.uniform(-1, 1, 40), rng.uniform(-1, 1, 40), np.full(40, 9.0)]),
            ]
        )
        proto = EvalProtocol(
            crop=((-2.0, 2.0), (-2.0, 2.0), (-2.0, 2.0)), target_points=30, remove_ground=True
        )
        out = apply_protocol(PointCloud(pts), proto, ground=Plane(np.array([0.0, 0.0, 1.0]), 0.0))
        assert len(out) == 30
        assert np.allclose(out.points[:, 2], 1.0)


class TestEvaluatePair:
    def test_report_fields(self, rng):
        a = PointCloud(rng.normal(size=(80, 3)))
        b = PointCloud(rng.normal(size=(60, 3)))
        rep = evaluate_pair(a, b)
        assert rep.n_points_a == 80 and rep.n_points_b == 60
        assert rep.cd > 0 and rep.emd is not None
        assert rep.emd >= 0.0
        assert rep.outlier_mask is not None and rep.outlier_mask.shape == (60,)
        d = rep.to_dict()
        assert d["cd_m2"] == rep.cd
        assert d["n_points"] == [80, 60]
        assert d["protocol"] == "raw"
        assert "cd_m2_robust" in d and "emd_m2_robust" in d

    def test_compute_emd_off(self, rng):
        a = PointCloud(rng.normal(size=(20, 3)))
        rep = evaluate_pair(a, a, compute_emd=False)
        assert rep.emd is None and rep.emd_robust is None and rep.outlier_mask is None
        assert rep.cd == 0.0

    def test_robust_discounts_spike(self, rng):
        pts = rng.normal(size=(60, 3))
        spiked = pts.copy()
        spiked[0] += 40.0
        rep = evaluate_pair(PointCloud(pts), PointCloud(spiked))
        assert rep.cd_robust < rep.cd
        assert rep.emd_robust < rep.emd

    def test_identical_clouds(self, rng):
        pts = rng.normal(size=(30, 3))
        rep = evaluate_pair(PointCloud(pts), PointCloud(pts.copy()))
        assert rep.cd == 0.0
        # the default auction epsilon is coarse: the optimum here is 0 and
        # the mean may sit above it by at most that epsilon
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        eps_default = float(np.sum((hi - lo) ** 2)) / (len(pts) + 1)
        assert 0.0 <= rep.emd <= eps_default

    def test_protocol_threads_through(self, rng):
        pts = rng.normal(size=(300, 3))
        proto = EvalProtocol(target_points=50, seed=9)
        rep = evaluate_pair(PointCloud(pts), PointCloud(pts.copy()), protocol=proto)
        assert rep.n_points_a == 50 and rep.n_points_b == 50
        assert rep.protocol == "downsample50"
        assert rep.seed == 9
