import numpy as np
import pytest

from objreg.geometry import RigidPose, apply_rigid, compose
from objreg.procrustes import (
    AlignmentResult,
    DegenerateAlignmentError,
    FilterConfig,
    icp_refine,
    kabsch_filter,
    kabsch_solve,
)
from objreg.metrics import pose_error


def random_pose(rng, max_angle=np.pi, max_trans=2.0):
    return RigidPose(
        rng.uniform(-max_angle, max_angle, 3), rng.uniform(-max_trans, max_trans, 3)
    )


class TestKabschSolve:
    def test_identity_on_equal_sets(self):
        pts = np.random.default_rng(0).uniform(-1, 1, (30, 3))
        res = kabsch_solve(pts, pts)
        assert res.rms_residual < 1e-12
        assert np.abs(res.pose.to_matrix() - np.eye(4)).max() < 1e-9

    def test_recovers_constructed_transform(self):
        rng = np.random.default_rng(1)
        src = rng.uniform(-1, 1, (50, 3))
        gt = RigidPose(np.array([0.0, 0.0, np.pi / 2]), np.array([1.0, 0.0, 0.0]))
        res = kabsch_solve(src, apply_rigid(gt, src))
        assert np.abs(res.pose.to_matrix() - gt.to_matrix()).max() < 1e-9
        assert res.rms_residual < 1e-9

    def test_minimality_random_search_oracle(self):
        rng = np.random.default_rng(2)
        src = rng.uniform(-1, 1, (200, 3))
        gt = random_pose(rng)
        tgt = apply_rigid(gt, src) + rng.normal(0, 0.005, (200, 3))
        res = kabsch_solve(src, tgt)
        base = np.sum((apply_rigid(res.pose, src) - tgt) ** 2)
        for _ in range(10000):
            cand = RigidPose(
                gt.angles + rng.normal(0, 0.05, 3), gt.translation + rng.normal(0, 0.05, 3)
            )
            assert np.sum((apply_rigid(cand, src) - tgt) ** 2) >= base - 1e-12

    def test_weighted_zero_weight_ignores_outlier(self):
        rng = np.random.default_rng(3)
        src = rng.uniform(-1, 1, (20, 3))
        gt = random_pose(rng)
        tgt = apply_rigid(gt, src)
        tgt[0] += 5.0
        w = np.ones(20)
        w[0] = 0.0
        res = kabsch_solve(src, tgt, weights=w)
        assert np.abs(res.pose.to_matrix() - gt.to_matrix()).max() < 1e-9

    def test_too_few_pairs(self):
        with pytest.raises(DegenerateAlignmentError):
            kabsch_solve(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_degenerate(self):
        line = np.outer(np.linspace(0, 1, 10), [1.0, 0.0, 0.0])
        with pytest.raises(DegenerateAlignmentError):
            kabsch_solve(line, line + [0.0, 1.0, 0.0])

    def test_left_invariance(self):
        rng = np.random.default_rng(4)
        src = rng.uniform(-1, 1, (40, 3))
        tgt = apply_rigid(random_pose(rng), src) + rng.normal(0, 0.01, (40, 3))
        base = kabsch_solve(src, tgt)
        for _ in range(20):
            g = random_pose(rng)
            res = kabsch_solve(src, apply_rigid(g, tgt))
            expect = compose(g, base.pose)
            assert np.abs(res.pose.to_matrix() - expect.to_matrix()).max() < 1e-9

    def test_orthonormality(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            src = rng.uniform(-1, 1, (10, 3))
            tgt = rng.uniform(-1, 1, (10, 3))
            r = kabsch_solve(src, tgt).pose.rotation
            assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
            assert np.linalg.det(r) > 0


class TestKabschFilter:
    def test_clean_data_all_inliers(self):
        rng = np.random.default_rng(6)
        src = rng.uniform(-1, 1, (50, 3))
        gt = random_pose(rng)
        tgt = apply_rigid(gt, src)
        res = kabsch_filter(src, tgt, FilterConfig(0.20, 3, 10))
        assert res.inlier_flags.all()
        direct = kabsch_solve(src, tgt)
        assert np.abs(res.pose.to_matrix() - direct.pose.to_matrix()).max() < 1e-9

    def test_planted_outliers_removed(self):
        rng = np.random.default_rng(7)
        src = rng.uniform(-1, 1, (100, 3))
        gt = random_pose(rng)
        tgt = apply_rigid(gt, src) + rng.normal(0, 0.005, (100, 3))
        planted = rng.permutation(100)[:30]
        dirs = rng.normal(size=(30, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        tgt[planted] += dirs * rng.uniform(0.5, 1.0, 30)[:, None]
        res = kabsch_filter(src, tgt, FilterConfig(0.20, 3, 10))
        flagged = ~res.inlier_flags
        assert flagged[planted].mean() >= 0.95
        rot, trans = pose_error(res.pose, gt)
        assert trans < 0.01 and rot < 0.5

    def test_min_pairs_breach(self):
        pts = np.random.default_rng(8).uniform(-1, 1, (2, 3))
        with pytest.raises(DegenerateAlignmentError):
            kabsch_filter(pts, pts, FilterConfig(0.20, 3, 10))

    def test_inlier_set_shrinks_monotonically(self):
        # outliers are never re-admitted: final flags subset of all-ones and
        # rerunning the filter on survivors is a fixed point
        rng = np.random.default_rng(9)
        src = rng.uniform(-1, 1, (60, 3))
        tgt = apply_rigid(random_pose(rng), src)
        tgt[:10] += 0.6
        res = kabsch_filter(src, tgt, FilterConfig(0.20, 3, 10))
        keep = res.inlier_flags
        res2 = kabsch_filter(src[keep], tgt[keep], FilterConfig(0.20, 3, 10))
        assert res2.inlier_flags.all()


class TestIcpRefine:
    def surface(self, rng, n=1000):
        # bumpy plane, full-rank geometry
        xy = rng.uniform(-1, 1, (n, 2))
        z = 0.1 * np.sin(3 * xy[:, 0]) + 0.08 * np.cos(4 * xy[:, 1])
        return np.column_stack([xy, z])

    def test_ground_truth_is_fixed_point(self):
        rng = np.random.default_rng(10)
        src = self.surface(rng)
        gt = random_pose(rng, max_angle=0.5, max_trans=0.5)
        tgt = apply_rigid(gt, src)
        res = icp_refine(src, tgt, gt, max_corr_dist=0.1)
        assert np.abs(res.pose.to_matrix() - gt.to_matrix()).max() < 1e-9

    def test_converges_from_small_perturbation(self):
        rng = np.random.default_rng(11)
        src = self.surface(rng)
        gt = random_pose(rng, max_angle=0.5, max_trans=0.5)
        tgt = apply_rigid(gt, src)
        init = RigidPose(
            gt.angles + np.deg2rad(2.0) * rng.uniform(-1, 1, 3) / np.sqrt(3),
            gt.translation + 0.02 * rng.uniform(-1, 1, 3) / np.sqrt(3),
        )
        res = icp_refine(src, tgt, init, max_corr_dist=0.1, max_iters=50)
        rot, trans = pose_error(res.pose, gt)
        assert trans < 1e-3 and rot < 0.1

    def test_rms_monotone_non_increasing(self):
        rng = np.random.default_rng(12)
        src = self.surface(rng)
        gt = random_pose(rng, max_angle=0.3, max_trans=0.3)
        tgt = apply_rigid(gt, src) + rng.normal(0, 0.002, src.shape)
        init = RigidPose(gt.angles + 0.02, gt.translation + 0.02)
        res = icp_refine(src, tgt, init, max_corr_dist=0.1, max_iters=50)
        hist = np.array(res.rms_history)
        assert np.all(np.diff(hist) <= 1e-12)

    def test_disjoint_clouds_noop(self):
        rng = np.random.default_rng(13)
        src = rng.uniform(-1, 1, (50, 3))
        tgt = src + np.array([10.0, 0.0, 0.0])
        init = RigidPose.identity()
        res = icp_refine(src, tgt, init, max_corr_dist=0.1)
        assert not res.converged
        assert np.abs(res.pose.to_matrix() - np.eye(4)).max() < 1e-12

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            icp_refine(np.zeros((0, 3)), np.ones((5, 3)))


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(distance_threshold=-1.0)
    with pytest.raises(ValueError):
        FilterConfig(min_pairs=2)
