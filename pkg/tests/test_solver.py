import math

import numpy as np
import pytest

from splatrefine.errors import DegenerateError, NoSolutionError
from splatrefine.geometry import Pose, Rotation, backproject, jitter, rotation_error_deg, translation_error
from splatrefine.lifting import Corr2D3D
from splatrefine.solver import (
    RansacConfig,
    apply_update,
    p3p,
    p3p_bearings,
    ransac_pnp,
    refine_reprojection,
    reprojection_errors,
    reprojection_jacobian,
    reprojection_residuals,
)

from support import VGA_K, random_pose, synthetic_corrs


def contains(candidates, pose, rot_tol=1e-6, trans_tol=1e-6):
    return any(
        rotation_error_deg(c, pose) < rot_tol and translation_error(c, pose) < trans_tol for c in candidates
    )


class TestP3P:
    @pytest.mark.parametrize("seed", range(100))
    def test_recovers_true_pose(self, seed):
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        corrs, _ = synthetic_corrs(rng, VGA_K, pose, 3)
        sols = p3p(corrs, VGA_K)
        assert len(sols) <= 4 and contains(sols, pose)

    def test_equilateral_on_axis(self):
        # three points at unit distance from the optical axis, 5 m away
        ang = np.deg2rad([90.0, 210.0, 330.0])
        world = np.column_stack([np.cos(ang), np.sin(ang), np.full(3, 5.0)])
        rays = world / np.linalg.norm(world, axis=1, keepdims=True)
        sols = p3p_bearings(world, rays)
        assert 1 <= len(sols) <= 4
        assert contains(sols, Pose.identity(), 1e-9, 1e-9)
        for s in sols:
            cam = s.apply(world)
            assert np.all(cam[:, 2] > 0)
            assert np.allclose(cam / np.linalg.norm(cam, axis=1, keepdims=True), rays, atol=1e-9)

    def test_collinear_points(self):
        world = np.array([[0.0, 0.0, 4.0], [1.0, 0.0, 4.0], [2.0, 0.0, 4.0]])
        uv = world[:, :2] / world[:, 2:] * VGA_K.fx + [VGA_K.cx, VGA_K.cy]
        with pytest.raises(DegenerateError):
            p3p(Corr2D3D(uv, world, np.ones(3)), VGA_K)

    def test_coincident_pixels(self):
        world = np.array([[0.0, 0.0, 4.0], [1.0, 0.0, 4.0], [0.0, 1.0, 4.0]])
        with pytest.raises(DegenerateError):
            p3p(Corr2D3D(np.tile([320.0, 240.0], (3, 1)), world, np.ones(3)), VGA_K)

    def test_wrong_count(self):
        rng = np.random.default_rng(0)
        corrs, _ = synthetic_corrs(rng, VGA_K, Pose.identity(), 4)
        with pytest.raises(ValueError):
            p3p(corrs, VGA_K)


class TestReprojection:
    def test_errors_and_cheirality(self):
        pts = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, -5.0]])
        px = np.array([[323.0, 244.0], [320.0, 240.0]])
        err, front = reprojection_errors(Pose.identity(), pts, px, VGA_K)
        assert err[0] == pytest.approx(5.0) and math.isinf(err[1])
        assert front.tolist() == [True, False]

    @pytest.mark.parametrize("seed", range(100))
    def test_jacobian_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        corrs, _ = synthetic_corrs(rng, VGA_K, pose, 10, noise_px=2.0)
        J = reprojection_jacobian(pose, corrs.points_world, VGA_K)
        h = 1e-6
        fd = np.empty_like(J)
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            up = reprojection_residuals(apply_update(pose, d), corrs.points_world, corrs.pixels_q, VGA_K)
            down = reprojection_residuals(apply_update(pose, -d), corrs.points_world, corrs.pixels_q, VGA_K)
            fd[:, k] = (up - down) / (2 * h)
        assert np.linalg.norm(fd - J) / np.linalg.norm(J) < 1e-5


class TestRefine:
    def test_at_truth_unchanged(self):
        rng = np.random.default_rng(1)
        pose = random_pose(rng)
        corrs, _ = synthetic_corrs(rng, VGA_K, pose, 50)
        out = refine_reprojection(pose, corrs, VGA_K)
        assert not out.degenerate
        assert np.abs(out.pose.matrix - pose.matrix).max() < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_converges_from_one_degree(self, seed):
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        corrs, _ = synthetic_corrs(rng, VGA_K, pose, 50)
        start = jitter(pose, 1.0, 0.0, seed)
        out = refine_reprojection(start, corrs, VGA_K, iters=10)
        assert out.iterations <= 10
        assert rotation_error_deg(out.pose, pose) < 1e-6
        assert np.all(np.diff(out.costs) <= 0)

    def test_cost_monotone_under_noise(self):
        rng = np.random.default_rng(3)
        pose = random_pose(rng)
        corrs, _ = synthetic_corrs(rng, VGA_K, pose, 40, noise_px=3.0)
        out = refine_reprojection(jitter(pose, 3.0, 0.1, 2), corrs, VGA_K)
        assert np.all(np.diff(out.costs) <= 0)

    def test_degenerate_geometry(self):
        # every point on a single ray: the normal matrix is rank deficient
        world = np.tile([[0.0, 0.0, 5.0]], (6, 1)) * np.linspace(1, 2, 6)[:, None]
        px = np.tile([VGA_K.cx, VGA_K.cy], (6, 1))
        out = refine_reprojection(Pose.identity(), Corr2D3D(px, world, np.ones(6)), VGA_K)
        assert out.degenerate and out.pose is not None

    def test_too_few(self):
        rng = np.random.default_rng(0)
        corrs, _ = synthetic_corrs(rng, VGA_K, Pose.identity(), 3)
        with pytest.raises(ValueError):
            refine_reprojection(Pose.identity(), corrs, VGA_K)


class TestRansac:
    @pytest.mark.parametrize("seed", range(5))
    def test_noiseless_exact(self, seed):
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        corrs, _ = synthetic_corrs(rng, VGA_K, pose, 100)
        res = ransac_pnp(corrs, VGA_K, RansacConfig(seed=seed))
        assert rotation_error_deg(res.pose, pose) < 1e-6
        assert translation_error(res.pose, pose) < 1e-9
        assert res.n_inliers == 100

    def test_three_correspondences(self):
        rng = np.random.default_rng(0)
        corrs, _ = synthetic_corrs(rng, VGA_K, Pose.identity(), 3)
        with pytest.raises(NoSolutionError) as exc:
            ransac_pnp(corrs, VGA_K)
        assert exc.value.diagnostics["n_corrs"] == 3

    def test_all_outliers(self):
        rng = np.random.default_rng(1)
        corrs, _ = synthetic_corrs(rng, VGA_K, Pose.identity(), 60, outlier_frac=1.0)
        with pytest.raises(NoSolutionError):
            ransac_pnp(corrs, VGA_K, RansacConfig(max_iterations=300))

    def test_seed_determinism(self):
        rng = np.random.default_rng(2)
        pose = random_pose(rng)
        corrs, _ = synthetic_corrs(rng, VGA_K, pose, 150, noise_px=1.0, outlier_frac=0.4)
        a = ransac_pnp(corrs, VGA_K, RansacConfig(seed=7))
        b = ransac_pnp(corrs, VGA_K, RansacConfig(seed=7))
        assert np.array_equal(a.pose.matrix, b.pose.matrix)
        assert np.array_equal(a.inlier_indices, b.inlier_indices)

    def test_inlier_predicate(self):
        rng = np.random.default_rng(3)
        pose = random_pose(rng)
        corrs, _ = synthetic_corrs(rng, VGA_K, pose, 200, noise_px=1.5, outlier_frac=0.3)
        cfg = RansacConfig(inlier_threshold_px=3.0)
        res = ransac_pnp(corrs, VGA_K, cfg)
        err, front = reprojection_errors(res.pose, corrs.points_world, corrs.pixels_q, VGA_K)
        expected = np.flatnonzero(front & (err <= cfg.inlier_threshold_px))
        assert np.array_equal(np.sort(res.inlier_indices), expected)
        assert res.mean_reprojection_error == pytest.approx(err[expected].mean())

    def test_outliers_rejected(self):
        rng = np.random.default_rng(4)
        pose = random_pose(rng)
        corrs, out = synthetic_corrs(rng, VGA_K, pose, 200, noise_px=1.0, outlier_frac=0.5)
        res = ransac_pnp(corrs, VGA_K)
        assert rotation_error_deg(res.pose, pose) < 0.5
        assert np.mean(out[res.inlier_indices]) < 0.05

    def test_weighted_scoring(self):
        rng = np.random.default_rng(5)
        pose = random_pose(rng)
        corrs, out = synthetic_corrs(rng, VGA_K, pose, 120, noise_px=1.0, outlier_frac=0.3)
        conf = np.where(out, 0.1, 1.0)
        corrs = Corr2D3D(corrs.pixels_q, corrs.points_world, conf)
        res = ransac_pnp(corrs, VGA_K, RansacConfig(weighted=True))
        assert rotation_error_deg(res.pose, pose) < 0.5

    def test_min_inliers_enforced(self):
        rng = np.random.default_rng(6)
        corrs, _ = synthetic_corrs(rng, VGA_K, Pose.identity(), 20)
        with pytest.raises(NoSolutionError):
            ransac_pnp(corrs, VGA_K, RansacConfig(min_inliers=21))

    @pytest.mark.parametrize(
        "kwargs", [{"inlier_threshold_px": 0.0}, {"max_iterations": 0}, {"confidence": 1.0}, {"min_inliers": 3}]
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            RansacConfig(**kwargs)

    def test_rotation_only_world(self):
        # points on a plane still determine the pose
        rng = np.random.default_rng(8)
        pose = Pose(Rotation.from_rotvec([0.1, -0.2, 0.05]), [0.2, 0.1, 0.3])
        uv = np.column_stack([rng.uniform(0, 639, 80), rng.uniform(0, 479, 80)])
        plane = backproject(VGA_K, Pose.identity(), uv, np.full(80, 4.0))
        X = pose.inverse().apply(plane)
        res = ransac_pnp(Corr2D3D(uv, X, np.ones(80)), VGA_K)
        assert rotation_error_deg(res.pose, pose) < 1e-6
