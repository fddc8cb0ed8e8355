import math

import numpy as np
import pytest

from splatrefine.errors import FormatError, ScaleRecoveryError
from splatrefine.geometry import Pose, Rotation, compose, jitter
from splatrefine.matching import PointMapEstimate, oracle_pointmap, relative_pose
from splatrefine.relpose import compose_refined, load_pointmap, recover_scale, save_pointmap
from splatrefine.renderer import normalized_depth, render

from support import ROOM_K, random_pose, random_rotation


def homogeneous(R, t):
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def uniform_pointmap(depth, s, valid=None):
    h, w = depth.shape
    pts = np.zeros((h, w, 3))
    pts[..., 2] = depth / s
    valid = np.ones((h, w), bool) if valid is None else valid
    return PointMapEstimate(pts, valid, Rotation.identity(), np.zeros(3))


class TestRecoverScale:
    def test_uniform_ratio(self):
        depth = np.random.default_rng(0).uniform(1, 5, (10, 10))
        est = recover_scale(uniform_pointmap(depth, 2.0), depth, np.ones((10, 10), bool))
        assert est.s == 2.0 and est.count == 100 and est.dispersion == 0.0

    def test_outlier_pixels_ignored(self):
        rng = np.random.default_rng(1)
        depth = rng.uniform(1, 5, (10, 10))
        pm = uniform_pointmap(depth, 2.0)
        bad = rng.choice(100, 20, replace=False)
        pm.points.reshape(-1, 3)[bad, 2] = 1e-6
        est = recover_scale(pm, depth, np.ones((10, 10), bool))
        assert est.s == 2.0

    def test_scale_equivariance(self):
        rng = np.random.default_rng(2)
        depth = rng.uniform(1, 5, (8, 8))
        pts = np.zeros((8, 8, 3))
        pts[..., 2] = rng.uniform(0.5, 2, (8, 8))
        valid = np.ones((8, 8), bool)
        a = recover_scale(PointMapEstimate(pts, valid, Rotation.identity(), np.zeros(3)), depth, valid)
        b = recover_scale(PointMapEstimate(pts * 4.0, valid, Rotation.identity(), np.zeros(3)), depth, valid)
        assert b.s == pytest.approx(a.s / 4.0, rel=1e-15)

    def test_too_few_samples(self):
        depth = np.ones((7, 7))
        with pytest.raises(ScaleRecoveryError):
            recover_scale(uniform_pointmap(depth, 1.0), depth, np.ones((7, 7), bool))

    def test_shape_mismatch(self):
        with pytest.raises(ScaleRecoveryError):
            recover_scale(uniform_pointmap(np.ones((8, 8)), 1.0), np.ones((9, 8)), np.ones((9, 8), bool))

    def test_oracle_third(self, room, room_gt):
        gt = room_gt[2]
        init = jitter(gt, 5.0, 0.2, 1)
        view = render(room, ROOM_K, init)
        depth, valid = normalized_depth(view)
        pm = oracle_pointmap(room, ROOM_K, gt, init, scale_corruption=1 / 3, render_view=view)
        assert recover_scale(pm, depth, valid).s == pytest.approx(3.0, abs=1e-9)


class TestComposeRefined:
    def test_identity_relative(self):
        p = random_pose(np.random.default_rng(0))
        out = compose_refined(p, Rotation.identity(), np.zeros(3), 7.0)
        assert np.array_equal(out.R, p.R) and np.array_equal(out.translation, p.translation)

    def test_quarter_turn_example(self):
        init = Pose(Rotation.identity(), [1.0, 0.0, 0.0])
        rz = Rotation.from_axis_angle([0, 0, 1], math.pi / 2)
        out = compose_refined(init, rz, [0.0, 0.0, 1.0], 2.0)
        assert np.allclose(out.translation, [0.0, 1.0, 2.0], atol=1e-15)
        assert np.allclose(out.R, rz.matrix @ init.R, atol=1e-15)

    def test_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(10_000):
            init = random_pose(rng)
            rr = random_rotation(rng)
            tr = rng.normal(size=3)
            s = float(rng.uniform(0.1, 10.0))
            out = compose_refined(init, rr, tr, s)
            ref = homogeneous(rr.matrix, s * tr) @ homogeneous(init.R, init.translation)
            worst = max(worst, np.abs(out.matrix - ref).max())
        assert worst < 1e-12

    def test_rotation_independent_of_scale(self):
        rng = np.random.default_rng(4)
        init, rr, tr = random_pose(rng), random_rotation(rng), rng.normal(size=3)
        assert np.array_equal(compose_refined(init, rr, tr, 1.0).R, compose_refined(init, rr, tr, 5.0).R)

    def test_true_relative_recovers_query(self):
        rng = np.random.default_rng(5)
        render_pose, query_pose = random_pose(rng), random_pose(rng)
        rel = relative_pose(render_pose, query_pose)
        out = compose_refined(render_pose, rel.rotation, rel.translation, 1.0)
        assert np.abs(out.matrix - query_pose.matrix).max() < 1e-9
        assert np.allclose(compose(rel, render_pose).matrix, query_pose.matrix, atol=1e-9)

    def test_non_positive_scale(self):
        with pytest.raises(ValueError):
            compose_refined(Pose.identity(), Rotation.identity(), np.zeros(3), 0.0)


class TestPointMapFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        pts = rng.uniform(0.5, 3, (4, 5, 3)).astype(np.float32).astype(np.float64)
        valid = rng.uniform(size=(4, 5)) > 0.3
        pm = PointMapEstimate(pts, valid, random_rotation(rng), rng.normal(size=3))
        save_pointmap(pm, tmp_path / "p.txt")
        back = load_pointmap(tmp_path / "p.txt")
        assert back.points.shape == (4, 5, 3)
        assert np.array_equal(back.valid, pm.valid)
        assert np.allclose(back.points, pm.points, rtol=1e-8)
        assert np.array_equal(back.rel_rotation.quat, pm.rel_rotation.quat)
        assert np.array_equal(back.rel_translation, pm.rel_translation)

    def test_header_layout(self, tmp_path):
        pm = PointMapEstimate(np.ones((2, 3, 3)), np.ones((2, 3), bool), Rotation.identity(), np.zeros(3))
        save_pointmap(pm, tmp_path / "p.txt")
        lines = (tmp_path / "p.txt").read_text().splitlines()
        assert lines[0] == "PTMAP v1 3 2" and len(lines) == 8 and lines[-1].startswith("REL ")

    @pytest.mark.parametrize(
        "text",
        ["", "PTMAP v1 1 1\n", "PTMAP v1 1 1\n1 2 3 1\n", "PTMAP v1 1 1\n1 2 3\nREL 1 0 0 0 0 0 0\n",
         "PTMAP v1 1 1\n1 2 3 1\nREL 1 0 0\n", "PTMAP v2 1 1\n1 2 3 1\nREL 1 0 0 0 0 0 0\n"],
    )
    def test_malformed(self, tmp_path, text):
        (tmp_path / "p.txt").write_text(text)
        with pytest.raises(FormatError):
            load_pointmap(tmp_path / "p.txt")
