import numpy as np
import pytest

from splatrefine.errors import FormatError
from splatrefine.geometry import CameraIntrinsics, Pose
from splatrefine.renderer import (
    RenderedView,
    RenderOptions,
    brute_force_reference,
    downsample2,
    max_abs_diff,
    normalized_depth,
    read_depth,
    read_ppm,
    render,
    write_depth,
    write_ppm,
)
from splatrefine.scene import SplatScene

from support import MICRO_K, ROOM_K, micro_scene

HAND_K = CameraIntrinsics(50.0, 50.0, 16.0, 16.0, 32, 32)
EXACT = RenderOptions(alpha_max=1.0)


def splats(means, opacities, scale=0.3, colors=None):
    n = len(means)
    colors = np.full((n, 3), 0.5) if colors is None else colors
    quats = np.tile([1.0, 0, 0, 0], (n, 1))
    return SplatScene(means, np.full((n, 3), scale), quats, opacities, colors)


class TestHandCases:
    def test_empty_scene(self):
        opts = RenderOptions(background=(0.1, 0.2, 0.3))
        v = render(SplatScene.empty(), HAND_K, Pose.identity(), opts)
        assert np.allclose(v.rgb, [0.1, 0.2, 0.3])
        assert not v.depth_raw.any() and not v.alpha.any()

    def test_single_opaque_splat(self):
        v = render(splats([[0.0, 0.0, 5.0]], [1.0]), HAND_K, Pose.identity(), EXACT)
        assert v.depth_raw[16, 16] == 5.0
        assert v.alpha[16, 16] == 1.0

    def test_two_splat_composite(self):
        scene = splats([[0.0, 0.0, 2.0], [0.0, 0.0, 4.0]], [0.5, 1.0])
        v = render(scene, HAND_K, Pose.identity(), EXACT)
        assert abs(v.depth_raw[16, 16] - 3.0) < 1e-9
        depth, valid = normalized_depth(v)
        assert valid[16, 16] and abs(depth[16, 16] - 3.0) < 1e-9

    def test_order_is_by_depth_not_index(self):
        scene = splats([[0.0, 0.0, 4.0], [0.0, 0.0, 2.0]], [1.0, 0.5])
        v = render(scene, HAND_K, Pose.identity(), EXACT)
        assert abs(v.depth_raw[16, 16] - 3.0) < 1e-9

    def test_default_alpha_clamp(self):
        v = render(splats([[0.0, 0.0, 5.0]], [1.0]), HAND_K, Pose.identity())
        assert v.alpha[16, 16] == pytest.approx(0.99)

    def test_background_only_in_rgb(self):
        opts = RenderOptions(background=(1.0, 1.0, 1.0))
        v = render(splats([[0.0, 0.0, 5.0]], [0.5], colors=np.zeros((1, 3))), HAND_K, Pose.identity(), opts)
        assert v.rgb[16, 16, 0] == pytest.approx(0.5)
        assert v.depth_raw[16, 16] == pytest.approx(2.5)

    def test_behind_near_plane_culled(self):
        v = render(splats([[0.0, 0.0, -1.0], [0.0, 0.0, 0.001]], [1.0, 1.0]), HAND_K, Pose.identity())
        assert not v.alpha.any()
        assert v.diagnostics["culled"] == 2

    def test_degenerate_splat_skipped(self):
        scene = SplatScene([[0.0, 0.0, 5.0]], [[1e-200, 1e-200, 1e-200]], [[1, 0, 0, 0]], [1.0], [[1, 1, 1]])
        v = render(scene, HAND_K, Pose.identity(), RenderOptions(lowpass_dilation=0.0))
        assert v.diagnostics["degenerate"] == 1
        assert not v.alpha.any()

    def test_transmittance_floor_stops_compositing(self):
        # ten opaque splats: only the first contributes with alpha_max = 1
        scene = splats([[0.0, 0.0, 2.0 + i] for i in range(10)], [1.0] * 10)
        v = render(scene, HAND_K, Pose.identity(), EXACT)
        assert v.depth_raw[16, 16] == 2.0


class TestNormalizedDepth:
    def make_view(self, depth_raw, alpha):
        d = np.array(depth_raw, dtype=float).reshape(1, -1)
        a = np.array(alpha, dtype=float).reshape(1, -1)
        return RenderedView(np.zeros(d.shape + (3,)), d, a, d.shape[1], 1)

    def test_opaque_pixel_unchanged(self):
        depth, valid = normalized_depth(self.make_view([4.0], [1.0]))
        assert valid[0, 0] and depth[0, 0] == 4.0

    def test_low_alpha_invalid(self):
        depth, valid = normalized_depth(self.make_view([0.6, 1.0], [0.3, 0.5]), alpha_min=0.5)
        assert valid.tolist() == [[False, True]]
        assert depth[0, 0] == 0.0 and depth[0, 1] == 2.0

    @pytest.mark.parametrize("alpha_min", [0.0, 1.0, -0.1])
    def test_alpha_min_range(self, alpha_min):
        with pytest.raises(ValueError):
            normalized_depth(self.make_view([1.0], [1.0]), alpha_min)


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(50))
    def test_micro_scene(self, seed):
        scene = micro_scene(seed)
        fast = render(scene, MICRO_K, Pose.identity())
        slow = brute_force_reference(scene, MICRO_K, Pose.identity())
        assert max_abs_diff(fast, slow) < 1e-6

    def test_empty_identical(self):
        fast = render(SplatScene.empty(), MICRO_K, Pose.identity())
        slow = brute_force_reference(SplatScene.empty(), MICRO_K, Pose.identity())
        assert max_abs_diff(fast, slow) == 0.0

    def test_single_splat_identical(self):
        scene = splats([[0.1, -0.2, 3.0]], [0.8])
        fast = render(scene, MICRO_K, Pose.identity())
        slow = brute_force_reference(scene, MICRO_K, Pose.identity())
        assert max_abs_diff(fast, slow) < 1e-12


class TestInvariants:
    @pytest.mark.parametrize("seed", range(10))
    def test_alpha_range_and_depth_bound(self, seed):
        scene = micro_scene(seed)
        v = render(scene, MICRO_K, Pose.identity())
        assert v.alpha.min() >= 0.0 and v.alpha.max() <= 1.0
        zmax = scene.means[:, 2].max()
        assert v.depth_raw.min() >= 0.0
        assert np.all(v.depth_raw <= v.alpha * zmax + 1e-12)
        assert not v.depth_raw[v.alpha == 0].any()

    def test_deterministic(self, room, room_gt):
        a = render(room, ROOM_K, room_gt[0])
        b = render(room, ROOM_K, room_gt[0])
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth_raw, b.depth_raw)

    def test_room_depth_plausible(self, room, room_gt):
        v = render(room, ROOM_K, room_gt[0])
        depth, valid = normalized_depth(v)
        assert valid.mean() > 0.95
        assert depth[valid].max() < room.scene_scale

    @pytest.mark.parametrize("index", range(3))
    def test_resolution_equivariance(self, room, room_gt, index):
        K = ROOM_K
        K2 = CameraIntrinsics(2 * K.fx, 2 * K.fy, 2 * K.cx, 2 * K.cy, 2 * K.width, 2 * K.height)
        lo = render(room, K, room_gt[index])
        hi = render(room, K2, room_gt[index])
        assert np.abs(downsample2(hi.rgb) - lo.rgb).max() < 5e-2


class TestRasterFiles:
    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
        write_ppm(tmp_path / "a.ppm", img)
        back = read_ppm(tmp_path / "a.ppm")
        assert back.shape == (5, 7, 3)
        assert np.array_equal(np.rint(back * 255).astype(np.uint8), img)

    def test_depth_round_trip(self, tmp_path):
        d = np.random.default_rng(1).uniform(0, 10, (6, 4)).astype(np.float32).astype(np.float64)
        write_depth(tmp_path / "d.dpth", d)
        raw = (tmp_path / "d.dpth").read_bytes()
        assert raw[:8] == b"DPTH v1 " and len(raw) == 16 + 4 * d.size
        assert np.array_equal(read_depth(tmp_path / "d.dpth"), d)

    def test_bad_files(self, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
        with pytest.raises(FormatError):
            read_ppm(tmp_path / "x.ppm")
        (tmp_path / "x.dpth").write_bytes(b"DPTH v1 " + b"\x02\x00\x00\x00\x02\x00\x00\x00" + b"\x00" * 4)
        with pytest.raises(FormatError):
            read_depth(tmp_path / "x.dpth")
