"""Scene and correspondence generators shared by the test modules."""

import numpy as np

from splatrefine.geometry import CameraIntrinsics, Pose, Rotation, backproject
from splatrefine.lifting import Corr2D3D
from splatrefine.scene import SplatScene

MICRO_K = CameraIntrinsics(30.0, 30.0, 15.5, 15.5, 32, 32)
ROOM_K = CameraIntrinsics(240.0, 240.0, 160.0, 120.0, 320, 240)
VGA_K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)

# one "criterion N: PASS/FAIL ..." line per acceptance criterion, echoed at session end
ACCEPTANCE = []


def report_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def random_rotation(rng):
    q = rng.normal(size=4)
    return Rotation(q)


def random_pose(rng, trans_scale=1.0):
    return Pose(random_rotation(rng), rng.normal(size=3) * trans_scale)


def micro_scene(seed, max_count=20):
    """A handful of random gaussians in front of the identity camera."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_count + 1))
    means = np.column_stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.5, 1.5, n), rng.uniform(1.5, 5.0, n)])
    scales = rng.uniform(0.05, 0.6, (n, 3))
    quats = rng.normal(size=(n, 4))
    opac = rng.uniform(0.2, 1.0, n)
    colors = rng.uniform(0.0, 1.0, (n, 3))
    return SplatScene(means, scales, quats, opac, colors, name=f"micro{seed}")


def synthetic_corrs(rng, K, pose, n, depth=(1.0, 5.0), noise_px=0.0, outlier_frac=0.0):
    """Correspondences from points spread over the image at random depths.

    Returns ``(corrs, outlier_mask)``; the outliers get a uniformly random
    query pixel.
    """
    uv = np.column_stack([rng.uniform(0, K.width - 1, n), rng.uniform(0, K.height - 1, n)])
    X = backproject(K, pose, uv, rng.uniform(depth[0], depth[1], n))
    px = uv + rng.normal(0.0, noise_px, uv.shape) if noise_px > 0 else uv.copy()
    out = np.zeros(n, dtype=bool)
    k = int(round(outlier_frac * n))
    if k:
        out[rng.choice(n, size=k, replace=False)] = True
        px[out] = np.column_stack([rng.uniform(0, K.width - 1, k), rng.uniform(0, K.height - 1, k)])
    return Corr2D3D(px, X, np.ones(n)), out
