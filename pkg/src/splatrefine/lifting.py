"""Turn 2D-2D matches into 2D-3D correspondences through rendered depth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, backproject
from .matching import MatchSet

BORDER_PX = 1.0


@dataclass
class CoordinateMap:
    """World point per rendered pixel; ``valid`` marks pixels with usable depth."""

    points: np.ndarray
    valid: np.ndarray

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def height(self) -> int:
        return self.points.shape[0]


@dataclass
class Corr2D3D:
    """Columns of 2D-3D correspondences (query pixel, world point, confidence)."""

    pixels_q: np.ndarray
    points_world: np.ndarray
    confidence: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        self.pixels_q = np.asarray(self.pixels_q, dtype=np.float64).reshape(-1, 2)
        self.points_world = np.asarray(self.points_world, dtype=np.float64).reshape(-1, 3)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.points_world)):
            raise ValueError("2D-3D correspondences must have finite points")

    def __len__(self) -> int:
        return len(self.pixels_q)

    def subset(self, idx) -> "Corr2D3D":
        return Corr2D3D(self.pixels_q[idx], self.points_world[idx], self.confidence[idx])


def coordinate_map(depth: np.ndarray, valid: np.ndarray, K: CameraIntrinsics, pose: Pose) -> CoordinateMap:
    """Backproject every valid pixel of a normalised depth map into the world."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool) & (depth > 0)
    u, v = K.pixel_grid()
    pts = np.zeros(depth.shape + (3,))
    if valid.any():
        pix = np.column_stack([u[valid], v[valid]])
        pts[valid] = backproject(K, pose, pix, depth[valid])
    return CoordinateMap(pts, valid)


def lift_matches(matches: MatchSet, cmap: CoordinateMap) -> Corr2D3D:
    """Look up the world point under each render-side pixel (nearest pixel).

    Matches on invalid pixels or within ``BORDER_PX`` of the image border are
    dropped; ``result.dropped`` counts them.
    """
    if tuple(matches.render_size) != (cmap.width, cmap.height):
        raise ValueError(
            f"match render size {matches.render_size} differs from coordinate map "
            f"{cmap.width}x{cmap.height}"
        )
    if len(matches) == 0:
        return Corr2D3D(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0))
    pr = matches.pixels_r
    W, H = cmap.width, cmap.height
    inside = (
        (pr[:, 0] >= BORDER_PX)
        & (pr[:, 0] <= W - 1 - BORDER_PX)
        & (pr[:, 1] >= BORDER_PX)
        & (pr[:, 1] <= H - 1 - BORDER_PX)
    )
    col = np.clip(np.rint(pr[:, 0]).astype(np.int64), 0, W - 1)
    row = np.clip(np.rint(pr[:, 1]).astype(np.int64), 0, H - 1)
    keep = inside & cmap.valid[row, col]
    return Corr2D3D(
        matches.pixels_q[keep],
        cmap.points[row[keep], col[keep]],
        matches.confidence[keep],
        dropped=int((~keep).sum()),
    )
