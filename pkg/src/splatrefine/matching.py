"""2D-2D correspondences between a query image and a rendered view.

Real matchers live outside this package. They exchange results through the
``MATCHES v1`` text file (see :func:`save_matches`) or a job directory
(``query.ppm`` and ``render.ppm`` in, ``matches.txt`` out). The oracle
matcher below synthesises correspondences from scene geometry for testing.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import CovisibilityError, FormatError, MatcherError
from .geometry import CameraIntrinsics, Pose, Rotation, backproject, project_points
from .renderer import RenderedView, RenderOptions, normalized_depth, render, write_ppm
from .scene import SplatScene

MATCH_HEADER = "MATCHES v1"
DEFAULT_MIN_CONFIDENCE = 0.5


@dataclass(frozen=True)
class Correspondence:
    pixel_q: np.ndarray
    pixel_r: np.ndarray
    confidence: float


def _bounds_ok(uv: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    w, h = size
    return (uv[:, 0] >= -0.5) & (uv[:, 0] < w - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < h - 0.5)


@dataclass
class MatchSet:
    """Correspondences stored column-wise.

    ``query_size`` and ``render_size`` are ``(width, height)``. ``meta`` holds
    producer diagnostics (e.g. the oracle's outlier labels) and is ignored by
    consumers and not written to disk.
    """

    pixels_q: np.ndarray
    pixels_r: np.ndarray
    confidence: np.ndarray
    query_size: Tuple[int, int]
    render_size: Tuple[int, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels_q = np.asarray(self.pixels_q, dtype=np.float64).reshape(-1, 2)
        self.pixels_r = np.asarray(self.pixels_r, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        self.query_size = tuple(int(x) for x in self.query_size)
        self.render_size = tuple(int(x) for x in self.render_size)
        n = len(self.pixels_q)
        if len(self.pixels_r) != n or len(self.confidence) != n:
            raise ValueError("pixels_q, pixels_r and confidence must have equal length")
        bad = ~(_bounds_ok(self.pixels_q, self.query_size) & _bounds_ok(self.pixels_r, self.render_size))
        bad |= (self.confidence < 0) | (self.confidence > 1) | ~np.isfinite(self.confidence)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValueError(
                f"correspondence {i} violates bounds: q={self.pixels_q[i]}, r={self.pixels_r[i]}, "
                f"conf={self.confidence[i]}"
            )

    @classmethod
    def empty(cls, query_size, render_size) -> "MatchSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), query_size, render_size)

    def __len__(self) -> int:
        return len(self.pixels_q)

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(self.pixels_q[i], self.pixels_r[i], float(self.confidence[i]))

    def filter_confidence(self, min_confidence: float = DEFAULT_MIN_CONFIDENCE) -> "MatchSet":
        keep = self.confidence >= min_confidence
        meta = {k: v[keep] for k, v in self.meta.items() if isinstance(v, np.ndarray) and len(v) == len(self)}
        return MatchSet(
            self.pixels_q[keep], self.pixels_r[keep], self.confidence[keep],
            self.query_size, self.render_size, meta,
        )


@dataclass
class PointMapEstimate:
    """Per-pixel 3D points in the rendered camera's frame, up to scale.

    ``rel_rotation``/``rel_translation`` map rendered-camera coordinates to
    query-camera coordinates; the translation shares the points' unknown
    scale.
    """

    points: np.ndarray
    valid: np.ndarray
    rel_rotation: Rotation
    rel_translation: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool) & (self.points[..., 2] > 0)
        self.rel_translation = np.asarray(self.rel_translation, dtype=np.float64).reshape(3)

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def height(self) -> int:
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# match files
# ---------------------------------------------------------------------------


def save_matches(matches: MatchSet, path) -> None:
    qw, qh = matches.query_size
    rw, rh = matches.render_size
    lines = [MATCH_HEADER, f"query={qw}x{qh}", f"render={rw}x{rh}"]
    for pq, pr, c in zip(matches.pixels_q, matches.pixels_r, matches.confidence):
        lines.append(f"{pq[0]:.6f} {pq[1]:.6f} {pr[0]:.6f} {pr[1]:.6f} {c:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_size(value: str, lineno: int) -> Tuple[int, int]:
    try:
        w, h = (int(x) for x in value.lower().split("x"))
    except ValueError:
        raise FormatError(f"line {lineno}: bad image size {value!r}", line=lineno) from None
    if w <= 0 or h <= 0:
        raise FormatError(f"line {lineno}: image size must be positive", line=lineno)
    return w, h


def load_matches(path) -> MatchSet:
    """Read a ``MATCHES v1`` file.

    Errors in correspondence lines carry ``record`` (zero-based match index)
    and ``line`` (one-based file line); the message names both.
    """
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3 or lines[0].strip() != MATCH_HEADER:
        raise FormatError(f"{path}: missing '{MATCH_HEADER}' header", line=1)
    sizes = {}
    for lineno in (2, 3):
        key, _, value = lines[lineno - 1].partition("=")
        if key.strip() not in ("query", "render"):
            raise FormatError(f"line {lineno}: expected 'query=WxH' or 'render=WxH'", line=lineno)
        sizes[key.strip()] = _parse_size(value, lineno)
    if set(sizes) != {"query", "render"}:
        raise FormatError(f"{path}: header must give both query and render sizes", line=3)

    rows = []
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        rec = len(rows)
        where = f"match line {rec + 1} (file line {lineno})"

        def fail(msg):
            return FormatError(f"{where}: {msg}", record=rec, line=lineno)

        parts = line.split()
        if len(parts) != 5:
            raise fail("expected 'uq vq ur vr conf'")
        try:
            row = [float(p) for p in parts]
        except ValueError as exc:
            raise fail(str(exc)) from None
        if not all(np.isfinite(row)):
            raise fail("non-finite value")
        pq, pr = np.array([row[:2]]), np.array([row[2:4]])
        if not _bounds_ok(pq, sizes["query"])[0]:
            raise fail(f"query pixel {row[:2]} outside the image")
        if not _bounds_ok(pr, sizes["render"])[0]:
            raise fail(f"render pixel {row[2:4]} outside the image")
        if not 0.0 <= row[4] <= 1.0:
            raise fail(f"confidence {row[4]} outside [0, 1]")
        rows.append(row)
    table = np.array(rows).reshape(-1, 5)
    return MatchSet(table[:, 0:2], table[:, 2:4], table[:, 4], sizes["query"], sizes["render"])


# ---------------------------------------------------------------------------
# oracle correspondences
# ---------------------------------------------------------------------------


def _nearest(uv: np.ndarray, width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    col = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, width - 1)
    row = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, height - 1)
    return row, col


def _sample_covisible(
    K: CameraIntrinsics,
    render_view: RenderedView,
    query_view: RenderedView,
    n: int,
    noise_px: float,
    rng: np.random.Generator,
    depth_tol: float = 0.03,
    max_rounds: int = 20,
):
    """Draw surface points seen by both views.

    Render-side pixels are uniform over pixel centres, so lifting them back
    through the rendered depth reproduces the sampled surface point exactly. A point counts as covisible
    when it projects inside the query image and agrees with the query's
    rendered depth to ``depth_tol`` (relative).
    """
    depth_r, valid_r = normalized_depth(render_view)
    depth_q, valid_q = normalized_depth(query_view)
    pose_r, pose_q = render_view.pose, query_view.pose
    W, H = K.width, K.height
    out_r, out_q, out_x = [], [], []
    have = 0
    for _ in range(max_rounds):
        batch = max(4 * (n - have), 64)
        pr = np.column_stack([rng.integers(0, W, batch), rng.integers(0, H, batch)]).astype(np.float64)
        noise = rng.normal(0.0, noise_px, size=(batch, 2)) if noise_px > 0 else np.zeros((batch, 2))
        row, col = _nearest(pr, W, H)
        ok = valid_r[row, col]
        pr, noise, row, col = pr[ok], noise[ok], row[ok], col[ok]
        X = backproject(K, pose_r, pr, depth_r[row, col])
        uq, zq, front = project_points(K, pose_q, X)
        ur, _, _ = project_points(K, pose_r, X)
        # transfer: exact copy when the two poses coincide
        pq = pr + (uq - ur) + noise
        ok = front & _bounds_ok(uq, (W, H)) & _bounds_ok(pq, (W, H))
        qrow, qcol = _nearest(np.where(ok[:, None], uq, 0.0), W, H)
        ok &= valid_q[qrow, qcol]
        ok &= np.abs(depth_q[qrow, qcol] - zq) <= depth_tol * np.abs(zq)
        take = np.flatnonzero(ok)[: n - have]
        out_r.append(pr[take])
        out_q.append(pq[take])
        out_x.append(X[take])
        have += len(take)
        if have >= n:
            break
    return np.concatenate(out_q), np.concatenate(out_r), np.concatenate(out_x)


def oracle_match(
    scene: SplatScene,
    K: CameraIntrinsics,
    pose_query_gt: Pose,
    pose_render: Pose,
    n: int = 300,
    noise_px: float = 0.0,
    outlier_frac: float = 0.0,
    seed: int = 0,
    render_view: Optional[RenderedView] = None,
    query_view: Optional[RenderedView] = None,
    render_opts: Optional[RenderOptions] = None,
) -> MatchSet:
    """Ground-truth matches between the query pose and the rendered pose.

    Inliers carry Gaussian noise of ``noise_px`` on the query side and
    confidence 1. ``floor(outlier_frac * n)`` pairs get a uniformly random
    render-side pixel and a uniform confidence. ``meta['outlier']`` marks
    them and ``meta['points']`` holds the sampled world points. Already
    rendered views of either pose can be passed in to skip re-rendering.
    """
    if not 0.0 <= outlier_frac < 1.0:
        raise ValueError("outlier_frac must lie in [0, 1)")
    if render_view is None:
        render_view = render(scene, K, pose_render, render_opts)
    if query_view is None:
        query_view = render(scene, K, pose_query_gt, render_opts)
    render_view.pose = render_view.pose or pose_render
    query_view.pose = query_view.pose or pose_query_gt

    rng = np.random.default_rng(seed)
    pq, pr, X = _sample_covisible(K, render_view, query_view, n, noise_px, rng)
    if len(pq) < 4:
        raise CovisibilityError(f"only {len(pq)} covisible samples between the two views")
    m = len(pq)
    n_out = int(np.floor(outlier_frac * n)) if m == n else int(np.floor(outlier_frac * m))
    conf = np.ones(m)
    outlier = np.zeros(m, dtype=bool)
    if n_out:
        idx = rng.choice(m, size=n_out, replace=False)
        outlier[idx] = True
        pr = pr.copy()
        pr[idx] = np.column_stack(
            [rng.uniform(-0.5, K.width - 0.5, n_out), rng.uniform(-0.5, K.height - 0.5, n_out)]
        )
        conf[idx] = rng.uniform(0.0, 1.0, n_out)
    size = (K.width, K.height)
    return MatchSet(pq, pr, conf, size, size, {"outlier": outlier, "points": X})


class OracleMatcher:
    """Matcher source backed by :func:`oracle_match` with a known query pose."""

    def __init__(self, scene, K, pose_query_gt, n=300, noise_px=1.0, outlier_frac=0.3, seed=0,
                 query_view=None, render_opts=None):
        self.scene = scene
        self.K = K
        self.pose_query_gt = pose_query_gt
        self.n = n
        self.noise_px = noise_px
        self.outlier_frac = outlier_frac
        self.seed = seed
        self.query_view = query_view
        self.render_opts = render_opts

    def match(self, query_image: np.ndarray, view: RenderedView) -> MatchSet:
        if self.query_view is None:
            self.query_view = render(self.scene, self.K, self.pose_query_gt, self.render_opts)
        return oracle_match(
            self.scene, self.K, self.pose_query_gt, view.pose,
            n=self.n, noise_px=self.noise_px, outlier_frac=self.outlier_frac, seed=self.seed,
            render_view=view, query_view=self.query_view,
        )


class FileMatcher:
    """Matches precomputed by an external tool."""

    def __init__(self, path):
        self.path = Path(path)

    def match(self, query_image, view) -> MatchSet:
        try:
            return load_matches(self.path)
        except OSError as exc:
            raise MatcherError(f"cannot read matches from {self.path}: {exc}") from exc


class DirectoryMatcher:
    """Job-directory exchange with an external matcher process.

    Writes ``query.ppm`` and ``render.ppm`` into ``job_dir``, optionally runs
    ``command`` (argument list; the job directory is appended), then reads
    ``matches.txt``.
    """

    def __init__(self, job_dir, command: Optional[Sequence[str]] = None, timeout: float = 600.0):
        self.job_dir = Path(job_dir)
        self.command = list(command) if command else None
        self.timeout = timeout

    def match(self, query_image, view) -> MatchSet:
        self.job_dir.mkdir(parents=True, exist_ok=True)
        write_ppm(self.job_dir / "query.ppm", query_image)
        write_ppm(self.job_dir / "render.ppm", view.rgb)
        if self.command:
            try:
                subprocess.run(self.command + [str(self.job_dir)], check=True, timeout=self.timeout)
            except (OSError, subprocess.SubprocessError) as exc:
                raise MatcherError(f"external matcher failed: {exc}") from exc
        out = self.job_dir / "matches.txt"
        if not out.exists():
            raise MatcherError(f"external matcher did not write {out}")
        return load_matches(out)


# ---------------------------------------------------------------------------
# oracle point maps
# ---------------------------------------------------------------------------


def relative_pose(pose_render: Pose, pose_query: Pose) -> Pose:
    """Transform taking rendered-camera coordinates to query-camera coordinates."""
    return pose_query @ pose_render.inverse()


def oracle_pointmap(
    scene: SplatScene,
    K: CameraIntrinsics,
    pose_query_gt: Pose,
    pose_render: Pose,
    scale_corruption: float = 1.0,
    noise: float = 0.0,
    seed: int = 0,
    render_view: Optional[RenderedView] = None,
    render_opts: Optional[RenderOptions] = None,
) -> PointMapEstimate:
    """Camera-frame geometry of the rendered view, shrunk by ``scale_corruption``.

    Mimics a point-map matcher: the points and the relative translation share
    an unknown scale factor; ``noise`` adds isotropic Gaussian noise to the
    points (after scaling).
    """
    if not scale_corruption > 0:
        raise ValueError("scale_corruption must be positive")
    if render_view is None:
        render_view = render(scene, K, pose_render, render_opts)
    depth, valid = normalized_depth(render_view)
    u, v = K.pixel_grid()
    z = np.where(valid, depth, 0.0)
    pts = np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=-1) * scale_corruption
    if noise > 0:
        pts = pts + np.random.default_rng(seed).normal(0.0, noise, size=pts.shape)
    rel = relative_pose(pose_render, pose_query_gt)
    return PointMapEstimate(pts, valid, rel.rotation, rel.translation * scale_corruption)


# ---------------------------------------------------------------------------
# epipolar check
# ---------------------------------------------------------------------------


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def fundamental_matrix(K: CameraIntrinsics, pose_render: Pose, pose_query: Pose) -> np.ndarray:
    """``F`` with ``x_q^T F x_r = 0`` for homogeneous pixels of one 3D point."""
    rel = relative_pose(pose_render, pose_query)
    E = _skew(rel.translation) @ rel.R
    Kinv = np.linalg.inv(K.K)
    return Kinv.T @ E @ Kinv


def symmetric_epipolar_distance(F: np.ndarray, pixels_q: np.ndarray, pixels_r: np.ndarray) -> np.ndarray:
    """Mean of the point-to-epipolar-line distances in both images (pixels)."""
    xq = np.column_stack([pixels_q, np.ones(len(pixels_q))])
    xr = np.column_stack([pixels_r, np.ones(len(pixels_r))])
    lq = xr @ F.T  # lines in the query image
    lr = xq @ F  # lines in the rendered image
    num = np.abs(np.sum(xq * lq, axis=1))
    dq = num / np.hypot(lq[:, 0], lq[:, 1])
    dr = num / np.hypot(lr[:, 0], lr[:, 1])
    return 0.5 * (dq + dr)
