"""Absolute pose from 2D-3D correspondences: P3P + RANSAC + Gauss-Newton."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from .errors import DegenerateError, NoSolutionError
from .geometry import CameraIntrinsics, Pose, Rotation
from .lifting import Corr2D3D


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold_px: float = 3.0
    max_iterations: int = 2000
    confidence: float = 0.9999
    min_inliers: int = 6
    seed: int = 0
    weighted: bool = False  # score by summed match confidence instead of count
    refine_iterations: int = 20

    def __post_init__(self):
        if not self.inlier_threshold_px > 0:
            raise ValueError("inlier threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be at least 4")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")


@dataclass
class SolveResult:
    pose: Pose
    inlier_indices: np.ndarray
    mean_reprojection_error: float
    iterations: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_inliers(self) -> int:
        return len(self.inlier_indices)


def bearings(K: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    rays = np.column_stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(len(pixels))])
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def reprojection_errors(pose: Pose, points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics):
    """Per-correspondence pixel error and a mask of points in front of the camera.

    Points behind the camera get an infinite error.
    """
    xc = pose.apply(points)
    z = xc[:, 2]
    front = z > 1e-12
    zs = np.where(front, z, 1.0)
    du = K.fx * xc[:, 0] / zs + K.cx - pixels[:, 0]
    dv = K.fy * xc[:, 1] / zs + K.cy - pixels[:, 1]
    err = np.where(front, np.hypot(du, dv), np.inf)
    return err, front


# ---------------------------------------------------------------------------
# P3P
# ---------------------------------------------------------------------------


def _align(cam_pts: np.ndarray, world_pts: np.ndarray) -> Pose:
    """Rigid ``R, t`` with ``cam = R world + t`` (Kabsch)."""
    cw = world_pts.mean(axis=0)
    cc = cam_pts.mean(axis=0)
    H = (world_pts - cw).T @ (cam_pts - cc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(Rotation.from_matrix(R), cc - R @ cw)


def _polish_lengths(L, cos12, cos13, cos23, d2, iters=3):
    """Newton steps on the three law-of-cosines equations."""
    pairs = ((0, 1, cos12), (0, 2, cos13), (1, 2, cos23))
    for _ in range(iters):
        F = np.empty(3)
        J = np.zeros((3, 3))
        for k, (i, j, c) in enumerate(pairs):
            F[k] = L[i] ** 2 + L[j] ** 2 - 2 * L[i] * L[j] * c - d2[k]
            J[k, i] = 2 * L[i] - 2 * L[j] * c
            J[k, j] = 2 * L[j] - 2 * L[i] * c
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
        L = L - step
        if np.max(np.abs(step)) <= 1e-15 * np.max(np.abs(L)):
            break
    return L


def p3p_bearings(world: np.ndarray, rays: np.ndarray) -> List[Pose]:
    """Minimal solver on unit bearing vectors.

    With depths ``L1..L3`` along the rays and ratios ``x = L1/L3`` and
    ``y = L2/L3``, the three law-of-cosines constraints reduce to two conics
    in ``(x, y)``. Their difference is linear in ``y``, which substituted
    back gives a quartic in ``x``. Every positive real root yields a depth
    triple, and the pose follows from aligning camera-frame and world points.
    """
    world = np.asarray(world, dtype=np.float64).reshape(3, 3)
    f = np.asarray(rays, dtype=np.float64).reshape(3, 3)
    scale = max(np.max(np.abs(world - world.mean(axis=0))), 1e-300)
    area = np.linalg.norm(np.cross(world[1] - world[0], world[2] - world[0]))
    if area <= 1e-10 * scale * scale:
        raise DegenerateError("P3P world points are collinear or coincident")
    c12, c13, c23 = f[0] @ f[1], f[0] @ f[2], f[1] @ f[2]
    if max(c12, c13, c23) >= 1.0 - 1e-12:
        raise DegenerateError("P3P bearing rays coincide")

    d12 = np.sum((world[0] - world[1]) ** 2)
    d13 = np.sum((world[0] - world[2]) ** 2)
    d23 = np.sum((world[1] - world[2]) ** 2)
    a, b = d12 / d13, d23 / d13

    P = np.polynomial.polynomial.Polynomial
    g = P([1.0, -2.0 * c13, 1.0])
    N = P([1.0, 0.0, -1.0]) + (a - b) * g
    D = P([2.0 * c23, -2.0 * c12])
    quartic = N * N - 2.0 * c23 * N * D + (1.0 - b * g) * D * D
    coeffs = quartic.coef
    if len(coeffs) < 2 or np.all(np.abs(coeffs) < 1e-300):
        return []
    roots = np.roots(coeffs[::-1])

    poses = []
    for r in roots:
        if abs(r.imag) > 1e-6 * (1.0 + abs(r.real)):
            continue
        x = r.real
        gx = g(x)
        if x <= 0 or gx <= 0:
            continue
        L3 = math.sqrt(d13 / gx)
        for y in _ratio_y(x, N, D, gx, a, b, c12, c23):
            L = _polish_lengths(np.array([x * L3, y * L3, L3]), c12, c13, c23, (d12, d13, d23))
            if np.any(L <= 0) or not np.all(np.isfinite(L)):
                continue
            pose = _align(L[:, None] * f, world)
            if not any(np.allclose(pose.matrix, p.matrix, atol=1e-12) for p in poses):
                poses.append(pose)
    return poses


def _ratio_y(x, N, D, gx, a, b, c12, c23):
    """Candidate ``y`` for a root ``x``.

    The linear relation ``y = N(x) / D(x)`` fixes ``y`` unless ``D(x)``
    (nearly) vanishes, which happens at the repeated roots of symmetric
    configurations. The quadratic ``L2-L3`` constraint is therefore solved
    as well and its roots kept when they also satisfy the ``L1-L2`` one.
    """
    out = []
    Dx = D(x)
    if Dx != 0.0:
        y = N(x) / Dx
        if y > 0:
            out.append(y)
    disc = c23 * c23 - 1.0 + b * gx
    if disc >= -1e-12:
        root = math.sqrt(max(disc, 0.0))
        for y in (c23 - root, c23 + root):
            resid = x * x + y * y - 2.0 * c12 * x * y - a * gx
            if y > 0 and abs(resid) <= 1e-6 * (1.0 + a * gx):
                out.append(y)
    return out


def p3p(corrs: Corr2D3D, K: CameraIntrinsics, tol_px: float = 1e-6) -> List[Pose]:
    """Up to four poses that reproject the three correspondences exactly."""
    if len(corrs) != 3:
        raise ValueError("p3p needs exactly three correspondences")
    px = corrs.pixels_q
    if min(np.linalg.norm(px[0] - px[1]), np.linalg.norm(px[0] - px[2]), np.linalg.norm(px[1] - px[2])) == 0:
        raise DegenerateError("P3P pixels coincide")
    cands = p3p_bearings(corrs.points_world, bearings(K, px))
    out = []
    for pose in cands:
        err, _ = reprojection_errors(pose, corrs.points_world, px, K)
        if np.all(err <= tol_px):
            out.append(pose)
    return out


# ---------------------------------------------------------------------------
# nonlinear refinement
# ---------------------------------------------------------------------------


class Refinement(NamedTuple):
    pose: Pose
    costs: list
    iterations: int
    degenerate: bool


def reprojection_residuals(pose: Pose, points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    xc = pose.apply(points)
    r = np.empty((len(points), 2))
    r[:, 0] = K.fx * xc[:, 0] / xc[:, 2] + K.cx - pixels[:, 0]
    r[:, 1] = K.fy * xc[:, 1] / xc[:, 2] + K.cy - pixels[:, 1]
    return r.ravel()


def reprojection_jacobian(pose: Pose, points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """d(residuals)/d(omega, v) for the update ``R <- exp(omega) R, t <- exp(omega) t + v``."""
    xc = pose.apply(points)
    x, y, z = xc.T
    n = len(points)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = K.fx / z
    dproj[:, 0, 2] = -K.fx * x / z**2
    dproj[:, 1, 1] = K.fy / z
    dproj[:, 1, 2] = -K.fy * y / z**2
    dxc = np.zeros((n, 3, 6))
    # d(exp(w) X)/dw at w=0 is -[X]x
    dxc[:, 0, 1], dxc[:, 0, 2] = z, -y
    dxc[:, 1, 0], dxc[:, 1, 2] = -z, x
    dxc[:, 2, 0], dxc[:, 2, 1] = y, -x
    dxc[:, :, 3:] = np.eye(3)
    return (dproj @ dxc).reshape(2 * n, 6)


def apply_update(pose: Pose, delta: np.ndarray) -> Pose:
    rot = Rotation.from_rotvec(delta[:3])
    return Pose(rot * pose.rotation, rot.matrix @ pose.translation + delta[3:])


def _cost(pose, points, pixels, K) -> float:
    if np.any(pose.apply(points)[:, 2] <= 1e-12):
        return math.inf
    r = reprojection_residuals(pose, points, pixels, K)
    return float(r @ r)


def refine_reprojection(pose0: Pose, inliers: Corr2D3D, K: CameraIntrinsics, iters: int = 20) -> Refinement:
    """Gauss-Newton on total squared reprojection error.

    A step that raises the cost is retried with growing diagonal damping;
    only cost-reducing (or equal) steps are accepted, so ``costs`` never
    increases. A singular normal matrix returns ``pose0`` with
    ``degenerate=True``.
    """
    if len(inliers) < 4:
        raise ValueError("refinement needs at least 4 correspondences")
    pts, pix = inliers.points_world, inliers.pixels_q
    pose = pose0
    cost = _cost(pose, pts, pix, K)
    costs = [cost]
    if not math.isfinite(cost):
        return Refinement(pose0, costs, 0, True)
    it = 0
    for it in range(1, iters + 1):
        r = reprojection_residuals(pose, pts, pix, K)
        J = reprojection_jacobian(pose, pts, K)
        H = J.T @ J
        g = J.T @ r
        if np.linalg.cond(H) > 1e14:
            return Refinement(pose0, costs, it, True)
        if np.linalg.norm(g) <= 1e-14 * max(1.0, math.sqrt(cost)):
            break
        lam = 0.0
        accepted = False
        for _ in range(12):
            delta = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
            cand = apply_update(pose, delta)
            c = _cost(cand, pts, pix, K)
            if c <= cost:
                accepted = True
                break
            lam = 1e-4 if lam == 0 else lam * 10.0
        if not accepted:
            break
        pose = cand
        costs.append(c)
        small_step = np.linalg.norm(delta) <= 1e-15 * (1.0 + np.linalg.norm(pose.translation))
        if small_step or cost - c <= 1e-15 * cost:
            cost = c
            break
        cost = c
    return Refinement(pose, costs, it, False)


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


def _required_iterations(inlier_ratio: float, confidence: float, sample_size: int, cap: int) -> int:
    if inlier_ratio <= 0:
        return cap
    p_good = inlier_ratio**sample_size
    if p_good >= 1.0:
        return 1
    return min(cap, int(math.ceil(math.log(1.0 - confidence) / math.log(1.0 - p_good))))


def _score(pose, corrs, K, cfg):
    err, front = reprojection_errors(pose, corrs.points_world, corrs.pixels_q, K)
    inl = front & (err <= cfg.inlier_threshold_px)
    score = float(corrs.confidence[inl].sum()) if cfg.weighted else float(inl.sum())
    mean = float(err[inl].mean()) if inl.any() else math.inf
    return score, mean, inl, err


def ransac_pnp(corrs: Corr2D3D, K: CameraIntrinsics, cfg: Optional[RansacConfig] = None) -> SolveResult:
    """Hypothesise-and-verify PnP.

    Each hypothesis draws four correspondences, solves P3P on the first
    three and keeps the candidate that best reprojects the fourth. Scoring
    is by inlier count (ties go to the lower mean inlier error, then to the
    earlier hypothesis). The iteration budget adapts to the best inlier
    ratio. The winner is polished with :func:`refine_reprojection` on its
    consensus set, re-scored, and polished once more.
    """
    cfg = cfg or RansacConfig()
    n = len(corrs)
    if n < 4:
        raise NoSolutionError(f"need at least 4 correspondences, got {n}", {"n_corrs": n})
    rng = np.random.default_rng(cfg.seed)
    rays = bearings(K, corrs.pixels_q)
    thr = cfg.inlier_threshold_px

    best = None  # (score, -mean, pose, inlier mask)
    budget = cfg.max_iterations
    it = 0
    degenerate = 0
    while it < budget:
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        try:
            cands = p3p_bearings(corrs.points_world[sample[:3]], rays[sample[:3]])
        except DegenerateError:
            degenerate += 1
            continue
        chosen, chosen_err = None, math.inf
        for pose in cands:
            err, front = reprojection_errors(pose, corrs.points_world[sample], corrs.pixels_q[sample], K)
            if not front.all():
                continue
            if err[3] < chosen_err:
                chosen, chosen_err = pose, err[3]
        if chosen is None or chosen_err > thr:
            continue
        score, mean, inl, _ = _score(chosen, corrs, K, cfg)
        if best is None or score > best[0] or (score == best[0] and mean < best[1]):
            best = (score, mean, chosen, inl)
            budget = _required_iterations(inl.sum() / n, cfg.confidence, 4, cfg.max_iterations)

    diag = {"hypotheses": it, "degenerate_samples": degenerate, "n_corrs": n}
    if best is None:
        raise NoSolutionError("no hypothesis survived verification", diag)
    pose, inl = best[2], best[3]
    diag["ransac_inliers"] = int(inl.sum())
    if inl.sum() < cfg.min_inliers:
        raise NoSolutionError(
            f"best consensus has {int(inl.sum())} inliers (< {cfg.min_inliers})", diag
        )

    for _ in range(2):
        ref = refine_reprojection(pose, corrs.subset(np.flatnonzero(inl)), K, cfg.refine_iterations)
        if ref.degenerate:
            break
        _, _, new_inl, _ = _score(ref.pose, corrs, K, cfg)
        if new_inl.sum() < cfg.min_inliers:
            break
        pose, inl = ref.pose, new_inl

    err, front = reprojection_errors(pose, corrs.points_world, corrs.pixels_q, K)
    inl = front & (err <= thr)
    if inl.sum() < cfg.min_inliers:
        raise NoSolutionError(f"refined pose keeps only {int(inl.sum())} inliers", diag)
    idx = np.flatnonzero(inl)
    return SolveResult(pose, idx, float(err[idx].mean()), it, diag)
