"""One-shot refinement, the relative-pose fast path, evaluation and the jitter sweep."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CovisibilityError, DegenerateError, NoSolutionError, ScaleRecoveryError
from .exposure import ActNetwork, act_forward, apply_act, luminance_histogram
from .geometry import CameraIntrinsics, Pose, jitter, rotation_error_deg, translation_error
from .lifting import coordinate_map, lift_matches
from .matching import DEFAULT_MIN_CONFIDENCE, OracleMatcher, PointMapEstimate, oracle_pointmap
from .relpose import MIN_SCALE_SAMPLES, compose_refined, load_pointmap, recover_scale
from .renderer import RenderOptions, RenderedView, normalized_depth, render
from .scene import SplatScene
from .solver import RansacConfig, ransac_pnp

MODE_FULL = "full"
MODE_REL = "rel"
MODE_FAILED = "failed-fallback"

DEFAULT_THRESHOLDS = ((0.05, 5.0), (0.02, 2.0))


@dataclass
class RefineOptions:
    """Knobs shared by :func:`refine_once` and :func:`refine_rel`."""

    ransac: RansacConfig = field(default_factory=RansacConfig)
    render: Optional[RenderOptions] = None
    act: Optional[ActNetwork] = None
    min_confidence: float = DEFAULT_MIN_CONFIDENCE
    alpha_min: float = 0.5
    min_scale_samples: int = MIN_SCALE_SAMPLES


@dataclass
class RefinementResult:
    initial_pose: Pose
    refined_pose: Pose
    mode: str
    n_inliers: int = 0
    mean_reprojection_error: float = math.nan
    scale: Optional[float] = None
    timings_ms: Dict[str, float] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.mode == MODE_FAILED


class _Stopwatch:
    def __init__(self):
        self.timings: Dict[str, float] = {}

    def run(self, stage, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.timings[stage] = self.timings.get(stage, 0.0) + 1e3 * (time.perf_counter() - t0)


def _fallback(initial, clock, diag, stage, exc) -> RefinementResult:
    diag["failed_stage"] = stage
    diag["error"] = str(exc)
    if getattr(exc, "diagnostics", None):
        diag["solver"] = dict(exc.diagnostics)
    return RefinementResult(initial, initial, MODE_FAILED, timings_ms=clock.timings, diagnostics=diag)


def refine_once(
    query_image: np.ndarray,
    K: CameraIntrinsics,
    initial: Pose,
    scene: SplatScene,
    matcher,
    opts: Optional[RefineOptions] = None,
) -> RefinementResult:
    """Render at ``initial``, match against the query, lift and solve once.

    ``matcher`` is any object with ``match(query_image, view) -> MatchSet``.
    Lack of covisibility or a solver failure yields a ``failed-fallback``
    result carrying ``initial`` unchanged; matcher I/O errors propagate.
    """
    opts = opts or RefineOptions()
    clock = _Stopwatch()
    diag = {"render_calls": 0, "solve_calls": 0}

    view = clock.run("render", render, scene, K, initial, opts.render)
    diag["render_calls"] += 1
    diag["splats_drawn"] = view.diagnostics.get("splats_drawn", 0)

    if opts.act is not None:
        def _act():
            aff = act_forward(opts.act, luminance_histogram(query_image))
            view.rgb = apply_act(aff, view.rgb)
        clock.run("act", _act)

    try:
        matches = clock.run("match-io", matcher.match, query_image, view)
    except CovisibilityError as exc:
        return _fallback(initial, clock, diag, "match", exc)
    diag["matches"] = len(matches)
    matches = matches.filter_confidence(opts.min_confidence)
    diag["matches_confident"] = len(matches)

    def _lift():
        depth, valid = normalized_depth(view, opts.alpha_min)
        return lift_matches(matches, coordinate_map(depth, valid, K, initial))

    corrs = clock.run("lift", _lift)
    diag["correspondences"] = len(corrs)
    diag["lift_dropped"] = corrs.dropped

    diag["solve_calls"] += 1
    try:
        sol = clock.run("solve", ransac_pnp, corrs, K, opts.ransac)
    except (NoSolutionError, DegenerateError) as exc:
        return _fallback(initial, clock, diag, "solve", exc)
    diag["solver"] = dict(sol.diagnostics)
    return RefinementResult(
        initial, sol.pose, MODE_FULL, sol.n_inliers, sol.mean_reprojection_error,
        timings_ms=clock.timings, diagnostics=diag,
    )


# ---------------------------------------------------------------------------
# relative-pose fast path
# ---------------------------------------------------------------------------


class OraclePointMapSource:
    """Point maps synthesised from the scene with a known query pose."""

    def __init__(self, scene, K, pose_query_gt, scale_corruption=1.0, noise=0.0, seed=0):
        self.scene = scene
        self.K = K
        self.pose_query_gt = pose_query_gt
        self.scale_corruption = scale_corruption
        self.noise = noise
        self.seed = seed

    def pointmap(self, query_image, view: RenderedView) -> PointMapEstimate:
        return oracle_pointmap(
            self.scene, self.K, self.pose_query_gt, view.pose,
            scale_corruption=self.scale_corruption, noise=self.noise, seed=self.seed, render_view=view,
        )


class PointMapFile:
    """Point map written by an external matcher (``PTMAP v1`` format)."""

    def __init__(self, path):
        self.path = Path(path)

    def pointmap(self, query_image, view) -> PointMapEstimate:
        return load_pointmap(self.path)


def refine_rel(
    query_image: np.ndarray,
    K: CameraIntrinsics,
    initial: Pose,
    scene: SplatScene,
    source,
    opts: Optional[RefineOptions] = None,
) -> RefinementResult:
    """Fast path: scale from rendered depth, pose from the matcher's relative pose.

    ``source`` provides ``pointmap(query_image, view) -> PointMapEstimate``
    or is a :class:`PointMapEstimate` itself.
    """
    opts = opts or RefineOptions()
    clock = _Stopwatch()
    diag = {"render_calls": 0, "solve_calls": 0}
    view = clock.run("render", render, scene, K, initial, opts.render)
    diag["render_calls"] += 1
    if isinstance(source, PointMapEstimate):
        pm = source
    else:
        pm = clock.run("match-io", source.pointmap, query_image, view)
    depth, valid = normalized_depth(view, opts.alpha_min)
    try:
        est = clock.run("solve", recover_scale, pm, depth, valid, opts.min_scale_samples)
    except ScaleRecoveryError as exc:
        return _fallback(initial, clock, diag, "scale", exc)
    refined = compose_refined(initial, pm.rel_rotation, pm.rel_translation, est.s)
    diag["scale_samples"] = est.count
    diag["scale_dispersion"] = est.dispersion
    return RefinementResult(initial, refined, MODE_REL, scale=est.s, timings_ms=clock.timings, diagnostics=diag)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def recall_key(trans: float, rot: float) -> str:
    return f"recall_{round(trans * 100):d}cm_{rot:g}deg"


@dataclass
class EvalReport:
    rot_errors_deg: np.ndarray
    trans_errors: np.ndarray
    median_rot_deg: float
    median_trans: float
    recalls: Dict[Tuple[float, float], float]

    @property
    def count(self) -> int:
        return len(self.rot_errors_deg)

    def recall(self, trans: float, rot: float) -> float:
        return self.recalls[(trans, rot)]

    def to_dict(self) -> dict:
        out = {"count": self.count, "median_rot_deg": self.median_rot_deg, "median_trans": self.median_trans}
        for (t, r), v in self.recalls.items():
            out[recall_key(t, r)] = v
        return out


def recall_percent(rot_errors, trans_errors, trans_thresh: float, rot_thresh: float) -> float:
    rot = np.asarray(rot_errors, dtype=np.float64)
    trans = np.asarray(trans_errors, dtype=np.float64)
    hit = (rot <= rot_thresh) & (trans <= trans_thresh)
    return 100.0 * float(hit.sum()) / len(hit)


def evaluate_errors(rot_errors, trans_errors, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Report from precomputed per-query errors (degrees, world units)."""
    rot = np.asarray(rot_errors, dtype=np.float64).ravel()
    trans = np.asarray(trans_errors, dtype=np.float64).ravel()
    if len(rot) == 0 or len(rot) != len(trans):
        raise ValueError("evaluate needs at least one query and matching error lists")
    recalls = {(float(t), float(r)): recall_percent(rot, trans, t, r) for t, r in thresholds}
    return EvalReport(rot, trans, float(np.median(rot)), float(np.median(trans)), recalls)


def evaluate(pairs: Sequence[Tuple[Pose, Pose]], thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Median errors and joint-threshold recall over ``(gt, estimate)`` pairs.

    A query counts towards recall at ``(t, r)`` when its translation error is
    at most ``t`` and its rotation error is at most ``r`` degrees.
    """
    if not pairs:
        raise ValueError("evaluate needs at least one (gt, estimate) pair")
    rot = [rotation_error_deg(gt, est) for gt, est in pairs]
    trans = [translation_error(gt, est) for gt, est in pairs]
    return evaluate_errors(rot, trans, thresholds)


# ---------------------------------------------------------------------------
# jitter sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepCell:
    kind: str  # "rotation" or "translation"
    magnitude: float
    trials: int
    mean_rot_err_deg: float
    mean_trans_err: float
    median_rot_err_deg: float
    median_trans_err: float
    failed_rate: float
    improved_rate: float


UNPERTURBED_TOL = 1e-9

SWEEP_COLUMNS = (
    "kind", "magnitude", "trials", "mean_rot_err_deg", "mean_trans_err",
    "median_rot_err_deg", "median_trans_err", "failed_rate", "improved_rate",
)


def room_poses(scene: SplatScene, n: int, seed: int = 0, spread: float = 0.1) -> List[Pose]:
    """Cameras near the centre of the scene's bounding box, looking horizontally.

    ``spread`` is the positional jitter as a fraction of the box extents.
    """
    rng = np.random.default_rng(seed)
    lo, hi = scene.means.min(axis=0), scene.means.max(axis=0)
    centre, extent = 0.5 * (lo + hi), hi - lo
    poses = []
    for _ in range(n):
        eye = centre + spread * extent * rng.uniform(-1.0, 1.0, 3)
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        pitch = math.radians(rng.uniform(-10.0, 10.0))
        d = np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), math.sin(pitch)])
        poses.append(Pose.look_at(eye, eye + d))
    return poses


def trial_seed(seed: int, trial: int) -> int:
    """Per-trial seed shared by every sweep cell (common random numbers)."""
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


def run_trials(
    scene: SplatScene,
    K: CameraIntrinsics,
    gt_poses: Sequence[Pose],
    rot_deg: float,
    trans_mag: float,
    trials: int,
    seed: int = 0,
    noise_px: float = 1.0,
    outlier_frac: float = 0.3,
    n_matches: int = 300,
    opts: Optional[RefineOptions] = None,
):
    """``refine_once`` with an oracle matcher on jittered ground-truth poses.

    Returns a list of ``(gt, initial, RefinementResult)`` ordered by trial.
    """
    opts = opts or RefineOptions()
    out = []
    query_cache: Dict[int, RenderedView] = {}
    for k in range(trials):
        gi = k % len(gt_poses)
        gt = gt_poses[gi]
        s = trial_seed(seed, k)
        initial = jitter(gt, rot_deg, trans_mag, s)
        if gi not in query_cache:
            query_cache[gi] = render(scene, K, gt, opts.render)
        qv = query_cache[gi]
        matcher = OracleMatcher(scene, K, gt, n=n_matches, noise_px=noise_px, outlier_frac=outlier_frac,
                                seed=s, query_view=qv, render_opts=opts.render)
        res = refine_once(qv.rgb, K, initial, scene, matcher, opts)
        out.append((gt, initial, res))
    return out


def summarize_trials(kind: str, magnitude: float, results) -> SweepCell:
    rot = np.array([rotation_error_deg(gt, r.refined_pose) for gt, _, r in results])
    trans = np.array([translation_error(gt, r.refined_pose) for gt, _, r in results])
    rot0 = np.array([rotation_error_deg(gt, ini) for gt, ini, _ in results])
    trans0 = np.array([translation_error(gt, ini) for gt, ini, _ in results])
    # a component counts only if it was perturbed in the first place (beyond round-off)
    moved_r, moved_t = rot0 > UNPERTURBED_TOL, trans0 > UNPERTURBED_TOL
    improved = (~moved_r | (rot < rot0)) & (~moved_t | (trans < trans0)) & (moved_r | moved_t)
    failed = np.array([r.failed for _, _, r in results])
    return SweepCell(
        kind, float(magnitude), len(results), float(rot.mean()), float(trans.mean()),
        float(np.median(rot)), float(np.median(trans)), float(failed.mean()), float(improved.mean()),
    )


def jitter_sweep(
    scene: SplatScene,
    K: CameraIntrinsics,
    gt_poses: Sequence[Pose],
    rot_magnitudes: Sequence[float] = (),
    trans_magnitudes: Sequence[float] = (),
    trials: int = 20,
    seed: int = 0,
    opts: Optional[RefineOptions] = None,
    **trial_kwargs,
) -> List[SweepCell]:
    """Average post-refinement error per jitter magnitude.

    Rotation cells use zero translation jitter and translation cells zero
    rotation jitter. Trial ``k`` uses the same seed in every cell, so cells
    differ only in the jitter magnitude.
    """
    cells = []
    for mag in rot_magnitudes:
        res = run_trials(scene, K, gt_poses, mag, 0.0, trials, seed, opts=opts, **trial_kwargs)
        cells.append(summarize_trials("rotation", mag, res))
    for mag in trans_magnitudes:
        res = run_trials(scene, K, gt_poses, 0.0, mag, trials, seed, opts=opts, **trial_kwargs)
        cells.append(summarize_trials("translation", mag, res))
    return cells


def write_sweep_csv(cells: Sequence[SweepCell], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for c in cells:
            w.writerow([
                c.kind, f"{c.magnitude:.17g}", c.trials,
                *(f"{getattr(c, name):.17g}" for name in SWEEP_COLUMNS[3:]),
            ])
