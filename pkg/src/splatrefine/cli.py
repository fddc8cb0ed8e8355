"""Command-line entry point.

Exit codes: 0 on success, 2 when at least one query fell back to its
initial pose, 1 on input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .errors import SplatRefineError
from .exposure import load_act
from .geometry import CameraIntrinsics, read_poses, write_poses
from .matching import DirectoryMatcher, FileMatcher, OracleMatcher
from .pipeline import (
    OraclePointMapSource, PointMapFile, RefineOptions, evaluate, jitter_sweep, refine_once,
    refine_rel, room_poses, write_sweep_csv,
)
from .renderer import read_ppm, render, write_depth, write_ppm
from .scene import load_scene, save_scene, synth_scene
from .solver import RansacConfig

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_FALLBACK = 2


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1; code 2 is reserved for fallbacks."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _intrinsics(text: str) -> CameraIntrinsics:
    try:
        return CameraIntrinsics.parse(text)
    except (ValueError, SplatRefineError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_common(p: argparse.ArgumentParser, scene=True, intrinsics=True) -> None:
    if scene:
        p.add_argument("--scene", required=True, help="SPLATSCENE v1 file")
    if intrinsics:
        p.add_argument("--intrinsics", required=True, type=_intrinsics, metavar="fx,fy,cx,cy,W,H")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def _add_solver(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ransac-thresh", type=float, default=3.0, help="inlier threshold in pixels")
    p.add_argument("--ransac-iters", type=int, default=2000, help="maximum RANSAC iterations")
    p.add_argument("--act", help="ACT checkpoint applied to renders before matching")


def _add_oracle(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gt-pose", help="ground-truth query poses (required with --oracle)")
    p.add_argument("--oracle-matches", type=int, default=1000, help="oracle correspondences per query")
    p.add_argument("--oracle-noise", type=float, default=1.0, help="oracle pixel noise sigma")
    p.add_argument("--oracle-outliers", type=float, default=0.3, help="oracle outlier fraction")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splatrefine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-scene", help="generate a synthetic box-room scene")
    p.add_argument("--room", type=_floats, default=[4.0, 4.0, 3.0], metavar="X,Y,Z")
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--name", default="room")
    _add_common(p, scene=False, intrinsics=False)

    p = sub.add_parser("render", help="render RGB and depth at each pose")
    _add_common(p)
    p.add_argument("--pose", required=True, help="pose file, one 'qw qx qy qz tx ty tz' per line")

    p = sub.add_parser("refine", help="one-shot refinement by render, match, lift and PnP")
    _add_common(p)
    _add_solver(p)
    _add_oracle(p)
    p.add_argument("--pose", required=True, help="initial poses")
    p.add_argument("--query", action="append", default=[], help="query image (PPM); repeat per pose")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--matches", help="precomputed MATCHES v1 file (single query)")
    src.add_argument("--oracle", action="store_true", help="synthesise matches from --gt-pose")
    src.add_argument("--match-dir", help="job directory exchanged with an external matcher")
    p.add_argument("--matcher-cmd", nargs="+", help="command run in --match-dir mode (job dir appended)")

    p = sub.add_parser("refine-rel", help="fast path from a point map and relative pose")
    _add_common(p)
    p.add_argument("--pose", required=True, help="initial poses")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pointmap", help="PTMAP v1 file (single query)")
    src.add_argument("--oracle", action="store_true", help="synthesise point maps from --gt-pose")
    p.add_argument("--gt-pose", help="ground-truth query poses (required with --oracle)")
    p.add_argument("--scale-corruption", type=float, default=1.0 / 3.0)
    p.add_argument("--pointmap-noise", type=float, default=0.0)

    p = sub.add_parser("jitter-sweep", help="post-refinement error versus jitter magnitude (CSV)")
    _add_common(p)
    _add_solver(p)
    p.add_argument("--gt-pose", help="ground-truth poses; default: cameras near the room centre")
    p.add_argument("--n-gt", type=int, default=10, help="generated ground-truth poses when --gt-pose is absent")
    p.add_argument("--rot", type=_floats, default=[], help="rotation magnitudes in degrees")
    p.add_argument("--trans", type=_floats, default=[], help="translation magnitudes in world units")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--oracle-matches", type=int, default=1000)
    p.add_argument("--oracle-noise", type=float, default=1.0)
    p.add_argument("--oracle-outliers", type=float, default=0.3)

    p = sub.add_parser("eval", help="median errors and recall of estimated poses (JSON)")
    p.add_argument("--gt", required=True, help="ground-truth pose file")
    p.add_argument("--est", required=True, help="estimated pose file")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _options(args) -> RefineOptions:
    ransac = RansacConfig(
        inlier_threshold_px=getattr(args, "ransac_thresh", 3.0),
        max_iterations=getattr(args, "ransac_iters", 2000),
        seed=args.seed,
    )
    act = load_act(args.act) if getattr(args, "act", None) else None
    return RefineOptions(ransac=ransac, act=act)


def _gt_poses(args, count: int):
    if not args.gt_pose:
        raise SplatRefineError("--oracle needs --gt-pose")
    gts = read_poses(args.gt_pose)
    if len(gts) != count:
        raise SplatRefineError(f"--gt-pose has {len(gts)} poses but --pose has {count}")
    return gts


def _query_images(args, K, gts, count):
    if args.query:
        if len(args.query) != count:
            raise SplatRefineError(f"got {len(args.query)} --query images for {count} poses")
        images = [read_ppm(q) for q in args.query]
        for q, img in zip(args.query, images):
            if img.shape[:2] != (K.height, K.width):
                raise SplatRefineError(f"{q}: image is {img.shape[1]}x{img.shape[0]}, intrinsics say {K.width}x{K.height}")
        return images
    if gts is not None:
        return [None] * count  # rendered lazily from the ground truth
    raise SplatRefineError("--query is required unless --oracle is used")


def _result_record(i, res) -> dict:
    rec = {"index": i, "mode": res.mode, "n_inliers": res.n_inliers}
    if res.n_inliers:
        rec["mean_reprojection_error_px"] = res.mean_reprojection_error
    if res.scale is not None:
        rec["scale"] = res.scale
    if "failed_stage" in res.diagnostics:
        rec["failed_stage"] = res.diagnostics["failed_stage"]
        rec["error"] = res.diagnostics["error"]
    return rec


def _write_results(out: Path, results) -> int:
    write_poses(out / "refined_poses.txt", [r.refined_pose for r in results])
    report = [_result_record(i, r) for i, r in enumerate(results)]
    (out / "refine_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_FALLBACK if any(r.failed for r in results) else EXIT_OK


def cmd_synth_scene(args, out: Path) -> int:
    if len(args.room) != 3:
        raise SplatRefineError("--room needs three dimensions")
    scene = synth_scene(room=args.room, count=args.count, seed=args.seed, name=args.name)
    save_scene(scene, out / "scene.txt")
    return EXIT_OK


def cmd_render(args, out: Path) -> int:
    scene = load_scene(args.scene)
    K = args.intrinsics
    for i, pose in enumerate(read_poses(args.pose)):
        view = render(scene, K, pose)
        write_ppm(out / f"render_{i:04d}.ppm", view.rgb)
        write_depth(out / f"depth_{i:04d}.dpth", view.depth_raw)
        write_depth(out / f"alpha_{i:04d}.dpth", view.alpha)
    return EXIT_OK


def cmd_refine(args, out: Path) -> int:
    scene = load_scene(args.scene)
    K = args.intrinsics
    initial = read_poses(args.pose)
    if not initial:
        raise SplatRefineError(f"{args.pose}: no poses")
    gts = _gt_poses(args, len(initial)) if args.oracle else None
    if (args.matches or args.match_dir) and len(initial) != 1:
        raise SplatRefineError("--matches and --match-dir take exactly one initial pose")
    images = _query_images(args, K, gts, len(initial))
    opts = _options(args)
    results = []
    for i, pose in enumerate(initial):
        if args.oracle:
            query_view = render(scene, K, gts[i])
            matcher = OracleMatcher(
                scene, K, gts[i], n=args.oracle_matches, noise_px=args.oracle_noise,
                outlier_frac=args.oracle_outliers, seed=args.seed + i, query_view=query_view,
            )
            image = images[i] if images[i] is not None else query_view.rgb
        elif args.matches:
            matcher, image = FileMatcher(args.matches), images[i]
        else:
            matcher, image = DirectoryMatcher(args.match_dir, args.matcher_cmd), images[i]
        results.append(refine_once(image, K, pose, scene, matcher, opts))
    return _write_results(out, results)


def cmd_refine_rel(args, out: Path) -> int:
    scene = load_scene(args.scene)
    K = args.intrinsics
    initial = read_poses(args.pose)
    if not initial:
        raise SplatRefineError(f"{args.pose}: no poses")
    if args.pointmap and len(initial) != 1:
        raise SplatRefineError("--pointmap takes exactly one initial pose")
    gts = _gt_poses(args, len(initial)) if args.oracle else None
    opts = _options(args)
    results = []
    for i, pose in enumerate(initial):
        if args.oracle:
            source = OraclePointMapSource(scene, K, gts[i], args.scale_corruption, args.pointmap_noise, args.seed + i)
        else:
            source = PointMapFile(args.pointmap)
        results.append(refine_rel(None, K, pose, scene, source, opts))
    return _write_results(out, results)


def cmd_jitter_sweep(args, out: Path) -> int:
    scene = load_scene(args.scene)
    K = args.intrinsics
    gts = read_poses(args.gt_pose) if args.gt_pose else room_poses(scene, args.n_gt, seed=args.seed)
    if not gts:
        raise SplatRefineError("no ground-truth poses")
    if not args.rot and not args.trans:
        raise SplatRefineError("give --rot and/or --trans magnitudes")
    cells = jitter_sweep(
        scene, K, gts, args.rot, args.trans, trials=args.trials, seed=args.seed, opts=_options(args),
        n_matches=args.oracle_matches, noise_px=args.oracle_noise, outlier_frac=args.oracle_outliers,
    )
    write_sweep_csv(cells, out / "sweep.csv")
    return EXIT_OK


def cmd_eval(args, out: Path) -> int:
    gt, est = read_poses(args.gt), read_poses(args.est)
    if len(gt) != len(est):
        raise SplatRefineError(f"{len(gt)} ground-truth poses but {len(est)} estimates")
    report = evaluate(list(zip(gt, est)))
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


COMMANDS = {
    "synth-scene": cmd_synth_scene,
    "render": cmd_render,
    "refine": cmd_refine,
    "refine-rel": cmd_refine_rel,
    "jitter-sweep": cmd_jitter_sweep,
    "eval": cmd_eval,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except (SplatRefineError, ValueError, OSError) as exc:
        print(f"splatrefine {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
