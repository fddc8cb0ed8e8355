"""Fast path: metric scale from rendered depth plus a matcher's relative pose."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ScaleRecoveryError
from .geometry import Pose, Rotation
from .matching import PointMapEstimate

MIN_SCALE_SAMPLES = 50
PTMAP_HEADER = "PTMAP v1"


@dataclass(frozen=True)
class ScaleEstimate:
    s: float
    count: int
    dispersion: float  # median absolute deviation of the per-pixel ratios


def recover_scale(pointmap: PointMapEstimate, depth: np.ndarray, valid: np.ndarray,
                  min_samples: int = MIN_SCALE_SAMPLES) -> ScaleEstimate:
    """Median ratio of rendered z-depth to point-map z over jointly valid pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != pointmap.valid.shape:
        raise ScaleRecoveryError(
            f"point map is {pointmap.valid.shape[::-1]} but depth is {depth.shape[::-1]}"
        )
    joint = np.asarray(valid, dtype=bool) & pointmap.valid & (depth > 0)
    count = int(joint.sum())
    if count < min_samples:
        raise ScaleRecoveryError(f"only {count} jointly valid pixels (need {min_samples})")
    ratios = depth[joint] / pointmap.points[..., 2][joint]
    s = float(np.median(ratios))
    if not s > 0:
        raise ScaleRecoveryError(f"non-positive scale {s}")
    return ScaleEstimate(s, count, float(np.median(np.abs(ratios - s))))


def compose_refined(initial: Pose, rel_rotation: Rotation, rel_translation, s: float) -> Pose:
    """``[R_rel R | R_rel t + s t_rel]`` for a world-to-camera ``initial = [R | t]``."""
    if not s > 0:
        raise ValueError("scale must be positive")
    t_rel = np.asarray(rel_translation, dtype=np.float64)
    return Pose(rel_rotation * initial.rotation, rel_rotation.matrix @ initial.translation + s * t_rel)


def save_pointmap(pm: PointMapEstimate, path) -> None:
    h, w = pm.valid.shape
    lines = [f"{PTMAP_HEADER} {w} {h}"]
    flat = pm.points.reshape(-1, 3)
    for p, ok in zip(flat, pm.valid.ravel()):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {int(ok)}")
    q, t = pm.rel_rotation.quat, pm.rel_translation
    lines.append("REL " + " ".join(f"{x:.17g}" for x in list(q) + list(t)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pointmap(path) -> PointMapEstimate:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or " ".join(head[:2]) != PTMAP_HEADER:
        raise FormatError(f"{path}: expected '{PTMAP_HEADER} <W> <H>' header", line=1)
    try:
        w, h = int(head[2]), int(head[3])
    except ValueError:
        raise FormatError(f"{path}: bad size in header", line=1) from None
    body = lines[1 : 1 + w * h]
    if len(body) != w * h or len(lines) < w * h + 2:
        raise FormatError(f"{path}: expected {w * h} pixel records and a REL trailer")
    table = np.zeros((w * h, 4))
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 4:
            raise FormatError(f"line {i + 2}: expected 'x y z valid'", line=i + 2)
        try:
            table[i] = [float(x) for x in parts]
        except ValueError as exc:
            raise FormatError(f"line {i + 2}: {exc}", line=i + 2) from None
    trailer = lines[1 + w * h].split()
    if len(trailer) != 8 or trailer[0] != "REL":
        raise FormatError(f"{path}: missing 'REL qw qx qy qz tx ty tz' trailer", line=w * h + 2)
    rel = np.array([float(x) for x in trailer[1:]])
    valid = (table[:, 3] != 0).reshape(h, w) & np.all(np.isfinite(table[:, :3]), axis=1).reshape(h, w)
    pts = np.where(np.isfinite(table[:, :3]), table[:, :3], 0.0).reshape(h, w, 3)
    return PointMapEstimate(pts, valid, Rotation(rel[:4]), rel[4:])
