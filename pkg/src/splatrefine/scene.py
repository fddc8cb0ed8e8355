"""Splat scenes: storage, text I/O, synthetic rooms and similarity transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import FormatError, InvariantError
from .geometry import Pose, Rotation

HEADER = "SPLATSCENE v1"
FIELDS_PER_RECORD = 14


@dataclass(frozen=True)
class Gaussian3D:
    mean: np.ndarray
    scale: np.ndarray
    orientation: Rotation
    opacity: float
    color: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        R = self.orientation.matrix
        return R @ np.diag(np.asarray(self.scale) ** 2) @ R.T


def _bbox_diagonal(means: np.ndarray) -> float:
    """Bounding-box diagonal; 1.0 for empty or single-point extents."""
    if len(means) == 0:
        return 1.0
    diag = float(np.linalg.norm(means.max(axis=0) - means.min(axis=0)))
    return diag if diag > 0 else 1.0


def _check_records(means, scales, quats, opacities, colors) -> None:
    arrays = {"mean": means, "scale": scales, "quat": quats, "opacity": opacities, "color": colors}
    for name, arr in arrays.items():
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.argwhere(bad.reshape(len(arr), -1).any(axis=1))[0, 0])
            raise InvariantError(f"record {idx}: non-finite {name}", record=idx)
    checks = [
        ((scales <= 0).any(axis=1), "scale components must be > 0"),
        ((opacities <= 0) | (opacities > 1), "opacity must lie in (0, 1]"),
        (((colors < 0) | (colors > 1)).any(axis=1), "color channels must lie in [0, 1]"),
        (np.linalg.norm(quats, axis=1) < 1e-12, "orientation quaternion is zero"),
    ]
    for bad, msg in checks:
        if bad.any():
            idx = int(np.argmax(bad))
            raise InvariantError(f"record {idx}: {msg}", record=idx)


class SplatScene:
    """An ordered set of anisotropic 3D gaussians.

    Stored as parallel arrays so the renderer can work on whole columns.
    Orientation quaternions are ``(w, x, y, z)``. The object is treated as
    immutable; the arrays are marked read-only.
    """

    def __init__(
        self,
        means,
        scales,
        quats,
        opacities,
        colors,
        name: str = "scene",
        scene_scale: Optional[float] = None,
    ):
        means = np.array(means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        scales = np.array(scales, dtype=np.float64).reshape(n, 3)
        quats = np.array(quats, dtype=np.float64).reshape(n, 4)
        opacities = np.array(opacities, dtype=np.float64).reshape(n)
        colors = np.array(colors, dtype=np.float64).reshape(n, 3)
        _check_records(means, scales, quats, opacities, colors)

        expected = _bbox_diagonal(means)
        if scene_scale is None:
            scene_scale = expected
        elif not math.isclose(scene_scale, expected, rel_tol=1e-6, abs_tol=1e-6):
            raise InvariantError(
                f"scene_scale {scene_scale!r} does not match bounding-box diagonal {expected!r}"
            )
        if not scene_scale > 0:
            raise InvariantError(f"scene_scale must be positive, got {scene_scale!r}")

        for arr in (means, scales, quats, opacities, colors):
            arr.setflags(write=False)
        self.means = means
        self.scales = scales
        self.quats = quats
        self.opacities = opacities
        self.colors = colors
        self.name = name
        self.scene_scale = float(scene_scale)

    @classmethod
    def empty(cls, name: str = "empty") -> "SplatScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), [], np.zeros((0, 3)), name)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D], name: str = "scene") -> "SplatScene":
        if not gaussians:
            return cls.empty(name)
        return cls(
            [g.mean for g in gaussians],
            [g.scale for g in gaussians],
            [g.orientation.quat for g in gaussians],
            [g.opacity for g in gaussians],
            [g.color for g in gaussians],
            name,
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i], self.scales[i], Rotation(self.quats[i]), float(self.opacities[i]), self.colors[i]
        )

    def __iter__(self) -> Iterator[Gaussian3D]:
        return (self[i] for i in range(len(self)))

    @property
    def gaussians(self) -> list:
        return list(self)

    def covariances(self) -> np.ndarray:
        """World-space covariance ``R diag(s^2) R^T`` for every gaussian."""
        R = quats_to_matrices(self.quats)
        return np.einsum("nij,nj,nkj->nik", R, self.scales**2, R)

    def fields_equal(self, other: "SplatScene") -> bool:
        return (
            self.name == other.name
            and self.scene_scale == other.scene_scale
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("means", "scales", "quats", "opacities", "colors")
            )
        )


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=1,
    )


def _quat_mul_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.broadcast_to(a, b.shape), -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def save_scene(scene: SplatScene, path) -> None:
    """Write the ``SPLATSCENE v1`` text format (9 significant digits).

    Values that are exactly representable in float32 survive a round trip
    bit for bit; :func:`synth_scene` produces such values.
    """
    lines = [HEADER, f"count={len(scene)}", f"scale={scene.scene_scale:.9g}"]
    if scene.name != "scene":
        lines.append(f"name={scene.name}")
    table = np.column_stack(
        [scene.means, scene.scales, scene.quats, scene.opacities[:, None], scene.colors]
    ) if len(scene) else np.zeros((0, FIELDS_PER_RECORD))
    for row in table:
        lines.append(" ".join(f"{v:.9g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _snap_f32(values: np.ndarray) -> np.ndarray:
    """Replace values by their float32 neighbour when both print the same 9 digits.

    A 9-digit decimal identifies a float32 uniquely, so this recovers the
    exact value written for float32 data and leaves anything else alone.
    """
    values = np.asarray(values, dtype=np.float64)
    near = values.astype(np.float32).astype(np.float64)
    out = values.copy()
    for idx in zip(*np.nonzero(near != values)):
        if f"{near[idx]:.9g}" == f"{values[idx]:.9g}":
            out[idx] = near[idx]
    return out


def load_scene(path) -> SplatScene:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise FormatError(f"{path}: missing '{HEADER}' header")
    meta = {}
    pos = 1
    while pos < len(lines) and "=" in lines[pos]:
        key, _, value = lines[pos].partition("=")
        meta[key.strip()] = value.strip()
        pos += 1
    for key in ("count", "scale"):
        if key not in meta:
            raise FormatError(f"{path}: header is missing '{key}='")
    try:
        count = int(meta["count"])
        scale = float(meta["scale"])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header value ({exc})") from None
    if count < 0:
        raise FormatError(f"{path}: negative count {count}")
    body = [ln for ln in lines[pos:] if ln.strip()]
    if len(body) != count:
        raise FormatError(f"{path}: header says count={count} but found {len(body)} records")

    table = np.zeros((count, FIELDS_PER_RECORD))
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != FIELDS_PER_RECORD:
            raise FormatError(
                f"record {i}: expected {FIELDS_PER_RECORD} values, got {len(parts)}", record=i
            )
        try:
            table[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"record {i}: {exc}", record=i) from None
        if not np.all(np.isfinite(table[i])):
            raise InvariantError(f"record {i}: non-finite value", record=i)

    if not math.isfinite(scale):
        raise FormatError(f"{path}: non-finite scale")
    table = _snap_f32(table)
    scale = float(_snap_f32(np.array([scale]))[0])
    return SplatScene(
        table[:, 0:3],
        table[:, 3:6],
        table[:, 6:10],
        table[:, 10],
        table[:, 11:14],
        name=meta.get("name", "scene"),
        scene_scale=scale,
    )


# ---------------------------------------------------------------------------
# synthetic rooms
# ---------------------------------------------------------------------------


def _hash_noise(cells: np.ndarray, seed: int, channel: int) -> np.ndarray:
    """Deterministic per-cell value in [0, 1) from integer lattice coordinates."""
    h = np.uint64(seed * 0x9E3779B1 + channel * 0x85EBCA77 + 0x27D4EB2F)
    with np.errstate(over="ignore"):
        c = cells.astype(np.int64).astype(np.uint64)
        h = h ^ (c[..., 0] * np.uint64(0x8DA6B343))
        h = h ^ (c[..., 1] * np.uint64(0xD8163841))
        h = h ^ (c[..., 2] * np.uint64(0xCB1AB31F))
        h = (h ^ (h >> np.uint64(33))) * np.uint64(0xFF51AFD7ED558CCD)
        h = (h ^ (h >> np.uint64(33))) * np.uint64(0xC4CEB9FE1A85EC53)
        h = h ^ (h >> np.uint64(33))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def procedural_color(points: np.ndarray, seed: int) -> np.ndarray:
    """Blocky multi-scale texture: hashed colour per lattice cell at two sizes."""
    coarse = np.floor(points / 0.5)
    fine = np.floor(points / 0.17)
    rgb = np.empty((len(points), 3))
    for ch in range(3):
        rgb[:, ch] = 0.6 * _hash_noise(coarse, seed, ch) + 0.4 * _hash_noise(fine, seed + 7919, ch)
    return 0.05 + 0.9 * rgb


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def synth_scene(
    room: Sequence[float] = (4.0, 4.0, 3.0),
    count: int = 5000,
    seed: int = 1,
    name: str = "room",
) -> SplatScene:
    """Box room with gaussians covering the six interior walls.

    Gaussians sit on a jittered grid on each wall (area-proportional share of
    ``count``), are flattened along the wall normal and coloured with a hashed
    lattice texture so rendered views carry plenty of structure. All values
    are rounded to float32 so the scene survives the text format exactly.
    """
    dims = np.asarray(room, dtype=np.float64)
    if dims.shape != (3,) or np.any(dims <= 0):
        raise ValueError(f"room dimensions must be three positive numbers, got {room!r}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    a, b, c = dims
    # (normal axis, offset, tangent axes)
    walls = [(0, 0.0), (0, a), (1, 0.0), (1, b), (2, 0.0), (2, c)]
    areas = np.array([dims[(ax + 1) % 3] * dims[(ax + 2) % 3] for ax, _ in walls])
    shares = np.floor(count * areas / areas.sum()).astype(int)
    shares[: count - shares.sum()] += 1

    means, scales, quats = [], [], []
    for (axis, offset), n in zip(walls, shares):
        if n == 0:
            continue
        u_ax, v_ax = (axis + 1) % 3, (axis + 2) % 3
        lu, lv = dims[u_ax], dims[v_ax]
        nu = max(1, int(round(math.sqrt(n * lu / lv))))
        nv = max(1, int(math.ceil(n / nu)))
        idx = rng.permutation(nu * nv)[:n]
        gu = (idx % nu + rng.uniform(0.1, 0.9, n)) * (lu / nu)
        gv = (idx // nu + rng.uniform(0.1, 0.9, n)) * (lv / nv)
        p = np.zeros((n, 3))
        p[:, axis] = offset
        p[:, u_ax] = gu
        p[:, v_ax] = gv
        spacing = math.sqrt(lu * lv / n)
        s = np.empty((n, 3))
        s[:, 0] = spacing * rng.uniform(0.45, 0.75, n)
        s[:, 1] = spacing * rng.uniform(0.45, 0.75, n)
        s[:, 2] = 0.05 * spacing
        # local frame: columns (tangent u, tangent v, normal) with an in-plane twist
        frame = np.zeros((3, 3))
        frame[u_ax, 0] = 1.0
        frame[v_ax, 1] = 1.0
        frame[axis, 2] = 1.0
        if np.linalg.det(frame) < 0:
            frame[:, 1] *= -1
        base = Rotation.from_matrix(frame).quat
        twist = rng.uniform(0, math.pi, n)
        tq = np.stack([np.cos(twist / 2), np.zeros(n), np.zeros(n), np.sin(twist / 2)], axis=1)
        means.append(p)
        scales.append(s)
        quats.append(_quat_mul_batch(base, tq))

    means = _f32(np.concatenate(means))
    scales = _f32(np.concatenate(scales))
    quats = np.concatenate(quats)
    quats = _f32(quats / np.linalg.norm(quats, axis=1, keepdims=True))
    opacities = _f32(rng.uniform(0.75, 0.98, len(means)))
    colors = _f32(procedural_color(means, seed))
    scene_scale = float(np.float32(_bbox_diagonal(means)))
    return SplatScene(means, scales, quats, opacities, colors, name=name, scene_scale=scene_scale)


# ---------------------------------------------------------------------------
# similarity transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Similarity:
    """``x -> scale * R x + t`` acting on world points."""

    rotation: Rotation
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("similarity scale must be positive")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(x, dtype=np.float64) @ self.rotation.matrix.T) + self.translation

    def transform_pose(self, pose: Pose) -> Pose:
        """Camera pose that sees the transformed world as ``pose`` saw the original.

        Camera-frame coordinates get multiplied by ``scale``; z-depths scale
        with the scene while pixel positions are unchanged.
        """
        R = pose.R @ self.rotation.matrix.T
        t = self.scale * pose.translation - R @ self.translation
        return Pose(Rotation.from_matrix(R), t)


def transform_scene(scene: SplatScene, sim: Similarity) -> SplatScene:
    if len(scene) == 0:
        return scene
    means = sim.apply(scene.means)
    scales = scene.scales * sim.scale
    quats = _quat_mul_batch(sim.rotation.quat, scene.quats)
    quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    return SplatScene(means, scales, quats, scene.opacities, scene.colors, name=scene.name)
