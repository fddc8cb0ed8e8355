"""Rigid-body and pinhole camera math.

Poses map world points into the camera frame::

    x_cam = R @ x_world + t

Pixel coordinates follow the OpenCV convention: the centre of pixel
``(row, col)`` sits at ``(u, v) = (col, row)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError

BEHIND_CAMERA_EPS = 1e-12


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"cannot normalise quaternion {q!r}")
    if abs(n - 1.0) > 4e-16:  # leave already-unit input bit-identical
        q = q / n
    # q and -q are the same rotation; keep w >= 0 so equality checks are stable
    if q[0] < 0.0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class Rotation:
    """A 3D rotation stored as a unit quaternion ``(w, x, y, z)``."""

    quat: np.ndarray

    def __post_init__(self):
        q = _canonical(self.quat)
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle_rad: float) -> "Rotation":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle_rad
        return cls(np.concatenate([[math.cos(half)], math.sin(half) * axis]))

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float]) -> "Rotation":
        rotvec = np.asarray(rotvec, dtype=np.float64)
        angle = float(np.linalg.norm(rotvec))
        if angle < 1e-8:
            # second-order series keeps small updates accurate
            q = np.concatenate([[1.0 - angle * angle / 8.0], 0.5 * rotvec])
            return cls(q)
        return cls.from_axis_angle(rotvec / angle, angle)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rotation":
        """Shepperd's method; picks the numerically largest pivot."""
        m = np.asarray(m, dtype=np.float64)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        diag = (tr, m[0, 0], m[1, 1], m[2, 2])
        k = int(np.argmax(diag))
        if k == 0:
            s = 2.0 * math.sqrt(1.0 + tr)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif k == 1:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif k == 2:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        return cls(np.array(q))

    @property
    def matrix(self) -> np.ndarray:
        w, x, y, z = self.quat
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def inverse(self) -> "Rotation":
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other: "Rotation") -> "Rotation":
        return Rotation(_quat_mul(self.quat, other.quat))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.matrix.T

    def angle(self) -> float:
        """Rotation angle in radians, in ``[0, pi]``."""
        w = abs(self.quat[0])
        return 2.0 * math.atan2(float(np.linalg.norm(self.quat[1:])), w)

    def __repr__(self):
        return "Rotation(wxyz=[{:.6g}, {:.6g}, {:.6g}, {:.6g}])".format(*self.quat)


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_center(cls, rotation: Rotation, center: Sequence[float]) -> "Pose":
        return cls(rotation, -rotation.matrix @ np.asarray(center, dtype=np.float64))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` looking at ``target`` (camera +y points down)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = Rotation.from_matrix(np.stack([right, down, fwd]))
        return cls.from_center(rot, eye)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Map world points (``(3,)`` or ``(N, 3)``) into the camera frame."""
        return np.asarray(x, dtype=np.float64) @ self.R.T + self.translation

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -(rinv.matrix @ self.translation))

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        return "Pose(q={}, t=[{:.6g}, {:.6g}, {:.6g}])".format(
            np.array2string(self.rotation.quat, precision=6), *self.translation
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def parse(cls, text: str) -> "CameraIntrinsics":
        """Parse ``fx,fy,cx,cy,W,H``."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 6:
            raise ValueError(f"expected fx,fy,cx,cy,W,H but got {text!r}")
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        return cls(fx, fy, cx, cy, int(parts[4]), int(parts[5]))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            round(self.width * factor),
            round(self.height * factor),
        )

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        """True where the nearest pixel centre lies inside the image."""
        uv = np.asarray(uv, dtype=np.float64)
        return (
            (uv[..., 0] >= -0.5)
            & (uv[..., 0] < self.width - 0.5)
            & (uv[..., 1] >= -0.5)
            & (uv[..., 1] < self.height - 0.5)
        )

    def pixel_grid(self) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates ``(u, v)``, each of shape ``(H, W)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return u.astype(np.float64), v.astype(np.float64)


def project(K: CameraIntrinsics, pose: Pose, x_world) -> Optional[Tuple[np.ndarray, float]]:
    """Project one world point.

    Returns ``(pixel, z_depth)``, or ``None`` if the point is not in front of
    the camera. Bounds are left to the caller.
    """
    X, Y, Z = pose.apply(np.asarray(x_world, dtype=np.float64))
    if Z <= BEHIND_CAMERA_EPS:
        return None
    return np.array([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy]), float(Z)


def project_points(K: CameraIntrinsics, pose: Pose, x_world: np.ndarray):
    """Vectorised projection of ``(N, 3)`` world points.

    Returns ``(uv, z, valid)``. Rows with ``valid == False`` lie behind the
    camera; their ``uv`` entries are zero and must not be used.
    """
    xc = pose.apply(np.asarray(x_world, dtype=np.float64).reshape(-1, 3))
    z = xc[:, 2]
    valid = z > BEHIND_CAMERA_EPS
    safe_z = np.where(valid, z, 1.0)
    uv = np.stack([K.fx * xc[:, 0] / safe_z + K.cx, K.fy * xc[:, 1] / safe_z + K.cy], axis=1)
    uv[~valid] = 0.0
    return uv, z, valid


def backproject(K: CameraIntrinsics, pose: Pose, pixel, z_depth) -> np.ndarray:
    """Inverse of :func:`project`; accepts a single pixel or ``(N, 2)`` arrays."""
    pixel = np.asarray(pixel, dtype=np.float64)
    z = np.asarray(z_depth, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("z_depth must be positive")
    x = (pixel[..., 0] - K.cx) / K.fx * z
    y = (pixel[..., 1] - K.cy) / K.fy * z
    xc = np.stack([x, y, z * np.ones_like(x)], axis=-1)
    # x_world = R^T (x_cam - t)
    return (xc - pose.translation) @ pose.R


def compose(a: Pose, b: Pose) -> Pose:
    """``compose(a, b)`` applies ``b`` first, then ``a``."""
    rot = a.rotation * b.rotation
    return Pose(rot, a.rotation.matrix @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def rotation_error_deg(a: Pose, b: Pose) -> float:
    rel = a.rotation * b.rotation.inverse()
    return math.degrees(rel.angle())


def translation_error(a: Pose, b: Pose) -> float:
    """Distance between the two camera centres."""
    return float(np.linalg.norm(a.center - b.center))


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


def jitter(p: Pose, rot_deg: float, trans_mag: float, rng_seed) -> Pose:
    """Perturb ``p`` by exactly ``rot_deg`` degrees and ``trans_mag`` units.

    The rotation axis and the camera-centre shift direction are uniformly
    random; both are drawn even when the magnitudes are zero so that a given
    seed always consumes the same random stream.
    """
    if rot_deg < 0 or trans_mag < 0:
        raise ValueError("jitter magnitudes must be non-negative")
    rng = np.random.default_rng(rng_seed)
    axis = random_unit_vector(rng)
    direction = random_unit_vector(rng)
    if rot_deg == 0 and trans_mag == 0:
        return p
    rotation = p.rotation
    if rot_deg > 0:
        rotation = Rotation.from_axis_angle(axis, math.radians(rot_deg)) * p.rotation
    center = p.center + trans_mag * direction
    return Pose.from_center(rotation, center)


def format_pose(p: Pose) -> str:
    values = list(p.rotation.quat) + list(p.translation)
    return " ".join(f"{v:.17g}" for v in values)


def parse_pose(line: str, lineno: int = 1) -> Pose:
    parts = line.split()
    if len(parts) != 7:
        raise FormatError(f"line {lineno}: expected 7 values 'qw qx qy qz tx ty tz'", line=lineno)
    try:
        vals = np.array([float(x) for x in parts])
    except ValueError as exc:
        raise FormatError(f"line {lineno}: {exc}", line=lineno) from None
    if not np.all(np.isfinite(vals)):
        raise FormatError(f"line {lineno}: non-finite pose value", line=lineno)
    return Pose(Rotation(vals[:4]), vals[4:])


def write_poses(path, poses: Iterable[Pose]) -> None:
    Path(path).write_text("".join(format_pose(p) + "\n" for p in poses))


def read_poses(path) -> list:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        poses.append(parse_pose(line, lineno))
    return poses
