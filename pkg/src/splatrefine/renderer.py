"""Software gaussian-splat rasterizer with z-depth compositing.

Every pixel composites its contributors front to back::

    w_i     = alpha_i * prod_{j<i} (1 - alpha_j)
    rgb     = sum_i w_i * color_i + T_final * background
    depth   = sum_i w_i * z_i            (no background term)
    alpha   = 1 - T_final

``alpha_i`` is the gaussian opacity times the projected 2D gaussian
evaluated at the pixel centre. Compositing stops right after the
contribution that drives the transmittance below ``transmittance_floor``.

:func:`render` bins splats into screen tiles and composites each tile with
array operations. :func:`brute_force_reference` evaluates every splat at
every pixel with one global sort and is kept as an independent check.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import FormatError
from .geometry import CameraIntrinsics, Pose
from .scene import SplatScene, quats_to_matrices

TILE = 16
# x/z and y/z entering the projection Jacobian are clamped to this multiple of
# the half field of view; off-axis splats near the camera otherwise explode
JACOBIAN_FOV_CLAMP = 1.3


@dataclass(frozen=True)
class RenderOptions:
    near_clip: Optional[float] = None  # None -> 0.01 * scene_scale
    transmittance_floor: float = 1e-4
    alpha_cutoff: float = 1.0 / 255.0
    lowpass_dilation: float = 0.3
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    alpha_max: float = 0.99

    def __post_init__(self):
        if self.near_clip is not None and not self.near_clip > 0:
            raise ValueError("near_clip must be positive")
        for name in ("transmittance_floor", "alpha_cutoff"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if not 0.0 < self.alpha_max <= 1.0:
            raise ValueError("alpha_max must lie in (0, 1]")
        if self.lowpass_dilation < 0:
            raise ValueError("lowpass_dilation must be non-negative")

    def near_for(self, scene: SplatScene) -> float:
        return self.near_clip if self.near_clip is not None else 0.01 * scene.scene_scale


@dataclass
class RenderedView:
    rgb: np.ndarray
    depth_raw: np.ndarray
    alpha: np.ndarray
    width: int
    height: int
    pose: Optional[Pose] = None
    intrinsics: Optional[CameraIntrinsics] = None
    diagnostics: dict = field(default_factory=dict)


def _empty_view(K, pose, opts, diagnostics) -> RenderedView:
    rgb = np.empty((K.height, K.width, 3))
    rgb[:] = np.asarray(opts.background, dtype=np.float64)
    zeros = np.zeros((K.height, K.width))
    return RenderedView(rgb, zeros, zeros.copy(), K.width, K.height, pose, K, diagnostics)


def _project(scene: SplatScene, K: CameraIntrinsics, pose: Pose, opts: RenderOptions):
    """Screen-space parameters for every splat in front of the near plane."""
    xc = pose.apply(scene.means)
    z = xc[:, 2]
    keep = np.flatnonzero(z > opts.near_for(scene))
    xc, z = xc[keep], z[keep]

    Rg = quats_to_matrices(scene.quats[keep])
    W = pose.R
    # camera-frame covariance: (W Rg) diag(s^2) (W Rg)^T
    M = np.einsum("ij,njk->nik", W, Rg) * scene.scales[keep][:, None, :]
    cov = M @ M.transpose(0, 2, 1)

    lim_x = JACOBIAN_FOV_CLAMP * 0.5 * K.width / K.fx
    lim_y = JACOBIAN_FOV_CLAMP * 0.5 * K.height / K.fy
    jx = np.clip(xc[:, 0] / z, -lim_x, lim_x)
    jy = np.clip(xc[:, 1] / z, -lim_y, lim_y)
    J = np.zeros((len(keep), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * jx / z
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * jy / z
    cov2 = J @ cov @ J.transpose(0, 2, 1)
    a = cov2[:, 0, 0] + opts.lowpass_dilation
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + opts.lowpass_dilation
    det = a * c - b * b

    ok = det > 1e-12 * np.maximum(a * c, 1e-300)
    n_degenerate = int((~ok).sum())
    sel = np.flatnonzero(ok)
    a, b, c, det = a[sel], b[sel], c[sel], det[sel]
    uv = np.stack([K.fx * xc[sel, 0] / z[sel] + K.cx, K.fy * xc[sel, 1] / z[sel] + K.cy], axis=1)
    return {
        "index": keep[sel],
        "uv": uv,
        "z": z[sel],
        "conic": np.stack([c / det, -b / det, a / det], axis=1),
        "lam_max": 0.5 * (a + c) + np.sqrt((0.5 * (a - c)) ** 2 + b * b),
        "culled": len(scene) - len(keep),
        "degenerate": n_degenerate,
    }


def render(
    scene: SplatScene,
    K: CameraIntrinsics,
    pose: Pose,
    opts: Optional[RenderOptions] = None,
) -> RenderedView:
    opts = opts or RenderOptions()
    H, W = K.height, K.width
    proj = _project(scene, K, pose, opts)
    diagnostics = {"culled": proj["culled"], "degenerate": proj["degenerate"]}

    opac = scene.opacities[proj["index"]]
    # beyond this radius alpha < alpha_cutoff, so the splat cannot contribute
    if opts.alpha_cutoff > 0:
        live = opac >= opts.alpha_cutoff
        reach = 2.0 * np.log(np.where(live, opac, 1.0) / opts.alpha_cutoff)
        radius = np.sqrt(reach * proj["lam_max"]) * (1 + 1e-9) + 1e-6
    else:
        live = np.ones(len(opac), dtype=bool)
        radius = np.full(len(opac), np.inf)
    uv = proj["uv"]
    u0 = np.ceil(uv[:, 0] - radius)
    u1 = np.floor(uv[:, 0] + radius)
    v0 = np.ceil(uv[:, 1] - radius)
    v1 = np.floor(uv[:, 1] + radius)
    live &= (u1 >= 0) & (u0 <= W - 1) & (v1 >= 0) & (v0 <= H - 1) & (u0 <= u1) & (v0 <= v1)
    sel = np.flatnonzero(live)
    if len(sel) == 0:
        return _empty_view(K, pose, opts, diagnostics)

    # front-to-back by camera z; ties keep scene order
    sel = sel[np.argsort(proj["z"][sel], kind="stable")]
    tiles_x = (W + TILE - 1) // TILE
    tiles_y = (H + TILE - 1) // TILE
    tx0 = (np.clip(u0[sel], 0, W - 1) // TILE).astype(np.int64)
    tx1 = (np.clip(u1[sel], 0, W - 1) // TILE).astype(np.int64)
    ty0 = (np.clip(v0[sel], 0, H - 1) // TILE).astype(np.int64)
    ty1 = (np.clip(v1[sel], 0, H - 1) // TILE).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    owner = np.repeat(np.arange(len(sel)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_id = (ty0[owner] + local // nx[owner]) * tiles_x + tx0[owner] + local % nx[owner]
    order = np.argsort(tile_id, kind="stable")
    tile_id = tile_id[order]
    owner = owner[order]
    bounds = np.flatnonzero(np.diff(tile_id)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(tile_id)]])

    gsel = sel  # indices into proj arrays
    g_u = uv[gsel, 0]
    g_v = uv[gsel, 1]
    g_conic = proj["conic"][gsel]
    g_op = opac[gsel]
    g_z = proj["z"][gsel]
    g_col = scene.colors[proj["index"][gsel]]
    bg = np.asarray(opts.background, dtype=np.float64)

    rgb = np.empty((H, W, 3))
    rgb[:] = bg
    depth = np.zeros((H, W))
    alpha_acc = np.zeros((H, W))
    floor = opts.transmittance_floor
    for s, e in zip(starts, ends):
        t = int(tile_id[s])
        ty, tx = divmod(t, tiles_x)
        ys, xs = ty * TILE, tx * TILE
        ye, xe = min(ys + TILE, H), min(xs + TILE, W)
        gv, gu = np.mgrid[ys:ye, xs:xe]
        px = gu.ravel().astype(np.float64)
        py = gv.ravel().astype(np.float64)

        g = owner[s:e]
        dx = px[None, :] - g_u[g, None]
        dy = py[None, :] - g_v[g, None]
        cn = g_conic[g]
        power = cn[:, 0:1] * dx * dx + 2.0 * cn[:, 1:2] * dx * dy + cn[:, 2:3] * dy * dy
        al = np.minimum(opts.alpha_max, g_op[g, None] * np.exp(-0.5 * power))
        al[al < opts.alpha_cutoff] = 0.0

        t_after = np.cumprod(1.0 - al, axis=0)
        t_before = np.empty_like(t_after)
        t_before[0] = 1.0
        t_before[1:] = t_after[:-1]
        active = t_before >= floor
        w = np.where(active, al * t_before, 0.0)
        last = active.sum(axis=0) - 1
        t_final = np.take_along_axis(t_after, last[None, :], axis=0)[0]

        shape = (ye - ys, xe - xs)
        rgb[ys:ye, xs:xe] = (w.T @ g_col[g] + t_final[:, None] * bg).reshape(shape + (3,))
        depth[ys:ye, xs:xe] = (w.T @ g_z[g]).reshape(shape)
        alpha_acc[ys:ye, xs:xe] = (1.0 - t_final).reshape(shape)

    diagnostics["splats_drawn"] = int(len(sel))
    diagnostics["tile_pairs"] = int(len(tile_id))
    return RenderedView(rgb, depth, alpha_acc, W, H, pose, K, diagnostics)


def brute_force_reference(
    scene: SplatScene,
    K: CameraIntrinsics,
    pose: Pose,
    opts: Optional[RenderOptions] = None,
) -> RenderedView:
    """Slow reference renderer: every splat at every pixel, one global z-sort.

    Meant for tiny images and a handful of splats.
    """
    opts = opts or RenderOptions()
    H, W = K.height, K.width
    near = opts.near_for(scene)
    Rw = pose.R
    entries = []
    degenerate = culled = 0
    for i in range(len(scene)):
        g = scene[i]
        x, y, z = Rw @ g.mean + pose.translation
        if z <= near:
            culled += 1
            continue
        sigma_cam = Rw @ g.covariance @ Rw.T
        lx = JACOBIAN_FOV_CLAMP * K.width / (2 * K.fx)
        ly = JACOBIAN_FOV_CLAMP * K.height / (2 * K.fy)
        tx = min(max(x / z, -lx), lx)
        ty = min(max(y / z, -ly), ly)
        jac = np.array([[K.fx / z, 0.0, -K.fx * tx / z], [0.0, K.fy / z, -K.fy * ty / z]])
        s2 = jac @ sigma_cam @ jac.T + opts.lowpass_dilation * np.eye(2)
        if np.linalg.det(s2) <= 1e-12 * s2[0, 0] * s2[1, 1]:
            degenerate += 1
            continue
        entries.append((z, i, np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy]), np.linalg.inv(s2), g))

    entries.sort(key=lambda e: (e[0], e[1]))
    u, v = K.pixel_grid()
    bg = np.asarray(opts.background, dtype=np.float64)
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    T = np.ones((H, W))
    running = np.ones((H, W), dtype=bool)
    for z, _, mu, inv, g in entries:
        d = np.stack([u - mu[0], v - mu[1]], axis=-1)
        power = np.einsum("hwi,ij,hwj->hw", d, inv, d)
        a = np.minimum(opts.alpha_max, g.opacity * np.exp(-0.5 * power))
        hit = running & (a >= opts.alpha_cutoff)
        a = np.where(hit, a, 0.0)
        color += (a * T)[..., None] * g.color
        depth += a * T * z
        T = T * (1.0 - a)
        running &= ~(T < opts.transmittance_floor)
    rgb = color + T[..., None] * bg
    return RenderedView(
        rgb, depth, 1.0 - T, W, H, pose, K, {"culled": culled, "degenerate": degenerate}
    )


def normalized_depth(view: RenderedView, alpha_min: float = 0.5):
    """Depth divided by accumulated opacity, valid where ``alpha >= alpha_min``.

    Returns ``(depth, valid)``; invalid entries are 0.
    """
    if not 0.0 < alpha_min < 1.0:
        raise ValueError("alpha_min must lie in (0, 1)")
    valid = view.alpha >= alpha_min
    depth = np.zeros_like(view.depth_raw)
    depth[valid] = view.depth_raw[valid] / view.alpha[valid]
    valid &= depth > 0
    return depth, valid


# ---------------------------------------------------------------------------
# raster files
# ---------------------------------------------------------------------------


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    img = to_uint8(rgb) if np.asarray(rgb).dtype != np.uint8 else np.asarray(rgb)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM and return float RGB in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    pixels = data[pos + 1 : pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


DEPTH_MAGIC = b"DPTH v1 "


def write_depth(path, depth: np.ndarray) -> None:
    """Little-endian float32 raster behind a 16-byte header.

    Header: ASCII ``"DPTH v1 "`` then width and height as little-endian uint32.
    """
    depth = np.asarray(depth)
    h, w = depth.shape
    header = DEPTH_MAGIC + struct.pack("<II", w, h)
    Path(path).write_bytes(header + depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != DEPTH_MAGIC:
        raise FormatError(f"{path}: missing DPTH v1 header")
    w, h = struct.unpack("<II", data[8:16])
    body = data[16:]
    if len(body) != 4 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} floats, got {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def downsample2(img: np.ndarray) -> np.ndarray:
    """Average 2x2 blocks (drops a trailing odd row/column)."""
    h, w = img.shape[0] // 2, img.shape[1] // 2
    img = img[: 2 * h, : 2 * w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def max_abs_diff(a: RenderedView, b: RenderedView) -> float:
    return float(
        max(
            np.max(np.abs(a.rgb - b.rgb), initial=0.0),
            np.max(np.abs(a.depth_raw - b.depth_raw), initial=0.0),
            np.max(np.abs(a.alpha - b.alpha), initial=0.0),
        )
    )


__all__ = [
    "RenderOptions",
    "RenderedView",
    "render",
    "brute_force_reference",
    "normalized_depth",
    "write_ppm",
    "read_ppm",
    "write_depth",
    "read_depth",
    "downsample2",
    "max_abs_diff",
]
