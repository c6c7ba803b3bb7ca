"""Differentiable tile-based software rasterizer for 3D Gaussians.

Pipeline: sanitize scales -> covariance ``R S S^T R^T`` -> EWA projection
to screen space -> SH colors along the view ray -> global stable depth sort
-> 16x16 tile binning -> front-to-back alpha compositing

    C = sum_i c_i a_i prod_{j<i} (1 - a_j) + T_final * background,
    a_i = o_i * exp(-q_i / 2),   q_i = d^T conic_i d.

A splat's support is its ``extent_sigma`` ellipse (``q <= extent_sigma^2``),
so tile binning never changes the image. Contributions with
``a < alpha_min`` are skipped and a pixel stops once its transmittance would
drop below ``t_min``.

Pixel ``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``; cameras follow the
OpenCV convention (x right, y down, z forward).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .decoder import eval_sh_colors, eval_sh_colors_backward

__all__ = [
    "SCALE_EPS",
    "COV2D_REG",
    "Camera",
    "RasterSettings",
    "Splats",
    "RasterResult",
    "RenderResult",
    "sanitize_scales",
    "quat_to_rotmat",
    "build_covariance",
    "build_covariances",
    "project",
    "project_gaussians",
    "sort_by_depth",
    "bin_tiles",
    "rasterize",
    "rasterize_backward",
    "render_gaussians",
    "render_backward",
]

SCALE_EPS = 1e-6
COV2D_REG = 0.3


# --- camera ------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera: ``x_cam = R @ x_world + t``."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.2

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        self.width, self.height = int(self.width), int(self.height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def w2c(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3], m[:3, 3] = self.R, self.t
        return m

    @classmethod
    def from_c2w(cls, c2w, fx, fy, width, height, cx=None, cy=None, opengl=False, near=0.2):
        """Build from a camera-to-world matrix (OpenGL axes if ``opengl``)."""
        c2w = np.array(c2w, dtype=np.float64)[:3, :4]
        if opengl:
            c2w[:3, 1:3] *= -1.0
        rot = c2w[:3, :3]
        # re-orthonormalize accumulated float noise in stored poses
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        R = rot.T
        t = -R @ c2w[:3, 3]
        return cls(R, t, fx, fy, width / 2.0 if cx is None else cx,
                   height / 2.0 if cy is None else cy, width, height, near)

    @classmethod
    def from_nerf(cls, transform_matrix, camera_angle_x, width, height, near=0.2):
        """NeRF-synthetic convention: OpenGL camera-to-world and horizontal FOV."""
        focal = 0.5 * width / np.tan(0.5 * camera_angle_x)
        return cls.from_c2w(transform_matrix, focal, focal, width, height, opengl=True, near=near)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, near=0.2):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(R, -R @ eye, fx, fy, width / 2.0, height / 2.0, width, height, near)

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height, "fx": self.fx, "fy": self.fy,
            "cx": self.cx, "cy": self.cy, "near": self.near, "w2c": self.w2c.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        if "w2c" in d:
            w2c = np.asarray(d["w2c"], dtype=np.float64)
            return cls(w2c[:3, :3], w2c[:3, 3], d["fx"], d["fy"], d["cx"], d["cy"],
                       d["width"], d["height"], d.get("near", 0.2))
        if "transform_matrix" in d:
            return cls.from_nerf(d["transform_matrix"], d["camera_angle_x"], d["width"],
                                 d["height"], d.get("near", 0.2))
        raise ValueError("camera dict needs 'w2c' or 'transform_matrix'")


@dataclass
class RasterSettings:
    tile_size: int = 16
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    extent_sigma: float = 3.0

    @classmethod
    def exact(cls, tile_size=16) -> "RasterSettings":
        """No cutoffs at all: every splat covers the whole plane."""
        return cls(tile_size=tile_size, alpha_min=0.0, t_min=0.0, extent_sigma=np.inf)


# --- geometry ------------------------------------------------------------------


def sanitize_scales(scales):
    """``max(|s|, SCALE_EPS)``; the renderer's only scale activation."""
    return np.maximum(np.abs(scales), SCALE_EPS)


def quat_to_rotmat(q):
    """Rotation matrices of unit quaternions ``(w, x, y, z)``; ``(M, 3, 3)``."""
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_backward(q, gR):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def build_covariances(scales, quats):
    """Batched ``R diag(s)^2 R^T`` for positive scales and unit quaternions."""
    M = quat_to_rotmat(quats) * scales[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def build_covariance(scale, quat):
    """3x3 covariance of one Gaussian."""
    scale = np.asarray(scale, dtype=np.float64).reshape(1, 3)
    quat = np.asarray(quat, dtype=np.float64).reshape(1, 4)
    return build_covariances(scale, quat)[0]


def _covariance_backward(scales, quats, g_cov):
    R = quat_to_rotmat(quats)
    M = R * scales[:, None, :]
    gM = (g_cov + np.swapaxes(g_cov, 1, 2)) @ M
    g_scales = np.sum(gM * R, axis=1)
    g_quats = _rotmat_backward(quats, gM * scales[:, None, :])
    return g_scales, g_quats


# --- projection ----------------------------------------------------------------


@dataclass
class Splats:
    """Screen-space Gaussians (batched ``SplattedGaussian``).

    ``conics`` and ``cov2d`` are packed symmetric 2x2 matrices ``(a, b, c)``
    meaning ``[[a, b], [b, c]]``.
    """

    means2d: np.ndarray
    conics: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    depths: np.ndarray
    cov2d: np.ndarray | None = None

    def __len__(self):
        return int(self.means2d.shape[0])

    def subset(self, index) -> "Splats":
        return Splats(self.means2d[index], self.conics[index], self.colors[index],
                      self.opacities[index], self.depths[index],
                      None if self.cov2d is None else self.cov2d[index])


def _conic_from_cov(cov2):
    a, b, c = cov2[:, 0], cov2[:, 1], cov2[:, 2]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def project_gaussians(positions, cov3d, camera: Camera, settings: RasterSettings | None = None):
    """EWA projection of world-space Gaussians.

    Returns ``(means2d, cov2d, conics, depths, visible, cache)``; ``visible``
    flags Gaussians in front of the near plane whose extent touches the image.
    """
    settings = settings or RasterSettings()
    dtype = positions.dtype
    W = camera.R.astype(dtype)
    tcam = positions @ W.T + camera.t.astype(dtype)
    tx, ty, tz = tcam[:, 0], tcam[:, 1], tcam[:, 2]
    visible = tz > camera.near
    tzs = np.where(visible, tz, 1.0)
    fx, fy = dtype.type(camera.fx), dtype.type(camera.fy)
    J = np.zeros((positions.shape[0], 2, 3), dtype=dtype)
    J[:, 0, 0] = fx / tzs
    J[:, 0, 2] = -fx * tx / (tzs * tzs)
    J[:, 1, 1] = fy / tzs
    J[:, 1, 2] = -fy * ty / (tzs * tzs)
    T = J @ W
    full = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2 = np.stack([full[:, 0, 0] + COV2D_REG, full[:, 0, 1], full[:, 1, 1] + COV2D_REG], axis=1)
    means = np.stack([fx * tx / tzs + camera.cx, fy * ty / tzs + camera.cy], axis=1).astype(dtype)
    conics = _conic_from_cov(cov2)
    if np.isfinite(settings.extent_sigma):
        k = settings.extent_sigma
        rx = k * np.sqrt(np.maximum(cov2[:, 0], 0))
        ry = k * np.sqrt(np.maximum(cov2[:, 2], 0))
        visible &= (means[:, 0] + rx > 0) & (means[:, 0] - rx < camera.width)
        visible &= (means[:, 1] + ry > 0) & (means[:, 1] - ry < camera.height)
    cache = {"tcam": tcam, "J": J, "T": T, "W": W, "full": full}
    return means, cov2, conics, tz, visible, cache


def project(position, scale, quat, camera: Camera, settings: RasterSettings | None = None):
    """Project a single Gaussian; returns a one-element :class:`Splats` or ``None`` if culled."""
    pos = np.asarray(position, dtype=np.float64).reshape(1, 3)
    cov = build_covariances(sanitize_scales(np.asarray(scale, dtype=np.float64).reshape(1, 3)),
                            np.asarray(quat, dtype=np.float64).reshape(1, 4))
    means, cov2, conics, depth, visible, _ = project_gaussians(pos, cov, camera, settings)
    if not visible[0]:
        return None
    return Splats(means, conics, np.zeros((1, 3)), np.ones(1), depth, cov2)


def _project_backward(cov3d, camera, cache, g_means, g_conics, conics):
    """Gradients of positions and 3D covariances from screen-space gradients."""
    tcam, J, T, W = cache["tcam"], cache["J"], cache["T"], cache["W"]
    tx, ty, tz = tcam[:, 0], tcam[:, 1], tcam[:, 2]
    fx, fy = camera.fx, camera.fy
    # conic -> cov2: dL/dcov = -Q G Q with G the symmetric matrix gradient
    A, B, C = conics[:, 0], conics[:, 1], conics[:, 2]
    gA, gB, gC = g_conics[:, 0], g_conics[:, 1] * 0.5, g_conics[:, 2]
    # Q G Q for symmetric 2x2 matrices
    qg00 = A * gA + B * gB
    qg01 = A * gB + B * gC
    qg10 = B * gA + C * gB
    qg11 = B * gB + C * gC
    g00 = -(qg00 * A + qg01 * B)
    g01 = -(qg00 * B + qg01 * C)
    g11 = -(qg10 * B + qg11 * C)
    G2 = np.empty((tcam.shape[0], 2, 2), dtype=tcam.dtype)
    G2[:, 0, 0], G2[:, 0, 1], G2[:, 1, 0], G2[:, 1, 1] = g00, g01, g01, g11
    g_cov3d = np.swapaxes(T, 1, 2) @ G2 @ T
    gT = 2.0 * G2 @ T @ cov3d
    gJ = gT @ W.T
    g_t = np.zeros_like(tcam)
    inv_z2 = 1.0 / (tz * tz)
    g_t[:, 0] += gJ[:, 0, 2] * (-fx * inv_z2)
    g_t[:, 1] += gJ[:, 1, 2] * (-fy * inv_z2)
    g_t[:, 2] += (gJ[:, 0, 0] * (-fx * inv_z2) + gJ[:, 0, 2] * (2 * fx * tx * inv_z2 / tz)
                  + gJ[:, 1, 1] * (-fy * inv_z2) + gJ[:, 1, 2] * (2 * fy * ty * inv_z2 / tz))
    g_t[:, 0] += g_means[:, 0] * fx / tz
    g_t[:, 1] += g_means[:, 1] * fy / tz
    g_t[:, 2] += -(g_means[:, 0] * fx * tx + g_means[:, 1] * fy * ty) * inv_z2
    return g_t @ W, g_cov3d


# --- sorting and binning ---------------------------------------------------------


def sort_by_depth(depths) -> np.ndarray:
    """Stable ascending depth order; NaN depths are rejected."""
    depths = np.asarray(depths)
    if np.any(np.isnan(depths)):
        raise ValueError("NaN depth encountered")
    return np.argsort(depths, kind="stable")


def _min_quadratic_on_rect(A, B, C, x0, x1, y0, y1):
    """Minimum of ``A x^2 + 2 B x y + C y^2`` over ``[x0,x1] x [y0,y1]``."""
    inside = (x0 <= 0) & (x1 >= 0) & (y0 <= 0) & (y1 >= 0)

    def f(x, y):
        return A * x * x + 2 * B * x * y + C * y * y

    best = np.full(A.shape, np.inf, dtype=np.result_type(A, np.float64))
    for X in (x0, x1):
        y = np.clip(-B * X / C, y0, y1)
        best = np.minimum(best, f(X, y))
    for Y in (y0, y1):
        x = np.clip(-B * Y / A, x0, x1)
        best = np.minimum(best, f(x, Y))
    return np.where(inside, 0.0, best)


def bin_tiles(splats: Splats, order, width, height, settings: RasterSettings):
    """Per-tile splat lists (global depth order kept inside each tile).

    Returns ``(tile_ids, splat_ids, starts)``: pairs sorted by tile, and the
    CSR offsets of every tile into them.
    """
    ts = settings.tile_size
    ntx, nty = -(-width // ts), -(-height // ts)
    ntiles = ntx * nty
    if len(order) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(ntiles + 1, dtype=np.int64)
    mx, my = splats.means2d[order, 0], splats.means2d[order, 1]
    if not np.isfinite(settings.extent_sigma):
        splat_ids = np.tile(order, ntiles)
        tile_ids = np.repeat(np.arange(ntiles), len(order))
        starts = np.arange(ntiles + 1) * len(order)
        return tile_ids, splat_ids, starts
    k = settings.extent_sigma
    cov2 = splats.cov2d[order]
    rx = k * np.sqrt(cov2[:, 0])
    ry = k * np.sqrt(cov2[:, 2])
    u0 = np.clip(np.ceil(mx - rx - 0.5), 0, width - 1).astype(np.int64)
    u1 = np.clip(np.floor(mx + rx - 0.5), 0, width - 1).astype(np.int64)
    v0 = np.clip(np.ceil(my - ry - 0.5), 0, height - 1).astype(np.int64)
    v1 = np.clip(np.floor(my + ry - 0.5), 0, height - 1).astype(np.int64)
    ok = (mx + rx - 0.5 >= 0) & (mx - rx - 0.5 <= width - 1)
    ok &= (my + ry - 0.5 >= 0) & (my - ry - 0.5 <= height - 1) & (u1 >= u0) & (v1 >= v0)
    tx0, tx1, ty0, ty1 = u0 // ts, u1 // ts, v0 // ts, v1 // ts
    nx = np.where(ok, tx1 - tx0 + 1, 0)
    ny = np.where(ok, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    rank = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = nx[rank]
    tx = tx0[rank] + local % nxr
    ty = ty0[rank] + local // nxr
    # exact ellipse / tile-rectangle test over the tile's pixel centers
    px0 = tx * ts + 0.5
    px1 = np.minimum(tx * ts + ts, width) - 0.5
    py0 = ty * ts + 0.5
    py1 = np.minimum(ty * ts + ts, height) - 0.5
    con = splats.conics[order][rank].astype(np.float64)
    qmin = _min_quadratic_on_rect(con[:, 0], con[:, 1], con[:, 2],
                                  px0 - mx[rank], px1 - mx[rank], py0 - my[rank], py1 - my[rank])
    keep = qmin <= k * k
    tile_ids = (ty * ntx + tx)[keep]
    splat_ids = order[rank[keep]]
    srt = np.argsort(tile_ids, kind="stable")
    tile_ids, splat_ids = tile_ids[srt], splat_ids[srt]
    starts = np.searchsorted(tile_ids, np.arange(ntiles + 1))
    return tile_ids, splat_ids, starts


# --- compositing -------------------------------------------------------------------


@dataclass
class RasterResult:
    image: np.ndarray
    transmittance: np.ndarray
    state: dict = field(repr=False, default_factory=dict)
    timings: dict = field(default_factory=dict)


def _tile_pixels(tile, ntx, width, height, ts, dtype):
    tx, ty = tile % ntx, tile // ntx
    us = np.arange(tx * ts, min(tx * ts + ts, width))
    vs = np.arange(ty * ts, min(ty * ts + ts, height))
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    return vv.ravel(), uu.ravel(), (uu.ravel() + 0.5).astype(dtype), (vv.ravel() + 0.5).astype(dtype)


def _tile_alpha(splats, idx, px, py, settings):
    m = splats.means2d[idx]
    con = splats.conics[idx]
    dx = px[:, None] - m[None, :, 0]
    dy = py[:, None] - m[None, :, 1]
    q = con[None, :, 0] * dx * dx + 2 * con[None, :, 1] * dx * dy + con[None, :, 2] * dy * dy
    g = np.exp(-0.5 * q)
    alpha = splats.opacities[idx][None, :] * g
    valid = alpha >= settings.alpha_min
    if np.isfinite(settings.extent_sigma):
        valid &= q <= settings.extent_sigma**2
    a = np.where(valid, alpha, 0)
    if settings.t_min > 0:
        t_after = np.cumprod(1 - a, axis=1)
        valid &= t_after >= settings.t_min
        a = np.where(valid, a, 0)
    return dx, dy, g, a, valid


def _tile_transmittance(a):
    tc = np.cumprod(1 - a, axis=1)
    t_before = np.empty_like(tc)
    t_before[:, 0] = 1
    t_before[:, 1:] = tc[:, :-1]
    return t_before, tc[:, -1]


def rasterize(splats: Splats, width, height, background=(0.0, 0.0, 0.0),
              settings: RasterSettings | None = None) -> RasterResult:
    """Composite splats front to back; returns image ``(H, W, 3)`` and final transmittance."""
    settings = settings or RasterSettings()
    dtype = splats.means2d.dtype if len(splats) else np.float64
    bg = np.asarray(background, dtype=dtype).reshape(3)
    t0 = time.perf_counter()
    order = sort_by_depth(splats.depths)
    t1 = time.perf_counter()
    tile_ids, splat_ids, starts = bin_tiles(splats, order, width, height, settings)
    t2 = time.perf_counter()
    ts = settings.tile_size
    ntx = -(-width // ts)
    image = np.empty((height, width, 3), dtype=dtype)
    trans = np.empty((height, width), dtype=dtype)
    for tile in range(len(starts) - 1):
        vv, uu, px, py = _tile_pixels(tile, ntx, width, height, ts, dtype)
        idx = splat_ids[starts[tile]:starts[tile + 1]]
        if len(idx) == 0:
            image[vv, uu] = bg
            trans[vv, uu] = 1
            continue
        _, _, _, a, _ = _tile_alpha(splats, idx, px, py, settings)
        t_before, t_final = _tile_transmittance(a)
        w = a * t_before
        image[vv, uu] = w @ splats.colors[idx] + t_final[:, None] * bg
        trans[vv, uu] = t_final
    t3 = time.perf_counter()
    state = {"splat_ids": splat_ids, "starts": starts, "width": width, "height": height,
             "background": bg, "settings": settings}
    return RasterResult(image, trans, state,
                        {"sort": t1 - t0, "bin": t2 - t1, "blend": t3 - t2})


def rasterize_backward(splats: Splats, grad_image, state):
    """Gradients of a scalar loss w.r.t. splat means, conics, colors and opacities.

    ``state`` is :attr:`RasterResult.state` from the matching forward pass.
    """
    if not state:
        raise ValueError("rasterize_backward needs the forward state")
    settings = state["settings"]
    width, height = state["width"], state["height"]
    if grad_image.shape != (height, width, 3):
        raise ValueError("grad_image shape does not match the rendered image")
    splat_ids, starts, bg = state["splat_ids"], state["starts"], state["background"]
    ts = settings.tile_size
    ntx = -(-width // ts)
    n = len(splats)
    dtype = splats.means2d.dtype if n else np.float64
    g_means = np.zeros((n, 2), dtype=dtype)
    g_conics = np.zeros((n, 3), dtype=dtype)
    g_colors = np.zeros((n, 3), dtype=dtype)
    g_opac = np.zeros(n, dtype=dtype)
    for tile in range(len(starts) - 1):
        idx = splat_ids[starts[tile]:starts[tile + 1]]
        if len(idx) == 0:
            continue
        vv, uu, px, py = _tile_pixels(tile, ntx, width, height, ts, dtype)
        gC = grad_image[vv, uu].astype(dtype)
        dx, dy, g, a, valid = _tile_alpha(splats, idx, px, py, settings)
        t_before, t_final = _tile_transmittance(a)
        w = a * t_before
        col = splats.colors[idx]
        g_colors[idx] += w.T @ gC
        s = gC @ col.T
        sw = s * w
        # sum over later splats plus the background term, per pixel
        after = np.cumsum(sw[:, ::-1], axis=1)[:, ::-1] - sw
        after += (t_final * (gC @ bg))[:, None]
        one_minus = 1 - a
        # a == 1 leaves nothing behind it, so the trailing term vanishes
        ratio = np.divide(after, one_minus, out=np.zeros_like(after), where=one_minus > 0)
        g_a = t_before * s - ratio
        g_a = np.where(valid, g_a, 0)
        g_opac[idx] += np.sum(g_a * g, axis=0)
        g_q = -0.5 * g_a * a
        con = splats.conics[idx]
        g_conics[idx, 0] += np.sum(g_q * dx * dx, axis=0)
        g_conics[idx, 1] += np.sum(g_q * 2 * dx * dy, axis=0)
        g_conics[idx, 2] += np.sum(g_q * dy * dy, axis=0)
        g_means[idx, 0] += np.sum(-g_q * 2 * (con[None, :, 0] * dx + con[None, :, 1] * dy), axis=0)
        g_means[idx, 1] += np.sum(-g_q * 2 * (con[None, :, 1] * dx + con[None, :, 2] * dy), axis=0)
    return {"means2d": g_means, "conics": g_conics, "colors": g_colors, "opacities": g_opac}


# --- full pipeline ---------------------------------------------------------------------


@dataclass
class RenderResult:
    image: np.ndarray
    transmittance: np.ndarray
    ctx: dict = field(repr=False, default_factory=dict)
    timings: dict = field(default_factory=dict)
    num_visible: int = 0


def render_gaussians(positions, scales, rotations, sh, opacities, camera: Camera,
                     background=(0.0, 0.0, 0.0), settings: RasterSettings | None = None):
    """Render world-space Gaussians.

    ``scales`` are raw (sanitized here), ``rotations`` unit quaternions,
    ``sh`` ``(M, 48)`` coefficients, ``opacities`` in [0, 1].
    """
    settings = settings or RasterSettings()
    t0 = time.perf_counter()
    s_eff = sanitize_scales(scales)
    cov3d = build_covariances(s_eff, rotations)
    means, cov2, conics, depth, visible, pcache = project_gaussians(positions, cov3d, camera, settings)
    vis = np.flatnonzero(visible)
    view = positions[vis] - camera.center.astype(positions.dtype)
    dist = np.linalg.norm(view, axis=1)
    dirs = view / dist[:, None]
    colors, raw = eval_sh_colors(sh[vis], dirs, return_raw=True)
    splats = Splats(means[vis], conics[vis], colors.astype(positions.dtype), opacities[vis],
                    depth[vis], cov2[vis])
    t1 = time.perf_counter()
    res = rasterize(splats, camera.width, camera.height, background, settings)
    timings = {"project": t1 - t0, **res.timings}
    ctx = {
        "positions": positions, "scales": scales, "s_eff": s_eff, "rotations": rotations,
        "sh": sh, "opacities": opacities, "camera": camera, "cov3d": cov3d, "vis": vis,
        "pcache": pcache, "dirs": dirs, "dist": dist, "raw_colors": raw, "splats": splats,
        "raster_state": res.state,
    }
    return RenderResult(res.image, res.transmittance, ctx, timings, len(vis))


def render_backward(ctx: dict, grad_image) -> dict:
    """Gradients w.r.t. positions, raw scales, quaternions, SH and opacities."""
    if not ctx:
        raise ValueError("render_backward needs the forward context")
    splats, vis = ctx["splats"], ctx["vis"]
    positions, scales = ctx["positions"], ctx["scales"]
    m = positions.shape[0]
    g = rasterize_backward(splats, grad_image, ctx["raster_state"])
    g_sh_v, g_dirs = eval_sh_colors_backward(ctx["sh"][vis], ctx["dirs"], g["colors"],
                                             ctx["raw_colors"])
    pc = {k: v[vis] for k, v in ctx["pcache"].items() if k != "W"}
    pc["W"] = ctx["pcache"]["W"]
    g_pos_v, g_cov_v = _project_backward(ctx["cov3d"][vis], ctx["camera"], pc, g["means2d"],
                                         g["conics"], splats.conics)
    dirs = ctx["dirs"]
    g_pos_v += (g_dirs - dirs * np.sum(g_dirs * dirs, axis=1, keepdims=True)) / ctx["dist"][:, None]
    g_s_eff_v, g_q_v = _covariance_backward(ctx["s_eff"][vis], ctx["rotations"][vis], g_cov_v)
    raw_s = scales[vis]
    g_s_v = g_s_eff_v * np.sign(raw_s) * (np.abs(raw_s) > SCALE_EPS)
    dtype = positions.dtype
    out = {
        "positions": np.zeros((m, 3), dtype=dtype),
        "scales": np.zeros((m, 3), dtype=dtype),
        "rotations": np.zeros((m, 4), dtype=dtype),
        "sh": np.zeros((m, ctx["sh"].shape[1]), dtype=dtype),
        "opacities": np.zeros(m, dtype=dtype),
    }
    out["positions"][vis] = g_pos_v
    out["scales"][vis] = g_s_v
    out["rotations"][vis] = g_q_v
    out["sh"][vis] = g_sh_v
    out["opacities"][vis] = g["opacities"]
    return out
