"""Factorized coordinate/attribute blocks and their de-factorization.

A CP block stores ``N`` coordinates per axis plus per-axis scale, rotation
and feature factors; every ``(i, j, k)`` grid index yields one Gaussian whose
attributes are the component-wise triple product of the axis factors.

A VM block additionally stores free 2D plane coordinates and plane feature
matrices. Two expansion modes exist:

``"per-term"``
    three independent point sets ``(p_xy x p_z)``, ``(p_yz x p_x)``,
    ``(p_xz x p_y)`` with features ``f_xy * f_z``, ``f_yz * f_x``,
    ``f_xz * f_y`` respectively (``3 N^3`` Gaussians).
``"shared"``
    one ``N^3`` grid positioned by the line coordinates, with the summed
    feature ``f_xy*f_z + f_yz*f_x + f_xz*f_y``.

Index order is row-major ``(i, j, k)`` with ``k`` fastest everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

__all__ = [
    "FactorSetCP",
    "FactorSetVM",
    "ExpandedGaussians",
    "VM_MODES",
    "expand_cp_coordinates",
    "expand_cp_scales",
    "expand_cp_rotations",
    "expand_cp_features",
    "expand_vm_coordinates",
    "expand_vm_features",
    "expand_block",
    "expand_multi_set",
    "backprop_triple_product",
    "backprop_rotations",
    "backprop_expansion",
    "num_gaussians",
]

VM_MODES = ("per-term", "shared")

CP_COORD_NAMES = ("p_x", "p_y", "p_z")
VM_PLANE_COORD_NAMES = ("p_xy", "p_yz", "p_xz")
ATTR_NAMES = ("s_x", "s_y", "s_z", "q_x", "q_y", "q_z", "f_x", "f_y", "f_z")
VM_PLANE_FEATURE_NAMES = ("f_xy", "f_yz", "f_xz")


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass
class FactorSetCP:
    """One CP factorized block of resolution ``N``.

    Coordinates ``p_*`` have shape ``(N,)``, scale factors ``(N, 3)``,
    rotation factors ``(N, 4)`` and feature factors ``(N, d)``.
    """

    p_x: np.ndarray
    p_y: np.ndarray
    p_z: np.ndarray
    s_x: np.ndarray
    s_y: np.ndarray
    s_z: np.ndarray
    q_x: np.ndarray
    q_y: np.ndarray
    q_z: np.ndarray
    f_x: np.ndarray
    f_y: np.ndarray
    f_z: np.ndarray

    scheme = "CP"

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name)))
        n = self.p_x.shape[0]
        for name in CP_COORD_NAMES:
            arr = getattr(self, name)
            if arr.ndim != 1 or arr.shape[0] != n:
                raise ValueError(
                    f"coordinate factors must share one resolution; "
                    f"p_x has {n} entries, {name} has shape {arr.shape}"
                )
            _check_finite(name, arr)
        if n < 1:
            raise ValueError("block resolution must be >= 1")
        _check_attrs(self, n)

    @property
    def n(self) -> int:
        return int(self.p_x.shape[0])

    @property
    def d(self) -> int:
        return int(self.f_x.shape[1])

    def array_names(self):
        return CP_COORD_NAMES + ATTR_NAMES

    def coordinate_names(self):
        return CP_COORD_NAMES

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in self.array_names()}

    def copy(self) -> "FactorSetCP":
        return FactorSetCP(**{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> "FactorSetCP":
        return FactorSetCP(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def num_gaussians(self, mode=None) -> int:
        return self.n**3

    @classmethod
    def from_coordinates(cls, p_x, p_y, p_z, d=1, scale=1.0, dtype=np.float32):
        """Block with the given coordinates and neutral attribute factors."""
        p_x = np.asarray(p_x, dtype=dtype)
        n = p_x.shape[0]
        s = np.full((n, 3), np.cbrt(scale), dtype=dtype)
        q = np.zeros((n, 4), dtype=dtype)
        q[:, 0] = 1.0
        f = np.ones((n, d), dtype=dtype)
        return cls(
            p_x, np.asarray(p_y, dtype=dtype), np.asarray(p_z, dtype=dtype),
            s, s.copy(), s.copy(), q, q.copy(), q.copy(), f, f.copy(), f.copy(),
        )


def _check_attrs(block, n):
    d = None
    for name in ATTR_NAMES:
        arr = getattr(block, name)
        width = {"s": 3, "q": 4}.get(name[0])
        if arr.ndim != 2 or arr.shape[0] != n:
            raise ValueError(f"{name} must have shape ({n}, ...), got {arr.shape}")
        if width is not None and arr.shape[1] != width:
            raise ValueError(f"{name} must have {width} columns, got {arr.shape[1]}")
        if name[0] == "f":
            if d is None:
                d = arr.shape[1]
            elif arr.shape[1] != d:
                raise ValueError("feature factors must share the feature width d")
    if d < 1:
        raise ValueError("feature width d must be >= 1")


@dataclass
class FactorSetVM:
    """One VM factorized block of resolution ``N``.

    Plane coordinates ``p_xy``, ``p_yz``, ``p_xz`` have shape ``(N, N, 2)``
    (the two in-plane components, in axis order), line coordinates
    ``p_x``, ``p_y``, ``p_z`` shape ``(N,)``; plane features ``(N, N, d)``.
    Scale and rotation factors follow the CP per-axis layout.
    """

    p_xy: np.ndarray
    p_yz: np.ndarray
    p_xz: np.ndarray
    p_x: np.ndarray
    p_y: np.ndarray
    p_z: np.ndarray
    s_x: np.ndarray
    s_y: np.ndarray
    s_z: np.ndarray
    q_x: np.ndarray
    q_y: np.ndarray
    q_z: np.ndarray
    f_x: np.ndarray
    f_y: np.ndarray
    f_z: np.ndarray
    f_xy: np.ndarray
    f_yz: np.ndarray
    f_xz: np.ndarray

    scheme = "VM"

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name)))
        n = self.p_x.shape[0]
        if n < 1:
            raise ValueError("block resolution must be >= 1")
        for name in CP_COORD_NAMES:
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
            _check_finite(name, arr)
        for name in VM_PLANE_COORD_NAMES:
            arr = getattr(self, name)
            if arr.shape != (n, n, 2):
                raise ValueError(f"{name} must have shape ({n}, {n}, 2), got {arr.shape}")
            _check_finite(name, arr)
        _check_attrs(self, n)
        for name in VM_PLANE_FEATURE_NAMES:
            arr = getattr(self, name)
            if arr.shape != (n, n, self.d):
                raise ValueError(f"{name} must have shape ({n}, {n}, {self.d}), got {arr.shape}")

    @property
    def n(self) -> int:
        return int(self.p_x.shape[0])

    @property
    def d(self) -> int:
        return int(self.f_x.shape[1])

    def array_names(self):
        return VM_PLANE_COORD_NAMES + CP_COORD_NAMES + ATTR_NAMES + VM_PLANE_FEATURE_NAMES

    def coordinate_names(self):
        return VM_PLANE_COORD_NAMES + CP_COORD_NAMES

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in self.array_names()}

    def copy(self) -> "FactorSetVM":
        return FactorSetVM(**{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> "FactorSetVM":
        return FactorSetVM(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def num_gaussians(self, mode="per-term") -> int:
        return 3 * self.n**3 if mode == "per-term" else self.n**3

    @classmethod
    def from_cp(cls, block: FactorSetCP, rng=None, feature_std=None):
        """Lift a CP block to VM: plane coordinates start on the CP grid.

        Plane features are drawn from ``rng`` with ``feature_std`` when given,
        otherwise set to ones.
        """
        n, d = block.n, block.d
        dtype = block.p_x.dtype
        gx, gy = np.meshgrid(block.p_x, block.p_y, indexing="ij")
        p_xy = np.stack([gx, gy], axis=-1)
        gy2, gz = np.meshgrid(block.p_y, block.p_z, indexing="ij")
        p_yz = np.stack([gy2, gz], axis=-1)
        gx2, gz2 = np.meshgrid(block.p_x, block.p_z, indexing="ij")
        p_xz = np.stack([gx2, gz2], axis=-1)
        if rng is None or feature_std is None:
            planes = [np.ones((n, n, d), dtype=dtype) for _ in range(3)]
        else:
            planes = [rng.normal(0.0, feature_std, (n, n, d)).astype(dtype) for _ in range(3)]
        arrs = {k: v.copy() for k, v in block.arrays().items()}
        return cls(
            p_xy=p_xy.astype(dtype), p_yz=p_yz.astype(dtype), p_xz=p_xz.astype(dtype),
            f_xy=planes[0], f_yz=planes[1], f_xz=planes[2], **arrs,
        )


@dataclass
class ExpandedGaussians:
    """Flat, renderable Gaussians produced by expanding factor blocks.

    ``origin`` rows are ``(block, i, j, k, term)``; ``term`` is 0 for CP and
    shared-mode VM blocks. Opacity and SH are optional and filled in by the
    decoder.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    features: np.ndarray
    origin: np.ndarray
    opacities: np.ndarray | None = None
    sh: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.positions.shape[0])

    def subset(self, index) -> "ExpandedGaussians":
        return ExpandedGaussians(
            positions=self.positions[index],
            scales=self.scales[index],
            rotations=self.rotations[index],
            features=self.features[index],
            origin=self.origin[index],
            opacities=None if self.opacities is None else self.opacities[index],
            sh=None if self.sh is None else self.sh[index],
        )


# --- CP expansion ----------------------------------------------------------


def _triple(a, b, c):
    """Component-wise triple product over the (i, j, k) grid, flattened."""
    n = a.shape[0]
    out = (a[:, None, None, :] * b[None, :, None, :]) * c[None, None, :, :]
    return out.reshape(n**3, a.shape[1])


def expand_cp_coordinates(block) -> np.ndarray:
    """Cartesian product of the per-axis coordinates, shape ``(N^3, 3)``."""
    n = block.n
    p = np.empty((n, n, n, 3), dtype=block.p_x.dtype)
    p[..., 0] = block.p_x[:, None, None]
    p[..., 1] = block.p_y[None, :, None]
    p[..., 2] = block.p_z[None, None, :]
    return p.reshape(n**3, 3)


def expand_cp_scales(block) -> np.ndarray:
    """Raw (unactivated) expanded scales ``s_x[i]*s_y[j]*s_z[k]``, ``(N^3, 3)``."""
    return _triple(block.s_x, block.s_y, block.s_z)


def _normalize_quaternions(raw):
    norm = np.sqrt(np.sum(raw * raw, axis=1))
    out = np.zeros_like(raw)
    ok = norm > 0
    out[ok] = raw[ok] / norm[ok, None]
    out[~ok, 0] = 1.0
    return out, norm


def expand_cp_rotations(block, return_raw=False):
    """Expanded unit quaternions; an all-zero product maps to ``(1, 0, 0, 0)``."""
    raw = _triple(block.q_x, block.q_y, block.q_z)
    q, _ = _normalize_quaternions(raw)
    if return_raw:
        return q, raw
    return q


def expand_cp_features(block) -> np.ndarray:
    """Expanded latent features ``f_x[i]*f_y[j]*f_z[k]``, ``(N^3, d)``."""
    return _triple(block.f_x, block.f_y, block.f_z)


# --- VM expansion ----------------------------------------------------------


def _check_mode(mode):
    if mode not in VM_MODES:
        raise ValueError(f"unknown VM mode {mode!r}; expected one of {VM_MODES}")


def expand_vm_coordinates(block: FactorSetVM, mode="per-term") -> np.ndarray:
    """Positions of a VM block.

    ``per-term`` returns ``(3 N^3, 3)`` (terms xy*z, yz*x, xz*y in that
    order); ``shared`` returns the CP grid of the line coordinates.
    """
    _check_mode(mode)
    if mode == "shared":
        return expand_cp_coordinates(block)
    n = block.n
    dtype = block.p_x.dtype
    out = np.empty((3, n, n, n, 3), dtype=dtype)
    # term 0: (x, y) from p_xy[i, j], z from p_z[k]
    out[0, ..., 0] = block.p_xy[:, :, None, 0]
    out[0, ..., 1] = block.p_xy[:, :, None, 1]
    out[0, ..., 2] = block.p_z[None, None, :]
    # term 1: x from p_x[i], (y, z) from p_yz[j, k]
    out[1, ..., 0] = block.p_x[:, None, None]
    out[1, ..., 1] = block.p_yz[None, :, :, 0]
    out[1, ..., 2] = block.p_yz[None, :, :, 1]
    # term 2: (x, z) from p_xz[i, k], y from p_y[j]
    out[2, ..., 0] = block.p_xz[:, None, :, 0]
    out[2, ..., 1] = block.p_y[None, :, None]
    out[2, ..., 2] = block.p_xz[:, None, :, 1]
    return out.reshape(3 * n**3, 3)


def _vm_terms(block):
    n, d = block.n, block.d
    t0 = block.f_xy[:, :, None, :] * block.f_z[None, None, :, :]
    t1 = block.f_yz[None, :, :, :] * block.f_x[:, None, None, :]
    t2 = block.f_xz[:, None, :, :] * block.f_y[None, :, None, :]
    return [t.reshape(n**3, d) for t in (t0, t1, t2)]


def expand_vm_features(block: FactorSetVM, mode="per-term") -> np.ndarray:
    """VM latent features.

    ``shared``: ``f_xy[i,j]*f_z[k] + f_yz[j,k]*f_x[i] + f_xz[i,k]*f_y[j]``
    summed left to right, shape ``(N^3, d)``. ``per-term``: the three
    products stacked term-major, shape ``(3 N^3, d)``.
    """
    _check_mode(mode)
    t0, t1, t2 = _vm_terms(block)
    if mode == "shared":
        return (t0 + t1) + t2
    return np.concatenate([t0, t1, t2], axis=0)


# --- generic block / multi-set expansion -----------------------------------


def num_gaussians(block, mode="per-term") -> int:
    return block.num_gaussians(mode)


def expand_block(block, mode="per-term", block_id=0) -> ExpandedGaussians:
    """Expand one CP or VM block into flat Gaussians."""
    n = block.n
    scales = expand_cp_scales(block)
    rotations, raw_q = expand_cp_rotations(block, return_raw=True)
    grid = np.indices((n, n, n)).reshape(3, -1).T
    if block.scheme == "CP":
        positions = expand_cp_coordinates(block)
        features = expand_cp_features(block)
        terms = 1
    else:
        positions = expand_vm_coordinates(block, mode)
        features = expand_vm_features(block, mode)
        terms = 3 if mode == "per-term" else 1
    if terms == 3:
        scales = np.tile(scales, (3, 1))
        rotations = np.tile(rotations, (3, 1))
        raw_q = np.tile(raw_q, (3, 1))
        grid = np.tile(grid, (3, 1))
    origin = np.empty((terms * n**3, 5), dtype=np.int64)
    origin[:, 0] = block_id
    origin[:, 1:4] = grid
    origin[:, 4] = np.repeat(np.arange(terms), n**3)
    out = ExpandedGaussians(positions, scales, rotations, features, origin)
    out.extras["raw_rotations"] = raw_q
    return out


def expand_multi_set(blocks, mode="per-term") -> ExpandedGaussians:
    """Concatenate the expansions of several (possibly multi-resolution) blocks."""
    if not blocks:
        raise ValueError("at least one block is required")
    d = blocks[0].d
    for b, block in enumerate(blocks):
        if block.d != d:
            raise ValueError(f"block {b} has feature width {block.d}, expected {d}")
        if block.scheme != blocks[0].scheme:
            raise ValueError("all blocks must use the same scheme")
    parts = [expand_block(block, mode, b) for b, block in enumerate(blocks)]
    out = ExpandedGaussians(
        positions=np.concatenate([p.positions for p in parts]),
        scales=np.concatenate([p.scales for p in parts]),
        rotations=np.concatenate([p.rotations for p in parts]),
        features=np.concatenate([p.features for p in parts]),
        origin=np.concatenate([p.origin for p in parts]),
    )
    out.extras["raw_rotations"] = np.concatenate([p.extras["raw_rotations"] for p in parts])
    out.extras["offsets"] = np.cumsum([0] + [len(p) for p in parts])
    return out


# --- adjoints ----------------------------------------------------------------


def backprop_triple_product(a, b, c, grad):
    """Adjoint of ``_triple(a, b, c)`` for upstream ``grad`` of shape ``(N^3, w)``."""
    n, w = a.shape
    if grad.shape != (n**3, w):
        raise ValueError(f"expected gradient of shape {(n**3, w)}, got {grad.shape}")
    g = grad.reshape(n, n, n, w)
    ga = np.einsum("ijkc,jc,kc->ic", g, b, c)
    gb = np.einsum("ijkc,ic,kc->jc", g, a, c)
    gc = np.einsum("ijkc,ic,jc->kc", g, a, b)
    return ga, gb, gc


def backprop_rotations(raw, grad_q):
    """Adjoint of quaternion normalization; degenerate rows get zero gradient."""
    q, norm = _normalize_quaternions(raw)
    safe = np.where(norm > 0, norm, 1.0)
    proj = grad_q - q * np.sum(grad_q * q, axis=1, keepdims=True)
    out = proj / safe[:, None]
    out[norm == 0] = 0.0
    return out


def backprop_expansion(block, grads: dict, mode="per-term") -> dict:
    """Factor gradients of one block given gradients of its expansion.

    ``grads`` may contain ``positions``, ``scales``, ``rotations`` (w.r.t.
    the normalized quaternions) and ``features``, each shaped like the
    corresponding :func:`expand_block` output. Missing entries count as zero.
    """
    n, d = block.n, block.d
    scheme = block.scheme
    terms = 3 if (scheme == "VM" and mode == "per-term") else 1
    m = terms * n**3
    shapes = {"positions": (m, 3), "scales": (m, 3), "rotations": (m, 4), "features": (m, d)}
    for key, g in grads.items():
        if key not in shapes:
            raise ValueError(f"unknown gradient entry {key!r}")
        if g.shape != shapes[key]:
            raise ValueError(f"gradient {key} has shape {g.shape}, expected {shapes[key]}")
    out = {name: np.zeros_like(arr) for name, arr in block.arrays().items()}

    def fold(g):
        # per-term VM repeats scale/rotation over the three terms
        if terms == 1:
            return g
        return g.reshape(3, n**3, -1).sum(axis=0)

    if "scales" in grads:
        out["s_x"], out["s_y"], out["s_z"] = backprop_triple_product(
            block.s_x, block.s_y, block.s_z, fold(grads["scales"])
        )
    if "rotations" in grads:
        raw = _triple(block.q_x, block.q_y, block.q_z)
        g_raw = backprop_rotations(raw, fold(grads["rotations"]))
        out["q_x"], out["q_y"], out["q_z"] = backprop_triple_product(
            block.q_x, block.q_y, block.q_z, g_raw
        )
    if "positions" in grads:
        gp = grads["positions"]
        if scheme == "CP" or mode == "shared":
            g = gp.reshape(n, n, n, 3)
            out["p_x"] = g[..., 0].sum(axis=(1, 2))
            out["p_y"] = g[..., 1].sum(axis=(0, 2))
            out["p_z"] = g[..., 2].sum(axis=(0, 1))
        else:
            g = gp.reshape(3, n, n, n, 3)
            out["p_xy"] = np.stack([g[0, ..., 0].sum(axis=2), g[0, ..., 1].sum(axis=2)], axis=-1)
            out["p_z"] = g[0, ..., 2].sum(axis=(0, 1))
            out["p_x"] = g[1, ..., 0].sum(axis=(1, 2))
            out["p_yz"] = np.stack([g[1, ..., 1].sum(axis=0), g[1, ..., 2].sum(axis=0)], axis=-1)
            out["p_xz"] = np.stack([g[2, ..., 0].sum(axis=1), g[2, ..., 2].sum(axis=1)], axis=-1)
            out["p_y"] = g[2, ..., 1].sum(axis=(0, 2))
    if "features" in grads:
        gf = grads["features"]
        if scheme == "CP":
            out["f_x"], out["f_y"], out["f_z"] = backprop_triple_product(
                block.f_x, block.f_y, block.f_z, gf
            )
        else:
            if mode == "shared":
                g0 = g1 = g2 = gf.reshape(n, n, n, d)
            else:
                g0, g1, g2 = gf.reshape(3, n, n, n, d)
            out["f_xy"] = np.einsum("ijkc,kc->ijc", g0, block.f_z)
            out["f_z"] = np.einsum("ijkc,ijc->kc", g0, block.f_xy)
            out["f_yz"] = np.einsum("ijkc,ic->jkc", g1, block.f_x)
            out["f_x"] = np.einsum("ijkc,jkc->ic", g1, block.f_yz)
            out["f_xz"] = np.einsum("ijkc,jc->ikc", g2, block.f_y)
            out["f_y"] = np.einsum("ijkc,ikc->jc", g2, block.f_xz)
    return out
