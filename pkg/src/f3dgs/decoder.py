"""Latent feature decoder: MLP to spherical harmonics and opacity.

The MLP maps ``d`` latent features to 49 outputs: 48 SH coefficients
(16 degree-3 real basis functions x 3 channels, stored basis-major so that
``sh.reshape(-1, 16, 3)[:, k, c]`` is basis ``k`` of channel ``c``) and one
opacity logit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SH_COEFFS",
    "OUT_WIDTH",
    "DecoderParams",
    "init_decoder",
    "decode",
    "decode_forward",
    "decoder_backward",
    "sigmoid",
    "sh_basis",
    "sh_basis_grad",
    "eval_sh_color",
    "eval_sh_colors",
    "eval_sh_colors_backward",
]

SH_COEFFS = 48
OUT_WIDTH = SH_COEFFS + 1

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class DecoderParams:
    """Weights ``[W_0, ..., W_L]`` (``(fan_in, fan_out)``) and biases."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and paired")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("bias width must match weight output width")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("consecutive layer widths do not match")
        if self.weights[-1].shape[1] != OUT_WIDTH:
            raise ValueError(f"decoder output width must be {OUT_WIDTH}")

    @property
    def in_width(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def hidden(self) -> list:
        return [int(w.shape[1]) for w in self.weights[:-1]]

    def arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "DecoderParams":
        n = len(arrays) // 2
        return cls([arrays[f"W{i}"] for i in range(n)], [arrays[f"b{i}"] for i in range(n)])

    def copy(self) -> "DecoderParams":
        return DecoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_decoder(d, hidden=(128,), seed=0, dtype=np.float32, out_gain=0.1) -> DecoderParams:
    """He-uniform hidden layers, scaled LeCun-uniform output layer, zero biases.

    The CP decoder is ``hidden=(128,)``; the VM decoder ``hidden=(h, h)``.
    """
    rng = np.random.default_rng(seed)
    widths = [d, *hidden, OUT_WIDTH]
    weights, biases = [], []
    for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = layer == len(widths) - 2
        bound = out_gain * np.sqrt(3.0 / fan_in) if last else np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return DecoderParams(weights, biases)


def decode_forward(features, params: DecoderParams):
    """Run the MLP; returns ``(sh, opacity, cache)``."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != params.in_width:
        raise ValueError(
            f"features must have shape (M, {params.in_width}), got {features.shape}"
        )
    acts = [features]
    h = features
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    out = h @ params.weights[-1] + params.biases[-1]
    sh = out[:, :SH_COEFFS]
    sig = sigmoid(out[:, SH_COEFFS])
    tiny = np.finfo(sig.dtype).eps
    opacity = np.clip(sig, tiny, 1.0 - tiny)
    return sh, opacity, {"acts": acts, "sigmoid": sig}


def decode(features, params: DecoderParams):
    """Decode features to ``(sh (M, 48), opacity (M,))``; opacity in (0, 1)."""
    sh, opacity, _ = decode_forward(features, params)
    return sh, opacity


def decoder_backward(features, params: DecoderParams, grad_sh, grad_opacity, cache=None):
    """Backprop through the MLP.

    Returns ``(grad_features, grad_params)`` where ``grad_params`` is a
    :class:`DecoderParams` holding the weight and bias gradients.
    """
    if cache is None:
        _, _, cache = decode_forward(features, params)
    acts = cache["acts"]
    m = acts[0].shape[0]
    grad_sh = np.asarray(grad_sh)
    grad_opacity = np.asarray(grad_opacity)
    if grad_sh.shape != (m, SH_COEFFS) or grad_opacity.shape != (m,):
        raise ValueError("upstream gradient shapes do not match the decoded batch")
    sig = cache["sigmoid"]
    g = np.empty((m, OUT_WIDTH), dtype=np.result_type(grad_sh, acts[-1]))
    g[:, :SH_COEFFS] = grad_sh
    g[:, SH_COEFFS] = grad_opacity * sig * (1.0 - sig)
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    for layer in range(len(params.weights) - 1, -1, -1):
        a = acts[layer]
        gw[layer] = a.T @ g
        gb[layer] = g.sum(axis=0)
        g = g @ params.weights[layer].T
        if layer > 0:
            g = g * (a > 0)
    return g, DecoderParams(gw, gb)


# --- spherical harmonics -----------------------------------------------------


def sh_basis(dirs):
    """Degree-3 real SH basis at unit directions, shape ``(M, 16)``."""
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((dirs.shape[0], 16), dtype=dirs.dtype)
    out[:, 0] = C0
    out[:, 1] = -C1 * y
    out[:, 2] = C1 * z
    out[:, 3] = -C1 * x
    out[:, 4] = C2[0] * x * y
    out[:, 5] = C2[1] * y * z
    out[:, 6] = C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = C2[3] * x * z
    out[:, 8] = C2[4] * (xx - yy)
    out[:, 9] = C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = C3[1] * x * y * z
    out[:, 11] = C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = C3[5] * z * (xx - yy)
    out[:, 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs):
    """Jacobian of :func:`sh_basis` w.r.t. the direction, shape ``(M, 16, 3)``."""
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    zero = np.zeros_like(x)
    g = np.zeros((dirs.shape[0], 16, 3), dtype=dirs.dtype)
    g[:, 1, 1] = -C1
    g[:, 2, 2] = C1
    g[:, 3, 0] = -C1
    g[:, 4] = np.stack([y, x, zero], -1) * C2[0]
    g[:, 5] = np.stack([zero, z, y], -1) * C2[1]
    g[:, 6] = np.stack([-2 * x, -2 * y, 4 * z], -1) * C2[2]
    g[:, 7] = np.stack([z, zero, x], -1) * C2[3]
    g[:, 8] = np.stack([2 * x, -2 * y, zero], -1) * C2[4]
    g[:, 9] = np.stack([6 * x * y, 3 * xx - 3 * yy, zero], -1) * C3[0]
    g[:, 10] = np.stack([y * z, x * z, x * y], -1) * C3[1]
    g[:, 11] = np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], -1) * C3[2]
    g[:, 12] = np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], -1) * C3[3]
    g[:, 13] = np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], -1) * C3[4]
    g[:, 14] = np.stack([2 * x * z, -2 * y * z, xx - yy], -1) * C3[5]
    g[:, 15] = np.stack([3 * xx - 3 * yy, -6 * x * y, zero], -1) * C3[6]
    return g


def eval_sh_color(sh, view_dir):
    """RGB of one Gaussian's 48 SH coefficients seen along ``view_dir``.

    Directions off the unit sphere by more than 1e-6 are renormalized with a
    warning; beyond 1e-3 they are rejected.
    """
    sh = np.asarray(sh, dtype=np.float64).reshape(SH_COEFFS)
    view_dir = np.asarray(view_dir, dtype=np.float64).reshape(3)
    dev = abs(np.linalg.norm(view_dir) - 1.0)
    if dev > 1e-3:
        raise ValueError(f"view direction is not unit length (|1 - norm| = {dev:.3g})")
    if dev > 1e-6:
        warnings.warn("view direction renormalized", RuntimeWarning, stacklevel=2)
        view_dir = view_dir / np.linalg.norm(view_dir)
    return eval_sh_colors(sh[None], view_dir[None])[0]


def eval_sh_colors(sh, dirs, return_raw=False):
    """Batched colors ``clip(0.5 + sum_k Y_k(dir) c_k, 0, 1)``; ``(M, 3)``."""
    basis = sh_basis(dirs)
    raw = np.einsum("mk,mkc->mc", basis, sh.reshape(-1, 16, 3)) + 0.5
    rgb = np.clip(raw, 0.0, 1.0)
    if return_raw:
        return rgb, raw
    return rgb


def eval_sh_colors_backward(sh, dirs, grad_rgb, raw=None):
    """Gradients of the batched color w.r.t. SH coefficients and directions."""
    basis = sh_basis(dirs)
    if raw is None:
        raw = np.einsum("mk,mkc->mc", basis, sh.reshape(-1, 16, 3)) + 0.5
    g = grad_rgb * ((raw > 0.0) & (raw < 1.0))
    grad_sh = (basis[:, :, None] * g[:, None, :]).reshape(-1, SH_COEFFS)
    # d raw_c / d dir = sum_k c_kc dY_k/ddir
    coeff_g = np.einsum("mkc,mc->mk", sh.reshape(-1, 16, 3), g)
    grad_dirs = np.einsum("mk,mkj->mj", coeff_g, sh_basis_grad(dirs))
    return grad_sh, grad_dirs
