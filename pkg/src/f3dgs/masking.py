"""Trainable binary masks over each block's index grid.

During training a mask is a real tensor ``M``; the forward value is the hard
step ``H(M - tau)`` (with ``H(0) = 1``) while the backward pass uses the
sigmoid derivative, i.e. ``sg(H(M - tau) - sigmoid(M)) + sigmoid(M)``.
Once frozen, a mask is a 1-bit-per-entry bitfield, LSB first, in row-major
``(i, j, k)`` order.
"""

from __future__ import annotations

import numpy as np

from .decoder import sigmoid
from .factors import ExpandedGaussians

__all__ = [
    "MaskSet",
    "DEFAULT_MASK_INIT",
    "DEFAULT_TAU",
    "binarize_ste",
    "ste_backward",
    "mask_loss",
    "mask_loss_grad",
    "apply_mask",
    "apply_mask_backward",
    "prune",
    "pack_bits",
    "unpack_bits",
    "packed_size",
]

DEFAULT_MASK_INIT = 0.1
DEFAULT_TAU = 0.01


def binarize_ste(M, tau=DEFAULT_TAU):
    """Forward value of the straight-through binarization, exactly 0 or 1."""
    M = np.asarray(M)
    return (M - tau >= 0).astype(M.dtype if M.dtype.kind == "f" else np.float64)


def ste_backward(M, grad_mbar):
    """Gradient w.r.t. ``M`` given the gradient w.r.t. the binarized mask."""
    s = sigmoid(np.asarray(M))
    return grad_mbar * s * (1.0 - s)


def mask_loss(M) -> float:
    """Sparsity loss: the sum of ``sigmoid(M)`` over all entries."""
    return float(np.sum(sigmoid(np.asarray(M, dtype=np.float64))))


def mask_loss_grad(M):
    s = sigmoid(np.asarray(M))
    return s * (1.0 - s)


def packed_size(count: int) -> int:
    return (int(count) + 7) // 8


def pack_bits(mbar) -> bytes:
    """Pack a binary mask into bytes (row-major, LSB first)."""
    bits = np.asarray(mbar).reshape(-1) != 0
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def unpack_bits(data: bytes, n, terms=1) -> np.ndarray:
    """Inverse of :func:`pack_bits` for a block of resolution ``n``."""
    count = terms * n**3
    if len(data) != packed_size(count):
        raise ValueError(f"expected {packed_size(count)} bytes for {count} bits, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count, bitorder="little")
    shape = (n, n, n) if terms == 1 else (terms, n, n, n)
    return bits.reshape(shape).astype(np.float32)


class MaskSet:
    """Per-block masks: real-valued while training, packed bits once frozen.

    Exactly one representation is authoritative; :attr:`frozen` tells which.
    ``terms`` is 3 for per-term VM blocks (one mask grid per term).
    """

    def __init__(self, values=None, bits=None, resolutions=None, terms=1, tau=DEFAULT_TAU):
        if (values is None) == (bits is None):
            raise ValueError("exactly one of values/bits must be given")
        self.tau = float(tau)
        self.terms = int(terms)
        if values is not None:
            self.values = [np.asarray(v) for v in values]
            self.bits = None
            self.resolutions = [int(v.shape[-1]) for v in self.values]
        else:
            if resolutions is None or len(resolutions) != len(bits):
                raise ValueError("packed masks need one resolution per block")
            self.resolutions = [int(n) for n in resolutions]
            for b, n in zip(bits, self.resolutions):
                if len(b) != packed_size(self.terms * n**3):
                    raise ValueError("packed mask length does not match its resolution")
            self.bits = [bytes(b) for b in bits]
            self.values = None

    @classmethod
    def init(cls, resolutions, terms=1, value=DEFAULT_MASK_INIT, tau=DEFAULT_TAU, dtype=np.float32):
        shape = (lambda n: (n, n, n)) if terms == 1 else (lambda n: (terms, n, n, n))
        return cls(values=[np.full(shape(n), value, dtype=dtype) for n in resolutions],
                   terms=terms, tau=tau)

    @property
    def frozen(self) -> bool:
        return self.bits is not None

    def binarized(self) -> list:
        if self.frozen:
            return [unpack_bits(b, n, self.terms) for b, n in zip(self.bits, self.resolutions)]
        return [binarize_ste(v, self.tau) for v in self.values]

    def flat(self) -> np.ndarray:
        """Concatenated binary mask in expansion order."""
        return np.concatenate([m.reshape(-1) for m in self.binarized()])

    def freeze(self) -> "MaskSet":
        return MaskSet(bits=[pack_bits(m) for m in self.binarized()],
                       resolutions=self.resolutions, terms=self.terms, tau=self.tau)

    def loss(self) -> float:
        if self.frozen:
            raise ValueError("frozen masks carry no trainable loss")
        return sum(mask_loss(v) for v in self.values)

    def copy(self) -> "MaskSet":
        if self.frozen:
            return MaskSet(bits=list(self.bits), resolutions=self.resolutions,
                           terms=self.terms, tau=self.tau)
        return MaskSet(values=[v.copy() for v in self.values], terms=self.terms, tau=self.tau)

    def nbytes_packed(self) -> int:
        return sum(packed_size(self.terms * n**3) for n in self.resolutions)


def _flat_mask(expanded: ExpandedGaussians, masks):
    if isinstance(masks, MaskSet):
        flat = masks.flat()
    else:
        flat = np.concatenate([np.asarray(m).reshape(-1) for m in masks])
    if flat.shape[0] != len(expanded):
        raise ValueError(
            f"mask entries ({flat.shape[0]}) do not match the Gaussian count ({len(expanded)})"
        )
    return flat


def apply_mask(expanded: ExpandedGaussians, masks) -> ExpandedGaussians:
    """Multiply scales and opacities by the binary mask of each Gaussian.

    ``masks`` is a :class:`MaskSet` or a list of per-block binary arrays.
    Positions, rotations, features and SH pass through unchanged.
    """
    mbar = _flat_mask(expanded, masks).astype(expanded.scales.dtype)
    out = ExpandedGaussians(
        positions=expanded.positions,
        scales=expanded.scales * mbar[:, None],
        rotations=expanded.rotations,
        features=expanded.features,
        origin=expanded.origin,
        opacities=None if expanded.opacities is None else expanded.opacities * mbar,
        sh=expanded.sh,
    )
    out.extras = dict(expanded.extras)
    out.extras["mask"] = mbar
    return out


def apply_mask_backward(scales, opacities, mbar, grad_scales, grad_opacities):
    """Gradients through ``apply_mask``: returns (grad_scales, grad_opacities, grad_mbar)."""
    grad_mbar = np.sum(grad_scales * scales, axis=1) + grad_opacities * opacities
    return grad_scales * mbar[:, None], grad_opacities * mbar, grad_mbar


def prune(expanded: ExpandedGaussians, masks=None, alpha_min=0.001) -> ExpandedGaussians:
    """Drop Gaussians whose mask bit is 0 or whose opacity is below ``alpha_min``."""
    keep = np.ones(len(expanded), dtype=bool)
    if masks is not None:
        keep &= _flat_mask(expanded, masks) != 0
    if expanded.opacities is not None:
        keep &= expanded.opacities >= alpha_min
    return expanded.subset(np.flatnonzero(keep))
