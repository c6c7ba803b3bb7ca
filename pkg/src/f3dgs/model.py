"""The factorized Gaussian model and its end-to-end forward/backward chain.

expand blocks -> decode features -> binarize masks -> multiply scales and
opacities by the mask -> render; the backward pass walks the same chain in
reverse and returns gradients keyed like :meth:`F3DGSModel.params`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderParams, decode_forward, decoder_backward, init_decoder
from .factors import VM_MODES, FactorSetVM, backprop_expansion, expand_multi_set
from .masking import MaskSet, ste_backward
from .renderer import RasterSettings, render_backward, render_gaussians

__all__ = ["F3DGSModel", "ForwardCache"]


@dataclass
class ForwardCache:
    expanded: object
    sh: np.ndarray
    opacity_raw: np.ndarray
    mask_flat: np.ndarray
    mask_raw: np.ndarray | None
    decoder_cache: dict
    render: object
    rendered_index: np.ndarray
    extras: dict = field(default_factory=dict)


class F3DGSModel:
    """Blocks + decoder + masks.

    ``scheme`` is ``"CP"`` or ``"VM"``; VM models also carry ``vm_mode``
    (``"per-term"`` or ``"shared"``).
    """

    def __init__(self, blocks, decoder: DecoderParams | None, masks: MaskSet | None = None,
                 scheme=None, vm_mode="per-term"):
        if not blocks:
            raise ValueError("a model needs at least one block")
        self.blocks = list(blocks)
        self.scheme = scheme or self.blocks[0].scheme
        if any(b.scheme != self.scheme for b in self.blocks):
            raise ValueError("all blocks must use the model's scheme")
        if vm_mode not in VM_MODES:
            raise ValueError(f"unknown VM mode {vm_mode!r}")
        self.vm_mode = vm_mode
        d = self.blocks[0].d
        if any(b.d != d for b in self.blocks):
            raise ValueError("all blocks must share the feature width d")
        if decoder is not None and decoder.in_width != d:
            raise ValueError("decoder input width does not match d")
        self.decoder = decoder
        self.masks = masks
        if masks is not None:
            if masks.resolutions != [b.n for b in self.blocks] or masks.terms != self.terms:
                raise ValueError("mask resolutions do not match the blocks")

    # --- construction -----------------------------------------------------------------

    @classmethod
    def create(cls, blocks, scheme="CP", hidden=None, seed=0, vm_mode="per-term",
               mask_init=0.1, tau=0.01, with_masks=True, rng_features=0.5):
        """Wrap seeded CP blocks into a model (lifting them to VM if asked)."""
        if scheme == "VM" and blocks[0].scheme == "CP":
            rng = np.random.default_rng(seed + 1)
            blocks = [FactorSetVM.from_cp(b, rng, rng_features) for b in blocks]
        d = blocks[0].d
        if hidden is None:
            hidden = (128,) if scheme == "CP" else (128, 128)
        decoder = init_decoder(d, hidden, seed=seed, dtype=blocks[0].p_x.dtype)
        terms = 3 if (scheme == "VM" and vm_mode == "per-term") else 1
        masks = MaskSet.init([b.n for b in blocks], terms, mask_init, tau) if with_masks else None
        return cls(blocks, decoder, masks, scheme, vm_mode)

    @property
    def d(self) -> int:
        return self.blocks[0].d

    @property
    def terms(self) -> int:
        return 3 if (self.scheme == "VM" and self.vm_mode == "per-term") else 1

    def num_gaussians(self) -> int:
        return sum(b.num_gaussians(self.vm_mode) for b in self.blocks)

    def copy(self) -> "F3DGSModel":
        return F3DGSModel([b.copy() for b in self.blocks],
                          None if self.decoder is None else self.decoder.copy(),
                          None if self.masks is None else self.masks.copy(),
                          self.scheme, self.vm_mode)

    # --- parameters -----------------------------------------------------------------------

    def params(self, include_masks=True) -> dict:
        """Trainable arrays by name (views, updated in place by the optimizer)."""
        out = {}
        for b, blk in enumerate(self.blocks):
            for name, arr in blk.arrays().items():
                out[f"b{b}.{name}"] = arr
        if self.decoder is not None:
            for name, arr in self.decoder.arrays().items():
                out[f"dec.{name}"] = arr
        if include_masks and self.masks is not None and not self.masks.frozen:
            for b, arr in enumerate(self.masks.values):
                out[f"m{b}"] = arr
        return out

    def coordinate_keys(self) -> list:
        return [f"b{b}.{name}" for b, blk in enumerate(self.blocks) for name in blk.coordinate_names()]

    def param_group(self, key) -> str:
        """``coords``, ``factors``, ``decoder`` or ``masks``."""
        if key.startswith("dec."):
            return "decoder"
        if key.startswith("m"):
            return "masks"
        name = key.split(".", 1)[1]
        return "coords" if name.startswith("p_") else "factors"

    def count_params(self) -> dict:
        coords = sum(a.size for blk in self.blocks for n, a in blk.arrays().items() if n.startswith("p_"))
        factors = sum(a.size for blk in self.blocks for a in blk.arrays().values())
        dec = 0 if self.decoder is None else self.decoder.num_params()
        mask_bits = 0 if self.masks is None else sum(self.terms * n**3 for n in self.masks.resolutions)
        return {"coordinates": int(coords), "factors": int(factors), "decoder": int(dec),
                "mask_bits": int(mask_bits)}

    # --- forward ------------------------------------------------------------------------------

    def expand(self):
        return expand_multi_set(self.blocks, self.vm_mode)

    def _mask_flat(self, m):
        if self.masks is None:
            return np.ones(m, dtype=np.float32), None
        raw = None if self.masks.frozen else np.concatenate([v.reshape(-1) for v in self.masks.values])
        return self.masks.flat(), raw

    def gaussians(self, prune=True, alpha_min=0.001):
        """Decoded, masked Gaussians; optionally with masked/transparent ones removed."""
        from .masking import apply_mask, prune as prune_fn
        e = self.expand()
        sh, opac, _ = decode_forward(e.features, self.decoder)
        e.sh, e.opacities = sh, opac
        mbar, _ = self._mask_flat(len(e))
        e = apply_mask(e, [mbar])
        if prune:
            e = prune_fn(e, [mbar], alpha_min)
        return e

    def forward(self, camera, background=(0.0, 0.0, 0.0), settings: RasterSettings | None = None,
                skip_masked=True):
        """Render one view; returns ``(image, cache)``.

        With ``skip_masked`` Gaussians whose mask bit is 0 are not sent to the
        renderer (they are fully transparent, so the image is unchanged).
        """
        settings = settings or RasterSettings()
        e = self.expand()
        sh, opac_raw, dcache = decode_forward(e.features, self.decoder)
        mbar, mraw = self._mask_flat(len(e))
        mbar = mbar.astype(e.scales.dtype)
        idx = np.flatnonzero(mbar) if skip_masked and settings.alpha_min > 0 else np.arange(len(e))
        scales = e.scales[idx] * mbar[idx, None]
        opac = opac_raw[idx] * mbar[idx]
        res = render_gaussians(e.positions[idx], scales, e.rotations[idx], sh[idx], opac,
                               camera, background, settings)
        cache = ForwardCache(e, sh, opac_raw, mbar, mraw, dcache, res, idx)
        return res.image, cache

    def backward(self, cache: ForwardCache, grad_image, mask_loss_weight=0.0) -> dict:
        """Gradients of ``sum(grad_image * image) + w * mask_loss`` for every parameter."""
        e = cache.expanded
        m = len(e)
        idx = cache.rendered_index
        g = render_backward(cache.render.ctx, grad_image)
        dtype = e.scales.dtype
        g_scales_m = np.zeros((m, 3), dtype=dtype)
        g_opac_m = np.zeros(m, dtype=dtype)
        g_pos = np.zeros((m, 3), dtype=dtype)
        g_rot = np.zeros((m, 4), dtype=dtype)
        g_sh = np.zeros((m, cache.sh.shape[1]), dtype=dtype)
        g_scales_m[idx] = g["scales"]
        g_opac_m[idx] = g["opacities"]
        g_pos[idx] = g["positions"]
        g_rot[idx] = g["rotations"]
        g_sh[idx] = g["sh"]
        mbar = cache.mask_flat
        g_scales = g_scales_m * mbar[:, None]
        g_opac = g_opac_m * mbar
        g_mbar = np.sum(g_scales_m * e.scales, axis=1) + g_opac_m * cache.opacity_raw
        g_feat, g_dec = decoder_backward(e.features, self.decoder, g_sh, g_opac, cache.decoder_cache)
        grads = {}
        offsets = e.extras["offsets"]
        for b, blk in enumerate(self.blocks):
            sl = slice(offsets[b], offsets[b + 1])
            gb = backprop_expansion(blk, {"positions": g_pos[sl], "scales": g_scales[sl],
                                          "rotations": g_rot[sl], "features": g_feat[sl]},
                                    self.vm_mode)
            for name, arr in gb.items():
                grads[f"b{b}.{name}"] = arr.astype(dtype, copy=False)
        for name, arr in g_dec.arrays().items():
            grads[f"dec.{name}"] = arr.astype(dtype, copy=False)
        if cache.mask_raw is not None:
            s = 1.0 / (1.0 + np.exp(-cache.mask_raw.astype(np.float64)))
            gm = ste_backward(cache.mask_raw, g_mbar) + mask_loss_weight * s * (1 - s)
            start = 0
            for b, v in enumerate(self.masks.values):
                grads[f"m{b}"] = gm[start:start + v.size].reshape(v.shape).astype(v.dtype)
                start += v.size
        return grads

    def render(self, camera, background=(0.0, 0.0, 0.0), settings=None):
        return self.forward(camera, background, settings)[0]

    def freeze_masks(self):
        if self.masks is not None and not self.masks.frozen:
            self.masks = self.masks.freeze()
        return self
