"""Factorized 3D Gaussian splatting in numpy.

Gaussians are stored as per-axis (CP) or plane-plus-axis (VM) factor arrays
whose products expand to dense sets of positions and attributes; a small MLP
decodes colors and opacities, binary masks prune unused Gaussians and a
differentiable software rasterizer trains everything against images.
"""

__version__ = "0.1.0"

from .factors import (ExpandedGaussians, FactorSetCP, FactorSetVM, expand_block, expand_cp_coordinates,
                      expand_multi_set, expand_vm_coordinates)
from .decoder import DecoderParams, decode, eval_sh_color, init_decoder
from .masking import MaskSet, apply_mask, binarize_ste, mask_loss, pack_bits, prune, unpack_bits
from .renderer import Camera, RasterSettings, render_gaussians
from .seeding import build_histogram, chamfer_distance, fit_coordinates_chamfer, seed_blocks
from .model import F3DGSModel
from .storage import load_model, save_model, storage_report
from .train import TrainConfig, evaluate, init_model, total_loss, train

__all__ = [
    "ExpandedGaussians", "FactorSetCP", "FactorSetVM", "expand_block", "expand_cp_coordinates",
    "expand_multi_set", "expand_vm_coordinates", "DecoderParams", "decode", "eval_sh_color",
    "init_decoder", "MaskSet", "apply_mask", "binarize_ste", "mask_loss", "pack_bits", "prune",
    "unpack_bits", "Camera", "RasterSettings", "render_gaussians", "build_histogram",
    "chamfer_distance", "fit_coordinates_chamfer", "seed_blocks", "F3DGSModel", "load_model",
    "save_model", "storage_report", "TrainConfig", "evaluate", "init_model", "total_loss", "train",
]
