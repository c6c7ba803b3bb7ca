"""Image metrics: PSNR, SSIM (with gradient), L1."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter1d

__all__ = ["psnr", "ssim", "ssim_and_grad", "l1_and_grad", "PSNR_CAP"]

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11-tap window at sigma 1.5
C1 = 0.01**2
C2 = 0.03**2


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical images report ``PSNR_CAP``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


@lru_cache(maxsize=32)
def _filter_matrix(n):
    # column j is the reflect-padded Gaussian response to a unit impulse at j
    return gaussian_filter1d(np.eye(n), SSIM_SIGMA, axis=0, mode="reflect", truncate=SSIM_TRUNCATE)


def _pad():
    radius = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    return radius  # (win_size - 1) // 2


def ssim_and_grad(x, y, need_grad=True):
    """Mean SSIM of ``x`` against ``y`` (``(H, W, C)`` in [0, 1]) and d/dx.

    Gaussian window (sigma 1.5, 11 taps, reflect padding), population
    statistics, ``C1 = 0.01^2``, ``C2 = 0.03^2``; the map is averaged after
    cropping the 5-pixel border.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    h, w, _ = x.shape
    pad = _pad()
    if h <= 2 * pad or w <= 2 * pad:
        raise ValueError("image too small for an 11x11 SSIM window")
    gh, gw = _filter_matrix(h), _filter_matrix(w)

    def filt(a):
        return np.einsum("lk,ikc->ilc", gw, np.einsum("ij,jkc->ikc", gh, a))

    def filt_t(a):
        return np.einsum("kl,ikc->ilc", gw, np.einsum("ji,jkc->ikc", gh, a))

    mx, my = filt(x), filt(y)
    exx, eyy, exy = filt(x * x), filt(y * y), filt(x * y)
    a1 = 2 * mx * my + C1
    a2 = 2 * (exy - mx * my) + C2
    b1 = mx * mx + my * my + C1
    b2 = (exx - mx * mx) + (eyy - my * my) + C2
    smap = a1 * a2 / (b1 * b2)
    crop = smap[pad:h - pad, pad:w - pad]
    value = float(crop.mean())
    if not need_grad:
        return value, None
    u = np.zeros_like(smap)
    u[pad:h - pad, pad:w - pad] = 1.0 / crop.size
    d_mx = 2 * my * (a2 - a1) / (b1 * b2) - smap * 2 * mx * (1 / b1 - 1 / b2)
    d_exx = -smap / b2
    d_exy = 2 * a1 / (b1 * b2)
    grad = filt_t(u * d_mx) + 2 * x * filt_t(u * d_exx) + y * filt_t(u * d_exy)
    return value, grad


def ssim(x, y) -> float:
    return ssim_and_grad(x, y, need_grad=False)[0]


def l1_and_grad(x, y):
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size
