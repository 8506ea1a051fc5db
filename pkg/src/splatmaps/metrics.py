"""Image and depth quality metrics."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DEPTH_ALPHA_THRESHOLD = 0.5


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` when identical."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def ssim(a, b) -> float:
    """Single-scale SSIM on the channel mean, averaged over all fully-inside windows."""
    x, y = _gray(a), _gray(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    win = gaussian_window()

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def depth_metrics(d, gt, gt_alpha=None) -> dict[str, float]:
    """Abs Rel, Sq Rel and RMSE over pixels with valid ground truth.

    Ground truth is valid where it is finite and positive and, if
    ``gt_alpha`` is given, where ``gt_alpha > 0.5``.
    """
    d, gt = np.asarray(d, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    valid = np.isfinite(gt) & (gt > 0)
    if gt_alpha is not None:
        valid &= np.asarray(gt_alpha) > DEPTH_ALPHA_THRESHOLD
    if not valid.any():
        raise ValueError("no valid ground-truth depth pixels")
    p, g = d[valid], gt[valid]
    diff = p - g
    return {
        "abs_rel": float(np.mean(np.abs(diff) / g)),
        "sq_rel": float(np.mean(diff**2 / g)),
        "rmse": float(np.sqrt(np.mean(diff**2))),
    }
