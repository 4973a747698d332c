"""Masked image-quality metrics: PSNR, single-scale SSIM, depth RMSE.

All metrics evaluate only mask-true pixels. SSIM uses the standard 11x11
Gaussian window (sigma 1.5, stabilizers C1 = 0.01^2, C2 = 0.03^2 at unit
dynamic range), averaged per channel over windows that fit fully inside
the image and whose center pixel is mask-true.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import DataError

PSNR_CAP = 100.0
_WIN = 11
_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _check(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise DataError("mask shape does not match images")
    if not mask.any():
        raise DataError("metric mask is empty")
    return mask


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB at unit peak, capped at 100."""
    mask = _check(a, b, mask)
    diff = (np.asarray(a, dtype=float) - np.asarray(b, dtype=float))[mask]
    mse = float((diff**2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window() -> np.ndarray:
    half = _WIN // 2
    x = np.arange(-half, half + 1, dtype=float)
    g = np.exp(-(x**2) / (2.0 * _SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    k = _gaussian_window()

    def f(img):
        return ndimage.correlate(img, k, mode="constant")

    mu_x, mu_y = f(x), f(y)
    sxx = f(x * x) - mu_x**2
    syy = f(y * y) - mu_y**2
    sxy = f(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _C1) * (2 * sxy + _C2)
    den = (mu_x**2 + mu_y**2 + _C1) * (sxx + syy + _C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean SSIM over mask-true window centers, averaged across channels."""
    mask = _check(a, b, mask)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    half = _WIN // 2
    h, w = mask.shape
    if h < _WIN or w < _WIN:
        raise DataError(f"images smaller than the {_WIN}x{_WIN} SSIM window")
    valid = np.zeros_like(mask)
    valid[half : h - half, half : w - half] = True
    centers = mask & valid
    if not centers.any():
        raise DataError("no mask-true pixels admit a full SSIM window")
    vals = [float(_ssim_map(a[:, :, c], b[:, :, c])[centers].mean()) for c in range(a.shape[2])]
    return float(np.mean(vals))


def depth_rmse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Root-mean-square depth error over mask-true pixels (scene units)."""
    mask = _check(a, b, mask)
    diff = (np.asarray(a, dtype=float) - np.asarray(b, dtype=float))[mask]
    return float(np.sqrt((diff**2).mean()))
