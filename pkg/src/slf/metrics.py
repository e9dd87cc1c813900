"""PSNR and SSIM, the fidelity metrics behind every reported number.

Both expect images in [0, 1]. Callers compare refocused outputs after
the 6-pixel border crop; these functions just measure what they get.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) in dB over all pixels and channels; +inf when equal."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering along both spatial axes."""
    win = sliding_window_view(img, SSIM_WINDOW, axis=0)
    img = np.tensordot(win, kernel, axes=([-1], [0]))
    win = sliding_window_view(img, SSIM_WINDOW, axis=1)
    return np.tensordot(win, kernel, axes=([-1], [0]))


def _ssim_channel(x: np.ndarray, y: np.ndarray, kernel: np.ndarray) -> float:
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    mu_x = _filter_valid(x, kernel)
    mu_y = _filter_valid(y, kernel)
    e_xx = _filter_valid(x * x, kernel)
    e_yy = _filter_valid(y * y, kernel)
    e_xy = _filter_valid(x * y, kernel)
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov = e_xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM: 11x11 Gaussian window, sigma 1.5, dynamic range 1.

    Windows are taken fully inside the image (no padding). Color images
    are scored per channel and averaged. Identical inputs score exactly
    1.0: every term of the numerator then equals its denominator twin.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    kernel = _gaussian_kernel()
    if a.ndim == 2:
        return _ssim_channel(a, b, kernel)
    return float(
        np.mean([_ssim_channel(a[..., c], b[..., c], kernel) for c in range(a.shape[-1])])
    )
