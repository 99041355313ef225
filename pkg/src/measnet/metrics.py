"""PSNR and single-scale SSIM for images in [0, 1].

SSIM follows the standard recipe: 11x11 Gaussian window (sigma 1.5),
C1 = 0.01^2, C2 = 0.03^2, computed per channel over valid window
positions and averaged.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_chw(img) -> np.ndarray:
    arr = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"expected batch of 1, got shape {arr.shape}")
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H,W), (C,H,W) or (1,C,H,W), got {arr.shape}")
    return arr


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, peak 1.0; inf for identical images."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_window() -> np.ndarray:
    """Normalized 11x11 Gaussian window used by ssim()."""
    half = SSIM_WINDOW // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    mu_a = convolve2d(a, w, mode="valid")
    mu_b = convolve2d(b, w, mode="valid")
    var_a = convolve2d(a * a, w, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, w, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, w, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean structural similarity, per channel then averaged over channels."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[1], a.shape[2]) < SSIM_WINDOW:
        raise ValueError(
            f"image {a.shape[1]}x{a.shape[2]} smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} ssim window")
    w = ssim_window()
    return float(np.mean([_ssim_channel(a[c], b[c], w) for c in range(a.shape[0])]))
