"""Full-reference image quality metrics on ``[0, 1]`` data."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .autodiff import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image extents differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``; ``inf`` for identical inputs."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x, taps):
    y = correlate1d(correlate1d(x, taps, axis=0, mode="constant"), taps, axis=1, mode="constant")
    r = len(taps) // 2
    return y[r : x.shape[0] - r, r : x.shape[1] - r]


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Per-position SSIM of two single-channel ``[H, W]`` images over the valid window region."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"ssim_map expects [H, W], got {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs extents of at least {SSIM_WINDOW}, got {a.shape}")
    taps = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a**2
    var_b = _filter_valid(b * b, taps) - mu_b**2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM; ``[H, W, 3]`` inputs are averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        return float(ssim_map(a, b, data_range).mean())
    if a.ndim != 3:
        raise ShapeError(f"ssim expects [H, W] or [H, W, C], got {a.shape}")
    return float(np.mean([ssim_map(a[..., c], b[..., c], data_range).mean() for c in range(a.shape[2])]))


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"
