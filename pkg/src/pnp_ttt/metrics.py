"""PSNR and SSIM for images on a [0, 1] intensity scale."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float


def _check_pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    x, ref = _check_pair(x, ref)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    patches = sliding_window_view(img, win.shape)
    return np.tensordot(patches, win, axes=([2, 3], [0, 1]))


def ssim_map(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x, ref = _check_pair(x, ref)
    if min(x.shape) < size:
        raise ValueError(f"image {x.shape} is smaller than the {size}x{size} SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = gaussian_window(size, sigma)
    mx = _filter_valid(x, win)
    my = _filter_valid(ref, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(ref * ref, win) - my * my
    sxy = _filter_valid(x * ref, win) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1=0.01, K2=0.03)."""
    return float(ssim_map(x, ref, data_range).mean())


def evaluate(x: np.ndarray, ref: np.ndarray) -> MetricReport:
    return MetricReport(psnr(x, ref), ssim(x, ref))
