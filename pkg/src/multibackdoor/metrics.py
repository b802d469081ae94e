"""Trigger-stealth metrics: PSNR and SSIM on 0..255 images."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .validation import check_image_pair

MAX_PIXEL = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * MAX_PIXEL) ** 2
SSIM_C2 = (0.03 * MAX_PIXEL) ** 2


@dataclass(frozen=True)
class StealthReport:
    ssim: float
    psnr: float


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images.

    Compatibility quirk: the MSE is taken on pixels rescaled to [0, 1]
    while the peak stays 255, i.e. ``10 log10(255^2 / mean(((a-b)/255)^2))``.
    Under it an unclipped 3x3 block of +100 on a 32x32x3 image always scores
    81.5933 dB, the figure commonly quoted for DCT-block triggers.
    """
    a, b = check_image_pair(a, b)
    mse = float(np.mean(((a - b) / MAX_PIXEL) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(MAX_PIXEL**2 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim(a, b) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5).

    Accepts H x W or C x H x W arrays; statistics are taken per channel
    over fully-contained windows and averaged over windows and channels.
    """
    a, b = check_image_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"expected H x W or C x H x W images, got shape {a.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    g = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def stealth_report(clean, poisoned) -> StealthReport:
    """Mean SSIM and PSNR over a batch of (clean, poisoned) image pairs."""
    clean, poisoned = check_image_pair(clean, poisoned)
    if clean.ndim == 3:
        clean, poisoned = clean[None], poisoned[None]
    s = [ssim(c, p) for c, p in zip(clean, poisoned)]
    q = [psnr(c, p) for c, p in zip(clean, poisoned)]
    return StealthReport(float(np.mean(s)), float(np.mean(q)))
