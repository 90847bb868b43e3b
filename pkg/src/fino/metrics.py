"""PSNR and single-scale SSIM on [0, 1] images shaped C×H×W (or H×W)."""

from __future__ import annotations

import math

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(a, b, op: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b, "mse")
    d = (a - b).ravel()
    # correctly rounded sum, so an exact 0.1 error gives exactly 20 dB
    return math.fsum(d * d) / d.size


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical inputs give ``inf``."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation with a 1-D kernel along both axes
    k = g.size
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11×11 Gaussian windows (sigma 1.5), averaged over channels."""
    a, b = _pair(a, b, "ssim")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim: image {a.shape[-2]}×{a.shape[-1]} smaller than the "
                         f"{SSIM_WINDOW}×{SSIM_WINDOW} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window()
    scores = []
    for ca, cb in zip(a, b):
        mu_a = _filter_valid(ca, g)
        mu_b = _filter_valid(cb, g)
        var_a = _filter_valid(ca * ca, g) - mu_a * mu_a
        var_b = _filter_valid(cb * cb, g) - mu_b * mu_b
        cov = _filter_valid(ca * cb, g) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
