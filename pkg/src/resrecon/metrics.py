"""Image-quality metrics on volume magnitudes."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate

from .volume import ComplexVolume

SSIM_WIN = 7
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _magnitudes(recon, ref):
    a = np.abs(getattr(recon, "data", recon)).astype(np.float64)
    b = np.abs(getattr(ref, "data", ref)).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(recon: ComplexVolume, ref: ComplexVolume) -> float | None:
    """Peak SNR in dB with peak ``max|ref|``; ``None`` flags identical magnitudes."""
    a, b = _magnitudes(recon, ref)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return None
    peak = float(b.max())
    if peak <= 0:
        raise ValueError("reference volume is all zero")
    return 10.0 * np.log10(peak ** 2 / mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_2d(x: np.ndarray, y: np.ndarray, data_range: float, win: int = SSIM_WIN) -> float:
    """Mean SSIM over the positions where the window fits entirely."""
    if min(x.shape) < win:
        raise ValueError(f"slices must be at least {win} pixels on each side")
    w = gaussian_window(win)
    f = lambda im: correlate(im, w, mode="reflect")  # noqa: E731
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx ** 2 + my ** 2 + c1) * (sxx + syy + c2)
    s = num / den
    p = win // 2
    return float(s[p:-p, p:-p].mean())


def ssim_sagittal_avg(recon: ComplexVolume, ref: ComplexVolume) -> float:
    """SSIM of every sagittal magnitude slice, averaged; dynamic range ``max|ref|``."""
    a, b = _magnitudes(recon, ref)
    data_range = float(b.max())
    if data_range <= 0:
        raise ValueError("reference volume is all zero")
    return float(np.mean([ssim_2d(a[i], b[i], data_range) for i in range(a.shape[0])]))
