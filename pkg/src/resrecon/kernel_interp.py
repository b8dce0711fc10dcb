"""Resizing depthwise convolution kernels to a different input pixel size."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

METHODS = ("bilinear", "fourier_pad", "image_pad")
DC_EPS = 1e-12


class ZeroDCWarning(UserWarning):
    """A kernel channel sums to (nearly) zero, so its DC gain cannot be restored."""


@dataclass(frozen=True)
class DepthwiseKernel:
    taps: np.ndarray  # [channels, K, K]
    trained_pixel_size: tuple = (1.0, 1.0)

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim == 2:
            taps = taps[None]
        if taps.ndim != 3 or taps.shape[1] != taps.shape[2]:
            raise ValueError(f"taps must be [channels, K, K], got {taps.shape}")
        if taps.shape[1] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {taps.shape[1]}")
        if not np.all(np.isfinite(taps)):
            raise ValueError("kernel taps must be finite")
        object.__setattr__(self, "taps", taps)

    @property
    def K(self) -> int:
        return self.taps.shape[1]

    def gains(self) -> np.ndarray:
        return self.taps.sum(axis=(1, 2))


def _ratio(v_train, v_recon) -> float:
    vt = np.atleast_1d(np.asarray(v_train, dtype=float))
    vr = np.atleast_1d(np.asarray(v_recon, dtype=float))
    if np.any(vt <= 0) or np.any(vr <= 0):
        raise ValueError("pixel sizes must be positive")
    r = vt / vr
    return float(np.exp(np.mean(np.log(r))))


def nearest_odd(x: float) -> int:
    lo = 2 * math.floor((x - 1) / 2) + 1
    hi = lo + 2
    if x - lo < hi - x - 1e-9:
        k = lo
    else:
        k = hi
    return max(1, k)


def target_size(K: int, v_train, v_recon) -> int:
    """Odd kernel size covering the same physical extent at the new pixel size."""
    if K < 1 or K % 2 != 1:
        raise ValueError(f"K must be a positive odd integer, got {K}")
    return nearest_odd(K * _ratio(v_train, v_recon))


def _check_target(K_new):
    if K_new < 1 or K_new % 2 != 1:
        raise ValueError(f"target size must be a positive odd integer, got {K_new}")


def _linear_matrix(K: int, K_new: int) -> np.ndarray:
    """Samples of the piecewise-linear interpolant through ``K`` cell-centered taps.

    Beyond the outermost taps the end segments are extended linearly.
    """
    if K == K_new:
        return np.eye(K)
    if K == 1:
        return np.ones((K_new, 1))
    x_old = -1 + (np.arange(K) + 0.5) * 2 / K
    x_new = -1 + (np.arange(K_new) + 0.5) * 2 / K_new
    pos = (x_new - x_old[0]) / (x_old[1] - x_old[0])
    i0 = np.clip(np.floor(pos).astype(int), 0, K - 2)
    w = pos - i0
    M = np.zeros((K_new, K))
    M[np.arange(K_new), i0] = 1 - w
    M[np.arange(K_new), i0 + 1] += w
    return M


def rescale_dc(kernel: DepthwiseKernel, target_gain) -> DepthwiseKernel:
    """Scale each channel so its taps sum to ``target_gain``; zero-sum channels are left alone."""
    taps = kernel.taps.copy()
    target = np.broadcast_to(np.asarray(target_gain, dtype=float), (taps.shape[0],))
    sums = taps.sum(axis=(1, 2))
    for c in range(taps.shape[0]):
        if abs(sums[c]) <= DC_EPS:
            warnings.warn(f"channel {c} has zero DC gain; skipping rescale", ZeroDCWarning,
                          stacklevel=2)
            continue
        taps[c] *= target[c] / sums[c]
    return DepthwiseKernel(taps, kernel.trained_pixel_size)


def _finish(kernel, taps, rescale):
    out = DepthwiseKernel(taps, kernel.trained_pixel_size)
    return rescale_dc(out, kernel.gains()) if rescale else out


def interp_bilinear(kernel: DepthwiseKernel, K_new: int, rescale: bool = True) -> DepthwiseKernel:
    _check_target(K_new)
    M = _linear_matrix(kernel.K, K_new)
    taps = np.einsum("ij,cjk,lk->cil", M, kernel.taps, M)
    return _finish(kernel, taps, rescale)


def _centered_fft2(taps):
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(taps, axes=(1, 2)), norm="forward"),
                           axes=(1, 2))


def _centered_ifft2(spec):
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(spec, axes=(1, 2)), norm="forward"),
                           axes=(1, 2))


def _pad_or_crop(arr, K_new):
    K = arr.shape[1]
    if K_new >= K:
        p = (K_new - K) // 2
        return np.pad(arr, ((0, 0), (p, p), (p, p)))
    c = (K - K_new) // 2
    return arr[:, c:c + K_new, c:c + K_new]


def interp_fourier_zero_pad(kernel: DepthwiseKernel, K_new: int, rescale: bool = True) -> DepthwiseKernel:
    """Band-limited resize: zero-pad (or crop) the centered spectrum."""
    _check_target(K_new)
    if K_new == kernel.K:
        return _finish(kernel, kernel.taps.copy(), rescale)
    spec = _pad_or_crop(_centered_fft2(kernel.taps), K_new)
    return _finish(kernel, _centered_ifft2(spec).real, rescale)


def interp_image_zero_pad(kernel: DepthwiseKernel, K_new: int, rescale: bool = True) -> DepthwiseKernel:
    _check_target(K_new)
    return _finish(kernel, _pad_or_crop(kernel.taps, K_new), rescale)


_RESIZERS = {
    "bilinear": interp_bilinear,
    "fourier_pad": interp_fourier_zero_pad,
    "image_pad": interp_image_zero_pad,
}


def resize_kernel(kernel: DepthwiseKernel, K_new: int, method: str, rescale: bool = True):
    if method not in _RESIZERS:
        raise ValueError(f"unknown kernel interpolation {method!r}; expected one of {METHODS}")
    return _RESIZERS[method](kernel, K_new, rescale)


def checkpoint_kernels(ckpt) -> list:
    """Trained depthwise kernels of an ``inf_unet`` checkpoint (EMA weights), first block first."""
    net = ckpt.model()
    pix = tuple(ckpt.config.train_voxel_sizes[0]) if ckpt.config.train_voxel_sizes else (1.0, 1.0)
    return [DepthwiseKernel(b.dw_weight.detach().numpy()[:, 0].astype(np.float64), pix)
            for b in net.depthwise_blocks()]


def kernel_overrides(ckpt, v_recon, method: str, v_train=None, rescale: bool = True):
    """Resized kernels for reconstructing at pixel size ``v_recon``, plus a report per kernel."""
    kernels = checkpoint_kernels(ckpt)
    if not kernels:
        raise ValueError("checkpoint has no depthwise kernels to resize")
    report = []
    out = []
    for k in kernels:
        vt = k.trained_pixel_size if v_train is None else v_train
        K_new = target_size(k.K, vt, v_recon)
        if K_new == k.K:
            log.info("kernel size unchanged (K=%d); using identity", k.K)
        raw = resize_kernel(k, K_new, method, rescale=False)
        resized = rescale_dc(raw, k.gains()) if rescale else raw
        ok = (np.abs(raw.gains()) > DC_EPS) & (np.abs(k.gains()) > DC_EPS)
        gain = k.gains()[ok] / raw.gains()[ok] if rescale and ok.any() else np.ones(1)
        report.append({"K": k.K, "K_new": K_new, "method": method,
                       "gain_factor": float(np.mean(gain))})
        out.append(resized.taps.astype(np.float32))
    return out, report
