"""Multicoil Cartesian forward model ``y_i = M F S_i x + z_i`` with a unitary 3D DFT."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.fft

from .sampling import SamplingMask
from .volume import CoilSensitivities, ComplexVolume

EPS_DIV = 1e-12


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class MulticoilKSpace:
    coils: np.ndarray  # [C, W, H, D] complex, unshifted DFT layout
    mask: SamplingMask
    noise_sigma: float = 0.0
    scale: float = 1.0
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        coils = np.asarray(self.coils)
        if coils.ndim != 4:
            raise ValueError(f"k-space must be [C, W, H, D], got shape {coils.shape}")
        if coils.shape[2:] != self.mask.shape:
            raise ValueError(f"mask shape {self.mask.shape} does not match k-space {coils.shape}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))

    @property
    def C(self) -> int:
        return self.coils.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.coils.shape[1:])


def fft3(x):
    return scipy.fft.fftn(x, axes=(-3, -2, -1), norm="ortho")


def ifft3(k):
    return scipy.fft.ifftn(k, axes=(-3, -2, -1), norm="ortho")


class MulticoilOperator:
    """Array-level ``A`` and ``A^H`` for fixed coil maps and mask."""

    def __init__(self, maps: CoilSensitivities, mask: SamplingMask):
        if maps.dims[1:] != mask.shape:
            raise ValueError(f"coil maps {maps.dims} and mask {mask.shape} disagree")
        self.maps = maps.maps
        self.kmask = mask.kspace_mask()
        self.dims = maps.dims

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.dims:
            raise ValueError(f"volume shape {x.shape} does not match operator {self.dims}")
        return fft3(self.maps * x[None]) * self.kmask

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        if y.shape[1:] != self.dims or y.shape[0] != self.maps.shape[0]:
            raise ValueError(f"k-space shape {y.shape} does not match operator")
        return np.sum(np.conj(self.maps) * ifft3(y * self.kmask), axis=0)

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(x))


def _check_shapes(dims, maps: CoilSensitivities, mask: SamplingMask):
    if tuple(dims) != maps.dims:
        raise ValueError(f"volume dims {dims} do not match coil maps {maps.dims}")
    if tuple(dims[1:]) != mask.shape:
        raise ValueError(f"volume dims {dims} do not match mask {mask.shape}")


def forward(vol: ComplexVolume, maps: CoilSensitivities, mask: SamplingMask,
            noise_sigma: float = 0.0, seed=None) -> MulticoilKSpace:
    _check_shapes(vol.dims, maps, mask)
    op = MulticoilOperator(maps, mask)
    y = op.forward(vol.data.astype(np.complex64))
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2,) + y.shape) * (noise_sigma / np.sqrt(2.0))
        y = y + (z[0] + 1j * z[1]).astype(np.complex64) * op.kmask
    return MulticoilKSpace(y.astype(np.complex64), mask, float(noise_sigma), 1.0, vol.voxel_size)


def adjoint(ksp: MulticoilKSpace, maps: CoilSensitivities) -> ComplexVolume:
    _check_shapes(ksp.dims, maps, ksp.mask)
    x = MulticoilOperator(maps, ksp.mask).adjoint(ksp.coils)
    return ComplexVolume(x.astype(np.complex64), ksp.voxel_size)


def mvue(ksp_full: MulticoilKSpace, maps: CoilSensitivities) -> ComplexVolume:
    """Sensitivity-weighted coil combination of fully sampled data."""
    if not ksp_full.mask.is_full:
        raise ValueError("MVUE reference requires fully sampled k-space")
    _check_shapes(ksp_full.dims, maps, ksp_full.mask)
    num = np.sum(np.conj(maps.maps) * ifft3(ksp_full.coils), axis=0)
    x = num / (maps.sum_of_squares() + EPS_DIV)
    return ComplexVolume(x.astype(np.complex64), ksp_full.voxel_size)


def scale_measurements(ksp: MulticoilKSpace, maps: CoilSensitivities):
    """Scale data so the zero-filled reconstruction has unit magnitude std inside the coil support.

    Returns the rescaled k-space (its ``scale`` accumulates the factor) and the factor applied.
    """
    zf = np.abs(adjoint(ksp, maps).data)
    sos = maps.sum_of_squares()
    support = sos > 0.5 * sos.max()
    std = float(zf[support].std())
    if not np.isfinite(std) or std <= 0:
        raise DegenerateInputError("measurements are all zero; cannot determine a scale")
    factor = 1.0 / std
    scaled = replace(ksp, coils=(ksp.coils * factor).astype(np.complex64),
                     scale=ksp.scale * factor, noise_sigma=ksp.noise_sigma * factor)
    return scaled, factor


def zero_filled(ksp: MulticoilKSpace, maps: CoilSensitivities) -> ComplexVolume:
    """Adjoint reconstruction mapped back to the unscaled intensity range."""
    vol = adjoint(ksp, maps)
    return vol.with_data(vol.data / ksp.scale)
