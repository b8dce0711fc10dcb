"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numbers

import numpy as np

from .operators import MulticoilKSpace
from .volume import CoilSensitivities, ComplexVolume


def check_volume(x, voxel_size=(1.0, 1.0, 1.0)) -> ComplexVolume:
    """Accept a :class:`ComplexVolume` or a finite 3D array."""
    if isinstance(x, ComplexVolume):
        return x
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("volume contains non-finite values")
    return ComplexVolume(arr.astype(np.complex64), voxel_size)


def check_volumes(xs) -> list[ComplexVolume]:
    if isinstance(xs, (ComplexVolume, np.ndarray)):
        xs = [xs]
    out = [check_volume(x) for x in xs]
    if not out:
        raise ValueError("no volumes given")
    return out


def check_measurements(ksp, maps) -> tuple[MulticoilKSpace, CoilSensitivities]:
    if not isinstance(ksp, MulticoilKSpace):
        raise TypeError(f"expected MulticoilKSpace, got {type(ksp).__name__}")
    if not isinstance(maps, CoilSensitivities):
        raise TypeError(f"expected CoilSensitivities, got {type(maps).__name__}")
    if ksp.dims != maps.dims or ksp.C != maps.C:
        raise ValueError(f"k-space {ksp.coils.shape} and coil maps {maps.maps.shape} disagree")
    if not np.all(np.isfinite(ksp.coils)):
        raise ValueError("k-space contains non-finite values")
    return ksp, maps


def check_scalar(x, name, low=None, high=None, integer=False, low_inclusive=True):
    kind = numbers.Integral if integer else numbers.Real
    if not isinstance(x, kind) or isinstance(x, bool):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a real number'}, got {x!r}")
    if low is not None and (x < low or (x == low and not low_inclusive)):
        raise ValueError(f"{name} must be {'>=' if low_inclusive else '>'} {low}, got {x}")
    if high is not None and x > high:
        raise ValueError(f"{name} must be <= {high}, got {x}")
    return x
