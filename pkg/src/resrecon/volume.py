"""Complex volumes, coordinate meshes, phantoms, coil maps and resampling.

Index convention: volumes are stored as ``[W, H, D]`` arrays with ``D`` the
fastest-varying axis. Normalized coordinates live in ``[-1, 1]`` per axis and
sample cell centers, so a grid of ``N`` cells along an axis has coordinates
``-1 + (i + 0.5) * 2 / N``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

PLANES = ("sagittal", "coronal", "axial")
# axis held fixed by each slicing plane
PLANE_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}
PLANE_ALIASES = {"sag": "sagittal", "cor": "coronal", "ax": "axial"}


def canonical_plane(plane: str) -> str:
    plane = PLANE_ALIASES.get(plane, plane)
    if plane not in PLANE_AXIS:
        raise ValueError(f"unknown plane {plane!r}; expected one of {PLANES}")
    return plane


def in_plane_axes(plane: str) -> tuple[int, int]:
    fixed = PLANE_AXIS[canonical_plane(plane)]
    return tuple(a for a in range(3) if a != fixed)


@dataclass(frozen=True)
class ComplexVolume:
    """3D complex voxel array with a physical voxel size in millimeters."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dims must be >= 1, got {data.shape}")
        if not np.iscomplexobj(data):
            data = data.astype(np.complex64)
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise ValueError(f"voxel_size must be 3 positive values, got {self.voxel_size}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", vs)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def fov(self) -> tuple[float, float, float]:
        return tuple(n * v for n, v in zip(self.dims, self.voxel_size))

    def with_data(self, data) -> "ComplexVolume":
        return ComplexVolume(data, self.voxel_size)

    def slice(self, plane: str, index: int) -> np.ndarray:
        axis = PLANE_AXIS[canonical_plane(plane)]
        return np.take(self.data, index, axis=axis)


@dataclass(frozen=True)
class Mesh3D:
    """Cell-center grid of 3D points in ``[-1, 1]^3``; ``coords`` is ``[W, H, D, 3]``."""

    coords: np.ndarray
    pixel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.coords.shape[:3]

    @property
    def points(self) -> np.ndarray:
        return self.coords.reshape(-1, 3)


@dataclass(frozen=True)
class Mesh2D:
    """Planar cell-center grid embedded in ``[-1, 1]^3``; ``coords`` is ``[X, Y, 3]``."""

    coords: np.ndarray
    plane: str
    position: float
    pixel_size: tuple[float, float] = (1.0, 1.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.coords.shape[:2]

    @property
    def points(self) -> np.ndarray:
        return self.coords.reshape(-1, 3)


@dataclass(frozen=True)
class CoilSensitivities:
    maps: np.ndarray  # [C, W, H, D] complex
    voxel_size: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        maps = np.asarray(self.maps)
        if maps.ndim != 4 or maps.shape[0] < 1:
            raise ValueError(f"coil maps must be [C, W, H, D], got shape {maps.shape}")
        object.__setattr__(self, "maps", maps.astype(np.complex64, copy=False))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))

    @property
    def C(self) -> int:
        return self.maps.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.maps.shape[1:])

    def sum_of_squares(self) -> np.ndarray:
        return np.sum(np.abs(self.maps) ** 2, axis=0)


def axis_centers(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"axis length must be >= 1, got {n}")
    return -1.0 + (np.arange(n) + 0.5) * (2.0 / n)


def _check_dims(dims, minimum=1):
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3:
        raise ValueError(f"expected 3 dims, got {dims}")
    if min(dims) < minimum:
        raise ValueError(f"all dims must be >= {minimum}, got {dims}")
    return dims


def make_mesh3(dims, pixel_size=(1.0, 1.0, 1.0)) -> Mesh3D:
    dims = _check_dims(dims)
    axes = [axis_centers(n) for n in dims]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return Mesh3D(coords, tuple(float(p) for p in pixel_size))


def _polynomial_phase(rng, coords, degree=2, strength=1.0):
    x, y, z = coords[..., 0], coords[..., 1], coords[..., 2]
    phase = np.zeros(x.shape)
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            for k in range(degree + 1 - i - j):
                c = rng.normal(0.0, strength / (1 + i + j + k))
                phase += c * x**i * y**j * z**k
    return phase


def generate_phantom(seed: int, dims=(64, 64, 64), n_ellipsoids: int = 12,
                     voxel_size=(1.0, 1.0, 1.0)) -> ComplexVolume:
    """Random piecewise-constant ellipsoid phantom with a smooth phase.

    The first ellipsoid is large and acts as the body; the remaining ones are
    smaller inclusions. Magnitude is scaled to unit standard deviation over the
    support (non-zero voxels).
    """
    dims = _check_dims(dims, minimum=8)
    if n_ellipsoids < 1:
        raise ValueError(f"n_ellipsoids must be >= 1, got {n_ellipsoids}")
    rng = np.random.default_rng(seed)
    coords = make_mesh3(dims).coords
    mag = np.zeros(dims)
    for e in range(n_ellipsoids):
        if e == 0:
            center = rng.uniform(-0.05, 0.05, 3)
            axes = rng.uniform(0.6, 0.85, 3)
        else:
            center = rng.uniform(-0.5, 0.5, 3)
            axes = np.exp(rng.uniform(np.log(0.06), np.log(0.4), 3))
        rot = Rotation.random(random_state=rng).as_matrix()
        local = (coords - center) @ rot
        inside = np.sum((local / axes) ** 2, axis=-1) <= 1.0
        mag += rng.uniform(0.2, 1.0) * inside
    phase = _polynomial_phase(rng, coords)
    support = mag > 0
    mag /= mag[support].std() if support.sum() > 1 and mag[support].std() > 0 else 1.0
    data = (mag * np.exp(1j * phase)).astype(np.complex64)
    return ComplexVolume(data, voxel_size)


def synth_coil_maps(dims, C: int = 8, seed: int = 0,
                    voxel_size=(1.0, 1.0, 1.0)) -> CoilSensitivities:
    """Smooth Gaussian-lobe coil profiles with linear phase, normalized to unit sum of squares."""
    dims = _check_dims(dims)
    if C < 1:
        raise ValueError(f"coil count must be >= 1, got {C}")
    rng = np.random.default_rng(seed)
    coords = make_mesh3(dims).coords
    # lobe centers spread on a sphere outside the field of view
    golden = np.pi * (3.0 - np.sqrt(5.0))
    offset = rng.uniform(0, 2 * np.pi)
    maps = []
    for i in range(C):
        zc = 1.0 - 2.0 * (i + 0.5) / C
        r = np.sqrt(1.0 - zc**2)
        theta = golden * i + offset
        center = 1.3 * np.array([r * np.cos(theta), r * np.sin(theta), zc])
        width = rng.uniform(0.9, 1.3)
        dist2 = np.sum((coords - center) ** 2, axis=-1)
        k = rng.normal(0.0, 0.8, 3)
        phase = coords @ k + rng.uniform(0, 2 * np.pi)
        maps.append(np.exp(-dist2 / (2 * width**2)) * np.exp(1j * phase))
    maps = np.stack(maps)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))
    return CoilSensitivities(maps.astype(np.complex64), voxel_size)


def linear_resample_axis(arr: np.ndarray, n_new: int, axis: int) -> np.ndarray:
    """Linear interpolation along one axis onto ``n_new`` cell centers of the same extent.

    Positions outside the outermost input centers are clamped to the edge values.
    """
    n_old = arr.shape[axis]
    if n_new == n_old:
        return arr.copy()
    pos = (np.arange(n_new) + 0.5) * (n_old / n_new) - 0.5
    pos = np.clip(pos, 0.0, n_old - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_old - 1)
    w = pos - i0
    shape = [1] * arr.ndim
    shape[axis] = n_new
    w = w.reshape(shape)
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i1, axis=axis)
    return a0 * (1.0 - w) + a1 * w


def trilinear_resample(data: np.ndarray, new_dims) -> np.ndarray:
    out = np.asarray(data)
    for axis, n in enumerate(new_dims):
        out = linear_resample_axis(out, int(n), axis)
    return out


def trilinear_downsample(vol: ComplexVolume, factor: float) -> ComplexVolume:
    """Resample to ``round(dims * factor)`` cells with the field of view held fixed."""
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"factor must lie in (0, 1], got {factor}")
    new_dims = tuple(int(round(n * factor)) for n in vol.dims)
    if min(new_dims) < 1:
        raise ValueError(f"factor {factor} leaves an empty axis for dims {vol.dims}")
    data = trilinear_resample(vol.data.astype(np.complex128), new_dims)
    voxel = tuple(v * n / m for v, n, m in zip(vol.voxel_size, vol.dims, new_dims))
    return ComplexVolume(data.astype(vol.data.dtype), voxel)


def resample_to_voxel_size(vol: ComplexVolume, voxel_size) -> ComplexVolume:
    """Trilinear resampling of ``vol`` to the given voxel size at fixed field of view."""
    new_dims = tuple(max(1, int(round(f / v))) for f, v in zip(vol.fov, voxel_size))
    data = trilinear_resample(vol.data.astype(np.complex128), new_dims)
    voxel = tuple(f / n for f, n in zip(vol.fov, new_dims))
    return ComplexVolume(data.astype(vol.data.dtype), voxel)
