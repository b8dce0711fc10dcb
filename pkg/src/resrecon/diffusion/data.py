"""Slice datasets built from complex volumes, and diverse-resolution augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..volume import PLANE_AXIS, PLANES, ComplexVolume, canonical_plane, in_plane_axes, trilinear_downsample

MIN_AUGMENT_DIM = 8


@dataclass
class SliceDataset:
    slices: list = field(default_factory=list)  # 2D complex arrays
    planes: list = field(default_factory=list)
    pixel_sizes: list = field(default_factory=list)
    volume_ids: list = field(default_factory=list)
    volumes: list = field(default_factory=list)  # normalized source volumes

    def __len__(self):
        return len(self.slices)

    def shape_groups(self) -> dict:
        groups: dict = {}
        for i, s in enumerate(self.slices):
            groups.setdefault(s.shape, []).append(i)
        return groups

    def voxel_sizes(self) -> list:
        return sorted({tuple(round(v, 6) for v in p) for p in self.pixel_sizes})


def normalize_volume(vol: ComplexVolume) -> ComplexVolume:
    """Scale so the voxel magnitudes have unit standard deviation."""
    std = float(np.abs(vol.data).std())
    if std <= 0:
        raise ValueError("cannot normalize a constant-magnitude volume")
    return vol.with_data((vol.data / std).astype(np.complex64))


def slices_of(vol: ComplexVolume, plane: str):
    plane = canonical_plane(plane)
    axis = PLANE_AXIS[plane]
    pix = tuple(vol.voxel_size[a] for a in in_plane_axes(plane))
    return [np.take(vol.data, i, axis=axis) for i in range(vol.dims[axis])], pix


def extract_slices(volumes, planes=PLANES, normalize: bool = True) -> SliceDataset:
    volumes = list(volumes)
    if not volumes:
        raise ValueError("extract_slices needs at least one volume")
    ds = SliceDataset()
    for vid, vol in enumerate(volumes):
        if normalize:
            vol = normalize_volume(vol)
        ds.volumes.append(vol)
        for plane in planes:
            plane = canonical_plane(plane)
            slices, pix = slices_of(vol, plane)
            ds.slices.extend(slices)
            ds.planes.extend([plane] * len(slices))
            ds.pixel_sizes.extend([pix] * len(slices))
            ds.volume_ids.extend([vid] * len(slices))
    return ds


def draw_factor(dims, rng, factor_range=(0.1, 1.0), min_dim: int = MIN_AUGMENT_DIM) -> float:
    lo, hi = factor_range
    floor = max(min_dim / n for n in dims)
    return max(float(rng.uniform(lo, hi)), min(floor, 1.0))


def augment_diverse(vol: ComplexVolume, rng, factor_range=(0.1, 1.0), factor=None) -> ComplexVolume:
    """Trilinear downsampling by a random factor at fixed field of view.

    The lower end of the factor range is raised so every axis keeps at least
    ``MIN_AUGMENT_DIM`` cells.
    """
    if factor is None:
        factor = draw_factor(vol.dims, rng, factor_range)
    return trilinear_downsample(vol, factor)


def to_channels(slices: np.ndarray) -> np.ndarray:
    """Complex ``[B, X, Y]`` -> real ``[B, 2, X, Y]``."""
    slices = np.asarray(slices)
    return np.stack([slices.real, slices.imag], axis=1).astype(np.float32)


def from_channels(arr: np.ndarray) -> np.ndarray:
    return (arr[:, 0] + 1j * arr[:, 1]).astype(np.complex64)
