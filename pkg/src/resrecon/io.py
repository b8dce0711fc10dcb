"""Little-endian binary formats: ``.cvol``, ``.maps``, ``.cksp``, ``.cmsk`` and ``gauss.bin``.

``.cvol``  magic ``CVOL1\\0``, 3 x u32 dims, 3 x f32 voxel size, then interleaved
           (re, im) f32 pairs in ``[W, H, D]`` order, D fastest.
``.maps``  magic ``CMAP1\\0``, u32 coil count, then one cvol payload (no magic) per coil.
``.cksp``  magic ``CKSP1\\0``, u32 C, 3 x u32 dims, f32 noise sigma, f32 scale, mask
           payload (u8 [H, D], 2 x u32 ACS dims, u8 kind tag, f64 achieved R), then C
           cvol payloads.
``.cmsk``  magic ``CMSK1\\0``, 3 x u32 (readout length, H, D), then the mask payload
           as in ``.cksp``.
``gauss.bin``  magic ``CGSP1\\0``, u32 G, then per Gaussian 12 x f32
           (mean xyz, log-scale xyz, quaternion wxyz, amplitude re/im).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .operators import MulticoilKSpace
from .sampling import MASK_KINDS, SamplingMask
from .volume import CoilSensitivities, ComplexVolume

CVOL_MAGIC = b"CVOL1\0"
MAPS_MAGIC = b"CMAP1\0"
CKSP_MAGIC = b"CKSP1\0"
GAUSS_MAGIC = b"CGSP1\0"
MASK_MAGIC = b"CMSK1\0"


class FormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: need {n} bytes for {what}, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def magic(self, expected: bytes):
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def _volume_payload(data: np.ndarray, voxel_size) -> bytes:
    head = struct.pack("<3I3f", *data.shape, *voxel_size)
    return head + np.ascontiguousarray(data, dtype="<c8").tobytes()


def _read_volume_payload(r: _Reader):
    dims = r.unpack("<3I", "dims")
    voxel = r.unpack("<3f", "voxel size")
    n = int(np.prod(dims))
    raw = r.take(8 * n, "voxel data")
    data = np.frombuffer(raw, dtype="<c8").reshape(dims).astype(np.complex64)
    return data, voxel


def write_cvol(vol: ComplexVolume, path) -> None:
    Path(path).write_bytes(CVOL_MAGIC + _volume_payload(vol.data, vol.voxel_size))


def read_cvol(path) -> ComplexVolume:
    r = _Reader(Path(path).read_bytes())
    r.magic(CVOL_MAGIC)
    data, voxel = _read_volume_payload(r)
    r.finish()
    return ComplexVolume(data, voxel)


def write_maps(maps: CoilSensitivities, path) -> None:
    parts = [MAPS_MAGIC, struct.pack("<I", maps.C)]
    parts += [_volume_payload(m, maps.voxel_size) for m in maps.maps]
    Path(path).write_bytes(b"".join(parts))


def read_maps(path) -> CoilSensitivities:
    r = _Reader(Path(path).read_bytes())
    r.magic(MAPS_MAGIC)
    (C,) = r.unpack("<I", "coil count")
    coils, voxel = [], (1.0, 1.0, 1.0)
    for _ in range(C):
        data, voxel = _read_volume_payload(r)
        coils.append(data)
    r.finish()
    return CoilSensitivities(np.stack(coils), voxel)


def _mask_payload(m: SamplingMask) -> bytes:
    return (np.ascontiguousarray(m.pattern, dtype=np.uint8).tobytes()
            + struct.pack("<2IBd", *m.acs, MASK_KINDS.index(m.kind), m.achieved_R))


def _read_mask_payload(r: _Reader, readout_len, H, D) -> SamplingMask:
    pattern = np.frombuffer(r.take(H * D, "mask pattern"), dtype=np.uint8).reshape(H, D)
    acs_h, acs_d, kind_tag, achieved = r.unpack("<2IBd", "mask metadata")
    if kind_tag >= len(MASK_KINDS):
        raise FormatError(f"unknown mask kind tag {kind_tag}", r.pos - 9)
    return SamplingMask(pattern.astype(bool), readout_len, (acs_h, acs_d), MASK_KINDS[kind_tag], achieved)


def write_mask(mask: SamplingMask, path) -> None:
    H, D = mask.shape
    Path(path).write_bytes(MASK_MAGIC + struct.pack("<3I", mask.readout_len, H, D) + _mask_payload(mask))


def read_mask(path) -> SamplingMask:
    r = _Reader(Path(path).read_bytes())
    r.magic(MASK_MAGIC)
    readout_len, H, D = r.unpack("<3I", "mask dims")
    mask = _read_mask_payload(r, readout_len, H, D)
    r.finish()
    return mask


def write_cksp(ksp: MulticoilKSpace, path) -> None:
    parts = [CKSP_MAGIC, struct.pack("<I3Iff", ksp.C, *ksp.dims, ksp.noise_sigma, ksp.scale)]
    parts.append(_mask_payload(ksp.mask))
    parts += [_volume_payload(c, ksp.voxel_size) for c in ksp.coils]
    Path(path).write_bytes(b"".join(parts))


def read_cksp(path) -> MulticoilKSpace:
    r = _Reader(Path(path).read_bytes())
    r.magic(CKSP_MAGIC)
    C, W, H, D, noise_sigma, scale = r.unpack("<I3Iff", "header")
    mask = _read_mask_payload(r, W, H, D)
    coils, voxel = [], (1.0, 1.0, 1.0)
    for _ in range(C):
        data, voxel = _read_volume_payload(r)
        if data.shape != (W, H, D):
            raise FormatError(f"coil payload dims {data.shape} differ from header", r.pos)
        coils.append(data)
    r.finish()
    return MulticoilKSpace(np.stack(coils), mask, float(noise_sigma), float(scale), voxel)


def write_gaussians(cloud, path) -> None:
    """``cloud`` is a :class:`resrecon.representations.GaussianCloud`."""
    table = np.concatenate([cloud.means, cloud.log_scales, cloud.quats,
                            cloud.amplitudes], axis=1).astype("<f4")
    Path(path).write_bytes(GAUSS_MAGIC + struct.pack("<I", len(table)) + table.tobytes())


def read_gaussians(path):
    from .representations import GaussianCloud

    r = _Reader(Path(path).read_bytes())
    r.magic(GAUSS_MAGIC)
    (G,) = r.unpack("<I", "gaussian count")
    table = np.frombuffer(r.take(48 * G, "gaussian table"), dtype="<f4").reshape(G, 12)
    r.finish()
    table = table.astype(np.float64)
    return GaussianCloud(table[:, 0:3], table[:, 3:6], table[:, 6:10], table[:, 10:12])
