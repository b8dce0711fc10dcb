"""Continuous volume representations evaluated on 2D/3D meshes in ``[-1, 1]^3``.

Every backend maps points ``[..., 3]`` (ordered along the ``W, H, D`` axes) to
complex values returned as two real channels, and is differentiable in its
parameters through torch autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.checkpoint import checkpoint

from .operators import DegenerateInputError
from .volume import Mesh2D, Mesh3D, PLANE_AXIS, ComplexVolume, axis_centers, canonical_plane, in_plane_axes, make_mesh3

GRID_MODES = ("trilinear", "nearest")


def make_mesh2_for_view(fov, v_train, plane: str, position: float) -> Mesh2D:
    """Planar mesh through ``position`` (normalized) whose pixels measure ``v_train`` mm."""
    plane = canonical_plane(plane)
    h, d = (float(v_train), float(v_train)) if np.isscalar(v_train) else map(float, v_train)
    if h <= 0 or d <= 0:
        raise ValueError(f"pixel size must be positive, got {(h, d)}")
    if not -1.0 <= position <= 1.0:
        raise ValueError(f"position must lie in [-1, 1], got {position}")
    a, b = in_plane_axes(plane)
    X = max(1, int(round(fov[a] / h)))
    Y = max(1, int(round(fov[b] / d)))
    coords = np.empty((X, Y, 3))
    coords[..., a] = axis_centers(X)[:, None]
    coords[..., b] = axis_centers(Y)[None, :]
    coords[..., PLANE_AXIS[plane]] = position
    return Mesh2D(coords, plane, float(position), (fov[a] / X, fov[b] / Y))


def _points_tensor(mesh, dtype=torch.float32) -> tuple[torch.Tensor, tuple]:
    if isinstance(mesh, (Mesh2D, Mesh3D)):
        coords = mesh.coords
    else:
        coords = np.asarray(mesh) if not isinstance(mesh, torch.Tensor) else mesh
    pts = torch.as_tensor(coords, dtype=dtype)
    return pts.reshape(-1, 3), tuple(pts.shape[:-1])


def _to_complex(out: torch.Tensor, shape) -> np.ndarray:
    out = out.detach().to(torch.float64).numpy()
    return (out[..., 0] + 1j * out[..., 1]).reshape(shape)


def complex_to_channels(data: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Complex ``[...]`` -> real tensor ``[2, ...]``."""
    return torch.as_tensor(np.stack([data.real, data.imag]), dtype=dtype)


def channels_to_complex(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().numpy()
    return arr[0] + 1j * arr[1]


# grid resampling

def grid_sample_points(grid: torch.Tensor, points: torch.Tensor, mode: str = "trilinear") -> torch.Tensor:
    """Interpolate a ``[2, W, H, D]`` grid at ``[P, 3]`` points; returns ``[P, 2]``.

    Cell-center convention with clamp-to-edge outside the outermost centers.
    """
    if mode not in GRID_MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    # grid_sample orders the sample coordinate as (last, middle, first) spatial axis
    g = points.to(grid.dtype).flip(-1).reshape(1, 1, 1, -1, 3)
    out = F.grid_sample(grid[None], g, mode="bilinear" if mode == "trilinear" else "nearest",
                        padding_mode="border", align_corners=False)
    return out.reshape(grid.shape[0], -1).T


@dataclass
class GridRepr:
    grid: np.ndarray  # complex [W, H, D]
    mode: str = "trilinear"

    def __post_init__(self):
        if self.mode not in GRID_MODES:
            raise ValueError(f"unknown interpolation mode {self.mode!r}")


def resample_grid(repr: GridRepr, mesh, dtype=torch.float64) -> np.ndarray:
    pts, shape = _points_tensor(mesh, dtype)
    if pts.numel() and (pts.abs() > 1 + 1e-9).any():
        raise ValueError("mesh coordinates must lie in [-1, 1]")
    grid = complex_to_channels(repr.grid, dtype)
    return _to_complex(grid_sample_points(grid, pts, repr.mode), shape)


# implicit neural representation

class INN(nn.Module):
    """Fourier-feature MLP ``[-1, 1]^3 -> C`` with layer normalization."""

    def __init__(self, width: int = 256, depth: int = 4, n_features: int = 128,
                 scale: float = 10.0, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("fourier_B", torch.randn(n_features, 3, generator=gen) * scale)
        layers = []
        cin = 2 * n_features
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            for _ in range(depth):
                layers += [nn.Linear(cin, width), nn.LayerNorm(width), nn.ReLU()]
                cin = width
            self.body = nn.Sequential(*layers)
            self.head = nn.Linear(cin, 2)
        self.config = {"width": width, "depth": depth, "n_features": n_features,
                       "scale": scale, "seed": seed}

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        proj = 2 * math.pi * points @ self.fourier_B.T
        return torch.cat([torch.cos(proj), torch.sin(proj)], dim=-1)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(self.encode(points.to(self.fourier_B.dtype))))


def eval_inn(params: INN, mesh, chunk: int = 65536) -> np.ndarray:
    for name, p in params.named_parameters():
        if not torch.isfinite(p).all():
            raise ValueError(f"INN parameter {name} is not finite")
    pts, shape = _points_tensor(mesh, params.fourier_B.dtype)
    with torch.no_grad():
        out = torch.cat([params(pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
    return _to_complex(out, shape)


# complex 3D Gaussians

@dataclass
class GaussianCloud:
    means: np.ndarray  # [G, 3] in [-1, 1]
    log_scales: np.ndarray  # [G, 3]
    quats: np.ndarray  # [G, 4] (w, x, y, z)
    amplitudes: np.ndarray  # [G, 2] real, imaginary

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        G = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(G, 3)
        q = np.asarray(self.quats, dtype=np.float64).reshape(G, 4)
        self.quats = q / np.linalg.norm(q, axis=1, keepdims=True)
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64).reshape(G, 2)

    @property
    def G(self) -> int:
        return len(self.means)

    def tensors(self, dtype=torch.float64, requires_grad=False) -> dict:
        return {k: torch.tensor(getattr(self, k), dtype=dtype, requires_grad=requires_grad)
                for k in ("means", "log_scales", "quats", "amplitudes")}


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def covariances(log_scales: torch.Tensor, quats: torch.Tensor) -> torch.Tensor:
    R = quat_to_rotmat(quats)
    s2 = torch.exp(2 * log_scales)
    return R @ torch.diag_embed(s2) @ R.transpose(-1, -2)


def _tile_pairs(means, half_extent, points, tile_size):
    """Candidate (gaussian, point) pairs whose tile overlaps the gaussian's bounding box."""
    lo = points.min(0).values
    hi = points.max(0).values
    n_tiles = torch.clamp(torch.ceil((hi - lo) / tile_size).long(), min=1)
    pt_cell = torch.minimum(((points - lo) / tile_size).floor().long(), n_tiles - 1)
    strides = torch.tensor([n_tiles[1] * n_tiles[2], n_tiles[2], 1])
    pt_tile = (pt_cell * strides).sum(1)
    order = torch.argsort(pt_tile, stable=True)
    n_total = int(n_tiles.prod())
    counts = torch.bincount(pt_tile, minlength=n_total)
    offsets = torch.cumsum(counts, 0) - counts

    gmin = ((means - half_extent - lo) / tile_size).floor().long()
    gmax = ((means + half_extent - lo) / tile_size).floor().long()
    gmin = torch.maximum(gmin, torch.zeros_like(gmin))
    gmax = torch.minimum(gmax, n_tiles - 1)
    span = torch.clamp(gmax - gmin + 1, min=0)
    n_per = span.prod(1)
    g_idx = torch.repeat_interleave(torch.arange(len(means)), n_per)
    if g_idx.numel() == 0:
        empty = torch.zeros(0, dtype=torch.long)
        return empty, empty
    local = torch.arange(len(g_idx)) - torch.repeat_interleave(torch.cumsum(n_per, 0) - n_per, n_per)
    sp = span[g_idx]
    cz = local % sp[:, 2]
    cy = (local // sp[:, 2]) % sp[:, 1]
    cx = local // (sp[:, 2] * sp[:, 1])
    cell = gmin[g_idx] + torch.stack([cx, cy, cz], 1)
    tile = (cell * strides).sum(1)
    npts = counts[tile]
    pair_g = torch.repeat_interleave(g_idx, npts)
    start = torch.repeat_interleave(offsets[tile], npts)
    within = torch.arange(len(pair_g)) - torch.repeat_interleave(torch.cumsum(npts, 0) - npts, npts)
    pair_p = order[start + within]
    return pair_g, pair_p


def _contrib(means, log_scales, quats, amps, points, pg, pp, trunc):
    R = quat_to_rotmat(quats)
    d = points[pp] - means[pg]
    local = torch.einsum("pi,pij->pj", d, R[pg]) * torch.exp(-log_scales[pg])
    m2 = (local * local).sum(1)
    w = torch.exp(-0.5 * m2) * (m2 <= trunc * trunc)
    return amps[pg] * w[:, None]


def rasterize_tensors(means, log_scales, quats, amps, points, trunc_sigmas: float = 3.0,
                      tile_size: float | None = None, max_pairs: int = 2_000_000) -> torch.Tensor:
    """Truncated sum of complex Gaussians at ``[P, 3]`` points, returned as ``[P, 2]``.

    Gaussians are binned into cubic tiles overlapped by the bounding box of
    their truncation ellipsoid; each is evaluated only on the points of those
    tiles. Chunks are recomputed in the backward pass to bound memory.
    """
    with torch.no_grad():
        if not (torch.isfinite(log_scales).all() and torch.isfinite(quats).all()):
            bad = (~torch.isfinite(log_scales).all(1)) | (~torch.isfinite(quats).all(1))
            raise ValueError(f"non-finite covariance for gaussian {int(bad.nonzero()[0, 0])}")
        cov = covariances(log_scales, quats)
        half = trunc_sigmas * torch.sqrt(torch.diagonal(cov, dim1=-2, dim2=-1))
        if tile_size is None:
            tile_size = float(max(2 * half.median(), 1e-3)) if len(half) else 1.0
        pg, pp = _tile_pairs(means.detach(), half, points.detach(), tile_size)
    out = torch.zeros(points.shape[0], 2, dtype=amps.dtype)
    for i in range(0, len(pg), max_pairs):
        g, p = pg[i:i + max_pairs], pp[i:i + max_pairs]
        if torch.is_grad_enabled() and any(t.requires_grad for t in (means, log_scales, quats, amps, points)):
            vals = checkpoint(_contrib, means, log_scales, quats, amps, points, g, p, trunc_sigmas,
                              use_reentrant=False)
        else:
            vals = _contrib(means, log_scales, quats, amps, points, g, p, trunc_sigmas)
        out = out.index_add(0, p, vals)
    return out


def rasterize_gaussians(cloud: GaussianCloud, mesh, trunc_sigmas: float = 3.0,
                        tile_size: float | None = None) -> np.ndarray:
    pts, shape = _points_tensor(mesh, torch.float64)
    t = cloud.tensors()
    with torch.no_grad():
        out = rasterize_tensors(t["means"], t["log_scales"], t["quats"], t["amplitudes"], pts,
                                trunc_sigmas, tile_size)
    return _to_complex(out, shape)


def init_gaussians_from_volume(vol: ComplexVolume, G: int, seed: int = 0) -> GaussianCloud:
    """Place ``G`` isotropic Gaussians at voxels drawn with probability proportional to ``|vol|``."""
    if G < 1:
        raise ValueError(f"G must be >= 1, got {G}")
    mag = np.abs(vol.data).ravel().astype(np.float64)
    if mag.sum() <= 0:
        raise DegenerateInputError("cannot initialize gaussians from an all-zero volume")
    rng = np.random.default_rng(seed)
    n_nonzero = int(np.count_nonzero(mag))
    idx = rng.choice(mag.size, size=G, replace=G > n_nonzero, p=mag / mag.sum())
    points = make_mesh3(vol.dims).points
    means = points[idx]
    voxel_extent = float(np.mean([2.0 / n for n in vol.dims]))
    log_scales = np.full((G, 3), np.log(voxel_extent))
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (G, 1))
    vals = vol.data.ravel()[idx]
    amps = np.stack([vals.real, vals.imag], axis=1).astype(np.float64)
    cloud = GaussianCloud(means, log_scales, quats, amps)
    raster = rasterize_gaussians(cloud, make_mesh3(vol.dims))
    denom = float(np.sum(np.abs(raster) ** 2))
    if denom > 0:
        c = float(np.real(np.vdot(raster, vol.data.astype(np.complex128)))) / denom
        cloud.amplitudes = cloud.amplitudes * c
    return cloud


# reconstruction backends

class VoxelBackend:
    """Parameters are the voxel values themselves; slices are read off the grid."""

    name = "voxel"
    continuous = False

    def __init__(self, init: ComplexVolume):
        self.theta = complex_to_channels(init.data).requires_grad_(True)
        self.dims = init.dims

    def parameters(self):
        return [self.theta]

    def volume(self) -> torch.Tensor:
        return self.theta


class GridBackend(VoxelBackend):
    name = "grid_resample"
    continuous = True

    def __init__(self, init: ComplexVolume, mode: str = "trilinear"):
        super().__init__(init)
        self.mode = mode

    def evaluate(self, points: torch.Tensor) -> torch.Tensor:
        return grid_sample_points(self.theta, points, self.mode)


class INNBackend:
    name = "inn"
    continuous = True

    def __init__(self, init: ComplexVolume, width=256, depth=4, n_features=128, scale=10.0,
                 seed=0, fit_steps=0, fit_lr=1e-3):
        self.dims = init.dims
        self.net = INN(width, depth, n_features, scale, seed)
        self.mesh = torch.as_tensor(make_mesh3(self.dims).points, dtype=torch.float32)
        if fit_steps:
            fit_inn(self.net, init, fit_steps, fit_lr)

    def parameters(self):
        return list(self.net.parameters())

    def evaluate(self, points):
        return self.net(points)

    def volume(self):
        return self.net(self.mesh).T.reshape((2,) + self.dims)


def fit_inn(net: INN, vol: ComplexVolume, steps: int, lr: float = 1e-3, batch: int | None = None,
            seed: int = 0) -> list:
    """Least-squares fit of an INN to a volume; returns the loss trace."""
    pts = torch.as_tensor(make_mesh3(vol.dims).points, dtype=torch.float32)
    target = complex_to_channels(vol.data.ravel()).T
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    trace = []
    for _ in range(steps):
        if batch and batch < len(pts):
            idx = torch.randint(0, len(pts), (batch,), generator=gen)
            loss = ((net(pts[idx]) - target[idx]) ** 2).mean()
        else:
            loss = ((net(pts) - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss))
    return trace


class GaussianBackend:
    name = "gaussian"
    continuous = True

    def __init__(self, init: ComplexVolume, G: int = 200_000, seed: int = 0,
                 trunc_sigmas: float = 3.0):
        self.dims = init.dims
        cloud = init_gaussians_from_volume(init, G, seed)
        t = cloud.tensors(torch.float32, requires_grad=True)
        self.means, self.log_scales = t["means"], t["log_scales"]
        self.quats, self.amps = t["quats"], t["amplitudes"]
        self.trunc = trunc_sigmas
        self.mesh = torch.as_tensor(make_mesh3(self.dims).points, dtype=torch.float32)

    def parameters(self):
        return [self.means, self.log_scales, self.quats, self.amps]

    def evaluate(self, points):
        return rasterize_tensors(self.means, self.log_scales, self.quats, self.amps,
                                 points, self.trunc)

    def volume(self):
        return self.evaluate(self.mesh).T.reshape((2,) + self.dims)

    def post_step(self):
        with torch.no_grad():
            self.quats /= self.quats.norm(dim=1, keepdim=True)

    def cloud(self) -> GaussianCloud:
        return GaussianCloud(self.means.detach().numpy(), self.log_scales.detach().numpy(),
                             self.quats.detach().numpy(), self.amps.detach().numpy())


REPRESENTATIONS = ("voxel", "grid_resample", "inn", "gaussian")


def make_backend(name: str, init: ComplexVolume, **options):
    if name == "voxel":
        return VoxelBackend(init)
    if name == "grid_resample":
        return GridBackend(init, options.get("grid_mode", "trilinear"))
    if name == "inn":
        keys = ("width", "depth", "n_features", "scale", "seed", "fit_steps", "fit_lr")
        return INNBackend(init, **{k: options[k] for k in keys if k in options})
    if name == "gaussian":
        keys = ("G", "seed", "trunc_sigmas")
        return GaussianBackend(init, **{k: options[k] for k in keys if k in options})
    raise ValueError(f"unknown representation {name!r}; expected one of {REPRESENTATIONS}")
