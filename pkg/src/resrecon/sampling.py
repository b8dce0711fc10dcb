"""Undersampling masks over the two phase-encode axes ``(H, D)``.

Patterns are stored centered (DC at ``(H // 2, D // 2)``) and broadcast along
the readout axis ``W`` by the forward operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MASK_KINDS = ("poisson", "gaussian", "full")


class InfeasibleAccelerationError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingMask:
    pattern: np.ndarray  # bool [H, D], centered
    readout_len: int
    acs: tuple[int, int]
    kind: str
    achieved_R: float
    density_slope: float = 2.0
    r0: float = 0.0

    def __post_init__(self):
        pattern = np.asarray(self.pattern, dtype=bool)
        if pattern.ndim != 2:
            raise ValueError(f"mask pattern must be 2D, got shape {pattern.shape}")
        if not pattern.any():
            raise ValueError("mask pattern has no sampled locations")
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        object.__setattr__(self, "pattern", pattern)
        object.__setattr__(self, "acs", tuple(int(a) for a in self.acs))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pattern.shape

    @property
    def is_full(self) -> bool:
        return bool(self.pattern.all())

    def kspace_mask(self) -> np.ndarray:
        """Uncentered ``[1, H, D]`` mask matching an unshifted DFT layout."""
        return np.fft.ifftshift(self.pattern)[None]


def achieved_acceleration(pattern: np.ndarray) -> float:
    return pattern.size / float(np.count_nonzero(pattern))


def default_acs(shape) -> tuple[int, int]:
    """16x16 calibration block, shrunk proportionally for axes shorter than 64."""
    return tuple(16 if n >= 64 else max(1, int(round(16 * n / 64))) for n in shape)


def acs_region(shape, acs) -> tuple[slice, slice]:
    H, D = shape
    h, d = acs
    if h > H or d > D or h < 0 or d < 0:
        raise ValueError(f"ACS block {acs} does not fit into {shape}")
    return (slice(H // 2 - h // 2, H // 2 - h // 2 + h),
            slice(D // 2 - d // 2, D // 2 - d // 2 + d))


def _check_request(shape, R, acs):
    shape = tuple(int(n) for n in shape)
    if len(shape) != 2 or min(shape) < 1:
        raise ValueError(f"mask shape must be 2 positive ints, got {shape}")
    if R < 1:
        raise ValueError(f"acceleration must be >= 1, got {R}")
    acs = default_acs(shape) if acs is None else tuple(int(a) for a in acs)
    acs_region(shape, acs)
    n_acs = acs[0] * acs[1]
    if n_acs > 0 and shape[0] * shape[1] / n_acs < 0.9 * R:
        raise InfeasibleAccelerationError(
            f"ACS block {acs} alone samples {n_acs} of {shape[0] * shape[1]} locations; "
            f"acceleration {R} is infeasible")
    return shape, acs


def normalized_radius(shape) -> np.ndarray:
    """Distance from the k-space center, scaled to 1 at the corners."""
    H, D = shape
    u = (np.arange(H) - H // 2) / (H / 2)
    v = (np.arange(D) - D // 2) / (D / 2)
    return np.sqrt(u[:, None] ** 2 + v[None, :] ** 2) / math.sqrt(2.0)


def local_radius(rho, r0, slope):
    return r0 * (1.0 + slope * rho)


def _dart_throw(order, shape, rho, acs_mask, r0, slope):
    H, D = shape
    accepted = np.zeros(shape, dtype=bool)
    radius = local_radius(rho, r0, slope)
    reach = int(math.ceil(r0 * (1.0 + slope * rho.max())))
    for flat in order:
        i, j = divmod(int(flat), D)
        if acs_mask[i, j]:
            continue
        i0, i1 = max(0, i - reach), min(H, i + reach + 1)
        j0, j1 = max(0, j - reach), min(D, j + reach + 1)
        ni, nj = np.nonzero(accepted[i0:i1, j0:j1])
        if ni.size:
            ni = ni + i0
            nj = nj + j0
            dist2 = (ni - i) ** 2 + (nj - j) ** 2
            need = np.maximum(radius[ni, nj], radius[i, j])
            if np.any(dist2 < need**2):
                continue
        accepted[i, j] = True
    return accepted


def gen_poisson_mask(shape, R: float, acs=None, seed: int = 0, readout_len: int = 1,
                     slope: float = 2.0, max_bisections: int = 60) -> SamplingMask:
    """Variable-density Poisson-disc mask by dart throwing with bisection on the base radius.

    A candidate is accepted when every previously accepted (non-ACS) point lies
    at least ``max(r(p), r(q))`` away, with ``r(rho) = r0 * (1 + slope * rho)``.
    """
    shape, acs = _check_request(shape, R, acs)
    acs_mask = np.zeros(shape, dtype=bool)
    acs_mask[acs_region(shape, acs)] = True
    if R == 1:
        return SamplingMask(np.ones(shape, bool), readout_len, acs, "poisson", 1.0, slope, 0.0)
    rng = np.random.default_rng(seed)
    order = rng.permutation(shape[0] * shape[1])
    rho = normalized_radius(shape)
    lo, hi = 0.0, float(max(shape))
    best = None
    for _ in range(max_bisections):
        r0 = 0.5 * (lo + hi)
        pattern = _dart_throw(order, shape, rho, acs_mask, r0, slope) | acs_mask
        achieved = achieved_acceleration(pattern)
        if best is None or abs(achieved - R) < abs(best[1] - R):
            best = (pattern, achieved, r0)
        if 0.9 * R <= achieved <= 1.1 * R:
            break
        if achieved < R:
            lo = r0
        else:
            hi = r0
    pattern, achieved, r0 = best
    if not 0.9 * R <= achieved <= 1.1 * R:
        raise InfeasibleAccelerationError(
            f"could not reach acceleration {R} (closest {achieved:.3f}) for shape {shape}")
    return SamplingMask(pattern, readout_len, acs, "poisson", achieved, slope, r0)


def poisson_violations(mask: SamplingMask) -> int:
    """Brute-force count of accepted non-ACS pairs closer than their local radius."""
    acs_mask = np.zeros(mask.shape, dtype=bool)
    acs_mask[acs_region(mask.shape, mask.acs)] = True
    pts = np.argwhere(mask.pattern & ~acs_mask)
    if len(pts) < 2:
        return 0
    rho = normalized_radius(mask.shape)[pts[:, 0], pts[:, 1]]
    rad = local_radius(rho, mask.r0, mask.density_slope)
    diff = pts[:, None, :] - pts[None, :, :]
    dist2 = np.sum(diff**2, axis=-1)
    need = np.maximum(rad[:, None], rad[None, :]) ** 2
    bad = (dist2 < need) & ~np.eye(len(pts), dtype=bool)
    return int(bad.sum() // 2)


def gen_gaussian_mask(shape, R: float, acs=None, seed: int = 0,
                      readout_len: int = 1) -> SamplingMask:
    """Draws ``ceil(H*D/R)`` locations without replacement from a centered Gaussian density."""
    shape, acs = _check_request(shape, R, acs)
    H, D = shape
    if R == 1:
        return SamplingMask(np.ones(shape, bool), readout_len, acs, "gaussian", 1.0)
    rng = np.random.default_rng(seed)
    sigma = 0.25 * min(H, D)
    ki = np.arange(H) - H // 2
    kj = np.arange(D) - D // 2
    p = np.exp(-(ki[:, None] ** 2 + kj[None, :] ** 2) / (2 * sigma**2)).ravel()
    p /= p.sum()
    n = math.ceil(H * D / R)
    chosen = rng.choice(H * D, size=n, replace=False, p=p)
    pattern = np.zeros(H * D, dtype=bool)
    pattern[chosen] = True
    pattern = pattern.reshape(shape)
    pattern[acs_region(shape, acs)] = True
    return SamplingMask(pattern, readout_len, acs, "gaussian", achieved_acceleration(pattern))


def full_mask(shape, readout_len: int = 1) -> SamplingMask:
    shape = tuple(int(n) for n in shape)
    return SamplingMask(np.ones(shape, bool), readout_len, shape, "full", 1.0)


def make_mask(kind: str, shape, R: float, acs=None, seed: int = 0, readout_len: int = 1):
    if kind == "poisson":
        return gen_poisson_mask(shape, R, acs, seed, readout_len)
    if kind == "gaussian":
        return gen_gaussian_mask(shape, R, acs, seed, readout_len)
    if kind == "full":
        return full_mask(shape, readout_len)
    raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
