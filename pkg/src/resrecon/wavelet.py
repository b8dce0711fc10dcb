"""Orthonormal separable 3D Daubechies wavelet transform with periodic extension."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

# Daubechies scaling filter with four vanishing moments (8 taps)
DB4_LO = np.array([
    0.23037781330885523, 0.7148465705525415, 0.6308807679295904, -0.02798376941698385,
    -0.18703481171888114, 0.030841381835986965, 0.032883011666982945, -0.010597401784997278,
])
DB4_HI = np.array([(-1) ** j * DB4_LO[len(DB4_LO) - 1 - j] for j in range(len(DB4_LO))])


@lru_cache(maxsize=64)
def analysis_matrix(n: int) -> np.ndarray:
    """One periodized filter-bank level as an ``n x n`` orthogonal matrix (approximation rows first)."""
    if n < 2 or n % 2:
        raise ValueError(f"axis length must be even and >= 2, got {n}")
    W = np.zeros((n, n))
    half = n // 2
    for k in range(half):
        for j, (lo, hi) in enumerate(zip(DB4_LO, DB4_HI)):
            W[k, (2 * k + j) % n] += lo
            W[half + k, (2 * k + j) % n] += hi
    W.setflags(write=False)
    return W


def _apply(x, axis, M):
    return np.moveaxis(np.tensordot(M, x, axes=([1], [axis])), 0, axis)


def padded_shape(shape, levels: int = 3) -> tuple:
    m = 2 ** levels
    return tuple(-(-n // m) * m for n in shape)


def wavedec3(x: np.ndarray, levels: int = 3) -> np.ndarray:
    """Mallat-ordered coefficients, same shape as ``x`` (each axis divisible by ``2**levels``)."""
    if any(n % 2 ** levels for n in x.shape):
        raise ValueError(f"shape {x.shape} not divisible by {2 ** levels}")
    out = np.array(x, dtype=np.result_type(x, np.float64), copy=True)
    shape = x.shape
    for _ in range(levels):
        block = out[tuple(slice(0, n) for n in shape)]
        for ax, n in enumerate(shape):
            block = _apply(block, ax, analysis_matrix(n))
        out[tuple(slice(0, n) for n in shape)] = block
        shape = tuple(n // 2 for n in shape)
    return out


def waverec3(c: np.ndarray, levels: int = 3) -> np.ndarray:
    out = np.array(c, copy=True)
    shapes = [tuple(n // 2 ** lev for n in c.shape) for lev in range(levels)]
    for shape in reversed(shapes):
        block = out[tuple(slice(0, n) for n in shape)]
        for ax, n in enumerate(shape):
            block = _apply(block, ax, analysis_matrix(n).T)
        out[tuple(slice(0, n) for n in shape)] = block
    return out
