"""Linear DDPM noise schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables indexed ``t = 0 .. T-1``.

    ``sigma`` is the noise std and ``alpha`` the signal gain of the forward
    process, so ``x_t = alpha[t] * x_0 + sigma[t] * eps``.
    """

    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


def build_schedule(T: int = 1000, beta_min: float = 0.0001, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    t = np.arange(T, dtype=np.float64)
    beta = beta_min + (t / T) * (beta_max - beta_min)
    alpha_bar = np.cumprod(1.0 - beta)
    sigma = np.sqrt(1.0 - alpha_bar)
    alpha = np.sqrt(alpha_bar)
    return NoiseSchedule(int(T), float(beta_min), float(beta_max), beta, alpha_bar, sigma, alpha)


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return build_schedule(int(d["T"]), float(d["beta_min"]), float(d["beta_max"]))
