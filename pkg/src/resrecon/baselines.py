"""Comparison reconstructions: L1-wavelet FISTA and an axis-cycling DDS posterior sampler."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from .diffusion.training import Checkpoint, denoise_eps
from .operators import MulticoilKSpace, MulticoilOperator
from .sampling import SamplingMask
from .volume import PLANE_AXIS, PLANES, CoilSensitivities, ComplexVolume, canonical_plane
from .wavelet import padded_shape, wavedec3, waverec3

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    pass


def soft_threshold_complex(coeffs, tau: float):
    """Proximal map of ``tau * |z|``: shrink magnitudes by ``tau``, keep phases."""
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    c = np.asarray(coeffs)
    mag = np.abs(c)
    factor = np.maximum(1.0 - tau / np.maximum(mag, np.finfo(float).tiny), 0.0)
    return c * factor


def _operator(ksp, maps, mask):
    mask = ksp.mask if mask is None else mask
    return MulticoilOperator(maps, mask)


# L1-wavelet compressed sensing

def reconstruct_l1wavelet(ksp: MulticoilKSpace, maps: CoilSensitivities, mask: SamplingMask | None = None,
                          mu: float = 0.01, iters: int = 100, levels: int = 3, tol: float = 1e-6,
                          run_log: dict | None = None) -> ComplexVolume:
    """Monotone FISTA on ``0.5 ||y - A x||^2 + mu ||W x||_1``.

    Volumes whose sides are not divisible by ``2**levels`` are optimized on a
    zero-extended grid and cropped at the end.
    """
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    t0 = time.time()
    op = _operator(ksp, maps, mask)
    y = ksp.coils
    dims = ksp.dims
    pshape = padded_shape(dims, levels)
    crop = tuple(slice(0, n) for n in dims)
    # ||A||^2 <= max sum_i |S_i|^2, which is 1 for normalized maps
    step = 1.0 / max(1.0, float(maps.sum_of_squares().max()))

    def pad(x):
        out = np.zeros(pshape, dtype=np.complex128)
        out[crop] = x
        return out

    def objective(x):
        r = op.forward(x[crop].astype(np.complex64)) - y
        return 0.5 * float(np.vdot(r, r).real) + mu * float(np.abs(wavedec3(x, levels)).sum())

    def prox(z):
        return waverec3(soft_threshold_complex(wavedec3(z, levels), mu * step), levels)

    x = pad(op.adjoint(y))
    F = objective(x)
    trace = [F]
    v = x.copy()
    t = 1.0
    for k in range(iters):
        grad = pad(op.adjoint(op.forward(v[crop].astype(np.complex64)) - y))
        z = prox(v - step * grad)
        Fz = objective(z)
        x_prev = x
        if Fz <= F:
            x, F = z, Fz
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        v = x + (t / t_next) * (z - x) + ((t - 1) / t_next) * (x - x_prev)
        if Fz > trace[-1]:
            t_next = 1.0  # restart momentum
            v = x.copy()
        t = t_next
        trace.append(F)
        if not np.isfinite(F):
            raise NumericalError(f"non-finite objective at iteration {k}")
        change = np.linalg.norm(x - x_prev) / max(np.linalg.norm(x_prev), 1e-30)
        if k > 0 and change < tol and Fz <= trace[-2]:
            break
    if run_log is not None:
        run_log.update({"method": "l1_wavelet", "mu": mu, "iters_run": len(trace) - 1,
                        "objective_trace": trace, "wall_s": time.time() - t0})
    return ComplexVolume((x[crop] / ksp.scale).astype(np.complex64), ksp.voxel_size)


# conjugate-gradient data consistency

def _cg(op, y, x0, rho, iters):
    """CG on ``(A^H A + rho I) x = A^H y + rho x0`` warm-started at ``x0``."""
    x = x0.astype(np.complex128)
    b = op.adjoint(y) + rho * x0

    def normal(v):
        return op.normal(v) + rho * v

    def objective(v):
        r = op.forward(v) - y
        d = v - x0
        return float(np.vdot(r, r).real + rho * np.vdot(d, d).real)

    r = b - normal(x)
    p = r.copy()
    rr = float(np.vdot(r, r).real)
    trace = [objective(x)]
    for _ in range(iters):
        if rr == 0:
            break
        Ap = normal(p)
        denom = float(np.vdot(p, Ap).real)
        if not np.isfinite(denom) or denom <= 0:
            raise NumericalError(f"conjugate gradient breakdown (p^H A p = {denom})")
        a = rr / denom
        x = x + a * p
        r = r - a * Ap
        rr_new = float(np.vdot(r, r).real)
        if not np.isfinite(rr_new):
            raise NumericalError("conjugate gradient produced a non-finite residual")
        p = r + (rr_new / rr) * p
        rr = rr_new
        trace.append(objective(x))
    return x, float(np.sqrt(rr)), trace


def cg_data_consistency(x0_hat: ComplexVolume, ksp: MulticoilKSpace, maps: CoilSensitivities,
                        rho: float, cg_iters: int, info: dict | None = None) -> ComplexVolume:
    """Approximate ``argmin_x ||y - A x||^2 + rho ||x - x0_hat||^2``.

    ``info`` (if given) receives the final normal-equation residual norm and
    the objective after each CG iteration.
    """
    if rho <= 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    op = MulticoilOperator(maps, ksp.mask)
    x, res, trace = _cg(op, ksp.coils, x0_hat.data, rho, cg_iters)
    if info is not None:
        info.update({"residual_norm": res, "objective_trace": trace})
    return ComplexVolume(x.astype(np.complex64), x0_hat.voxel_size)


# DDS sampler

@dataclass
class SamplerConfig:
    n_steps: int = 100
    eta: float = 0.85
    cg_iters: int = 5
    rho: float = 10.0
    uncond_every: int = 3
    axes: tuple = PLANES
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0 <= self.eta <= 1:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.cg_iters < 0 or self.rho <= 0 or self.uncond_every < 1:
            raise ValueError("cg_iters must be >= 0, rho > 0 and uncond_every >= 1")
        self.axes = tuple(canonical_plane(a) for a in self.axes)
        if not self.axes:
            raise ValueError("axis cycle must not be empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["axes"] = list(self.axes)
        return d


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Descending, strictly decreasing subsequence of ``0..T-1`` starting at ``T-1``."""
    if n_steps > T:
        raise ValueError(f"n_steps {n_steps} exceeds schedule length {T}")
    return np.round(np.linspace(T - 1, 0, n_steps)).astype(int)


def is_unconditional(step: int, uncond_every: int) -> bool:
    return (step + 1) % uncond_every == 0


def _denoise_along(ckpt, x: np.ndarray, plane: str, t: int, eps_fn=None) -> np.ndarray:
    axis = PLANE_AXIS[plane]
    slices = np.moveaxis(x, axis, 0)
    batch = np.stack([slices.real, slices.imag], axis=1).astype(np.float32)
    tt = np.full(batch.shape[0], t)
    eps = eps_fn(batch, tt) if eps_fn is not None else denoise_eps(ckpt, batch, tt)
    eps = np.asarray(eps)
    return np.moveaxis(eps[:, 0] + 1j * eps[:, 1], 0, axis)


def reconstruct_dds3d(ksp: MulticoilKSpace, maps: CoilSensitivities, mask: SamplingMask | None,
                      ckpt: Checkpoint, cfg: SamplerConfig, run_log: dict | None = None,
                      eps_fn=None) -> ComplexVolume:
    """Reverse diffusion in 3D: slice-wise denoising along a cycling axis, CG data
    consistency on the Tweedie estimate, DDIM transition with parameter ``eta``.

    Every ``uncond_every``-th step skips data consistency.
    """
    t0 = time.time()
    if mask is not None and mask is not ksp.mask:
        ksp = MulticoilKSpace(ksp.coils, mask, ksp.noise_sigma, ksp.scale, ksp.voxel_size)
    sched = ckpt.schedule
    steps = ddim_timesteps(sched.T, cfg.n_steps)
    abar = sched.alpha_bar
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    shape = ksp.dims
    x = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    x0 = x
    visits = {a: 0 for a in cfg.axes}
    residuals = []
    for i, t in enumerate(steps):
        plane = cfg.axes[i % len(cfg.axes)]
        visits[plane] += 1
        a_t = np.sqrt(abar[t])
        s_t = np.sqrt(1 - abar[t])
        eps = _denoise_along(ckpt, x, plane, int(t), eps_fn)
        x0 = (x - s_t * eps) / a_t
        if not is_unconditional(i, cfg.uncond_every) and cfg.cg_iters > 0:
            info = {}
            x0 = cg_data_consistency(ComplexVolume(x0, ksp.voxel_size), ksp, maps, cfg.rho,
                                     cfg.cg_iters, info).data.astype(np.complex128)
            residuals.append(info["residual_norm"])
        abar_prev = abar[steps[i + 1]] if i + 1 < len(steps) else 1.0
        c1 = cfg.eta * np.sqrt((1 - abar_prev) / (1 - abar[t]) * (1 - abar[t] / abar_prev))
        c2 = np.sqrt(max(1 - abar_prev - c1 ** 2, 0.0))
        z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        # complex noise with unit variance per real channel, matching the two-channel prior
        x = np.sqrt(abar_prev) * x0 + c2 * eps + c1 * z
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"sampler diverged at step {i}")
    if run_log is not None:
        run_log.update({"method": "dds", "config": cfg.to_dict(), "axis_visits": visits,
                        "cg_residuals": residuals, "wall_s": time.time() - t0})
    return ComplexVolume((x0 / ksp.scale).astype(np.complex64), ksp.voxel_size)
