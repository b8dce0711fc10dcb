"""Variational 3D reconstruction regularized by a 2D diffusion prior on random slabs.

Each iteration takes one Adam step on the representation parameters using

    2 A^H (A x - y)  +  lam / n  *  sum_s scatter(2 sigma_t (eps_hat - eps))

where ``x`` is the representation evaluated on the acquisition grid and the
sum runs over ``n`` slices drawn from all three planes. The denoiser Jacobian
is replaced by the identity, so the prior enters only through its residual.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .diffusion.schedule import NoiseSchedule
from .diffusion.training import Checkpoint, denoise_eps
from .kernel_interp import kernel_overrides
from .operators import MulticoilKSpace, MulticoilOperator
from .representations import REPRESENTATIONS, make_backend
from .volume import PLANE_AXIS, PLANES, CoilSensitivities, ComplexVolume, axis_centers, in_plane_axes

log = logging.getLogger(__name__)

KERNEL_INTERP = ("none", "bilinear", "fourier_pad", "image_pad")


class OptimizationError(RuntimeError):
    def __init__(self, iteration, value):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class ReconConfig:
    lam: float = 0.05
    iters: int = 500
    step_size: float = 0.05
    T_prime: int | None = None  # None -> round(0.4 * T)
    S: int = 50
    slab_size: int = 4
    seed: int = 0
    representation: str = "voxel"
    kernel_interp: str = "none"
    grid_mode: str = "trilinear"
    v_train: float | tuple | None = None  # None -> from the checkpoint metadata
    lr_decay: str = "none"  # none | cosine
    backend_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.S < 1 or self.slab_size < 1 or self.iters < 0:
            raise ValueError("S and slab_size must be >= 1 and iters >= 0")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.kernel_interp not in KERNEL_INTERP:
            raise ValueError(f"unknown kernel interpolation {self.kernel_interp!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")

    def resolved_T_prime(self, T: int) -> int:
        tp = int(round(0.4 * T)) if self.T_prime is None else int(self.T_prime)
        if not 1 <= tp <= T:
            raise ValueError(f"T_prime must lie in [1, {T}], got {tp}")
        return tp

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["v_train"], tuple):
            d["v_train"] = list(d["v_train"])
        return d


def make_rng(seed) -> np.random.Generator:
    """Counter-based stream so results do not depend on evaluation order."""
    return np.random.Generator(np.random.Philox(seed))


# slab sampling and slice extraction

def sample_slabs(dims, S: int, slab_size: int, rng, planes=PLANES) -> dict:
    """Per plane, ``S`` slice indices made of uniformly placed contiguous runs.

    ``ceil(S / slab_size)`` runs are drawn, each fully inside the volume; the
    last run is shortened so exactly ``S`` indices result.
    """
    if S < 1 or slab_size < 1:
        raise ValueError("S and slab_size must be >= 1")
    plan = {}
    n_slabs = math.ceil(S / slab_size)
    for plane in planes:
        extent = int(dims[PLANE_AXIS[plane]])
        if slab_size > extent:
            raise ValueError(f"slab size {slab_size} exceeds {plane} extent {extent}")
        starts = rng.integers(0, extent - slab_size + 1, size=n_slabs)
        runs = [np.arange(s, s + slab_size) for s in starts]
        idx = np.concatenate(runs)[:S]
        plan[plane] = idx
    return plan


def extract_slab(data: np.ndarray, plane: str, idx) -> np.ndarray:
    """Slices ``[n, X, Y]`` of a ``[W, H, D]`` array along ``plane``."""
    return np.moveaxis(np.take(data, idx, axis=PLANE_AXIS[plane]), PLANE_AXIS[plane], 0)


def scatter_slab(slices: np.ndarray, plane: str, idx, dims) -> np.ndarray:
    """Adjoint of :func:`extract_slab`: accumulate slices back into a volume."""
    axis = PLANE_AXIS[plane]
    out = np.zeros(dims, dtype=np.result_type(slices.dtype, np.complex64))
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, np.asarray(idx), slices)
    return out


def _slab_tensor(theta: torch.Tensor, plane: str, idx) -> torch.Tensor:
    """``[2, W, H, D]`` -> ``[n, 2, X, Y]``; autograd scatters gradients back."""
    axis = PLANE_AXIS[plane] + 1
    sel = torch.index_select(theta, axis, torch.as_tensor(idx, dtype=torch.long))
    return sel.movedim(axis, 0)


# regularizer

def _as_denoiser(denoiser, overrides=None):
    if isinstance(denoiser, Checkpoint):
        return lambda s_t, t: denoise_eps(denoiser, s_t, t, overrides)
    return denoiser


def reg_gradient(slices, denoiser, schedule: NoiseSchedule, T_prime: int, rng):
    """Noise-residual gradient for a batch of two-channel slices ``[B, 2, X, Y]``.

    Per slice ``t ~ U{0..T_prime-1}`` and ``eps ~ N(0, I)``; the returned
    gradient is ``2 sigma_t (eps_hat(s_t, t) - eps)`` with ``s_t = alpha_t s +
    sigma_t eps``, i.e. the weighted loss ``(sigma_t / alpha_t) ||eps_hat - eps||^2``
    differentiated with the denoiser Jacobian set to the identity.

    Returns ``(gradient, loss_estimate, t, eps)``; the loss estimate is the mean
    over slices of the weighted squared residual norm.
    """
    if not 1 <= T_prime <= schedule.T:
        raise ValueError(f"T_prime must lie in [1, {schedule.T}], got {T_prime}")
    is_numpy = not isinstance(slices, torch.Tensor)
    s = torch.as_tensor(np.asarray(slices) if is_numpy else slices).detach()
    B = s.shape[0]
    t = rng.integers(0, T_prime, size=B)
    eps = torch.as_tensor(rng.standard_normal(tuple(s.shape)), dtype=s.dtype)
    shape = (B,) + (1,) * (s.ndim - 1)
    alpha = torch.as_tensor(schedule.alpha[t], dtype=s.dtype).reshape(shape)
    sigma = torch.as_tensor(schedule.sigma[t], dtype=s.dtype).reshape(shape)
    s_t = alpha * s + sigma * eps
    eps_hat = torch.as_tensor(_as_denoiser(denoiser)(s_t, t), dtype=s.dtype)
    resid = eps_hat - eps
    grad = 2.0 * sigma * resid
    weight = (sigma / alpha).reshape(B)
    loss = float((weight * resid.reshape(B, -1).pow(2).sum(1)).mean())
    if is_numpy:
        grad = grad.numpy()
    return grad, loss, t, eps


def reg_surrogate(slices, resid, t, schedule: NoiseSchedule):
    """Scalar ``sum_b w(t_b) * 2 <resid_b, s_t,b>`` with the residual held fixed.

    Its gradient in the clean slices equals the output of :func:`reg_gradient`.
    """
    B = slices.shape[0]
    shape = (B,) + (1,) * (slices.ndim - 1)
    alpha = torch.as_tensor(schedule.alpha[t], dtype=slices.dtype).reshape(shape)
    sigma = torch.as_tensor(schedule.sigma[t], dtype=slices.dtype).reshape(shape)
    return (2.0 * (sigma / alpha) * resid.detach() * (alpha * slices)).sum()


# reconstruction

def _v_train(cfg: ReconConfig, ckpt, v_recon):
    if cfg.v_train is not None:
        v = cfg.v_train
        return (float(v),) * 3 if np.isscalar(v) else tuple(float(x) for x in v)
    sizes = getattr(getattr(ckpt, "config", None), "train_voxel_sizes", None)
    if sizes:
        sizes = np.asarray(sizes, dtype=float)
        v = float(np.exp(np.mean(np.log(sizes[0]))))
        return (v, v, v)
    return tuple(v_recon)


def _resolution_warnings(ckpt, v_recon, cfg) -> list:
    conf = getattr(ckpt, "config", None)
    if conf is None or not conf.train_voxel_sizes:
        return []
    trained = np.asarray(conf.train_voxel_sizes, dtype=float)
    out = []
    for plane in PLANES:
        a, b = in_plane_axes(plane)
        pix = np.array([v_recon[a], v_recon[b]])
        if cfg.representation != "voxel":
            pix = np.array([_v_train(cfg, ckpt, v_recon)[a], _v_train(cfg, ckpt, v_recon)[b]])
        if conf.diverse:
            lo, hi = trained.min(0), trained.max(0)
            ok = np.all(pix >= lo * (1 - 1e-3)) and np.all(pix <= hi * (1 + 1e-3))
        else:
            ok = np.any(np.all(np.isclose(trained, pix, rtol=1e-3), axis=1))
        if not ok:
            out.append(f"{plane} slice pixel size {tuple(pix)} mm differs from denoiser "
                       f"training voxel sizes {conf.train_voxel_sizes}")
    return out


def _view_points(fov, v_train, plane, idx, extent):
    """Stacked planar meshes ``[n, X, Y, 3]`` at normalized positions of the view grid."""
    a, b = in_plane_axes(plane)
    X = max(1, int(round(fov[a] / v_train[a])))
    Y = max(1, int(round(fov[b] / v_train[b])))
    pos = axis_centers(extent)[idx]
    pts = np.empty((len(idx), X, Y, 3), dtype=np.float32)
    pts[..., a] = axis_centers(X)[None, :, None]
    pts[..., b] = axis_centers(Y)[None, None, :]
    pts[..., PLANE_AXIS[plane]] = pos[:, None, None]
    return torch.from_numpy(pts)


def _lr_at(cfg: ReconConfig, k: int) -> float:
    if cfg.lr_decay == "cosine" and cfg.iters > 1:
        return cfg.step_size * 0.5 * (1 + math.cos(math.pi * k / cfg.iters))
    return cfg.step_size


def reconstruct_variational(ksp: MulticoilKSpace, maps: CoilSensitivities, ckpt, cfg: ReconConfig,
                            backend=None, run_log: dict | None = None,
                            init: ComplexVolume | None = None) -> ComplexVolume:
    """Minimize data consistency plus the slab-sampled diffusion regularizer with Adam.

    ``ksp`` should already be scaled (see ``scale_measurements``); the result is
    divided by ``ksp.scale``. ``ckpt`` may be a :class:`Checkpoint` or, for
    testing, any callable ``eps(s_t, t)`` paired with ``run_log['schedule']``.
    """
    t0 = time.time()
    run_log = {} if run_log is None else run_log
    op = MulticoilOperator(maps, ksp.mask)
    y = ksp.coils
    dims = ksp.dims
    v_recon = ksp.voxel_size
    fov = tuple(n * v for n, v in zip(dims, v_recon))
    schedule = ckpt.schedule if isinstance(ckpt, Checkpoint) else run_log.get("schedule")
    warnings_list = []

    if init is None:
        init = ComplexVolume(op.adjoint(y).astype(np.complex64), v_recon)
    if backend is None:
        opts = dict(cfg.backend_options)
        opts.setdefault("grid_mode", cfg.grid_mode)
        opts.setdefault("seed", cfg.seed)
        backend = make_backend(cfg.representation, init, **opts)
    params = backend.parameters()
    opt = torch.optim.Adam(params, lr=cfg.step_size)
    rng = make_rng(cfg.seed)

    use_prior = cfg.lam > 0
    overrides, kernel_report = None, []
    v_train = _v_train(cfg, ckpt, v_recon)
    if use_prior:
        T_prime = cfg.resolved_T_prime(schedule.T)
        warnings_list += _resolution_warnings(ckpt, v_recon, cfg)
        if cfg.kernel_interp != "none":
            if not isinstance(ckpt, Checkpoint) or ckpt.config.arch != "inf_unet":
                raise ValueError("kernel interpolation needs an inf_unet checkpoint")
            slice_pix = v_recon if cfg.representation == "voxel" else v_train
            overrides, kernel_report = kernel_overrides(ckpt, float(np.exp(np.mean(np.log(slice_pix)))),
                                                        cfg.kernel_interp)
        denoiser = _as_denoiser(ckpt, overrides)
        if backend.continuous:
            view_dims = tuple(max(1, int(round(f / v))) for f, v in zip(fov, v_train))
        else:
            view_dims = dims
    for w in warnings_list:
        log.warning(w)

    trace_dc, trace_reg = [], []
    for k in range(cfg.iters):
        for g in opt.param_groups:
            g["lr"] = _lr_at(cfg, k)
        opt.zero_grad(set_to_none=True)
        vol = backend.volume()
        vd = vol.detach().numpy()
        x = (vd[0] + 1j * vd[1]).astype(np.complex64)
        resid = op.forward(x) - y
        dc = float(np.vdot(resid, resid).real)
        g_dc = 2.0 * op.adjoint(resid)
        surrogate = (vol * torch.from_numpy(np.stack([g_dc.real, g_dc.imag]))).sum()
        reg_val = 0.0
        if use_prior:
            plan = sample_slabs(view_dims, cfg.S, cfg.slab_size, rng)
            n_total = sum(len(v) for v in plan.values())
            reg_terms = []
            for plane, idx in plan.items():
                if backend.continuous:
                    pts = _view_points(fov, v_train, plane, idx, view_dims[PLANE_AXIS[plane]])
                    vals = backend.evaluate(pts.reshape(-1, 3))
                    slab = vals.reshape(pts.shape[:3] + (2,)).permute(0, 3, 1, 2)
                else:
                    slab = _slab_tensor(vol, plane, idx)
                grad, loss, _, _ = reg_gradient(slab.detach(), denoiser, schedule, T_prime, rng)
                reg_val += loss * len(idx)
                reg_terms.append((slab * grad).sum())
            surrogate = surrogate + (cfg.lam / n_total) * torch.stack(reg_terms).sum()
            reg_val /= n_total
        if not (np.isfinite(dc) and np.isfinite(reg_val)):
            raise OptimizationError(k, dc + cfg.lam * reg_val)
        surrogate.backward()
        opt.step()
        if hasattr(backend, "post_step"):
            backend.post_step()
        trace_dc.append(dc)
        trace_reg.append(reg_val)

    with torch.no_grad():
        vd = backend.volume().numpy()
    x = (vd[0] + 1j * vd[1]) / ksp.scale
    if not np.all(np.isfinite(x)):
        raise OptimizationError(cfg.iters, float("nan"))

    monotone = None
    if not use_prior and len(trace_dc) > 11:
        tail = np.asarray(trace_dc[10:])
        tol = 1e-6 * float(np.vdot(y, y).real) + 1e-12  # float32 round-off floor
        monotone = bool(np.all(np.diff(tail) <= tol))
        if not monotone:
            warnings_list.append("data-consistency loss increased after warm-up")
    run_log.update({
        "method": "variational",
        "config": cfg.to_dict(),
        "loss_trace": {"data_consistency": trace_dc, "regularizer": trace_reg,
                       "total": [d + cfg.lam * r for d, r in zip(trace_dc, trace_reg)]},
        "dc_monotone_after_warmup": monotone,
        "v_recon": list(v_recon),
        "v_train": list(v_train),
        "kernels": kernel_report,
        "warnings": warnings_list,
        "wall_s": time.time() - t0,
    })
    return ComplexVolume(x.astype(np.complex64), v_recon)
