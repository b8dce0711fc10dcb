"""Estimator-style wrappers (``fit`` / ``predict`` / ``transform`` with ``get_params``)."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .baselines import SamplerConfig, reconstruct_dds3d, reconstruct_l1wavelet
from .diffusion.data import extract_slices
from .diffusion.training import Checkpoint, denoise_eps, train
from .diffusion.unet import DenoiserConfig
from .kernel_interp import DepthwiseKernel, resize_kernel, target_size
from .operators import scale_measurements
from .priors import TOY_DENOISER
from .validation import check_measurements, check_scalar, check_volumes
from .variational import ReconConfig, reconstruct_variational


def _checkpoint(prior) -> Checkpoint:
    if isinstance(prior, Checkpoint):
        return prior
    if isinstance(prior, DiffusionPrior):
        if not hasattr(prior, "checkpoint_"):
            raise NotFittedError("the DiffusionPrior has not been fitted")
        return prior.checkpoint_
    if isinstance(prior, str):
        return Checkpoint.load(prior)
    raise TypeError(f"prior must be a Checkpoint, a fitted DiffusionPrior or a path, got {type(prior).__name__}")


def _prepare(ksp, maps, scale):
    ksp, maps = check_measurements(ksp, maps)
    if scale:
        ksp, _ = scale_measurements(ksp, maps)
    return ksp, maps


class DiffusionPrior(BaseEstimator):
    """2D slice DDPM fitted on the slices of a list of complex volumes."""

    def __init__(self, arch="unet", base_channels=TOY_DENOISER["base_channels"],
                 channel_mults=tuple(TOY_DENOISER["channel_mults"]),
                 attention_levels=tuple(TOY_DENOISER["attention_levels"]), kernel_size=7,
                 diverse=False, steps=2000, batch_size=4, lr=1e-4, ema_start=500,
                 factor_range=(0.1, 1.0), seed=0):
        self.arch = arch
        self.base_channels = base_channels
        self.channel_mults = channel_mults
        self.attention_levels = attention_levels
        self.kernel_size = kernel_size
        self.diverse = diverse
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.ema_start = ema_start
        self.factor_range = factor_range
        self.seed = seed

    def fit(self, volumes, y=None):
        check_scalar(self.steps, "steps", 0, integer=True)
        check_scalar(self.batch_size, "batch_size", 1, integer=True)
        cfg = DenoiserConfig(arch=self.arch, base_channels=self.base_channels,
                             channel_mults=tuple(self.channel_mults),
                             attention_levels=tuple(self.attention_levels),
                             kernel_size=self.kernel_size, diverse=self.diverse)
        ds = extract_slices(check_volumes(volumes))
        self.checkpoint_ = train(cfg, ds, self.steps, seed=self.seed, lr=self.lr,
                                 batch_size=self.batch_size, ema_start=self.ema_start,
                                 factor_range=tuple(self.factor_range))
        self.loss_trace_ = list(self.checkpoint_.loss_trace)
        return self

    def predict(self, s_t, t):
        """Predicted noise for two-channel slices ``[B, 2, X, Y]`` at steps ``t``."""
        return denoise_eps(_checkpoint(self), s_t, t)

    def save(self, path):
        return _checkpoint(self).save(path)


class _Reconstructor(BaseEstimator):
    def predict(self, ksp=None, maps=None):
        if ksp is not None:
            self.fit(ksp, maps)
        if not hasattr(self, "volume_"):
            raise NotFittedError(f"{type(self).__name__} has not been fitted")
        return self.volume_


class VariationalReconstructor(_Reconstructor):
    """Diffusion-regularized variational reconstruction over a chosen representation."""

    def __init__(self, prior=None, lam=0.05, iters=500, step_size=0.05, T_prime=None, S=50,
                 slab_size=4, representation="voxel", kernel_interp="none", v_train=None,
                 lr_decay="none", seed=0, scale=True, backend_options=None):
        self.prior = prior
        self.lam = lam
        self.iters = iters
        self.step_size = step_size
        self.T_prime = T_prime
        self.S = S
        self.slab_size = slab_size
        self.representation = representation
        self.kernel_interp = kernel_interp
        self.v_train = v_train
        self.lr_decay = lr_decay
        self.seed = seed
        self.scale = scale
        self.backend_options = backend_options

    def config(self) -> ReconConfig:
        return ReconConfig(lam=self.lam, iters=self.iters, step_size=self.step_size,
                           T_prime=self.T_prime, S=self.S, slab_size=self.slab_size, seed=self.seed,
                           representation=self.representation, kernel_interp=self.kernel_interp,
                           v_train=self.v_train, lr_decay=self.lr_decay,
                           backend_options=dict(self.backend_options or {}))

    def fit(self, ksp, maps):
        cfg = self.config()
        ksp, maps = _prepare(ksp, maps, self.scale)
        ckpt = _checkpoint(self.prior) if cfg.lam > 0 else None
        log: dict = {}
        self.volume_ = reconstruct_variational(ksp, maps, ckpt, cfg, run_log=log)
        self.run_log_ = log
        self.loss_trace_ = log["loss_trace"]["total"]
        return self


class L1WaveletReconstructor(_Reconstructor):
    def __init__(self, mu=0.01, iters=100, levels=3, scale=True):
        self.mu = mu
        self.iters = iters
        self.levels = levels
        self.scale = scale

    def fit(self, ksp, maps):
        check_scalar(self.mu, "mu", 0)
        ksp, maps = _prepare(ksp, maps, self.scale)
        log: dict = {}
        self.volume_ = reconstruct_l1wavelet(ksp, maps, None, self.mu, self.iters, self.levels, run_log=log)
        self.run_log_ = log
        self.loss_trace_ = log["objective_trace"]
        return self


class DDSReconstructor(_Reconstructor):
    """Axis-cycling decomposed diffusion sampler."""

    def __init__(self, prior=None, n_steps=100, eta=0.85, cg_iters=5, rho=10.0, uncond_every=3,
                 seed=0, scale=True):
        self.prior = prior
        self.n_steps = n_steps
        self.eta = eta
        self.cg_iters = cg_iters
        self.rho = rho
        self.uncond_every = uncond_every
        self.seed = seed
        self.scale = scale

    def fit(self, ksp, maps):
        cfg = SamplerConfig(self.n_steps, self.eta, self.cg_iters, self.rho, self.uncond_every,
                            seed=self.seed)
        ksp, maps = _prepare(ksp, maps, self.scale)
        log: dict = {}
        self.volume_ = reconstruct_dds3d(ksp, maps, None, _checkpoint(self.prior), cfg, run_log=log)
        self.run_log_ = log
        self.loss_trace_ = log["cg_residuals"]
        return self


class KernelResizer(TransformerMixin, BaseEstimator):
    """Resize depthwise kernels ``[C, K, K]`` trained at ``v_train`` for inputs at ``v_recon``."""

    def __init__(self, method="bilinear", v_train=1.0, v_recon=1.0, rescale=True):
        self.method = method
        self.v_train = v_train
        self.v_recon = v_recon
        self.rescale = rescale

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        k = DepthwiseKernel(np.asarray(X))
        K_new = target_size(k.K, self.v_train, self.v_recon)
        return resize_kernel(k, K_new, self.method, self.rescale).taps
