"""DDPM training, checkpoints and noise prediction."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import SliceDataset, augment_diverse, slices_of, to_channels
from .schedule import NoiseSchedule, build_schedule, schedule_from_dict
from .unet import DenoiserConfig, UNet

log = logging.getLogger(__name__)

PARAMS_FILE = "params.pt"
META_FILE = "meta.json"


class TrainingError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step


@dataclass
class Checkpoint:
    config: DenoiserConfig
    schedule: NoiseSchedule
    params: dict
    ema_params: dict
    step: int = 0
    loss_trace: list = field(default_factory=list)
    _model: UNet | None = field(default=None, repr=False, compare=False)

    def model(self) -> UNet:
        """Inference network carrying the EMA weights (built once, then cached)."""
        if self._model is None:
            net = UNet(self.config)
            net.load_state_dict(self.ema_params)
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
            self._model = net
        return self._model

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        torch.save({"params": self.params, "ema_params": self.ema_params}, path / PARAMS_FILE)
        meta = {
            "config": self.config.to_dict(),
            "schedule": self.schedule.to_dict(),
            "train_voxel_sizes": [list(v) for v in self.config.train_voxel_sizes],
            "diverse": self.config.diverse,
            "step": self.step,
            "loss_trace": [float(x) for x in self.loss_trace],
        }
        (path / META_FILE).write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        meta = json.loads((path / META_FILE).read_text())
        blobs = torch.load(path / PARAMS_FILE, map_location="cpu", weights_only=True)
        return cls(DenoiserConfig(**meta["config"]), schedule_from_dict(meta["schedule"]),
                   blobs["params"], blobs["ema_params"], int(meta["step"]),
                   list(meta.get("loss_trace", [])))


def pad_to_multiple(x: torch.Tensor, multiple: int):
    """Pad the last two axes up to a multiple; reflective where the axis is long enough."""
    H, W = x.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph == 0 and pw == 0:
        return x, (H, W)
    pad = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)
    mode = "reflect" if max(pad[0], pad[1]) < W and max(pad[2], pad[3]) < H else "replicate"
    return F.pad(x, pad, mode=mode), (H, W)


def crop_back(x: torch.Tensor, size):
    H, W = size
    oh = (x.shape[-2] - H) // 2
    ow = (x.shape[-1] - W) // 2
    return x[..., oh:oh + H, ow:ow + W]


def _as_kernel_tensor(k) -> torch.Tensor:
    taps = getattr(k, "taps", k)
    taps = torch.as_tensor(np.asarray(taps), dtype=torch.float32)
    if taps.ndim == 3:
        taps = taps[:, None]
    return taps


def denoise_eps(ckpt: Checkpoint, s_t, t, kernel_override=None, chunk: int = 64):
    """Predicted noise for a batch of two-channel slices ``[B, 2, X, Y]`` at per-item steps ``t``.

    Inputs whose spatial size is not divisible by the U-Net's downsampling
    factor are padded and the output cropped back. Returns the same array type
    as ``s_t``.
    """
    is_numpy = not isinstance(s_t, torch.Tensor)
    x = torch.as_tensor(np.asarray(s_t) if is_numpy else s_t, dtype=torch.float32)
    t = torch.as_tensor(np.asarray(t), dtype=torch.long).reshape(-1)
    if t.numel() == 1 and x.shape[0] > 1:
        t = t.expand(x.shape[0])
    if t.shape[0] != x.shape[0]:
        raise ValueError(f"got {t.shape[0]} timesteps for a batch of {x.shape[0]}")
    if (t < 0).any() or (t >= ckpt.schedule.T).any():
        raise ValueError(f"timesteps must lie in [0, {ckpt.schedule.T})")
    net = ckpt.model()
    kernels = None
    if kernel_override is not None:
        if ckpt.config.arch != "inf_unet":
            raise ValueError("kernel overrides need an inf_unet checkpoint")
        kernels = [_as_kernel_tensor(k) for k in kernel_override]
        expected = len(net.depthwise_blocks())
        if len(kernels) != expected:
            raise ValueError(f"expected {expected} override kernels, got {len(kernels)}")
    xp, size = pad_to_multiple(x, ckpt.config.downsample_factor)
    outs = []
    with torch.no_grad():
        for i in range(0, xp.shape[0], chunk):
            outs.append(net(xp[i:i + chunk], t[i:i + chunk], kernels))
    out = crop_back(torch.cat(outs), size)
    return out.numpy() if is_numpy else out


def ddpm_loss(denoiser, batch: torch.Tensor, schedule: NoiseSchedule, generator=None) -> torch.Tensor:
    """Mean squared noise-prediction error with ``t ~ U{0..T-1}`` per item."""
    if batch.ndim != 4 or batch.shape[1] != 2:
        raise ValueError(f"batch must be [B, 2, X, Y], got {tuple(batch.shape)}")
    B = batch.shape[0]
    t = torch.randint(0, schedule.T, (B,), generator=generator)
    eps = torch.randn(batch.shape, generator=generator)
    alpha = torch.as_tensor(schedule.alpha, dtype=torch.float32)[t][:, None, None, None]
    sigma = torch.as_tensor(schedule.sigma, dtype=torch.float32)[t][:, None, None, None]
    pred = denoiser(alpha * batch + sigma * eps, t)
    return ((pred - eps) ** 2).mean()


def _sample_fixed(ds: SliceDataset, groups, group_p, rng, batch_size):
    keys = list(groups)
    idx_list = groups[keys[rng.choice(len(keys), p=group_p)]]
    pick = rng.choice(len(idx_list), size=batch_size, replace=len(idx_list) < batch_size)
    return np.stack([ds.slices[idx_list[i]] for i in pick])


def _sample_diverse(ds: SliceDataset, rng, batch_size, factor_range, planes):
    vol = ds.volumes[rng.integers(len(ds.volumes))]
    vol = augment_diverse(vol, rng, factor_range)
    slices, pix = slices_of(vol, planes[rng.integers(len(planes))])
    pick = rng.choice(len(slices), size=batch_size, replace=len(slices) < batch_size)
    return np.stack([slices[i] for i in pick]), pix


def init_checkpoint(config: DenoiserConfig, schedule: NoiseSchedule, seed: int = 0) -> Checkpoint:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = UNet(config)
    params = copy.deepcopy(net.state_dict())
    return Checkpoint(config, schedule, params, copy.deepcopy(params), 0, [])


def train(config: DenoiserConfig, dataset: SliceDataset, steps: int, *, seed: int = 0,
          lr: float = 1e-4, batch_size: int = 4, ema_decay: float = 0.999,
          ema_start: int = 500, schedule: NoiseSchedule | None = None,
          factor_range=(0.1, 1.0), log_every: int = 200) -> Checkpoint:
    """Adam on the DDPM loss with an EMA copy of the weights.

    With ``config.diverse`` each batch comes from a freshly downsampled source
    volume (factor drawn from ``factor_range``); otherwise from the stored slices.
    """
    if len(dataset) == 0 and not dataset.volumes:
        raise ValueError("training dataset is empty")
    schedule = schedule or build_schedule()
    config = copy.deepcopy(config)
    ckpt = init_checkpoint(config, schedule, seed)
    net = UNet(config)
    net.load_state_dict(ckpt.params)
    ema = {k: v.clone() for k, v in ckpt.params.items()}
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    groups = dataset.shape_groups()
    sizes = np.array([len(v) for v in groups.values()], dtype=float)
    group_p = sizes / sizes.sum() if len(sizes) else None
    planes = sorted(set(dataset.planes)) or ["sagittal", "coronal", "axial"]
    seen = set(dataset.voxel_sizes())
    multiple = config.downsample_factor
    trace = []
    for step in range(steps):
        if config.diverse:
            batch, pix = _sample_diverse(dataset, rng, batch_size, factor_range, planes)
            seen.add(tuple(round(v, 6) for v in pix))
        else:
            batch = _sample_fixed(dataset, groups, group_p, rng, batch_size)
        x, _ = pad_to_multiple(torch.from_numpy(to_channels(batch)), multiple)
        loss = ddpm_loss(net, x, schedule, gen)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingError(step, value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            for k, v in net.state_dict().items():
                if step + 1 > ema_start:
                    ema[k].mul_(ema_decay).add_(v, alpha=1 - ema_decay)
                else:
                    ema[k].copy_(v)
        trace.append(value)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f (avg last %d: %.4f)", step + 1, value, log_every,
                     float(np.mean(trace[-log_every:])))
    config.train_voxel_sizes = sorted(seen) if not config.diverse else [min(seen), max(seen)]
    return Checkpoint(config, schedule, copy.deepcopy(net.state_dict()), ema, steps, trace)
