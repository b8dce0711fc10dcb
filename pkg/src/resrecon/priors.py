"""Phantom-trained priors described by a small spec, cached on disk by content hash."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .diffusion.data import extract_slices
from .diffusion.schedule import build_schedule
from .diffusion.training import Checkpoint, train
from .diffusion.unet import DenoiserConfig
from .volume import ComplexVolume, generate_phantom, trilinear_downsample

log = logging.getLogger(__name__)

# ~2M parameters; small enough to train in minutes on a CPU
TOY_DENOISER = {"base_channels": 16, "channel_mults": [1, 2, 4, 8], "attention_levels": [3]}


def default_cache_dir() -> Path:
    return Path(os.environ.get("RESRECON_CACHE", Path.home() / ".cache" / "resrecon"))


@dataclass
class PriorSpec:
    """Training recipe: phantoms ``seeds`` at ``dims``, optionally downsampled by ``factor``."""

    seeds: list = field(default_factory=lambda: list(range(20)))
    dims: list = field(default_factory=lambda: [64, 64, 64])
    voxel_size: float = 1.0
    factor: float = 1.0  # < 1 trains at a coarser voxel size (voxel_size / factor)
    diverse: bool = False
    factor_range: list = field(default_factory=lambda: [0.1, 1.0])
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    ema_start: int = 500
    seed: int = 0
    model: dict = field(default_factory=lambda: dict(TOY_DENOISER))

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def v_train(self) -> float:
        return self.voxel_size / self.factor

    def volumes(self) -> list:
        out = []
        for s in self.seeds:
            vol = generate_phantom(s, tuple(self.dims), voxel_size=(self.voxel_size,) * 3)
            if self.factor != 1.0:
                vol = trilinear_downsample(vol, self.factor)
            out.append(vol)
        return out


def train_prior(spec: PriorSpec) -> Checkpoint:
    cfg = DenoiserConfig(**spec.model, diverse=spec.diverse)
    ds = extract_slices(spec.volumes())
    return train(cfg, ds, spec.steps, seed=spec.seed, lr=spec.lr, batch_size=spec.batch_size,
                 ema_start=spec.ema_start, schedule=build_schedule(),
                 factor_range=tuple(spec.factor_range))


def load_or_train(spec: PriorSpec, cache_dir=None) -> Checkpoint:
    """Reuse a cached checkpoint for an identical spec, otherwise train and store one."""
    path = Path(cache_dir or default_cache_dir()) / "priors" / spec.key()
    if (path / "meta.json").exists():
        return Checkpoint.load(path)
    log.info("training prior %s (%d steps)", spec.key(), spec.steps)
    ckpt = train_prior(spec)
    ckpt.save(path)
    (path / "spec.json").write_text(json.dumps(asdict(spec), indent=2))
    return ckpt


def phantom_suite(seeds, dims, voxel_size: float = 1.0) -> list[ComplexVolume]:
    return [generate_phantom(s, tuple(dims), voxel_size=(voxel_size,) * 3) for s in seeds]
