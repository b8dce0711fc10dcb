"""Noise-prediction U-Net on two-channel (real, imaginary) slices.

The ``inf_unet`` variant swaps the first and last residual blocks for blocks
built around a depthwise ``K x K`` convolution whose kernel can be replaced at
call time by a resized version (see :mod:`resrecon.kernel_interp`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

ARCHS = ("unet", "inf_unet")


@dataclass
class DenoiserConfig:
    arch: str = "unet"
    base_channels: int = 64
    channel_mults: tuple = (1, 2, 2, 4)
    attention_levels: tuple = (2, 3)
    kernel_size: int = 7
    groups: int = 8
    in_channels: int = 2
    out_channels: int = 2
    train_voxel_sizes: list = field(default_factory=list)
    diverse: bool = False

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.in_channels != 2 or self.out_channels != 2:
            raise ValueError("denoiser works on two-channel complex slices")
        if self.kernel_size % 2 != 1:
            raise ValueError(f"depthwise kernel size must be odd, got {self.kernel_size}")
        self.channel_mults = tuple(self.channel_mults)
        self.attention_levels = tuple(self.attention_levels)
        self.train_voxel_sizes = [tuple(float(v) for v in vs) for vs in self.train_voxel_sizes]

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_mults) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_levels"] = list(self.attention_levels)
        d["train_voxel_sizes"] = [list(v) for v in self.train_voxel_sizes]
        return d


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


def _norm(channels, groups):
    return nn.GroupNorm(math.gcd(groups, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups):
        super().__init__()
        self.norm1 = _norm(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = _norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb, kernel=None):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class DepthwiseResBlock(nn.Module):
    """Residual block whose spatial mixing is a single depthwise convolution."""

    def __init__(self, cin, cout, temb_dim, groups, kernel_size):
        super().__init__()
        self.kernel_size = kernel_size
        self.norm1 = _norm(cin, groups)
        self.dw_weight = nn.Parameter(torch.empty(cin, 1, kernel_size, kernel_size))
        self.dw_bias = nn.Parameter(torch.zeros(cin))
        nn.init.kaiming_uniform_(self.dw_weight, a=math.sqrt(5))
        self.pw1 = nn.Conv2d(cin, cout, 1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = _norm(cout, groups)
        self.pw2 = nn.Conv2d(cout, cout, 1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb, kernel=None):
        w = self.dw_weight if kernel is None else kernel
        k = w.shape[-1]
        h = F.conv2d(F.silu(self.norm1(x)), w, self.dw_bias, padding=k // 2, groups=w.shape[0])
        h = self.pw1(h) + self.temb(F.silu(temb))[:, :, None, None]
        h = self.pw2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, channels, groups):
        super().__init__()
        self.norm = _norm(channels, groups)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3, C, H * W).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(C), dim=-1)
        h = torch.einsum("bij,bcj->bci", attn, v).reshape(B, C, H, W)
        return x + self.proj(h)


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        ch = [cfg.base_channels * m for m in cfg.channel_mults]
        temb_dim = 4 * cfg.base_channels
        g = cfg.groups
        self.temb = nn.Sequential(nn.Linear(cfg.base_channels, temb_dim), nn.SiLU(),
                                  nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)
        depthwise = cfg.arch == "inf_unet"
        n = len(ch)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for lvl, c in enumerate(ch):
            if depthwise and lvl == 0:
                block = DepthwiseResBlock(prev, c, temb_dim, g, cfg.kernel_size)
            else:
                block = ResBlock(prev, c, temb_dim, g)
            self.down_blocks.append(block)
            self.down_attn.append(Attention(c, g) if lvl in cfg.attention_levels else nn.Identity())
            self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1) if lvl < n - 1
                                   else nn.Identity())
            prev = c

        self.mid1 = ResBlock(prev, prev, temb_dim, g)
        self.mid_attn = Attention(prev, g)
        self.mid2 = ResBlock(prev, prev, temb_dim, g)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(n)):
            c = ch[lvl]
            if depthwise and lvl == 0:
                block = DepthwiseResBlock(prev + c, c, temb_dim, g, cfg.kernel_size)
            else:
                block = ResBlock(prev + c, c, temb_dim, g)
            self.up_blocks.append(block)
            self.up_attn.append(Attention(c, g) if lvl in cfg.attention_levels else nn.Identity())
            self.upsample.append(nn.Conv2d(c, c, 3, padding=1) if lvl > 0 else nn.Identity())
            prev = c

        self.norm_out = _norm(prev, g)
        self.conv_out = nn.Conv2d(prev, cfg.out_channels, 3, padding=1)

    def depthwise_blocks(self) -> list:
        """The resizable blocks in order (first, last); empty for the standard U-Net."""
        blocks = [self.down_blocks[0], self.up_blocks[-1]]
        return [b for b in blocks if isinstance(b, DepthwiseResBlock)]

    def forward(self, x, t, kernels=None):
        if kernels is not None and len(kernels) != len(self.depthwise_blocks()):
            raise ValueError(f"expected {len(self.depthwise_blocks())} override kernels, "
                             f"got {len(kernels)}")
        first_kernel = kernels[0] if kernels else None
        last_kernel = kernels[-1] if kernels else None
        temb = self.temb(timestep_embedding(t, self.cfg.base_channels))
        h = self.conv_in(x)
        skips = []
        n = len(self.down_blocks)
        for lvl in range(n):
            h = self.down_blocks[lvl](h, temb, first_kernel if lvl == 0 else None)
            h = self.down_attn[lvl](h)
            skips.append(h)
            h = self.downsample[lvl](h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)
        for i in range(n):
            lvl = n - 1 - i
            h = torch.cat([h, skips[lvl]], dim=1)
            h = self.up_blocks[i](h, temb, last_kernel if lvl == 0 else None)
            h = self.up_attn[i](h)
            if lvl > 0:
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
