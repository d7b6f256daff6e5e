"""Analysis, hyper and synthesis transforms built from FFAB blocks and IAF injection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, InputError
from .ffab import IAF, FFABBlock, FFABConfig


@dataclass(frozen=True)
class CodecConfig:
    base_channels: int = 32
    latent_channels: int = 48
    hyper_channels: int = 32
    down_factor: int = 8
    num_heads: int = 8
    window_base: int = 2
    fft_block: int = 8
    stage_depth: int = 2
    content_channels: int = 16
    content_down: int = 4

    def validate(self) -> "CodecConfig":
        if self.latent_channels % 24:
            raise ConfigError(f"latent_channels must be divisible by 24, got {self.latent_channels}")
        df = self.down_factor
        if df < 2 or df & (df - 1):
            raise ConfigError(f"down_factor must be a power of 2, got {df}")
        if df < self.content_down:
            raise ConfigError("down_factor must be at least the content-space factor")
        for c in (self.base_channels, self.latent_channels):
            if c % self.num_heads:
                raise ConfigError(f"{c} channels not divisible by {self.num_heads} heads")
        FFABConfig(self.base_channels, self.num_heads, self.window_base, self.fft_block).validate()
        return self

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.down_factor))

    @property
    def hyper_feat_channels(self) -> int:
        return 2 * self.latent_channels

    def ffab(self, channels: int) -> FFABConfig:
        return FFABConfig(channels, self.num_heads, self.window_base, self.fft_block)

    def to_dict(self) -> dict:
        return asdict(self)


TOY_PRESET = CodecConfig()
FULL_PRESET = CodecConfig(base_channels=128, latent_channels=192, hyper_channels=128,
                          down_factor=16, window_base=4)


def pad_to_multiple(x: torch.Tensor, m: int) -> torch.Tensor:
    """Replicate-pad the bottom/right edges so H and W are multiples of ``m``."""
    H, W = x.shape[-2:]
    ph, pw = (-H) % m, (-W) % m
    if ph == 0 and pw == 0:
        return x
    squeeze = x.dim() == 3
    xb = x.unsqueeze(0) if squeeze else x
    xb = F.pad(xb, (0, pw, 0, ph), mode="replicate")
    return xb[0] if squeeze else xb


def conv_down(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 5, stride=2, padding=2)


class Up(nn.Module):
    """Nearest-neighbour x2 upsampling followed by a 3x3 convolution."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Stage(nn.Sequential):
    def __init__(self, cfg: CodecConfig, channels: int):
        super().__init__(*(FFABBlock(cfg.ffab(channels)) for _ in range(cfg.stage_depth)))


class Analysis(nn.Module):
    """``y = F_a(x, y_d)``: strided convs and FFAB stages, IAF after each stage."""

    def __init__(self, cfg: CodecConfig, prior_channels: Sequence[int]):
        super().__init__()
        self.cfg = cfg.validate()
        n = cfg.num_stages
        if len(prior_channels) != n:
            raise ConfigError(f"need {n} prior levels, got {len(prior_channels)}")
        widths = [cfg.base_channels] * (n - 1) + [cfg.latent_channels]
        self.downs = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.iafs = nn.ModuleList()
        prev = 3
        for c, pc in zip(widths, prior_channels):
            self.downs.append(conv_down(prev, c))
            self.stages.append(Stage(cfg, c))
            self.iafs.append(IAF(pc, c))
            prev = c

    def forward(self, x: torch.Tensor, y_d: Sequence[torch.Tensor]) -> torch.Tensor:
        df = self.cfg.down_factor
        if x.shape[-2] < df or x.shape[-1] < df:
            raise InputError(f"image {tuple(x.shape[-2:])} smaller than down factor {df}")
        x = pad_to_multiple(x, df)
        for down, stage, iaf, level in zip(self.downs, self.stages, self.iafs, y_d):
            x = iaf(stage(down(x)), level)
        return x


class HyperAnalysis(nn.Module):
    """``z = H_a(y, y_d)``: IAF from the coarsest prior level, then two stride-2 convs."""

    def __init__(self, cfg: CodecConfig, prior_channels: int):
        super().__init__()
        self.iaf = IAF(prior_channels, cfg.latent_channels)
        self.conv1 = conv_down(cfg.latent_channels, cfg.hyper_channels)
        self.conv2 = conv_down(cfg.hyper_channels, cfg.hyper_channels)

    def forward(self, y: torch.Tensor, y_d_coarse: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.gelu(self.conv1(self.iaf(y, y_d_coarse))))


class HyperSynthesis(nn.Module):
    """Upsamples ``z_hat`` x4 back to latent resolution. Used for both ``H_d`` and ``H_d^w``."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.up1 = Up(cfg.hyper_channels, cfg.latent_channels)
        self.up2 = Up(cfg.latent_channels, cfg.hyper_feat_channels)

    def forward(self, z_hat: torch.Tensor, size: Optional[Sequence[int]] = None) -> torch.Tensor:
        out = self.up2(F.gelu(self.up1(z_hat)))
        if size is not None:
            # latents whose side is not a multiple of 4 give a slightly larger z grid
            out = out[..., : size[0], : size[1]]
        return out


class Synthesis(nn.Module):
    """``z_c = F_d(y_hat, w)``: IAF of ``w`` at the first stage, FFAB stages, upsampling to content space."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg.validate()
        M, N = cfg.latent_channels, cfg.base_channels
        self.iaf = IAF(cfg.hyper_feat_channels, M)
        self.first = Stage(cfg, M)
        n_up = int(math.log2(cfg.down_factor // cfg.content_down))
        self.ups = nn.ModuleList()
        self.stages = nn.ModuleList()
        prev = M
        for _ in range(n_up):
            self.ups.append(Up(prev, N))
            self.stages.append(Stage(cfg, N))
            prev = N
        self.out = nn.Conv2d(prev, cfg.content_channels, 3, padding=1)

    def forward(self, y_hat: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if w.shape[-2:] != y_hat.shape[-2:]:
            raise ContractError(f"conditioning {tuple(w.shape)} does not match latent {tuple(y_hat.shape)}")
        x = self.first(self.iaf(y_hat, w))
        for up, stage in zip(self.ups, self.stages):
            x = stage(up(x))
        return self.out(x)


def _batched(fn, *tensors):
    squeeze = tensors[0].dim() == 3
    if squeeze:
        tensors = [t.unsqueeze(0) for t in tensors]
    out = fn(*tensors)
    return out[0] if squeeze else out


def analysis(x: torch.Tensor, y_d: Sequence[torch.Tensor], params: Analysis) -> torch.Tensor:
    squeeze = x.dim() == 3
    levels = [l.unsqueeze(0) for l in y_d] if squeeze else list(y_d)
    out = params(x.unsqueeze(0) if squeeze else x, levels)
    return out[0] if squeeze else out


def hyper_encode(y: torch.Tensor, y_d: Sequence[torch.Tensor], params: HyperAnalysis) -> torch.Tensor:
    return _batched(params, y, y_d[-1])


def hyper_decode(z_hat: torch.Tensor, params: HyperSynthesis, size: Optional[Sequence[int]] = None) -> torch.Tensor:
    return _batched(lambda z: params(z, size), z_hat)


hyper_decode_w = hyper_decode


def synthesis(y_hat: torch.Tensor, w: torch.Tensor, params: Synthesis) -> torch.Tensor:
    return _batched(params, y_hat, w)
