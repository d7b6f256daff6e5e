"""FFAB block: band-split window attention plus a frequency-modulated FFN.

Four groups of attention heads look through differently shaped windows
(large square, small square, tall, wide), a feed-forward network is followed
by a learnable per-frequency gain on blocked FFTs, and an injection affine
transform lets external prior features modulate the result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError
from .numerics import WindowSpec, fft2, ifft2, window_merge, window_partition

BAND_NAMES = ("LL", "HH", "HL", "LH")


@dataclass(frozen=True)
class FFABConfig:
    channels: int
    num_heads: int = 8
    window_base: int = 2
    fft_block: int = 8
    ffn_ratio: int = 2

    def validate(self) -> "FFABConfig":
        if self.channels < 1 or self.num_heads < 1 or self.fft_block < 1:
            raise ConfigError(f"non-positive size in {self}")
        if self.num_heads % 4:
            raise ConfigError(f"num_heads must be divisible by 4, got {self.num_heads}")
        if self.window_base < 2 or self.window_base % 2:
            raise ConfigError(f"window_base must be a positive even integer, got {self.window_base}")
        if self.channels % self.num_heads:
            raise ConfigError(f"channels ({self.channels}) not divisible by heads ({self.num_heads})")
        return self


class BandShapes(NamedTuple):
    ll: WindowSpec
    hh: WindowSpec
    hl: WindowSpec
    lh: WindowSpec


def band_shapes(cfg: FFABConfig) -> BandShapes:
    """Window geometry of the four head groups for window base ``s``.

    >>> band_shapes(FFABConfig(channels=8, window_base=8))
    BandShapes(ll=WindowSpec(height=16, width=16), hh=WindowSpec(height=4, width=4), hl=WindowSpec(height=16, width=4), lh=WindowSpec(height=4, width=16))
    """
    if cfg.num_heads % 4:
        raise ConfigError(f"num_heads must be divisible by 4, got {cfg.num_heads}")
    s = cfg.window_base
    if s < 2 or s % 2:
        raise ConfigError(f"window_base must be a positive even integer, got {s}")
    big, small = 2 * s, s // 2
    return BandShapes(
        WindowSpec(big, big),
        WindowSpec(small, small),
        WindowSpec(big, small),
        WindowSpec(small, big),
    )


def head_band(k: int, num_heads: int) -> str:
    """Band name for 1-based head index ``k``."""
    if not 1 <= k <= num_heads or num_heads % 4:
        raise ConfigError(f"head {k} invalid for {num_heads} heads")
    return BAND_NAMES[(k - 1) // (num_heads // 4)]


class ChannelNorm(nn.Module):
    """Layer norm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=1, keepdim=True)
        var = (x - mu).pow(2).mean(dim=1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def relative_position_index(w: WindowSpec) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(w.height), torch.arange(w.width), indexing="ij"))
    coords = coords.flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel[0] += w.height - 1
    rel[1] += w.width - 1
    return rel[0] * (2 * w.width - 1) + rel[1]


def window_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    window: WindowSpec,
    heads: int,
    bias: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention inside windows of one shape.

    ``q``, ``k``, ``v`` are ``(B, heads*d, H, W)``. Zero padding added by the
    partition is masked out of every softmax. ``bias`` is ``(heads, n, n)``
    with ``n = window.height * window.width``.
    """
    B, C, H, W = q.shape
    d = C // heads
    qw, info = window_partition(q, window)
    kw, _ = window_partition(k, window)
    vw, _ = window_partition(v, window)
    nw = qw.shape[0]
    n = window.height * window.width
    qw = qw.reshape(nw, heads, d, n).transpose(-1, -2)
    kw = kw.reshape(nw, heads, d, n)
    vw = vw.reshape(nw, heads, d, n).transpose(-1, -2)

    logits = (qw @ kw) * d ** -0.5
    if bias is not None:
        logits = logits + bias.unsqueeze(0)
    if info.padded_height != H or info.padded_width != W:
        valid = torch.ones(1, 1, H, W, dtype=q.dtype, device=q.device)
        vmask, _ = window_partition(valid.expand(B, 1, H, W), window)
        vmask = vmask.reshape(nw, 1, 1, n) > 0
        logits = logits.masked_fill(~vmask, float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    out = (attn @ vw).transpose(-1, -2).reshape(nw, C, window.height, window.width)
    out = window_merge(out, info)
    if return_weights:
        return out, attn
    return out


class FFABAttention(nn.Module):
    """Multi-head window attention with heads split evenly over the four bands."""

    def __init__(self, cfg: FFABConfig):
        super().__init__()
        cfg = cfg.validate()
        self.cfg = cfg
        self.shapes = band_shapes(cfg)
        C, K = cfg.channels, cfg.num_heads
        self.group_heads = K // 4
        self.qkv = nn.Conv2d(C, 3 * C, 1)
        self.proj = nn.Conv2d(C, C, 1)
        self.bias_tables = nn.ParameterList(
            nn.Parameter(torch.zeros((2 * w.height - 1) * (2 * w.width - 1), self.group_heads))
            for w in self.shapes
        )
        for i, w in enumerate(self.shapes):
            self.register_buffer(f"rel_index_{i}", relative_position_index(w), persistent=False)

    def position_bias(self, group: int) -> torch.Tensor:
        w = self.shapes[group]
        n = w.height * w.width
        index = getattr(self, f"rel_index_{group}")
        table = self.bias_tables[group]
        return table[index.reshape(-1)].reshape(n, n, self.group_heads).permute(2, 0, 1)

    def group_outputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-band attention outputs before the output projection, in LL, HH, HL, LH order."""
        C = self.cfg.channels
        if x.shape[1] != C:
            raise ContractError(f"expected {C} channels, got {x.shape[1]}")
        q, k, v = self.qkv(x).split(C, dim=1)
        gc = C // 4
        outs = []
        for g, w in enumerate(self.shapes):
            sl = slice(g * gc, (g + 1) * gc)
            outs.append(window_attention(q[:, sl], k[:, sl], v[:, sl], w, self.group_heads,
                                         bias=self.position_bias(g)))
        return outs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat(self.group_outputs(x), dim=1))


def ffab_attention(x: torch.Tensor, params: FFABAttention, cfg: Optional[FFABConfig] = None) -> torch.Tensor:
    if cfg is not None and cfg.channels % cfg.num_heads:
        raise ConfigError("channels must be divisible by num_heads")
    squeeze = x.dim() == 3
    out = params(x.unsqueeze(0) if squeeze else x)
    return out[0] if squeeze else out


def symmetric_filter(filt: torch.Tensor) -> torch.Tensor:
    """Average a real gain table with its point reflection (u,v) -> (-u,-v) mod size."""
    flipped = torch.roll(torch.flip(filt, dims=(-2, -1)), shifts=(1, 1), dims=(-2, -1))
    return 0.5 * (filt + flipped)


class FreqModFFN(nn.Module):
    """Feed-forward network followed by blockwise frequency gains.

    Gains are real and shared by the channels of each head group, so the
    channel axis is split into four contiguous groups.
    """

    def __init__(self, cfg: FFABConfig):
        super().__init__()
        C = cfg.channels
        hidden = C * cfg.ffn_ratio
        self.cfg = cfg
        self.fc1 = nn.Conv2d(C, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, C, 1)
        self.freq_filter = nn.Parameter(torch.ones(4, cfg.fft_block, cfg.fft_block))

    def ffn(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))

    def modulate(self, x: torch.Tensor) -> torch.Tensor:
        b = self.cfg.fft_block
        B, C, H, W = x.shape
        blocks, info = window_partition(x, WindowSpec(b, b))
        n = blocks.shape[0]
        spec = fft2(blocks.reshape(n, 4, C // 4, b, b))
        gain = symmetric_filter(self.freq_filter).to(x.dtype)
        out = ifft2(spec * gain[None, :, None]).real
        return window_merge(out.reshape(n, C, b, b), info)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.modulate(self.ffn(x))


def freq_mod_ffn(x: torch.Tensor, params: FreqModFFN, cfg: Optional[FFABConfig] = None) -> torch.Tensor:
    squeeze = x.dim() == 3
    out = params(x.unsqueeze(0) if squeeze else x)
    return out[0] if squeeze else out


class FFABBlock(nn.Module):
    """Residual band block: ``f_k = F_RB(f_{k-1}) + f_{k-1}``."""

    def __init__(self, cfg: FFABConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.norm1 = ChannelNorm(cfg.channels)
        self.attn = FFABAttention(cfg)
        self.norm2 = ChannelNorm(cfg.channels)
        self.ffn = FreqModFFN(cfg)

    def branch(self, f: torch.Tensor) -> torch.Tensor:
        """The residual branch ``F_RB``."""
        a = self.attn(self.norm1(f))
        return a + self.ffn(self.norm2(f + a))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f + self.branch(f)

    def zero_branch_(self) -> "FFABBlock":
        """Zero the last layer of both sub-branches so the block starts as identity."""
        with torch.no_grad():
            for p in (self.attn.proj.weight, self.attn.proj.bias, self.ffn.fc2.weight, self.ffn.fc2.bias):
                p.zero_()
        return self


def ffab_block(f_prev: torch.Tensor, params: FFABBlock, cfg: Optional[FFABConfig] = None) -> torch.Tensor:
    squeeze = f_prev.dim() == 3
    out = params(f_prev.unsqueeze(0) if squeeze else f_prev)
    return out[0] if squeeze else out


class AffineParams(NamedTuple):
    gamma: torch.Tensor
    beta: torch.Tensor


class IAF(nn.Module):
    """Injection affine transform: 1x1 convs predict scale and shift fields from prior features."""

    def __init__(self, prior_channels: int, channels: int):
        super().__init__()
        self.gamma = nn.Conv2d(prior_channels, channels, 1)
        self.beta = nn.Conv2d(prior_channels, channels, 1)
        for conv in (self.gamma, self.beta):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def params(self, y_d: torch.Tensor, size: Optional[tuple[int, int]] = None) -> AffineParams:
        if size is not None and tuple(y_d.shape[-2:]) != tuple(size):
            raise ContractError(f"prior features {tuple(y_d.shape[-2:])} do not match site {tuple(size)}")
        return AffineParams(self.gamma(y_d), self.beta(y_d))

    def forward(self, y: torch.Tensor, y_d: torch.Tensor) -> torch.Tensor:
        return iaf_apply(y, self.params(y_d, tuple(y.shape[-2:])))


def iaf_params(y_d_level: torch.Tensor, weights: IAF, size: Optional[tuple[int, int]] = None) -> AffineParams:
    squeeze = y_d_level.dim() == 3
    p = weights.params(y_d_level.unsqueeze(0) if squeeze else y_d_level, size)
    if squeeze:
        return AffineParams(p.gamma[0], p.beta[0])
    return p


def iaf_apply(y: torch.Tensor, p: AffineParams) -> torch.Tensor:
    if p.gamma.shape != y.shape or p.beta.shape != y.shape:
        raise ContractError(
            f"affine fields {tuple(p.gamma.shape)}/{tuple(p.beta.shape)} do not match feature {tuple(y.shape)}"
        )
    return y * (1 + p.gamma) + p.beta
