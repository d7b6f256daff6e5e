"""Toy latent diffusion decoder: schedule, forward noising, conditional denoiser, DDIM."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, InputError
from .ffab import IAF


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # float64, index t-1 for t = 1..T
    alpha_bar: np.ndarray

    def ab(self, t) -> np.ndarray | float:
        """``alpha_bar_t`` with ``alpha_bar_0 = 1``; accepts ints or integer arrays."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise InputError(f"timestep outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule and its cumulative product, in float64."""
    if T < 1 or not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"invalid schedule T={T}, beta {beta_start}->{beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(T, beta, np.cumprod(1.0 - beta))


def _coef(sched: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """``alpha_bar_t`` broadcast against a batched tensor (per-sample if ``t`` is a vector)."""
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    ab = torch.as_tensor(sched.ab(t), dtype=like.dtype, device=like.device)
    if ab.dim() == 1:
        ab = ab.reshape(-1, *([1] * (like.dim() - 1)))
    return ab


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward process ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`` for t in [1, T]."""
    tt = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(tt < 1) or np.any(tt > sched.T):
        raise InputError(f"timestep outside [1, {sched.T}]")
    if eps.shape != z0.shape:
        raise ContractError("noise and latent shapes differ")
    ab = _coef(sched, t, z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t, t_prev, sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    if not (0 <= t_prev < t <= sched.T):
        raise InputError(f"invalid DDIM step {t} -> {t_prev}")
    ab_t = float(sched.ab(t))
    ab_p = float(sched.ab(t_prev))
    z0_hat = (z_t - math.sqrt(1 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_p) * z0_hat + math.sqrt(1 - ab_p) * eps_hat


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """``steps`` evenly spaced indices of [1, T], descending."""
    if steps < 1 or steps > T:
        raise InputError(f"steps must be in [1, {T}], got {steps}")
    ts = np.round(np.linspace(T, 1, steps)).astype(int).tolist()
    return ts


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.gelu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.gelu(self.norm2(h)))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Two-level U-net predicting the noise, conditioned on the content representation.

    ``z_c`` is concatenated to the input and also modulates each level
    through an IAF. There is no text conditioning.

    The prediction is preconditioned around ``z_c``: treating ``z0 ~ N(z_c, s^2)``
    with a learned scalar ``s`` gives a closed-form posterior mean for ``z0`` and
    hence a baseline noise estimate, and the network adds a correction in
    ``z0`` space scaled by the posterior standard deviation. Every coefficient
    stays bounded in t, so DDIM's clean estimate at ``t = T`` does not blow up
    the way a bare noise head's does (its error is divided by ``sqrt(ab_T)``).
    With the zero-initialised output layer the sampler returns the posterior
    mean path.
    """

    def __init__(self, content_channels: int = 16, base: int = 32, T: int = 1000, temb: int = 64,
                 sched: Optional[NoiseSchedule] = None):
        super().__init__()
        cc = content_channels
        self.T = T
        sched = sched or make_schedule(T)
        if sched.T != T:
            raise ConfigError(f"schedule has {sched.T} steps, denoiser expects {T}")
        self.register_buffer("alpha_bar", torch.from_numpy(sched.ab(np.arange(T + 1))), persistent=False)
        self.log_scale = nn.Parameter(torch.tensor(math.log(0.5)))
        self.time_table = nn.Embedding(T + 1, temb)
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.GELU(), nn.Linear(temb, temb))
        self.inp = nn.Conv2d(2 * cc, base, 3, padding=1)
        self.res0 = ResBlock(base, base, temb)
        self.iaf0 = IAF(cc, base)
        self.down = nn.Conv2d(base, 2 * base, 3, stride=2, padding=1)
        self.res1 = ResBlock(2 * base, 2 * base, temb)
        self.iaf1 = IAF(cc, 2 * base)
        self.mid = ResBlock(2 * base, 2 * base, temb)
        self.up = nn.Conv2d(2 * base, base, 3, padding=1)
        self.res2 = ResBlock(2 * base, base, temb)
        self.out_norm = nn.GroupNorm(8, base)
        self.out = nn.Conv2d(base, cc, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z_t: torch.Tensor, t, z_c: torch.Tensor) -> torch.Tensor:
        if z_t.shape != z_c.shape:
            raise ContractError(f"z_t {tuple(z_t.shape)} and z_c {tuple(z_c.shape)} differ")
        B = z_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long, device=z_t.device).reshape(-1).expand(B)
        emb = self.time_mlp(self.time_table(t)).to(z_t.dtype)
        h0 = self.iaf0(self.res0(self.inp(torch.cat([z_t, z_c], dim=1)), emb), z_c)
        h1 = self.down(h0)
        zc1 = F.adaptive_avg_pool2d(z_c, h1.shape[-2:])
        h1 = self.iaf1(self.res1(h1, emb), zc1)
        h1 = self.mid(h1, emb)
        up = self.up(F.interpolate(h1, size=h0.shape[-2:], mode="nearest"))
        h = self.res2(torch.cat([up, h0], dim=1), emb)
        r = self.out(F.gelu(self.out_norm(h)))
        ab = self.alpha_bar[t].to(z_t.dtype).reshape(B, 1, 1, 1)
        s2 = torch.exp(2 * self.log_scale).to(z_t.dtype)
        d = ab * s2 + 1 - ab
        base = (1 - ab).sqrt() * (z_t - ab.sqrt() * z_c)
        return (base - (ab * s2 * d).sqrt() * r) / d


def denoise_eps(z_t: torch.Tensor, t, z_c: torch.Tensor, params: Denoiser) -> torch.Tensor:
    squeeze = z_t.dim() == 3
    if squeeze:
        z_t, z_c = z_t.unsqueeze(0), z_c.unsqueeze(0)
    out = params(z_t, t, z_c)
    return out[0] if squeeze else out


@torch.no_grad()
def ddim_sample(
    z_c: torch.Tensor,
    steps: int,
    seed: int,
    sched: NoiseSchedule,
    params: Denoiser,
    z_T: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Run ``steps`` deterministic DDIM updates from seeded Gaussian noise down to t = 0."""
    if z_T is None:
        g = torch.Generator().manual_seed(seed)
        z_T = torch.randn(z_c.shape, generator=g, dtype=z_c.dtype)
    z = z_T
    ts = ddim_timesteps(sched.T, steps) + [0]
    for t, t_prev in zip(ts[:-1], ts[1:]):
        z = ddim_step(z, denoise_eps(z, t, z_c, params), t, t_prev, sched)
    return z


def noise_loss(
    z0: torch.Tensor,
    t,
    eps: torch.Tensor,
    z_c: torch.Tensor,
    params: Denoiser,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Mean squared error between the true noise and the denoiser's prediction."""
    z_t = add_noise(z0, t, eps, sched)
    return F.mse_loss(denoise_eps(z_t, t, z_c, params), eps)
