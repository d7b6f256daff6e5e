"""Quantisation, entropy models and rate estimation.

``y`` is coded with a mean-scale Gaussian conditional whose parameters for
each of ten channel slices come from the hyper features plus every slice
decoded before it. ``z`` uses a learned non-parametric factorised prior.
"""

from __future__ import annotations

import copy
import math
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rangecoder as rc
from .errors import ConfigError, ContractError

SIGMA_MIN = 0.04
LIKELIHOOD_MIN = 1e-9
BITS_FLOOR = 1.0 / 65536
SLICE_PATTERN = (1, 1, 2, 2, 2, 2, 3, 3, 4, 4)


class _LowerBound(torch.autograd.Function):
    # clamp whose gradient still flows when it would move the input up
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        pass_through = (x >= ctx.bound) | (grad < 0)
        return grad * pass_through, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


def round_half_away(v: torch.Tensor) -> torch.Tensor:
    return torch.sign(v) * torch.floor(v.abs() + 0.5)


def quantize(
    v: torch.Tensor,
    mode: str = "round",
    offset: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Quantiser ``Q``.

    ``round`` rounds half away from zero, ``noise`` adds U[-0.5, 0.5) for the
    training rate path, ``ste`` rounds in the forward pass with an identity
    gradient. With ``offset`` the residual ``v - offset`` is quantised and the
    offset added back.
    """
    r = v if offset is None else v - offset
    if mode == "round":
        q = round_half_away(r)
    elif mode == "noise":
        u = torch.rand(r.shape, generator=generator, dtype=r.dtype, device=r.device) - 0.5
        q = r + u
    elif mode == "ste":
        q = r + (round_half_away(r) - r).detach()
    else:
        raise ConfigError(f"unknown quantisation mode {mode!r}")
    return q if offset is None else q + offset


def slice_layout(M: int) -> list[int]:
    """Channel counts of the ten uneven slices, ``(M/24) * [1,1,2,2,2,2,3,3,4,4]``."""
    if M <= 0 or M % 24:
        raise ConfigError(f"latent channels must be a positive multiple of 24, got {M}")
    unit = M // 24
    return [unit * k for k in SLICE_PATTERN]


class GaussianParams(NamedTuple):
    mu: torch.Tensor
    sigma: torch.Tensor


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def gaussian_likelihood(v: torch.Tensor, p: GaussianParams) -> torch.Tensor:
    """Probability mass of the unit bin centred on ``v`` under N(mu, sigma)."""
    sigma = lower_bound(p.sigma, SIGMA_MIN)
    d = (v - p.mu).abs()
    upper = _std_normal_cdf((0.5 - d) / sigma)
    lower = _std_normal_cdf((-0.5 - d) / sigma)
    return upper - lower


def bits_from_likelihood(lik: torch.Tensor) -> torch.Tensor:
    """Per-element code length in bits, with the likelihood and bit floors applied."""
    bits = -torch.log2(lower_bound(lik, LIKELIHOOD_MIN))
    return lower_bound(bits, BITS_FLOOR)


def rate_estimate(v_hat: torch.Tensor, p) -> torch.Tensor:
    """Cross-entropy (bits) of ``v_hat`` under Gaussian params or a factorised prior."""
    if isinstance(p, GaussianParams):
        lik = gaussian_likelihood(v_hat, p)
    elif isinstance(p, FactorizedPrior):
        lik = p.likelihood(v_hat)
    else:
        raise ContractError(f"unsupported entropy parameters {type(p).__name__}")
    return bits_from_likelihood(lik).sum()


def gaussian_pmf_table(sigma: np.ndarray) -> np.ndarray:
    """Integer-bin probabilities over [-64, 64] of N(0, sigma), one row per element."""
    from scipy.special import ndtr

    sigma = np.maximum(np.asarray(sigma, dtype=np.float64).reshape(-1, 1), SIGMA_MIN)
    k = np.arange(rc.ALPHABET_MIN, rc.ALPHABET_MAX + 1, dtype=np.float64)[None, :]
    d = np.abs(k)
    return ndtr((0.5 - d) / sigma) - ndtr((-0.5 - d) / sigma)


def gaussian_cdf_table(sigma: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(sigma, torch.Tensor):
        sigma = sigma.detach().to(torch.float64).cpu().numpy()
    return rc.freqs_to_cdf(rc.pmf_to_freqs(gaussian_pmf_table(sigma)))


def encode_stream(symbols, p) -> bytes:
    """Range-code integer ``symbols`` (already mean-removed) under ``p``.

    ``p`` is a :class:`GaussianParams` (only ``sigma`` matters once the mean
    is removed), a :class:`FactorizedPrior` (symbols shaped ``(C, H, W)``) or
    a ready cdf table.
    """
    symbols = _as_int_array(symbols)
    return rc.encode_symbols(symbols.reshape(-1), _cdf_for(symbols.shape, p))


def decode_stream(data: bytes, p, shape: Sequence[int]) -> np.ndarray:
    return rc.decode_symbols(data, _cdf_for(tuple(shape), p)).reshape(shape)


def _as_int_array(symbols) -> np.ndarray:
    if isinstance(symbols, torch.Tensor):
        symbols = symbols.detach().cpu().numpy()
    arr = np.asarray(symbols)
    if arr.size and not np.all(np.equal(np.round(arr), arr)):
        raise ContractError("symbols must lie on the integer grid")
    return arr.astype(np.int64)


def _cdf_for(shape: tuple, p) -> np.ndarray:
    n = int(np.prod(shape)) if len(shape) else 1
    if isinstance(p, GaussianParams):
        if tuple(p.sigma.shape) != tuple(shape):
            raise ContractError(f"sigma shape {tuple(p.sigma.shape)} != symbols shape {tuple(shape)}")
        return gaussian_cdf_table(p.sigma)
    if isinstance(p, FactorizedPrior):
        return p.cdf_rows(shape)
    cdf = np.asarray(p, dtype=np.int64)
    if cdf.reshape(-1, rc.NUM_SYMBOLS + 1).shape[0] != n:
        raise ContractError("cdf table does not match symbol count")
    return cdf


def coded_bits(symbols, p) -> float:
    """Ideal code length under the coder's quantised tables (for diagnostics)."""
    symbols = _as_int_array(symbols)
    return rc.symbol_bits(symbols, _cdf_for(symbols.shape, p).reshape(-1, rc.NUM_SYMBOLS + 1))


class FactorizedPrior(nn.Module):
    """Per-channel learned monotone CDF (non-parametric factorised density).

    The CDF of channel ``c`` is ``sigmoid(g_c(x))`` where ``g_c`` is a small
    chain of affine maps with softplus-positive matrices and
    ``x + tanh(a) * tanh(x)`` nonlinearities, hence monotone in ``x``.
    """

    def __init__(self, channels: int, filters: Sequence[int] = (3, 3, 3), init_scale: float = 4.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        # x: (C, 1, n)
        logits = x
        for i, m in enumerate(self.matrices):
            logits = torch.matmul(F.softplus(m), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """CDF at ``x`` shaped ``(C, n)``."""
        return torch.sigmoid(self.logits_cdf(x.unsqueeze(1))).squeeze(1)

    def likelihood(self, v: torch.Tensor) -> torch.Tensor:
        """Bin masses for ``v`` shaped ``(B, C, H, W)`` or ``(C, H, W)``."""
        squeeze = v.dim() == 3
        if squeeze:
            v = v.unsqueeze(0)
        B, C, H, W = v.shape
        flat = v.permute(1, 0, 2, 3).reshape(C, 1, -1)
        lo = self.logits_cdf(flat - 0.5)
        hi = self.logits_cdf(flat + 0.5)
        # evaluate on the side of the median where the sigmoid is not saturated
        sign = -torch.sign(lo + hi).detach()
        lik = (torch.sigmoid(sign * hi) - torch.sigmoid(sign * lo)).abs()
        lik = lik.reshape(C, B, H, W).permute(1, 0, 2, 3)
        return lik[0] if squeeze else lik

    @torch.no_grad()
    def pmf_table(self) -> np.ndarray:
        """(C, 129) integer-bin masses over [-64, 64], in float64."""
        k = torch.arange(rc.ALPHABET_MIN, rc.ALPHABET_MAX + 1, dtype=torch.float64)
        edges = torch.cat([k - 0.5, k[-1:] + 0.5])
        double = self._double_copy()
        c = double.cdf(edges.expand(self.channels, -1))
        if not torch.all(c[:, 1:] >= c[:, :-1]):
            raise AssertionError("learned CDF is not monotone")
        return (c[:, 1:] - c[:, :-1]).numpy()

    def _double_copy(self) -> "FactorizedPrior":
        return copy.deepcopy(self).double()

    def cdf_table(self) -> np.ndarray:
        """(C, 131) cumulative frequencies used by the range coder."""
        return rc.freqs_to_cdf(rc.pmf_to_freqs(self.pmf_table()))

    def cdf_rows(self, shape: Sequence[int]) -> np.ndarray:
        if len(shape) != 3 or shape[0] != self.channels:
            raise ContractError(f"factorised symbols must be (C={self.channels}, H, W), got {tuple(shape)}")
        table = self.cdf_table()
        C, H, W = shape
        return np.repeat(table, H * W, axis=0)


def factorized_bits(z_hat: torch.Tensor, prior: FactorizedPrior) -> torch.Tensor:
    return rate_estimate(z_hat, prior)


class SliceNet(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv3 = nn.Conv2d(hidden, 2 * out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv3(F.gelu(self.conv2(F.gelu(self.conv1(x)))))


class ChannelAutoregressive(nn.Module):
    """Gaussian parameters for slice ``i`` from hyper features and slices ``< i``."""

    def __init__(self, latent_channels: int, hyper_feat_channels: int, hidden: Optional[int] = None):
        super().__init__()
        self.sizes = slice_layout(latent_channels)
        hidden = hidden or max(32, latent_channels)
        self.nets = nn.ModuleList()
        seen = 0
        for size in self.sizes:
            self.nets.append(SliceNet(hyper_feat_channels + seen, size, hidden))
            seen += size

    def split(self, y: torch.Tensor) -> list[torch.Tensor]:
        return list(torch.split(y, self.sizes, dim=-3))

    def params(self, hyper_feats: torch.Tensor, decoded: Sequence[torch.Tensor], i: int) -> GaussianParams:
        if not 0 <= i < len(self.sizes):
            raise ContractError(f"slice index {i} out of range")
        if len(decoded) < i:
            raise ContractError(f"slice {i} requested with only {len(decoded)} slices decoded")
        x = torch.cat([hyper_feats, *decoded[:i]], dim=-3) if i else hyper_feats
        squeeze = x.dim() == 3
        out = self.nets[i](x.unsqueeze(0) if squeeze else x)
        if squeeze:
            out = out[0]
        mu, raw = out.chunk(2, dim=-3)
        sigma = lower_bound(F.softplus(raw) + 1e-3, SIGMA_MIN)
        return GaussianParams(mu, sigma)


def char_params(hyper_feats, decoded_slices, i, params: ChannelAutoregressive) -> GaussianParams:
    return params.params(hyper_feats, decoded_slices, i)
