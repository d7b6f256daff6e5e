"""Tensor substrate: window tiling, block FFT helpers, spectra and gradient checks.

Everything here works on ``torch.Tensor`` so that autograd flows through it.
Spatial ops accept either ``(C, H, W)`` or batched ``(B, C, H, W)`` inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import ContractError, ConfigError

# Bins whose amplitude falls below this are treated as having no phase.
ZERO_AMPLITUDE = 1e-8


class WindowSpec(NamedTuple):
    height: int
    width: int

    def validate(self) -> "WindowSpec":
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"window must be at least 1x1, got {tuple(self)}")
        return self


@dataclass(frozen=True)
class PadInfo:
    """Bookkeeping needed to undo :func:`window_partition`."""

    batch: Optional[int]  # None when the input had no batch axis
    channels: int
    height: int
    width: int
    padded_height: int
    padded_width: int
    window: WindowSpec

    @property
    def grid(self) -> tuple[int, int]:
        return (self.padded_height // self.window.height,
                self.padded_width // self.window.width)

    @property
    def num_windows(self) -> int:
        gh, gw = self.grid
        return gh * gw


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), False
    if x.dim() == 4:
        return x, True
    raise ContractError(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(x.shape)}")


def window_partition(x: torch.Tensor, w: WindowSpec) -> tuple[torch.Tensor, PadInfo]:
    """Split a plane into non-overlapping ``w.height x w.width`` windows.

    The input is zero padded on the bottom/right edge up to a multiple of the
    window size. Windows are returned in row-major order; for batched input
    the windows of sample ``b`` occupy rows ``b*n .. (b+1)*n - 1``.
    """
    w = WindowSpec(*w).validate()
    xb, batched = _as_batched(x)
    B, C, H, W = xb.shape
    Hp = math.ceil(H / w.height) * w.height
    Wp = math.ceil(W / w.width) * w.width
    if Hp != H or Wp != W:
        xb = F.pad(xb, (0, Wp - W, 0, Hp - H))
    gh, gw = Hp // w.height, Wp // w.width
    win = xb.reshape(B, C, gh, w.height, gw, w.width)
    win = win.permute(0, 2, 4, 1, 3, 5).reshape(B * gh * gw, C, w.height, w.width)
    info = PadInfo(B if batched else None, C, H, W, Hp, Wp, w)
    return win, info


def window_merge(windows: torch.Tensor, info: PadInfo) -> torch.Tensor:
    """Exact inverse of :func:`window_partition`, including the padding crop."""
    B = info.batch if info.batch is not None else 1
    gh, gw = info.grid
    wh, ww = info.window
    if windows.dim() != 4 or windows.shape[0] != B * gh * gw or tuple(windows.shape[2:]) != (wh, ww):
        raise ContractError(
            f"windows of shape {tuple(windows.shape)} do not match pad info "
            f"({B * gh * gw} windows of {wh}x{ww})"
        )
    C = windows.shape[1]
    x = windows.reshape(B, gh, gw, C, wh, ww).permute(0, 3, 1, 4, 2, 5)
    x = x.reshape(B, C, info.padded_height, info.padded_width)
    x = x[:, :, : info.height, : info.width]
    return x if info.batch is not None else x[0]


def fft2(x: torch.Tensor) -> torch.Tensor:
    """Unnormalised 2-D DFT over the last two axes."""
    return torch.fft.fft2(x, norm="backward")


def ifft2(X: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`fft2` (carries the ``1/HW`` factor)."""
    return torch.fft.ifft2(X, norm="backward")


class Spectrum(NamedTuple):
    amplitude: torch.Tensor
    phase: torch.Tensor


def spectrum(x: torch.Tensor) -> Spectrum:
    """Amplitude and phase of ``fft2(x)``; phase lies in (-pi, pi], 0 where amplitude vanishes."""
    if x.is_complex():
        raise ContractError("spectrum expects a real tensor")
    X = fft2(x)
    amp = X.abs()
    phase = torch.angle(X)
    phase = torch.where(phase <= -math.pi, phase + 2 * math.pi, phase)
    phase = torch.where(amp < ZERO_AMPLITUDE, torch.zeros_like(phase), phase)
    return Spectrum(amp, phase)


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    theta: torch.Tensor,
    h: Optional[float] = None,
    coords: Optional[Sequence[int]] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
    atol: float = 1e-6,
) -> float:
    """Compare autograd against central differences; return the max relative error.

    ``f`` maps a float64 tensor shaped like ``theta`` to a scalar. By default
    every coordinate is probed; ``max_coords`` draws a seeded random subset
    for large parameter tensors. The step is ``h * max(1, |theta_i|)`` with
    ``h`` defaulting to 1e-4. The error of a coordinate is
    ``|a - n| / max(atol, |a| + |n|)``, so gradients that are both below
    ``atol`` (round-off territory) are compared in absolute terms.
    """
    theta = theta.detach().to(torch.float64).clone()
    base_h = 1e-4 if h is None else h

    t = theta.clone().requires_grad_(True)
    out = f(t)
    if out.numel() != 1:
        raise ContractError("grad_check needs a scalar function")
    if not torch.isfinite(out).all():
        raise FloatingPointError("function value is not finite")
    (analytic,) = torch.autograd.grad(out, t, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(theta)
    analytic = analytic.reshape(-1)

    flat = theta.reshape(-1)
    if coords is None:
        n = flat.numel()
        if max_coords is not None and max_coords < n:
            g = torch.Generator().manual_seed(seed)
            coords = torch.randperm(n, generator=g)[:max_coords].tolist()
        else:
            coords = range(n)

    worst = 0.0
    with torch.no_grad():
        for i in coords:
            step = base_h * max(1.0, abs(flat[i].item()))
            plus = flat.clone()
            plus[i] += step
            minus = flat.clone()
            minus[i] -= step
            fp = f(plus.reshape(theta.shape)).item()
            fm = f(minus.reshape(theta.shape)).item()
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"function value is not finite at coordinate {i}")
            numeric = (fp - fm) / (2 * step)
            a = analytic[i].item()
            err = abs(a - numeric) / max(atol, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


def grad_check_parameter(
    module: torch.nn.Module,
    name: str,
    loss_fn: Callable[[torch.nn.Module], torch.Tensor],
    **kwargs,
) -> float:
    """:func:`grad_check` with respect to one named parameter of ``module``.

    ``module`` should already be float64. The parameter is temporarily
    replaced by the probe tensor, so ``loss_fn`` may call any method.
    """
    owner_name, _, attr = name.rpartition(".")
    owner = module.get_submodule(owner_name) if owner_name else module
    original = getattr(owner, attr)
    if not isinstance(original, torch.nn.Parameter):
        raise ContractError(f"{name} is not a parameter")

    def f(theta: torch.Tensor) -> torch.Tensor:
        del owner._parameters[attr]
        setattr(owner, attr, theta)
        try:
            return loss_fn(module)
        finally:
            delattr(owner, attr)
            owner._parameters[attr] = original

    return grad_check(f, original.detach(), **kwargs)
