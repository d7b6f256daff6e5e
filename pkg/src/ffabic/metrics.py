"""Image quality metrics, rate-distortion curves and the BD-rate calculator."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator

from .errors import ContractError, InputError, RangeError

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5


def _as_batch(x) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.float64)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    if t.dim() != 4:
        raise InputError(f"expected an image tensor, got shape {tuple(t.shape)}")
    return t


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical inputs return ``PSNR_CAP``."""
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gauss_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    C = x.shape[1]
    kh = win.reshape(1, 1, -1, 1).repeat(C, 1, 1, 1)
    kw = win.reshape(1, 1, 1, -1).repeat(C, 1, 1, 1)
    return F.conv2d(F.conv2d(x, kh, groups=C), kw, groups=C)


def _ssim_cs(a: torch.Tensor, b: torch.Tensor, win: torch.Tensor, data_range: float = 1.0):
    C1, C2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    s_aa = _filter(a * a, win) - mu_a ** 2
    s_bb = _filter(b * b, win) - mu_b ** 2
    s_ab = _filter(a * b, win) - mu_a * mu_b
    cs = (2 * s_ab + C2) / (s_aa + s_bb + C2)
    lum = (2 * mu_a * mu_b + C1) / (mu_a ** 2 + mu_b ** 2 + C1)
    return (lum * cs).mean(dim=(-2, -1)), cs.mean(dim=(-2, -1))


def ms_ssim_scales(min_side: int, win_size: int = WIN_SIZE) -> int:
    """Number of usable scales: the coarsest one must still fit the window."""
    n = 0
    while n < len(MS_SSIM_WEIGHTS) and (min_side >> n) >= win_size:
        n += 1
    return n


def ms_ssim(a, b, data_range: float = 1.0) -> float:
    """Multi-scale SSIM with the standard weights, 11x11 Gaussian window (sigma 1.5).

    All five scales need a shorter side of at least 176 px so the coarsest
    one still fits the window. Smaller images use fewer scales (weights
    renormalised) and emit a warning; below 11 px an ``InputError`` is raised.
    """
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    min_side = min(a.shape[-2:])
    n = ms_ssim_scales(min_side)
    if n == 0:
        raise InputError(f"image side {min_side} is smaller than the {WIN_SIZE}x{WIN_SIZE} window")
    weights = torch.tensor(MS_SSIM_WEIGHTS[:n], dtype=torch.float64)
    if n < len(MS_SSIM_WEIGHTS):
        warnings.warn(f"ms_ssim: {min_side}px image, using {n} scales", RuntimeWarning, stacklevel=2)
        weights = weights / weights.sum()
    win = _gauss_window()
    vals = []
    for i in range(n):
        ssim, cs = _ssim_cs(a, b, win, data_range)
        if i < n - 1:
            vals.append(torch.relu(cs))
            pad = (a.shape[-2] % 2, a.shape[-1] % 2)
            a = F.avg_pool2d(a, 2, padding=pad)
            b = F.avg_pool2d(b, 2, padding=pad)
        else:
            vals.append(torch.relu(ssim))
    stack = torch.stack(vals, dim=0)
    out = torch.prod(stack ** weights.reshape(-1, 1, 1), dim=0)
    return float(out.mean())


# rate-distortion curves -------------------------------------------------

@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    metric: str = "psnr"

    def __post_init__(self):
        if not self.bpp > 0:
            raise InputError(f"bpp must be > 0, got {self.bpp}")


@dataclass
class RDCurve:
    points: list[RDPoint] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        bpps = [p.bpp for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise InputError(f"curve {self.label!r}: bpp values must be strictly increasing")
        if len({p.metric for p in self.points}) > 1:
            raise InputError(f"curve {self.label!r} mixes metrics")

    @property
    def metric(self) -> str:
        return self.points[0].metric if self.points else ""

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])


def _log_rate_interp(curve: RDCurve) -> PchipInterpolator:
    q, r = curve.qualities, np.log(curve.rates)
    order = np.argsort(q, kind="stable")
    q, r = q[order], r[order]
    if np.any(np.diff(q) <= 0):
        raise InputError(f"curve {curve.label!r}: quality values must be distinct")
    return PchipInterpolator(q, r)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average bitrate change (percent) of ``test`` against ``anchor`` at equal quality.

    Log-rate is interpolated as a monotone piecewise cubic in quality and
    integrated exactly over the overlapping quality interval.
    """
    for c in (anchor, test):
        if len(c.points) < 2:
            raise InputError(f"curve {c.label!r} needs at least 2 points, has {len(c.points)}")
    if anchor.metric != test.metric:
        raise ContractError(f"metric mismatch: {anchor.metric} vs {test.metric}")
    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if not hi > lo:
        raise RangeError(
            f"quality ranges do not overlap: anchor [{anchor.qualities.min():.4g}, {anchor.qualities.max():.4g}], "
            f"test [{test.qualities.min():.4g}, {test.qualities.max():.4g}]"
        )
    ia = _log_rate_interp(anchor).integrate(lo, hi)
    it = _log_rate_interp(test).integrate(lo, hi)
    return float((math.exp((it - ia) / (hi - lo)) - 1.0) * 100.0)


# TSV I/O ------------------------------------------------------------------

CURVE_HEADER = ("label", "bpp", "metric", "value")
EVAL_HEADER = ("file", "bpp", "psnr", "ms_ssim")


def write_tsv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def read_tsv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows:
        raise InputError(f"{path}: empty TSV")
    return rows[0], rows[1:]


def write_curves(path: str | Path, curves: Sequence[RDCurve]) -> None:
    rows = [(c.label, p.bpp, p.metric, p.quality) for c in curves for p in c.points]
    write_tsv(path, CURVE_HEADER, rows)


def read_curves(path: str | Path, metric: str = "psnr") -> dict[str, RDCurve]:
    """Read the ``metric`` points of a curve TSV into one curve per label."""
    header, rows = read_tsv(path)
    if tuple(header) != CURVE_HEADER:
        raise InputError(f"{path}: expected columns {CURVE_HEADER}, got {tuple(header)}")
    grouped: dict[str, list[RDPoint]] = {}
    for i, row in enumerate(rows, start=2):
        if len(row) != 4:
            raise InputError(f"{path}:{i}: expected 4 fields, got {len(row)}")
        label, bpp, m, val = row
        if m != metric:
            continue
        try:
            grouped.setdefault(label, []).append(RDPoint(float(bpp), float(val), m))
        except ValueError as exc:
            raise InputError(f"{path}:{i}: {exc}") from None
    return {k: RDCurve(v, k) for k, v in grouped.items()}


def read_curve(path: str | Path, metric: str = "psnr") -> RDCurve:
    """Single curve from a TSV; several labels are merged (points must stay rate-ordered)."""
    curves = read_curves(path, metric)
    if not curves:
        raise InputError(f"{path}: no {metric} points")
    if len(curves) == 1:
        return next(iter(curves.values()))
    points = [p for c in curves.values() for p in c.points]
    return RDCurve(points, "+".join(curves))
