"""Model evaluation, RD-curve points, band activation maps and the window-size ablation."""

from __future__ import annotations

import copy
import dataclasses
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .codec import FFABIC, file_bpp
from .data import CropDataset, write_image
from .ffab import BAND_NAMES, FFABAttention, band_shapes, head_band
from .metrics import EVAL_HEADER, RDCurve, RDPoint, ms_ssim, psnr, write_tsv
from .training import ModelConfig, TrainConfig, build_model, train

METRICS = ("psnr", "ms_ssim")


def _quiet_ms_ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return ms_ssim(a, b)


def evaluate_image(model: FFABIC, x: torch.Tensor, steps: int = 25, seed: int = 0,
                   bypass_diffusion: bool = False) -> dict:
    """Compress, decompress and score one image. ``bpp`` counts the real bitstream bytes."""
    data = model.compress(x).to_bytes()
    rec = model.decompress(data, steps=steps, seed=seed, bypass_diffusion=bypass_diffusion)
    pixels = x.shape[-2] * x.shape[-1]
    return {"bpp": file_bpp(data, pixels), "psnr": psnr(rec, x), "ms_ssim": _quiet_ms_ssim(rec, x),
            "bytes": len(data), "reconstruction": rec}


def evaluate_model(model: FFABIC, images: Sequence[tuple[str, torch.Tensor]], steps: int = 25,
                   seed: int = 0, bypass_diffusion: bool = False) -> list[tuple[str, float, float, float]]:
    """Rows ``(file, bpp, psnr, ms_ssim)`` in input order."""
    rows = []
    for name, x in images:
        r = evaluate_image(model, x, steps, seed, bypass_diffusion)
        rows.append((name, r["bpp"], r["psnr"], r["ms_ssim"]))
    return rows


def write_eval(path: str | Path, rows) -> None:
    write_tsv(path, EVAL_HEADER, rows)


def rd_point(rows, metric: str) -> RDPoint:
    col = 2 if metric == "psnr" else 3
    return RDPoint(float(np.mean([r[1] for r in rows])), float(np.mean([r[col] for r in rows])), metric)


def rd_curves(models: Sequence[FFABIC], images, label: str = "ffabic", **kw) -> list[RDCurve]:
    """One curve per metric; each model contributes its mean (bpp, quality) point."""
    per_model = [evaluate_model(m, images, **kw) for m in models]
    return [RDCurve([rd_point(rows, metric) for rows in per_model], label) for metric in METRICS]


# band maps ----------------------------------------------------------------

def attention_modules(model: FFABIC) -> list[tuple[str, FFABAttention]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, FFABAttention)]


@torch.no_grad()
def band_maps(model: FFABIC, x: torch.Tensor) -> dict[str, dict]:
    """Mean absolute activation of each head group, for every FFAB attention in the codec.

    Runs the analysis and synthesis transforms once and returns, per block,
    the four maps keyed by band plus the head indices and window shape that
    produced them.
    """
    inputs: dict[str, torch.Tensor] = {}
    handles = []
    for name, mod in attention_modules(model):
        handles.append(mod.register_forward_pre_hook(
            lambda m, args, name=name: inputs.__setitem__(name, args[0].detach())))
    try:
        xb = x.unsqueeze(0) if x.dim() == 3 else x
        _, _, y, z = model.encode_latents(xb)
        z_hat = torch.round(z)
        size = y.shape[-2:]
        model.synthesis(torch.round(y), model.hyper_synthesis_w(z_hat, size))
    finally:
        for h in handles:
            h.remove()
    out = {}
    for name, mod in attention_modules(model):
        if name not in inputs:
            continue
        K = mod.cfg.num_heads
        per = K // 4
        shapes = band_shapes(mod.cfg)
        groups = mod.group_outputs(inputs[name])
        block = {}
        for g, (band, act) in enumerate(zip(BAND_NAMES, groups)):
            heads = list(range(g * per + 1, (g + 1) * per + 1))
            assert all(head_band(k, K) == band for k in heads)
            block[band] = {"map": act[0].abs().mean(dim=0), "heads": heads, "window": tuple(shapes[g])}
        out[name] = block
    return out


def write_band_maps(maps: dict[str, dict], out_dir: str | Path) -> list[Path]:
    """Save each map as a normalised grayscale PNG plus an index TSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files, rows = [], []
    for block, bands in maps.items():
        for band, info in bands.items():
            m = info["map"]
            lo, hi = float(m.min()), float(m.max())
            img = (m - lo) / (hi - lo) if hi > lo else torch.zeros_like(m)
            path = out_dir / f"{block}_{band}.png"
            write_image(img.unsqueeze(0).expand(3, -1, -1), path)
            files.append(path)
            h, w = info["window"]
            rows.append((block, band, ",".join(map(str, info["heads"])), f"{h}x{w}",
                         f"{m.shape[0]}x{m.shape[1]}", path.name))
    write_tsv(out_dir / "bands.tsv", ("block", "band", "heads", "window", "size", "file"), rows)
    return files


# window ablation ----------------------------------------------------------

ABLATION_HEADER = ("window_base", "bpp", "psnr", "ms_ssim", "final_loss")


def ablate_windows(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: CropDataset,
    images: Sequence[tuple[str, torch.Tensor]],
    out_dir: str | Path,
    bases: Sequence[int] = (2, 4, 8),
    steps: int = 25,
    seed: int = 0,
) -> list[tuple]:
    """Train stage 2 once per window base and score each codec (diffusion bypassed).

    The toy prior is trained once and shared so only the window geometry varies.
    """
    out_dir = Path(out_dir)
    prior_state = None
    if model_cfg.provider == "toy":
        base_model = build_model(model_cfg, seed=train_cfg.seed)
        train(dataclasses.replace(train_cfg, stage="1"), dataset, out_dir / "prior", model=base_model)
        prior_state = copy.deepcopy(base_model.prior.state_dict())
    rows = []
    for s in bases:
        cfg = dataclasses.replace(model_cfg, codec=dataclasses.replace(model_cfg.codec, window_base=s))
        model = build_model(cfg, seed=train_cfg.seed)
        if prior_state is not None:
            model.prior.load_state_dict(prior_state)
        tcfg = dataclasses.replace(train_cfg, stage="2")
        run_dir = out_dir / f"s{s}"
        train(tcfg, dataset, run_dir, model=model)
        final = float(np.loadtxt(run_dir / "metrics_stage2.tsv", skiprows=1, ndmin=2)[-1, -1])
        scores = evaluate_model(model, images, steps=steps, seed=seed, bypass_diffusion=True)
        rows.append((s, float(np.mean([r[1] for r in scores])), float(np.mean([r[2] for r in scores])),
                     float(np.mean([r[3] for r in scores])), final))
    write_tsv(out_dir / "ablation.tsv", ABLATION_HEADER, rows)
    return rows
