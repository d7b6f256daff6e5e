"""Losses, staged training and model checkpointing.

Stages: ``1`` fits the toy prior autoencoder, ``2`` trains the codec with
rate, spatial and frequency terms, ``3`` trains the denoiser with the codec
frozen, ``joint`` optimises all four terms together.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ck
from .codec import FFABIC
from .data import CropDataset
from .diffusion import noise_loss
from .errors import ConfigError, ContractError, DivergenceError, StateError
from .numerics import ZERO_AMPLITUDE, fft2
from .prior import FixedFilterPrior, PriorTrainConfig, ToyLatentPrior, train_toy_prior
from .transforms import CodecConfig

log = logging.getLogger(__name__)

STAGES = ("1", "2", "3", "joint")
METRICS_HEADER = ("step", "bpp", "L_rate", "L_spatial", "L_frequency", "L_noise", "total")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.01
    lambda4: float = 0.0

    def validate(self) -> "LossWeights":
        w = self.as_tuple()
        if any(v < 0 for v in w) or not any(v > 0 for v in w):
            raise ConfigError(f"loss weights must be >= 0 with at least one > 0, got {w}")
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


# losses -----------------------------------------------------------------

def rate_loss(bits_y: torch.Tensor, bits_z: torch.Tensor, num_pixels: int) -> torch.Tensor:
    """Bits per pixel of ``y_hat`` plus ``z_hat``."""
    return (bits_y + bits_z) / num_pixels


def spatial_loss(z_c: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if z_c.shape != target.shape:
        raise ContractError(f"shape mismatch {tuple(z_c.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(z_c, target)


def _unit_phasor(X: torch.Tensor, amp: torch.Tensor) -> torch.Tensor:
    live = amp >= ZERO_AMPLITUDE
    safe = torch.where(live, amp, torch.ones_like(amp))
    return torch.where(live, X / safe, torch.ones_like(X))


def frequency_terms(z_c: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Amplitude and phase terms of the frequency loss (full-plane FFT per channel).

    The phase distance is ``|e^{iP1} - e^{iP2}|^2 = 2 - 2 cos(P1 - P2)``,
    averaged over all bins with bins where both amplitudes vanish counted as 0.
    """
    if z_c.shape != target.shape:
        raise ContractError(f"shape mismatch {tuple(z_c.shape)} vs {tuple(target.shape)}")
    X1, X2 = fft2(z_c), fft2(target)
    A1, A2 = X1.abs(), X2.abs()
    amp_term = (A1 - A2).pow(2).mean()
    active = (A1 >= ZERO_AMPLITUDE) | (A2 >= ZERO_AMPLITUDE)
    d = (_unit_phasor(X1, A1) - _unit_phasor(X2, A2)).abs().pow(2)
    phase_term = torch.where(active, d, torch.zeros_like(d)).mean()
    return amp_term, phase_term


def frequency_loss(z_c: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    amp, phase = frequency_terms(z_c, target)
    return amp + phase


def total_loss(
    batch: torch.Tensor,
    model: FFABIC,
    weights: LossWeights,
    generator: Optional[torch.Generator] = None,
    freeze_codec: bool = False,
) -> tuple[torch.Tensor, dict]:
    """Weighted sum of rate, spatial, frequency and noise terms plus a per-term report.

    Terms with zero weight are still evaluated for the report but kept out
    of the autograd graph, so they contribute no gradient at all.
    """
    weights.validate()
    l1, l2, l3, l4 = weights.as_tuple()
    B, _, H, W = batch.shape
    codec_grad = not freeze_codec and (l1 > 0 or l2 > 0 or l3 > 0 or l4 > 0)
    with torch.set_grad_enabled(codec_grad and torch.is_grad_enabled()):
        out = model(batch, generator)
    with torch.no_grad():
        target = model.prior.content_target(out["x_padded"])
    pixels = B * out["x_padded"].shape[-2] * out["x_padded"].shape[-1]
    z_c = out["z_c"]

    def term(weight, fn):
        if weight > 0:
            return fn()
        with torch.no_grad():
            return fn()

    L_rate = term(l1, lambda: rate_loss(out["bits_y"], out["bits_z"], pixels))
    L_spatial = term(l2, lambda: spatial_loss(z_c, target))
    L_freq = term(l3, lambda: frequency_loss(z_c, target))

    t = torch.randint(1, model.schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(target.shape, generator=generator, dtype=target.dtype)
    cond = z_c.detach() if freeze_codec else z_c
    L_noise = term(l4, lambda: noise_loss(target, t, eps, cond, model.denoiser, model.schedule))

    comps = (L_rate, L_spatial, L_freq, L_noise)
    total = sum(w * c.double() for w, c in zip(weights.as_tuple(), comps))
    if not isinstance(total, torch.Tensor):
        total = torch.tensor(float(total), dtype=torch.float64)
    with torch.no_grad():
        bpp = ((out["bits_y_hard"] + out["bits_z_hard"]) / pixels).item()
    report = {
        "bpp": bpp,
        "L_rate": L_rate.item(),
        "L_spatial": L_spatial.item(),
        "L_frequency": L_freq.item(),
        "L_noise": L_noise.item(),
        "total": total.item(),
    }
    return total, report


# model construction and checkpoints --------------------------------------

@dataclass
class ModelConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    provider: str = "toy"  # "toy" or "fixed"
    prior_hidden: int = 32
    prior_seed: int = 0
    denoiser_base: int = 32
    T: int = 1000

    def to_dict(self) -> dict:
        d = asdict(self)
        d["codec"] = self.codec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        codec = CodecConfig(**d.pop("codec", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(codec=codec, **d)

    def hash(self) -> str:
        return ck.config_hash(self.to_dict())


def build_model(cfg: ModelConfig, seed: int = 0) -> FFABIC:
    torch.manual_seed(seed)
    if cfg.provider == "toy":
        prior = ToyLatentPrior(cfg.prior_hidden)
    elif cfg.provider == "fixed":
        prior = FixedFilterPrior(cfg.codec.content_channels, seed=cfg.prior_seed)
    else:
        raise ConfigError(f"unknown prior provider {cfg.provider!r}")
    model = FFABIC(cfg.codec, prior, denoiser_base=cfg.denoiser_base, T=cfg.T)
    model.model_config = cfg
    return model


def make_checkpoint(model: FFABIC, step: int = 0, stage: Optional[str] = None, seed: int = 0,
                    optimizer: Optional[torch.optim.Optimizer] = None, extra: Optional[dict] = None) -> ck.Checkpoint:
    cfg: ModelConfig = model.model_config
    meta = {"model_config": cfg.to_dict(), "config_hash": cfg.hash(), "step": step,
            "stage": stage, "seed": seed}
    if extra:
        meta.update(extra)
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        for idx, state in optimizer.state_dict()["state"].items():
            for key, val in state.items():
                tensors[f"optim/{idx}/{key}"] = torch.as_tensor(val)
    return ck.Checkpoint(meta, tensors)


def save_checkpoint(path, model: FFABIC, **kwargs) -> None:
    ck.save(path, make_checkpoint(model, **kwargs))


def load_checkpoint(path, model: Optional[FFABIC] = None, optimizer: Optional[torch.optim.Optimizer] = None,
                    expected_config_hash: Optional[str] = None) -> tuple[FFABIC, ck.Checkpoint]:
    """Load parameters (and optimiser state) into ``model``, building it if not given.

    A model whose configuration hash differs from the checkpoint's is rejected.
    """
    if model is not None and expected_config_hash is None:
        expected_config_hash = model.model_config.hash()
    ckpt = ck.load(path, expected_config_hash)
    if model is None:
        model = build_model(ModelConfig.from_dict(ckpt.model_config))
    state = ckpt.model_state()
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise ck.FormatError(f"checkpoint tensors do not match model: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        per_param: dict[int, dict] = {}
        for key, val in ckpt.optimizer_state().items():
            idx, name = key.split("/", 1)
            per_param.setdefault(int(idx), {})[name] = val.clone()
        opt_state["state"] = per_param
        optimizer.load_state_dict(opt_state)
    model.eval()
    return model, ckpt


def load_model(path) -> FFABIC:
    return load_checkpoint(path)[0]


# training loop ------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str = "2"
    steps: int = 1000
    batch_size: int = 8
    crop: int = 64
    lr: float = 1e-4
    clip: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0
    prior: PriorTrainConfig = field(default_factory=PriorTrainConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "prior" in d:
            d["prior"] = PriorTrainConfig(**d["prior"])
        if "stage" in d:
            d["stage"] = str(d["stage"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def default_weights(stage: str, lambda1: float = 1.0) -> LossWeights:
    if stage == "2":
        return LossWeights(lambda1, 1.0, 0.01, 0.0)
    if stage == "3":
        return LossWeights(0.0, 0.0, 0.0, 1.0)
    return LossWeights(lambda1, 1.0, 0.01, 1.0)


def _format_row(step: int, r: dict) -> str:
    vals = [r[k] for k in METRICS_HEADER[1:]]
    return "\t".join([str(step)] + [f"{v:.9g}" for v in vals]) + "\n"


def _trim_metrics(path: Path, upto: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines(keepends=True):
        head = line.split("\t", 1)[0]
        if not head.isdigit() or int(head) <= upto:
            keep.append(line)
    path.write_text("".join(keep))


def _trainable(model: FFABIC, stage: str) -> list[torch.nn.Parameter]:
    if stage == "2":
        return model.codec_parameters()
    if stage == "3":
        return model.denoiser_parameters()
    if stage == "joint":
        return model.codec_parameters() + model.denoiser_parameters()
    raise ConfigError(f"unknown stage {stage!r}")


def train(
    config: TrainConfig,
    dataset: CropDataset,
    out_dir: str | Path,
    model: Optional[FFABIC] = None,
    resume: Optional[str | Path] = None,
    stop_after: Optional[int] = None,
) -> FFABIC:
    """Run one training stage and write checkpoints plus a metrics file into ``out_dir``.

    Everything random (crops, quantisation noise, timesteps) is derived from
    ``(seed, step)``, so resuming from a checkpoint replays the remaining
    steps exactly. ``stop_after`` ends the run early (to simulate an
    interruption) after writing a checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = str(config.stage)
    if stage not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}, got {stage!r}")
    if model is None:
        raise StateError("train needs a model (see build_model / load_checkpoint)")

    if stage == "1":
        if not isinstance(model.prior, ToyLatentPrior):
            log.info("stage 1 skipped: provider %s needs no training", model.prior.provider_id)
            return model
        pcfg = config.prior
        _, history = train_toy_prior(dataset, pcfg, model=model.prior)
        metrics = out_dir / "metrics_stage1.tsv"
        metrics.write_text("step\tL_prior\n" + "".join(f"{i + 1}\t{v:.9g}\n" for i, v in enumerate(history)))
        save_checkpoint(out_dir / "model.ckpt", model, step=pcfg.steps, stage="1", seed=config.seed)
        return model

    weights = config.weights.validate()
    if stage == "3" and any(weights.as_tuple()[:3]):
        raise ConfigError("stage 3 trains the denoiser only; lambda1..3 must be 0")
    if stage == "2" and weights.lambda4:
        raise ConfigError("stage 2 trains the codec only; lambda4 must be 0")

    for p in model.parameters():
        p.requires_grad_(False)
    params = _trainable(model, stage)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=config.lr)

    metrics = out_dir / f"metrics_stage{stage}.tsv"
    start = 0
    if resume is not None:
        _, ckpt = load_checkpoint(resume, model, opt)
        if ckpt.meta.get("stage") != stage:
            raise ConfigError(f"cannot resume stage {stage} from a stage {ckpt.meta.get('stage')} checkpoint")
        start = ckpt.step
        _trim_metrics(metrics, start)
    else:
        metrics.write_text("\t".join(METRICS_HEADER) + "\n")

    model.train()
    freeze = stage == "3"
    with metrics.open("a") as fh:
        for step in range(start + 1, config.steps + 1):
            batch = dataset.batch(step, config.batch_size)
            g = dataset.generator(step, salt=1)
            total, report = total_loss(batch, model, weights, generator=g, freeze_codec=freeze)
            if not math.isfinite(report["total"]):
                dump = out_dir / f"divergence_step{step}.npy"
                np.save(dump, batch.numpy())
                raise DivergenceError(f"non-finite loss at step {step}: {report}; batch saved to {dump}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(params, config.clip)
            opt.step()
            fh.write(_format_row(step, report))
            fh.flush()
            done = stop_after is not None and step >= stop_after
            if (config.checkpoint_every and step % config.checkpoint_every == 0) or done:
                save_checkpoint(out_dir / f"ckpt_stage{stage}_step{step:06d}.ckpt", model, step=step,
                                stage=stage, seed=config.seed, optimizer=opt)
            if done:
                break
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    save_checkpoint(out_dir / "model.ckpt", model, step=step if config.steps > start else start,
                    stage=stage, seed=config.seed)
    return model


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    rows = np.array([[float(v) for v in l.split("\t")] for l in lines[1:]]) if len(lines) > 1 else np.zeros((0, len(header)))
    return {h: rows[:, i] for i, h in enumerate(header)}


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig, dict]:
    """Read a JSON config with ``model``, ``train`` and ``data`` sections."""
    raw = json.loads(Path(path).read_text())
    model = ModelConfig.from_dict(raw.get("model", {}))
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    return model, train_cfg, raw.get("data", {})
