"""Generative-prior providers.

A provider supplies the injection features ``y_d`` (one tensor per codec
resolution stage), the content-space target used by the spatial and
frequency losses, and a decoder from content space back to pixels.

``FixedFilterPrior`` needs no training and exists so injection and loss code
can be exercised in isolation. ``ToyLatentPrior`` is a small convolutional
autoencoder whose 16-channel, quarter-resolution latent plays the role of a
pretrained latent-diffusion VAE space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, StateError


@dataclass
class PriorFeatures:
    levels: list[torch.Tensor]
    provider: str

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


class PriorProvider(nn.Module):
    provider_id = "base"
    content_channels = 16
    content_down = 4

    def level_channels(self, down_factor: int) -> list[int]:
        raise NotImplementedError

    def extract(self, x: torch.Tensor, down_factor: int) -> PriorFeatures:
        raise NotImplementedError

    def content_target(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, content: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


def _stages(down_factor: int) -> int:
    return int(math.log2(down_factor))


def _binomial_down(x: torch.Tensor) -> torch.Tensor:
    """Blur with the separable [1,4,6,4,1]/16 kernel, then keep every other pixel."""
    k1 = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=x.dtype, device=x.device) / 16
    k = (k1[:, None] * k1[None, :]).expand(x.shape[1], 1, 5, 5)
    x = F.pad(x, (2, 2, 2, 2), mode="replicate")
    return F.conv2d(x, k, stride=2, groups=x.shape[1])


class FixedFilterPrior(PriorProvider):
    """Gaussian pyramid of the image, lifted to ``channels`` by fixed seeded linear maps."""

    provider_id = "fixed-filter"

    def __init__(self, channels: int = 16, seed: int = 0, max_stages: int = 6):
        super().__init__()
        self.channels = channels
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        lifts = torch.randn(max_stages, channels, 3, generator=g) / math.sqrt(3.0)
        self.register_buffer("lifts", lifts)
        content_lift = torch.randn(self.content_channels, 3, generator=g) / math.sqrt(3.0)
        self.register_buffer("content_lift", content_lift)

    def level_channels(self, down_factor: int) -> list[int]:
        return [self.channels] * _stages(down_factor)

    def _pyramid(self, x: torch.Tensor, n: int) -> list[torch.Tensor]:
        levels = []
        for _ in range(n):
            x = _binomial_down(x)
            levels.append(x)
        return levels

    def extract(self, x: torch.Tensor, down_factor: int) -> PriorFeatures:
        squeeze = x.dim() == 3
        xb = x.unsqueeze(0) if squeeze else x
        pyr = self._pyramid(xb, _stages(down_factor))
        levels = [torch.einsum("oc,bchw->bohw", self.lifts[i].to(xb.dtype), p) for i, p in enumerate(pyr)]
        if squeeze:
            levels = [l[0] for l in levels]
        return PriorFeatures(levels, self.provider_id)

    def content_target(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        xb = x.unsqueeze(0) if squeeze else x
        n = int(math.log2(self.content_down))
        base = self._pyramid(xb, n)[-1] - 0.5
        out = torch.einsum("oc,bchw->bohw", self.content_lift.to(xb.dtype), base)
        return out[0] if squeeze else out

    def decode(self, content: torch.Tensor) -> torch.Tensor:
        squeeze = content.dim() == 3
        cb = content.unsqueeze(0) if squeeze else content
        inv = torch.linalg.pinv(self.content_lift.to(torch.float64)).to(cb.dtype)
        rgb = torch.einsum("co,bohw->bchw", inv, cb) + 0.5
        out = F.interpolate(rgb, scale_factor=self.content_down, mode="bilinear", align_corners=False)
        return out[0] if squeeze else out


class ToyLatentPrior(PriorProvider):
    """Small conv autoencoder; its latent is the content space, its activations the injection features."""

    provider_id = "toy-latent"

    def __init__(self, hidden: int = 32):
        super().__init__()
        cc = self.content_channels
        self.hidden = hidden
        self.enc1 = nn.Conv2d(3, hidden, 5, stride=2, padding=2)
        self.enc2 = nn.Conv2d(hidden, 2 * hidden, 5, stride=2, padding=2)
        self.enc3 = nn.Conv2d(2 * hidden, cc, 3, padding=1)
        self.enc_skip = nn.Conv2d(48, cc, 1)
        self.dec1 = nn.Conv2d(cc, 2 * hidden, 3, padding=1)
        self.dec2 = nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1)
        self.dec3 = nn.Conv2d(2 * hidden, 48, 1)
        self.dec_skip = nn.Conv2d(cc, 48, 1)
        self.register_buffer("content_scale", torch.ones(()))
        self.register_buffer("trained", torch.zeros((), dtype=torch.uint8))

    def level_channels(self, down_factor: int) -> list[int]:
        n = _stages(down_factor)
        return ([self.hidden] + [self.content_channels] * (n - 1))[:n]

    def _check(self) -> None:
        if not bool(self.trained):
            raise StateError("ToyLatentPrior is untrained; run train_toy_prior or load a checkpoint")

    def _encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = x - 0.5
        h1 = F.gelu(self.enc1(x))
        z = self.enc3(F.gelu(self.enc2(h1))) + self.enc_skip(F.pixel_unshuffle(x, 4))
        return h1, z

    def _decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        # everything runs at 1/4 resolution; pixel shuffle restores full size
        h = F.gelu(self.dec2(F.gelu(self.dec1(z))))
        return F.pixel_shuffle(self.dec3(h) + self.dec_skip(z), 4) + 0.5

    def autoencode(self, x: torch.Tensor) -> torch.Tensor:
        return self._decode_raw(self._encode(x)[1])

    def extract(self, x: torch.Tensor, down_factor: int) -> PriorFeatures:
        self._check()
        squeeze = x.dim() == 3
        xb = x.unsqueeze(0) if squeeze else x
        h1, z = self._encode(xb)
        z = z * self.content_scale
        levels = [h1]
        for i in range(2, _stages(down_factor) + 1):
            levels.append(z if i == 2 else F.avg_pool2d(z, 2 ** (i - 2)))
        levels = levels[: _stages(down_factor)]
        if squeeze:
            levels = [l[0] for l in levels]
        return PriorFeatures(levels, self.provider_id)

    def content_target(self, x: torch.Tensor) -> torch.Tensor:
        self._check()
        squeeze = x.dim() == 3
        z = self._encode(x.unsqueeze(0) if squeeze else x)[1] * self.content_scale
        return z[0] if squeeze else z

    def decode(self, content: torch.Tensor) -> torch.Tensor:
        self._check()
        squeeze = content.dim() == 3
        out = self._decode_raw((content.unsqueeze(0) if squeeze else content) / self.content_scale)
        return out[0] if squeeze else out


def extract_prior(x: torch.Tensor, provider: PriorProvider, down_factor: int = 8) -> PriorFeatures:
    return provider.extract(x, down_factor)


def content_target(x: torch.Tensor, provider: PriorProvider) -> torch.Tensor:
    return provider.content_target(x)


@dataclass
class PriorTrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 3e-3
    seed: int = 0


def train_toy_prior(
    dataset,
    config: PriorTrainConfig = PriorTrainConfig(),
    model: Optional[ToyLatentPrior] = None,
    log: Optional[Callable[[int, float], None]] = None,
) -> tuple[ToyLatentPrior, list[float]]:
    """Fit the toy autoencoder with an L2 reconstruction loss.

    Returns the trained provider (content space rescaled to unit variance over
    a probe batch) and the per-step loss history.
    """
    if dataset is None or not getattr(dataset, "images", None):
        raise InputError("dataset is empty")
    torch.manual_seed(config.seed)
    model = model or ToyLatentPrior()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    history = []
    model.train()
    for step in range(config.steps):
        x = dataset.batch(step, config.batch_size)
        loss = F.mse_loss(model.autoencode(x), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log is not None:
            log(step, history[-1])
    model.eval()
    with torch.no_grad():
        probe = dataset.batch(10**6, 64)
        std = model._encode(probe)[1].std()
        model.content_scale.fill_(1.0 / float(std))
        model.trained.fill_(1)
    return model, history
