"""The full generative codec: transforms, entropy model, prior provider and diffusion decoder."""

from __future__ import annotations

import hashlib
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from . import entropy as E
from .bitstream import NUM_SLICES, Bitstream, Header
from .diffusion import Denoiser, ddim_sample, make_schedule
from .errors import ContractError, FormatError, InputError, ModelError
from .prior import PriorProvider
from .transforms import Analysis, CodecConfig, HyperAnalysis, HyperSynthesis, Synthesis, pad_to_multiple

CODEC_PREFIXES = ("analysis.", "hyper_analysis.", "hyper_synthesis.", "hyper_synthesis_w.",
                  "factorized.", "context.", "synthesis.")


class FFABIC(nn.Module):
    def __init__(self, cfg: CodecConfig, prior: PriorProvider, denoiser_base: int = 32, T: int = 1000):
        super().__init__()
        self.cfg = cfg.validate()
        self.prior = prior
        levels = prior.level_channels(cfg.down_factor)
        self.analysis = Analysis(cfg, levels)
        self.hyper_analysis = HyperAnalysis(cfg, levels[-1])
        self.hyper_synthesis = HyperSynthesis(cfg)
        self.hyper_synthesis_w = HyperSynthesis(cfg)
        self.factorized = E.FactorizedPrior(cfg.hyper_channels)
        self.context = E.ChannelAutoregressive(cfg.latent_channels, cfg.hyper_feat_channels)
        self.synthesis = Synthesis(cfg)
        self.schedule = make_schedule(T)
        self.denoiser = Denoiser(cfg.content_channels, denoiser_base, T, sched=self.schedule)
        self.denoiser_base = denoiser_base

    # parameter groups -------------------------------------------------

    def codec_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if n.startswith(CODEC_PREFIXES)]

    def denoiser_parameters(self) -> list[nn.Parameter]:
        return list(self.denoiser.parameters())

    def model_hash(self) -> int:
        """64-bit digest of every tensor in the state dict (names, shapes and bytes)."""
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            t = t.detach().cpu().contiguous()
            h.update(name.encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes())
        return int.from_bytes(h.digest()[:8], "little")

    # shared pieces ----------------------------------------------------

    def prior_features(self, xp: torch.Tensor):
        with torch.no_grad():
            return self.prior.extract(xp, self.cfg.down_factor)

    def encode_latents(self, x: torch.Tensor):
        xp = pad_to_multiple(x, self.cfg.down_factor)
        y_d = self.prior_features(xp)
        y = self.analysis(xp, list(y_d))
        z = self.hyper_analysis(y, y_d[-1])
        return xp, y_d, y, z

    # training forward -------------------------------------------------

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> dict:
        """Training pass: noisy-quantised rates, STE-quantised reconstruction path.

        Returns latents, content representation ``z_c``, and bit counts
        ``bits_y``/``bits_z`` (differentiable, additive noise) plus
        ``bits_y_hard``/``bits_z_hard`` (rounded, no gradient).
        """
        xp, y_d, y, z = self.encode_latents(x)
        z_noisy = E.quantize(z, "noise", generator=generator)
        bits_z = E.rate_estimate(z_noisy, self.factorized)
        z_hat = E.quantize(z, "ste")
        size = y.shape[-2:]
        hyper = self.hyper_synthesis(z_hat, size)
        w = self.hyper_synthesis_w(z_hat, size)

        decoded = []
        bits_y = y.new_zeros(())
        bits_y_hard = y.new_zeros(())
        for i, y_i in enumerate(self.context.split(y)):
            p = self.context.params(hyper, decoded, i)
            y_noisy = E.quantize(y_i, "noise", generator=generator)
            bits_y = bits_y + E.rate_estimate(y_noisy, p)
            with torch.no_grad():
                bits_y_hard = bits_y_hard + E.rate_estimate(E.quantize(y_i, "round", offset=p.mu), p)
            decoded.append(E.quantize(y_i, "ste", offset=p.mu))
        y_hat = torch.cat(decoded, dim=1)
        z_c = self.synthesis(y_hat, w)
        with torch.no_grad():
            bits_z_hard = E.rate_estimate(E.quantize(z, "round"), self.factorized)
        return {
            "x_padded": xp, "y": y, "z": z, "y_hat": y_hat, "z_hat": z_hat, "z_c": z_c,
            "bits_y": bits_y, "bits_z": bits_z,
            "bits_y_hard": bits_y_hard, "bits_z_hard": bits_z_hard,
        }

    # coding -----------------------------------------------------------

    @torch.no_grad()
    def compress(self, x: torch.Tensor) -> Bitstream:
        return self.compress_with_stats(x)[0]

    @torch.no_grad()
    def compress_with_stats(self, x: torch.Tensor) -> tuple[Bitstream, dict]:
        """Encode one image ``(3, H, W)``; also report the cross-entropy estimates in bits."""
        if x.dim() == 4:
            if x.shape[0] != 1:
                raise ContractError("compress takes one image at a time")
            x = x[0]
        if x.dim() != 3 or x.shape[0] != 3:
            raise InputError(f"expected a (3, H, W) image, got {tuple(x.shape)}")
        H, W = x.shape[-2:]
        _, _, y, z = self.encode_latents(x.unsqueeze(0))
        z_sym = E.quantize(z, "round")
        z_bytes = E.encode_stream(z_sym[0], self.factorized)
        est_z = E.rate_estimate(z_sym, self.factorized).item()

        size = y.shape[-2:]
        hyper = self.hyper_synthesis(z_sym, size)
        decoded, segments, est_y = [], [], 0.0
        for i, y_i in enumerate(self.context.split(y)):
            p = self.context.params(hyper, decoded, i)
            sym = E.quantize(y_i - p.mu, "round")
            segments.append(E.encode_stream(sym[0], E.GaussianParams(p.mu[0], p.sigma[0])))
            est_y += E.rate_estimate(sym, E.GaussianParams(torch.zeros_like(p.mu), p.sigma)).item()
            decoded.append(sym + p.mu)
        header = Header(width=W, height=H, down_factor=self.cfg.down_factor,
                        latent_channels=self.cfg.latent_channels, model_hash=self.model_hash())
        bs = Bitstream(header, z_bytes, segments)
        return bs, {"est_bits_y": est_y, "est_bits_z": est_z, "pixels": H * W}

    def _check_header(self, h: Header) -> None:
        if h.down_factor != self.cfg.down_factor or h.latent_channels != self.cfg.latent_channels:
            raise ModelError(
                f"bitstream was made for df={h.down_factor}, M={h.latent_channels}; "
                f"model has df={self.cfg.down_factor}, M={self.cfg.latent_channels}"
            )
        if h.model_hash != self.model_hash():
            raise ModelError("bitstream model hash does not match the loaded model")

    def latent_shapes(self, h: Header) -> tuple[tuple[int, int], tuple[int, int]]:
        df = self.cfg.down_factor
        ly, lx = -(-h.height // df), -(-h.width // df)
        zy, zx = -(-(-(-ly // 2)) // 2), -(-(-(-lx // 2)) // 2)
        return (ly, lx), (zy, zx)

    @torch.no_grad()
    def decode_latents(self, bs: Bitstream, num_slices: int = NUM_SLICES) -> tuple[torch.Tensor, list[torch.Tensor], torch.Tensor]:
        """Entropy-decode ``z_hat`` and the first ``num_slices`` slices of ``y_hat``.

        Only ``z_segment`` and ``y_segments[:num_slices]`` are read.
        """
        self._check_header(bs.header)
        (ly, lx), (zy, zx) = self.latent_shapes(bs.header)
        z_sym = E.decode_stream(bs.z_segment, self.factorized, (self.cfg.hyper_channels, zy, zx))
        z_hat = torch.from_numpy(z_sym).float().unsqueeze(0)
        hyper = self.hyper_synthesis(z_hat, (ly, lx))
        decoded = []
        for i in range(num_slices):
            p = self.context.params(hyper, decoded, i)
            sym = E.decode_stream(bs.y_segments[i], E.GaussianParams(p.mu[0], p.sigma[0]), tuple(p.mu.shape[1:]))
            decoded.append(torch.from_numpy(sym).to(p.mu.dtype).unsqueeze(0) + p.mu)
        return z_hat, decoded, hyper

    @torch.no_grad()
    def decompress(self, bs: Bitstream | bytes, steps: int = 25, seed: int = 0,
                   bypass_diffusion: bool = False) -> torch.Tensor:
        """Bitstream -> image ``(3, H, W)`` in [0, 1]; deterministic for a given seed."""
        if isinstance(bs, (bytes, bytearray)):
            bs = Bitstream.from_bytes(bs)
        z_hat, decoded, _ = self.decode_latents(bs)
        y_hat = torch.cat(decoded, dim=1)
        w = self.hyper_synthesis_w(z_hat, y_hat.shape[-2:])
        z_c = self.synthesis(y_hat, w)
        content = z_c if bypass_diffusion else ddim_sample(z_c, steps, seed, self.schedule, self.denoiser)
        img = self.prior.decode(content)[0]
        return img[:, : bs.header.height, : bs.header.width].clamp(0, 1)


def compress(x: torch.Tensor, model: FFABIC) -> Bitstream:
    return model.compress(x)


def decompress(b: Bitstream | bytes, model: FFABIC, steps: int = 25, seed: int = 0,
               bypass_diffusion: bool = False) -> torch.Tensor:
    return model.decompress(b, steps=steps, seed=seed, bypass_diffusion=bypass_diffusion)


def file_bpp(bs: Bitstream | bytes, pixels: int) -> float:
    n = len(bs) if isinstance(bs, (bytes, bytearray)) else bs.num_bytes()
    return 8.0 * n / pixels
