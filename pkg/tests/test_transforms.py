import pytest
import torch
import torch.nn.functional as F

from ffabic.errors import ConfigError, ContractError, InputError
from ffabic.prior import FixedFilterPrior
from ffabic.numerics import grad_check_parameter
from ffabic.transforms import (FULL_PRESET, TOY_PRESET, Analysis, CodecConfig, HyperAnalysis, HyperSynthesis,
                               Synthesis, analysis, hyper_decode, hyper_decode_w, hyper_encode, pad_to_multiple,
                               synthesis)

torch.manual_seed(0)
CFG = TOY_PRESET
PRIOR = FixedFilterPrior(seed=0)


def levels(x, seed=0):
    return list(FixedFilterPrior(seed=seed).extract(x, CFG.down_factor))


def randomize_iaf(mod, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for n, p in mod.named_parameters():
            if "iaf" in n:
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.1)
    return mod


def test_presets_validate():
    TOY_PRESET.validate()
    FULL_PRESET.validate()
    assert FULL_PRESET.down_factor == 16 and FULL_PRESET.latent_channels == 192
    with pytest.raises(ConfigError):
        CodecConfig(latent_channels=50).validate()
    with pytest.raises(ConfigError):
        CodecConfig(down_factor=6).validate()


def test_analysis_shape_contract():
    x = torch.rand(1, 3, 64, 64)
    y = Analysis(CFG, PRIOR.level_channels(8))(x, levels(x))
    assert y.shape == (1, 48, 8, 8)


def test_replicate_padding_rule():
    x = torch.rand(3, 65, 65)
    xp = pad_to_multiple(x, 8)
    assert xp.shape == (3, 72, 72)
    assert torch.equal(xp[:, :65, :65], x)
    assert torch.equal(xp[:, 70, :65], x[:, 64])
    assert torch.equal(xp[:, :65, 71], x[:, :, 64])
    ana = Analysis(CFG, PRIOR.level_channels(8))
    y = analysis(x, [l[0] for l in levels(xp[None])], ana)
    assert y.shape == (48, 9, 9)
    assert torch.equal(y, analysis(xp, [l[0] for l in levels(xp[None])], ana))


def test_too_small_input():
    with pytest.raises(InputError):
        Analysis(CFG, PRIOR.level_channels(8))(torch.rand(1, 3, 4, 4), levels(torch.rand(1, 3, 8, 8)))


def test_zero_iaf_analysis_is_prior_independent():
    x = torch.rand(1, 3, 64, 64)
    ana = Analysis(CFG, PRIOR.level_channels(8))
    a = ana(x, levels(x, seed=0))
    b = ana(x, levels(torch.rand(1, 3, 64, 64), seed=5))
    assert torch.equal(a, b)
    randomize_iaf(ana)
    assert not torch.equal(ana(x, levels(x, seed=0)), ana(x, levels(x, seed=5)))


def test_hyper_encode_shape_and_prior_independence():
    y = torch.randn(1, 48, 8, 8)
    ha = HyperAnalysis(CFG, PRIOR.level_channels(8)[-1])
    lv = levels(torch.rand(1, 3, 64, 64))
    z = hyper_encode(y, lv, ha)
    assert z.shape == (1, 32, 2, 2)
    assert torch.equal(z, hyper_encode(y, levels(torch.rand(1, 3, 64, 64), seed=3), ha))
    assert torch.equal(z, hyper_encode(y, lv, ha))


def test_hyper_decode_layer_oracle():
    hs = HyperSynthesis(CFG)
    z = torch.randn(32, 2, 2)
    out = hyper_decode(z, hs)
    assert out.shape == (96, 8, 8)
    h = F.interpolate(z[None], scale_factor=2, mode="nearest")
    h = F.gelu(F.conv2d(h, hs.up1.conv.weight, hs.up1.conv.bias, padding=1))
    h = F.interpolate(h, scale_factor=2, mode="nearest")
    h = F.conv2d(h, hs.up2.conv.weight, hs.up2.conv.bias, padding=1)
    assert torch.allclose(out, h[0], atol=1e-6)


def test_hyper_decode_crops_to_latent_size():
    out = hyper_decode(torch.randn(32, 3, 3), HyperSynthesis(CFG), size=(9, 9))
    assert out.shape == (96, 9, 9)


def test_hyper_decode_w_has_independent_weights():
    z = torch.randn(32, 2, 2)
    a, b = HyperSynthesis(CFG), HyperSynthesis(CFG)
    assert hyper_decode_w(z, b).shape == hyper_decode(z, a).shape
    assert not torch.equal(hyper_decode(z, a), hyper_decode_w(z, b))
    assert torch.equal(hyper_decode_w(z, b), hyper_decode_w(z, b))


def test_synthesis_shape_and_determinism():
    syn = Synthesis(CFG)
    y_hat = torch.round(torch.randn(48, 8, 8) * 3)
    w = torch.randn(96, 8, 8)
    zc = synthesis(y_hat, w, syn)
    assert zc.shape == (16, 16, 16)
    assert torch.equal(zc, synthesis(y_hat, w, syn))
    with pytest.raises(ContractError):
        synthesis(y_hat, w[:, :4], syn)


def test_synthesis_full_preset_content_shape():
    cfg = CodecConfig(base_channels=16, latent_channels=48, hyper_channels=16, down_factor=16, window_base=4,
                      fft_block=4, stage_depth=1)
    zc = Synthesis(cfg)(torch.randn(1, 48, 4, 4), torch.randn(1, 96, 4, 4))
    assert zc.shape == (1, 16, 16, 16)


def test_synthesis_analysis_grad_check():
    cfg = CodecConfig(base_channels=8, latent_channels=24, hyper_channels=8, down_factor=4, fft_block=4,
                      stage_depth=1)
    torch.manual_seed(3)
    prior = FixedFilterPrior(seed=0).double()

    class Chain(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.ana = randomize_iaf(Analysis(cfg, prior.level_channels(4)))
            self.syn = randomize_iaf(Synthesis(cfg))

        def forward(self, x, w):
            return self.syn(self.ana(x, list(prior.extract(x, 4))), w)

    chain = Chain().double()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    w = torch.randn(1, 48, 2, 2, dtype=torch.float64)
    weight = torch.randn(1, 16, 2, 2, dtype=torch.float64)
    for name in ("ana.downs.0.weight", "ana.stages.1.0.attn.qkv.weight", "ana.iafs.0.gamma.weight",
                 "syn.first.0.ffn.freq_filter", "syn.iaf.beta.weight", "syn.out.weight"):
        err = grad_check_parameter(chain, name, lambda m: (m(x, w) * weight).sum(), max_coords=12)
        assert err <= 1e-4, (name, err)
