import numpy as np
import pytest
import torch

from ffabic.data import CropDataset
from ffabic.errors import InputError, StateError
from ffabic.metrics import psnr
from ffabic.prior import (FixedFilterPrior, PriorTrainConfig, ToyLatentPrior, content_target, extract_prior,
                          train_toy_prior)


def test_fixed_prior_constant_image_levels_are_constant():
    x = torch.full((3, 64, 64), 0.3)
    for level in extract_prior(x, FixedFilterPrior(seed=1), 8):
        assert torch.allclose(level, level[:, :1, :1].expand_as(level), atol=1e-6)


def test_fixed_prior_level_shapes_and_provenance():
    x = torch.rand(2, 3, 64, 64)
    feats = extract_prior(x, FixedFilterPrior(), 8)
    assert [tuple(l.shape[-2:]) for l in feats] == [(32, 32), (16, 16), (8, 8)]
    assert feats.provider == "fixed-filter"


def test_fixed_prior_determinism_and_seed():
    x = torch.rand(3, 64, 64)
    a = extract_prior(x, FixedFilterPrior(seed=4), 8)
    b = extract_prior(x, FixedFilterPrior(seed=4), 8)
    c = extract_prior(x, FixedFilterPrior(seed=5), 8)
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    assert not torch.equal(a[0], c[0])


def test_fixed_content_target_shape_and_decode():
    x = torch.rand(3, 64, 64)
    prior = FixedFilterPrior()
    t = content_target(x, prior)
    assert t.shape == (16, 16, 16)
    assert torch.equal(t, content_target(x, prior))
    assert prior.decode(t).shape == (3, 64, 64)
    smooth = torch.full((3, 64, 64), 0.25)
    assert torch.allclose(prior.decode(prior.content_target(smooth)), smooth, atol=1e-5)


def test_untrained_toy_prior_raises():
    p = ToyLatentPrior()
    with pytest.raises(StateError):
        p.extract(torch.rand(3, 64, 64), 8)
    with pytest.raises(StateError):
        p.content_target(torch.rand(3, 64, 64))


def test_train_toy_prior_empty_dataset():
    with pytest.raises(InputError):
        train_toy_prior(None, PriorTrainConfig(steps=1))
    with pytest.raises(InputError):
        CropDataset([torch.rand(3, 16, 16)], crop=64)


def test_toy_prior_short_training_is_deterministic():
    ds = CropDataset.builtin(32, 0)
    cfg = PriorTrainConfig(steps=15, batch_size=4)
    a, ha = train_toy_prior(ds, cfg)
    b, hb = train_toy_prior(ds, cfg)
    assert ha == hb
    assert all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))


def test_toy_prior_levels_match_codec_stages(toy_run):
    m = toy_run.fresh_model()
    feats = m.prior.extract(torch.rand(1, 3, 64, 64), 8)
    assert [tuple(l.shape[-3:]) for l in feats] == [(32, 32, 32), (16, 16, 16), (16, 8, 8)]
    assert feats.provider == "toy-latent"
    assert m.prior.content_target(torch.rand(3, 64, 64)).shape == (16, 16, 16)


def test_toy_prior_loss_decreases(toy_run):
    h = np.array(toy_run.prior_history)
    k = len(h) // 10
    assert h[-k:].mean() < h[:k].mean()


def test_toy_prior_heldout_psnr(toy_run):
    prior = toy_run.fresh_model().prior
    scores = []
    with torch.no_grad():
        for _, x in toy_run.heldout:
            rec = prior.decode(prior.content_target(x)).clamp(0, 1)
            scores.append(psnr(rec, x))
    print(f"toy prior held-out PSNR: mean {np.mean(scores):.2f} dB, min {np.min(scores):.2f} dB")
    assert np.mean(scores) >= 28.0


def test_toy_prior_train_domain_reconstruction(toy_run):
    prior = toy_run.fresh_model().prior
    x = toy_run.dataset.batch(10**7, 8)
    with torch.no_grad():
        via_target = psnr(prior.decode(prior.content_target(x)).clamp(0, 1), x)
        via_autoencoder = psnr(prior.autoencode(x).clamp(0, 1), x)
    assert via_target >= via_autoencoder - 0.1
