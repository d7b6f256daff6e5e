import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ffabic import rangecoder as rc
from ffabic.bitstream import HEADER_BYTES, NUM_SLICES, Bitstream, Header
from ffabic.entropy import (SIGMA_MIN, ChannelAutoregressive, FactorizedPrior, GaussianParams, coded_bits,
                            decode_stream, encode_stream, factorized_bits, quantize, rate_estimate, slice_layout)
from ffabic.errors import ConfigError, ContractError, FormatError, IntegrityError


def test_round_half_away_from_zero():
    v = torch.tensor([0.4, -1.5, 1.5, 2.5, -0.5, 0.5, -0.4])
    assert quantize(v, "round").tolist() == [0.0, -2.0, 2.0, 3.0, -1.0, 1.0, -0.0]


def test_noise_mode_bound_and_seed():
    v = torch.randn(1000)
    g1, g2 = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
    a, b = quantize(v, "noise", generator=g1), quantize(v, "noise", generator=g2)
    assert torch.equal(a, b)
    assert (a - v).abs().max() <= 0.5


def test_mean_offset_rounding():
    out = quantize(torch.tensor([1.3]), "round", offset=torch.tensor([1.1]))
    assert out.item() == pytest.approx(1.1)


def test_ste_gradient_is_identity():
    v = torch.tensor([0.3, 1.7], requires_grad=True)
    quantize(v, "ste").sum().backward()
    assert torch.equal(v.grad, torch.ones(2))
    with pytest.raises(ConfigError):
        quantize(v, "floor")


def test_slice_layout():
    assert slice_layout(48) == [2, 2, 4, 4, 4, 4, 6, 6, 8, 8]
    assert slice_layout(192) == [8, 8, 16, 16, 16, 16, 24, 24, 32, 32]
    for M in range(24, 24 * 20, 24):
        assert sum(slice_layout(M)) == M
    with pytest.raises(ConfigError):
        slice_layout(50)


def test_channel_autoregressive_causality():
    torch.manual_seed(0)
    car = ChannelAutoregressive(48, 96)
    hyper = torch.randn(1, 96, 4, 4)
    slices = [torch.randn(1, c, 4, 4) for c in slice_layout(48)]
    for i in range(10):
        base = car.params(hyper, slices[:i], i)
        for j in range(10):
            pert = [s.clone() for s in slices]
            pert[j] += 1.0
            p = car.params(hyper, pert[:i], i)
            changed = not (torch.equal(p.mu, base.mu) and torch.equal(p.sigma, base.sigma))
            assert changed == (j < i), (i, j)
    with pytest.raises(ContractError):
        car.params(hyper, slices[:2], 3)


def test_sigma_floor():
    car = ChannelAutoregressive(24, 48)
    with torch.no_grad():
        for p in car.parameters():
            p.fill_(-50.0)
    p = car.params(torch.randn(1, 48, 2, 2) * 100, [], 0)
    assert p.sigma.min() >= SIGMA_MIN


def test_single_symbol_bits_against_erf():
    phi = lambda x: 0.5 * (1 + math.erf(x / math.sqrt(2)))
    expected = -math.log2(phi(0.5) - phi(-0.5))
    assert expected == pytest.approx(1.3848665342909896, abs=1e-12)  # frozen erf oracle
    p = GaussianParams(torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    assert rate_estimate(torch.zeros(1, dtype=torch.float64), p).item() == pytest.approx(expected, abs=1e-9)


def test_bits_near_zero_at_sigma_floor():
    p = GaussianParams(torch.tensor([0.3]), torch.tensor([SIGMA_MIN]))
    assert rate_estimate(torch.tensor([0.3]), p).item() < 1e-4


def test_rate_additivity():
    g = torch.Generator().manual_seed(0)
    v = torch.round(torch.randn(2, 50, generator=g) * 3)
    mu, sigma = torch.randn(2, 50, generator=g), torch.rand(2, 50, generator=g) * 3
    total = rate_estimate(v, GaussianParams(mu, sigma))
    parts = sum(rate_estimate(v[i], GaussianParams(mu[i], sigma[i])) for i in range(2))
    assert total.item() == pytest.approx(parts.item(), rel=1e-6)


def test_gaussian_round_trip_100_tensors():
    rng = np.random.default_rng(0)
    for i in range(100):
        shape = tuple(int(s) for s in rng.integers(1, 6, size=3))
        sigma = torch.from_numpy(rng.uniform(0.01, 20, size=shape))
        sym = np.round(rng.standard_normal(shape) * sigma.numpy()).astype(np.int64)
        if i % 10 == 0:
            sym.flat[0] = int(rng.choice([-1, 1])) * int(rng.integers(65, 5000))
        data = encode_stream(sym, GaussianParams(torch.zeros_like(sigma), sigma))
        out = decode_stream(data, GaussianParams(torch.zeros_like(sigma), sigma), shape)
        np.testing.assert_array_equal(out, sym)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-10**6, 10**6), min_size=0, max_size=40), st.floats(0.05, 50))
def test_range_coder_round_trip_property(symbols, sigma):
    cdf = rc.freqs_to_cdf(rc.pmf_to_freqs(
        np.repeat(np.exp(-0.5 * (np.arange(-64, 65) / sigma) ** 2)[None] / (sigma * 2.5066), len(symbols), 0)))
    data = rc.encode_symbols(symbols, cdf)
    assert rc.decode_symbols(data, cdf).tolist() == symbols


def test_iid_coding_close_to_estimate():
    g = torch.Generator().manual_seed(0)
    n = 20000
    sym = quantize(torch.randn(n, generator=g, dtype=torch.float64), "round")
    p = GaussianParams(torch.zeros(n, dtype=torch.float64), torch.ones(n, dtype=torch.float64))
    est = rate_estimate(sym, p).item()
    assert est / n == pytest.approx(2.1, abs=0.05)  # cross-entropy of the rounded normal
    data = encode_stream(sym, p)
    assert 8 * len(data) <= 1.01 * est + 32 * 8
    assert coded_bits(sym, p) == pytest.approx(est, rel=5e-3)


def test_low_entropy_source():
    # symbols concentrated at 0 under sigma = 0.5: about 1.385 / 2 bits on average
    g = torch.Generator().manual_seed(1)
    n = 20000
    sigma = torch.full((n,), 0.5, dtype=torch.float64)
    sym = quantize(torch.randn(n, generator=g, dtype=torch.float64) * 0.5, "round")
    p = GaussianParams(torch.zeros(n, dtype=torch.float64), sigma)
    est = rate_estimate(sym, p).item()
    assert 8 * len(encode_stream(sym, p)) <= 1.01 * est + 256


def test_empty_stream():
    p = GaussianParams(torch.zeros(0), torch.ones(0))
    data = encode_stream(np.zeros(0, dtype=np.int64), p)
    assert len(data) <= 32
    assert decode_stream(data, p, (0,)).shape == (0,)


def test_non_integer_symbols_rejected():
    with pytest.raises(ContractError):
        encode_stream(np.array([0.5]), GaussianParams(torch.zeros(1), torch.ones(1)))


def test_decoder_overrun_raises():
    cdf = rc.freqs_to_cdf(rc.pmf_to_freqs(np.full((200, 129), 1 / 129)))
    with pytest.raises(IntegrityError):
        rc.decode_symbols(b"", cdf)


def test_pmf_to_freqs_properties():
    rng = np.random.default_rng(0)
    pmf = rng.dirichlet(np.ones(129), size=50) * rng.uniform(0.5, 1.0, size=(50, 1))
    f = rc.pmf_to_freqs(pmf)
    assert (f >= 1).all()
    assert (f.sum(-1) == rc.TOTAL).all()


def test_factorized_cdf_monotone_and_mass():
    torch.manual_seed(0)
    fp = FactorizedPrior(8)
    with torch.no_grad():
        for p in fp.parameters():
            p.add_(torch.randn_like(p) * 0.3)
    t = torch.linspace(-70, 70, 281).repeat(8, 1)
    c = fp.cdf(t)
    assert (c[:, 1:] >= c[:, :-1]).all()
    assert (fp.cdf(torch.full((8, 1), 64.5)) - fp.cdf(torch.full((8, 1), -64.5)) >= 1 - 1e-4).all()
    table = fp.cdf_table()
    assert (np.diff(table, axis=-1) >= 1).all()


def test_factorized_coding_close_to_estimate():
    torch.manual_seed(0)
    fp = FactorizedPrior(4)
    z = torch.round(torch.randn(4, 30, 30) * 2)
    est = factorized_bits(z, fp).item()
    data = encode_stream(z, fp)
    assert 8 * len(data) <= 1.01 * est + 256
    np.testing.assert_array_equal(decode_stream(data, fp, z.shape), z.numpy().astype(np.int64))
    with pytest.raises(ContractError):
        encode_stream(torch.zeros(3, 2, 2), fp)


def header(**kw):
    base = dict(width=64, height=48, down_factor=8, latent_channels=48, model_hash=0x1234_5678_9ABC_DEF0)
    base.update(kw)
    return Header(**base)


def test_bitstream_round_trip():
    bs = Bitstream(header(), b"zz", [bytes([i]) * i for i in range(NUM_SLICES)])
    data = bs.to_bytes()
    assert len(data) == bs.num_bytes()
    back = Bitstream.from_bytes(data)
    assert back == bs
    assert HEADER_BYTES == 25


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + bytes([9]) + d[5:], "version"),
    (lambda d: d[:10], "truncated header"),
    (lambda d: d[:-1], "truncated"),
    (lambda d: d + b"\0", "trailing"),
])
def test_bitstream_format_errors(mutate, msg):
    data = Bitstream(header(), b"abc", [b"x"] * NUM_SLICES).to_bytes()
    with pytest.raises(FormatError, match=msg):
        Bitstream.from_bytes(mutate(data))


def test_bitstream_needs_ten_slices():
    with pytest.raises(FormatError):
        Bitstream(header(), b"", [b""] * 3).to_bytes()
