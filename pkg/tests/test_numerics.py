import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ffabic.errors import ConfigError, ContractError
from ffabic.numerics import (WindowSpec, fft2, grad_check, grad_check_parameter, ifft2, spectrum,
                             window_merge, window_partition)


def brute_windows(x, wh, ww):
    """Index-arithmetic oracle: pad with zeros, then copy each window out by slicing."""
    C, H, W = x.shape
    Hp, Wp = -(-H // wh) * wh, -(-W // ww) * ww
    pad = np.zeros((C, Hp, Wp), dtype=x.dtype)
    pad[:, :H, :W] = x
    out = []
    for i in range(Hp // wh):
        for j in range(Wp // ww):
            out.append(pad[:, i * wh:(i + 1) * wh, j * ww:(j + 1) * ww])
    return np.stack(out)


def test_window_count_no_padding():
    x = torch.arange(16.0).reshape(1, 4, 4)
    win, info = window_partition(x, WindowSpec(2, 2))
    assert win.shape == (4, 1, 2, 2)
    assert info.padded_height == 4 and info.num_windows == 4


def test_window_padding_matches_index_oracle():
    x = torch.randn(1, 6, 6)
    win, info = window_partition(x, WindowSpec(4, 4))
    assert (info.padded_height, info.padded_width, info.num_windows) == (8, 8, 4)
    np.testing.assert_array_equal(win.numpy(), brute_windows(x.numpy(), 4, 4))
    assert torch.equal(window_merge(win, info), x)


def test_single_window_is_reshape():
    x = torch.randn(2, 3, 5, 7)
    win, info = window_partition(x, WindowSpec(5, 7))
    assert torch.equal(win, x)
    assert torch.equal(window_merge(win, info), x)


def test_batched_window_order():
    x = torch.randn(2, 3, 4, 6)
    win, _ = window_partition(x, WindowSpec(2, 3))
    for b in range(2):
        np.testing.assert_array_equal(win[b * 4:(b + 1) * 4].numpy(), brute_windows(x[b].numpy(), 2, 3))


def test_round_trip_100_random_shapes():
    g = np.random.default_rng(0)
    for _ in range(100):
        C, H, W = (int(v) for v in g.integers(1, 17, size=3))
        wh, ww = (int(v) for v in g.integers(1, 9, size=2))
        x = torch.from_numpy(g.standard_normal((C, H, W)))
        win, info = window_partition(x, WindowSpec(wh, ww))
        assert torch.equal(window_merge(win, info), x)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 12), st.integers(1, 12),
       st.integers(1, 6), st.integers(1, 6))
def test_round_trip_property(B, C, H, W, wh, ww):
    x = torch.randn(B, C, H, W)
    win, info = window_partition(x, WindowSpec(wh, ww))
    assert win.shape[0] == B * info.num_windows
    assert torch.equal(window_merge(win, info), x)


def test_window_errors():
    with pytest.raises(ConfigError):
        window_partition(torch.zeros(1, 4, 4), WindowSpec(0, 2))
    win, info = window_partition(torch.zeros(1, 4, 4), WindowSpec(2, 2))
    with pytest.raises(ContractError):
        window_merge(win[:3], info)
    with pytest.raises(ContractError):
        window_partition(torch.zeros(4, 4), WindowSpec(2, 2))


def dft_oracle(x):
    """Direct O(N^2) DFT via the explicit twiddle matrices."""
    H, W = x.shape[-2:]
    Fh = np.exp(-2j * np.pi * np.outer(np.arange(H), np.arange(H)) / H)
    Fw = np.exp(-2j * np.pi * np.outer(np.arange(W), np.arange(W)) / W)
    return Fh @ x @ Fw.T


def test_fft_matches_direct_dft():
    x = torch.randn(3, 6, 5, dtype=torch.float64)
    X = fft2(x).numpy()
    for c in range(3):
        np.testing.assert_allclose(X[c], dft_oracle(x[c].numpy()), atol=1e-10)


def test_fft_constant_plane():
    c, H, W = 0.7, 8, 6
    X = fft2(torch.full((H, W), c, dtype=torch.float64))
    assert abs(X[0, 0].real - c * H * W) < 1e-9
    rest = X.abs().flatten()[1:]
    assert rest.max() <= 1e-5 * c * H * W


def test_fft_inverse_and_parseval():
    x = torch.randn(2, 3, 9, 7, dtype=torch.float64)
    assert torch.allclose(ifft2(fft2(x)).real, x, atol=1e-12)
    lhs = (x ** 2).sum()
    rhs = (fft2(x).abs() ** 2).sum() / (9 * 7)
    assert abs(lhs - rhs) / lhs <= 1e-5


def test_spectrum_cases():
    H, W = 5, 4
    s = spectrum(torch.full((H, W), 2.0, dtype=torch.float64))
    assert s.amplitude[0, 0].item() == pytest.approx(2.0 * H * W)
    assert s.phase[0, 0].item() == 0.0
    x = torch.randn(3, 8, 8, dtype=torch.float64)
    assert torch.allclose(spectrum(-x).amplitude, spectrum(x).amplitude)
    d = torch.zeros(6, 6, dtype=torch.float64)
    d[0, 0] = 1.0
    assert torch.allclose(spectrum(d).amplitude, torch.ones(6, 6, dtype=torch.float64))
    ph = spectrum(x).phase
    assert (ph > -math.pi).all() and (ph <= math.pi).all()


def test_spectrum_zero_bins_have_zero_phase():
    s = spectrum(torch.zeros(4, 4, dtype=torch.float64))
    assert torch.equal(s.phase, torch.zeros(4, 4, dtype=torch.float64))


def test_grad_check_quadratic():
    theta = torch.randn(10, dtype=torch.float64)
    assert grad_check(lambda t: (t ** 2).sum(), theta) < 1e-6


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.clone()

        @staticmethod
        def backward(ctx, g):
            return 2 * g

    theta = torch.randn(4, dtype=torch.float64)
    assert grad_check(lambda t: Bad.apply(t).sum(), theta) > 0.1


def test_grad_check_non_finite():
    with pytest.raises(FloatingPointError):
        grad_check(lambda t: (t / 0.0).sum(), torch.ones(2, dtype=torch.float64))


def test_grad_check_parameter_restores_module():
    lin = torch.nn.Linear(3, 2).double()
    before = lin.weight.detach().clone()
    x = torch.randn(5, 3, dtype=torch.float64)
    err = grad_check_parameter(lin, "weight", lambda m: m(x).pow(2).sum())
    assert err < 1e-6
    assert isinstance(lin.weight, torch.nn.Parameter) and torch.equal(lin.weight, before)
