import hashlib

import numpy as np
import pytest
import torch

from ffabic import entropy as E
from ffabic.bitstream import HEADER_BYTES as FIXED_HEADER, NUM_SLICES, Bitstream
from ffabic.codec import compress, decompress, file_bpp
from ffabic.data import heldout_crops
from ffabic.errors import FormatError, InputError, ModelError
from ffabic.training import build_model

HEADER_BYTES = FIXED_HEADER + 4 * (1 + NUM_SLICES)  # fixed header plus one length prefix per segment


def _digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.numpy().tobytes()).hexdigest()


@pytest.fixture(scope="module")
def image():
    return heldout_crops(1, 64)[0]


def test_round_trip_shape(fixed_model, image):
    out = decompress(compress(image, fixed_model).to_bytes(), fixed_model, steps=2)
    assert out.shape == (3, 64, 64)
    assert out.min() >= 0 and out.max() <= 1
    odd = image[:, :50, :37]
    assert fixed_model.decompress(fixed_model.compress(odd), bypass_diffusion=True).shape == (3, 50, 37)


def test_file_size_bounded_by_estimate(fixed_model):
    for x in heldout_crops(4, 64):
        bs, stats = fixed_model.compress_with_stats(x)
        bits = 8 * bs.num_bytes()
        bound = stats["est_bits_y"] + stats["est_bits_z"] + NUM_SLICES * 32 * 8 + 8 * HEADER_BYTES
        assert bits <= bound
        assert file_bpp(bs.to_bytes(), 64 * 64) == bits / 4096


def test_decode_deterministic(fixed_model, image):
    data = fixed_model.compress(image).to_bytes()
    assert data == fixed_model.compress(image).to_bytes()
    a = fixed_model.decompress(data, steps=3, seed=7)
    b = fixed_model.decompress(data, steps=3, seed=7)
    assert _digest(a) == _digest(b)


def test_latents_decode_exactly(fixed_model, image):
    bs = fixed_model.compress(image)
    _, _, y, z = fixed_model.encode_latents(image[None])
    z_hat, decoded, _ = fixed_model.decode_latents(Bitstream.from_bytes(bs.to_bytes()))
    assert torch.equal(z_hat, torch.round(z))
    hyper = fixed_model.hyper_synthesis(z_hat, y.shape[-2:])
    ref = []
    for i, y_i in enumerate(fixed_model.context.split(y)):
        p = fixed_model.context.params(hyper, ref, i)
        ref.append(torch.round(y_i - p.mu) + p.mu)
        assert torch.equal(decoded[i], ref[i]), i


def test_slice_decoding_is_causal(fixed_model, image):
    bs = fixed_model.compress(image)
    _, full, _ = fixed_model.decode_latents(bs)
    for i in (0, 4, 8):
        cut = Bitstream(bs.header, bs.z_segment, bs.y_segments[: i + 1] + [b""] * (NUM_SLICES - i - 1))
        _, part, _ = fixed_model.decode_latents(cut, num_slices=i + 1)
        for j in range(i + 1):
            assert torch.equal(part[j], full[j])


def test_wrong_model_rejected(fixed_model, image):
    data = fixed_model.compress(image).to_bytes()
    other = build_model(fixed_model.model_config, seed=1)
    with pytest.raises(ModelError):
        other.decompress(data)


def test_corrupt_streams_rejected(fixed_model, image):
    data = fixed_model.compress(image).to_bytes()
    with pytest.raises(FormatError):
        fixed_model.decompress(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        fixed_model.decompress(data[: len(data) - 3])
    with pytest.raises(InputError):
        fixed_model.compress(image[:1])


def test_noise_rate_close_to_rounded_rate(toy_run):
    model = toy_run.stage2[1.0]
    with torch.no_grad():
        noisy, hard = [], []
        for i, (_, x) in enumerate(toy_run.heldout):
            out = model(x[None], torch.Generator().manual_seed(i))
            noisy.append((out["bits_y"] + out["bits_z"]).item())
            hard.append((out["bits_y_hard"] + out["bits_z_hard"]).item())
    assert abs(sum(noisy) / sum(hard) - 1) <= 0.15
