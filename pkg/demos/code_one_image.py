"""Compress and decompress one image with an untrained codec on the fixed-filter prior.

Shows the bitstream layout and that decoding is deterministic for a seed.
No training needed, runs in a few seconds:

    python3 demos/code_one_image.py [image.png]
"""

import hashlib
import sys

import torch

from ffabic.bitstream import NUM_SLICES
from ffabic.data import heldout_crops, read_image
from ffabic.metrics import psnr
from ffabic.training import ModelConfig, build_model


def main():
    x = read_image(sys.argv[1]) if len(sys.argv) > 1 else heldout_crops(1, 64)[0]
    model = build_model(ModelConfig(provider="fixed"), seed=0).eval()

    bs, stats = model.compress_with_stats(x)
    data = bs.to_bytes()
    pixels = stats["pixels"]
    print(f"image {tuple(x.shape)}, {len(data)} bytes = {8 * len(data) / pixels:.3f} bpp")
    print(f"  estimate: y {stats['est_bits_y'] / pixels:.3f} bpp, z {stats['est_bits_z'] / pixels:.3f} bpp")
    print(f"  z segment {len(bs.z_segment)} B, slices " + " ".join(str(len(s)) for s in bs.y_segments[:NUM_SLICES]))

    for seed in (0, 0, 1):
        rec = model.decompress(data, steps=10, seed=seed)
        h = hashlib.sha256(rec.numpy().tobytes()).hexdigest()[:16]
        print(f"  seed {seed}: {h}  psnr {psnr(rec, x):.2f} dB (untrained)")
    rec = model.decompress(data, bypass_diffusion=True)
    print(f"  bypass: psnr {psnr(rec, x):.2f} dB")


if __name__ == "__main__":
    torch.set_num_threads(1)
    main()
