"""Staged training of the toy codec, then an RD point per rate weight.

Stage 1 fits the toy latent prior, stage 2 trains the codec at two rate
weights, stage 3 trains the denoiser of the first. Every stage writes its
metrics TSV and checkpoints under OUT. About 15 minutes on one CPU core at
the default step counts; pass --quick for a smoke run.

    python3 demos/train_toy.py OUT [--quick]
"""

import argparse
import copy
import dataclasses
from pathlib import Path

import numpy as np
import torch

from ffabic.data import CropDataset, heldout_crops
from ffabic.evaluation import evaluate_model, rd_point
from ffabic.metrics import RDCurve, write_curves
from ffabic.training import LossWeights, build_model, load_config, read_metrics, train

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "toy.json"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)

    model_cfg, cfg, _ = load_config(CONFIG)
    if args.quick:
        cfg = dataclasses.replace(cfg, steps=20, checkpoint_every=0,
                                  prior=dataclasses.replace(cfg.prior, steps=50))
    ds = CropDataset.builtin(cfg.crop, cfg.seed)
    images = [(f"heldout_{i}", x) for i, x in enumerate(heldout_crops(8, cfg.crop))]

    model = build_model(model_cfg, seed=cfg.seed)
    train(dataclasses.replace(cfg, stage="1"), ds, out / "stage1", model=model)
    prior = copy.deepcopy(model.state_dict())
    print(f"stage 1: prior loss {read_metrics(out / 'stage1' / 'metrics_stage1.tsv')['L_prior'][-1]:.5f}")

    models = {}
    for lam in (1.0, 0.25):
        m = build_model(model_cfg, seed=cfg.seed)
        m.load_state_dict(prior)
        w = LossWeights(lam, 1.0, cfg.weights.lambda3, 0.0)
        train(dataclasses.replace(cfg, stage="2", weights=w), ds, out / f"stage2_l{lam}", model=m)
        models[lam] = m
        total = read_metrics(out / f"stage2_l{lam}" / "metrics_stage2.tsv")["total"]
        print(f"stage 2, lambda1={lam}: total loss {total[:10].mean():.3f} -> {total[-10:].mean():.3f}")

    steps3 = 20 if args.quick else 300
    m3 = models[1.0]
    train(dataclasses.replace(cfg, stage="3", steps=steps3, weights=LossWeights(0, 0, 0, 1.0)), ds,
          out / "stage3", model=m3)

    points = []
    for lam, m in sorted(models.items()):
        rows = evaluate_model(m, images, bypass_diffusion=True)
        points.append(rd_point(rows, "psnr"))
        print(f"lambda1={lam}: {points[-1].bpp:.3f} bpp, {points[-1].quality:.2f} dB (bypass)")
    rows = evaluate_model(m3, images, steps=25, seed=0)
    print(f"stage 3 diffusion decode: {np.mean([r[1] for r in rows]):.3f} bpp, "
          f"{np.mean([r[2] for r in rows]):.2f} dB")
    write_curves(out / "curve.tsv", [RDCurve(points, "toy")])
    print(f"curve written to {out / 'curve.tsv'}")


if __name__ == "__main__":
    torch.set_num_threads(1)
    main()
