"""Shared fixtures. The trained toy pipeline is built once per session and reused."""

import copy
import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from ffabic.data import CropDataset, heldout_crops
from ffabic.evaluation import evaluate_model
from ffabic.training import LossWeights, build_model, load_config, read_metrics, train

torch.set_num_threads(1)
ROOT = Path(__file__).resolve().parent.parent
TOY_CONFIG = ROOT / "configs" / "toy.json"

STAGE2_STEPS = 600
STAGE3_STEPS = 300
LAMBDAS = (1.0, 0.25)


@dataclasses.dataclass
class ToyRun:
    root: Path
    model_cfg: object
    train_cfg: object
    dataset: CropDataset
    heldout: list
    prior_state: dict
    prior_history: list
    untrained: object
    stage2: dict
    stage3: object
    timings: dict

    def fresh_model(self):
        m = build_model(self.model_cfg, seed=self.train_cfg.seed)
        m.load_state_dict(self.prior_state)
        return m

    def metrics(self, lam):
        return read_metrics(self.root / f"stage2_l{lam}" / "metrics_stage2.tsv")


def summary(rows):
    return {"bpp": float(np.mean([r[1] for r in rows])), "psnr": float(np.mean([r[2] for r in rows])),
            "ms_ssim": float(np.mean([r[3] for r in rows]))}


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> ToyRun:
    root = tmp_path_factory.mktemp("toy_run")
    model_cfg, train_cfg, _ = load_config(TOY_CONFIG)
    ds = CropDataset.builtin(train_cfg.crop, train_cfg.seed)
    heldout = [(f"heldout_{i}", x) for i, x in enumerate(heldout_crops(8, 64))]
    timings = {}

    t = time.time()
    model = build_model(model_cfg, seed=train_cfg.seed)
    train(dataclasses.replace(train_cfg, stage="1"), ds, root / "stage1", model=model)
    timings["stage1"] = time.time() - t
    prior_state = copy.deepcopy(model.state_dict())
    history = [float(l.split("\t")[1]) for l in (root / "stage1" / "metrics_stage1.tsv").read_text().splitlines()[1:]]

    stage2 = {}
    for lam in LAMBDAS:
        t = time.time()
        m = build_model(model_cfg, seed=train_cfg.seed)
        m.load_state_dict(prior_state)
        cfg = dataclasses.replace(train_cfg, stage="2", steps=STAGE2_STEPS,
                                  weights=LossWeights(lam, 1.0, train_cfg.weights.lambda3, 0.0))
        train(cfg, ds, root / f"stage2_l{lam}", model=m)
        stage2[lam] = m
        timings[f"stage2_l{lam}"] = time.time() - t

    t = time.time()
    m3 = copy.deepcopy(stage2[LAMBDAS[0]])
    m3.model_config = model_cfg
    cfg = dataclasses.replace(train_cfg, stage="3", steps=STAGE3_STEPS, weights=LossWeights(0, 0, 0, 1.0))
    train(cfg, ds, root / "stage3", model=m3)
    timings["stage3"] = time.time() - t

    untrained = build_model(model_cfg, seed=train_cfg.seed)
    untrained.load_state_dict(prior_state)
    return ToyRun(root, model_cfg, train_cfg, ds, heldout, prior_state, history, untrained, stage2, m3, timings)


@pytest.fixture(scope="session")
def fixed_model():
    """Small untrained codec on the fixed-filter prior; needs no training."""
    from ffabic.training import ModelConfig

    torch.manual_seed(0)
    return build_model(ModelConfig(provider="fixed"), seed=0).eval()
