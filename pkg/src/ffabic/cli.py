"""Command-line entry point: ``python -m ffabic <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data, format or model error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .data import CropDataset, list_images, read_image, write_image
from .errors import (ConfigError, DivergenceError, FFABError, FormatError, InputError, IntegrityError,
                     ModelError, RangeError, StateError)
from .metrics import bd_rate, read_curve, write_curves

log = logging.getLogger("ffabic")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DATA_ERRORS = (FormatError, ModelError, IntegrityError, InputError, RangeError, DivergenceError, StateError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dataset(data_cfg: dict, crop: int, seed: int) -> CropDataset:
    if data_cfg.get("dir"):
        return CropDataset.from_dir(data_cfg["dir"], crop, seed)
    return CropDataset.builtin(crop, seed)


def _images(directory: str) -> list[tuple[str, torch.Tensor]]:
    return [(p.name, read_image(p)) for p in list_images(directory)]


def _load(path: str):
    from .training import load_model

    return load_model(path)


# commands -----------------------------------------------------------------

def cmd_train(a) -> int:
    from .training import build_model, default_weights, load_checkpoint, load_config, train

    model_cfg, train_cfg, data_cfg = load_config(a.config)
    if a.stage is not None and a.stage != train_cfg.stage:
        train_cfg.stage = a.stage
        train_cfg.weights = default_weights(a.stage, train_cfg.weights.lambda1)
    if a.seed is not None:
        train_cfg.seed = a.seed
    if a.steps is not None:
        train_cfg.steps = a.steps
    out = Path(a.out)
    init = a.init or (out / "model.ckpt" if (out / "model.ckpt").exists() and train_cfg.stage != "1" else None)
    if init:
        model, _ = load_checkpoint(init, expected_config_hash=model_cfg.hash())
        model.model_config = model_cfg
    else:
        model = build_model(model_cfg, seed=train_cfg.seed)
    ds = _dataset(data_cfg, train_cfg.crop, train_cfg.seed)
    train(train_cfg, ds, out, model=model, resume=a.resume)
    print(out / "model.ckpt")
    return EXIT_OK


def cmd_compress(a) -> int:
    model = _load(a.model)
    bs = model.compress(read_image(a.input))
    data = bs.to_bytes()
    Path(a.output).write_bytes(data)
    h = bs.header
    print(f"{a.output}: {len(data)} bytes, {8 * len(data) / (h.width * h.height):.4f} bpp")
    return EXIT_OK


def cmd_decompress(a) -> int:
    model = _load(a.model)
    img = model.decompress(Path(a.input).read_bytes(), steps=a.steps, seed=a.seed,
                           bypass_diffusion=a.bypass_diffusion)
    write_image(img, a.output)
    print(f"{a.output}: {img.shape[-1]}x{img.shape[-2]}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .evaluation import evaluate_model, write_eval

    rows = evaluate_model(_load(a.model), _images(a.dir), steps=a.steps, seed=a.seed,
                          bypass_diffusion=a.bypass_diffusion)
    write_eval(a.out, rows)
    for r in rows:
        print("{}\t{:.4f}\t{:.3f}\t{:.4f}".format(*r))
    return EXIT_OK


def cmd_rd_curve(a) -> int:
    from .evaluation import rd_curves

    models = [_load(p) for p in a.models]
    curves = rd_curves(models, _images(a.dir), label=a.label, steps=a.steps, seed=a.seed,
                       bypass_diffusion=a.bypass_diffusion)
    write_curves(a.out, curves)
    print(a.out)
    return EXIT_OK


def cmd_bd_rate(a) -> int:
    value = bd_rate(read_curve(a.anchor, a.metric), read_curve(a.test, a.metric))
    print(f"{value:+.1f}%")
    return EXIT_OK


def cmd_bands(a) -> int:
    from .evaluation import band_maps, write_band_maps

    files = write_band_maps(band_maps(_load(a.model), read_image(a.input)), a.out)
    print(f"{len(files)} maps written to {a.out}")
    return EXIT_OK


def cmd_ablate_windows(a) -> int:
    from .evaluation import ABLATION_HEADER, ablate_windows
    from .metrics import write_tsv
    from .training import load_config

    model_cfg, train_cfg, data_cfg = load_config(a.config)
    if a.steps is not None:
        train_cfg.steps = a.steps
    out = Path(a.out)
    work = out.parent / (out.stem + "_runs")
    rows = ablate_windows(model_cfg, train_cfg, _dataset(data_cfg, train_cfg.crop, train_cfg.seed),
                          _images(a.dir), work, bases=a.bases, steps=a.decode_steps)
    write_tsv(out, ABLATION_HEADER, rows)
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ffabic", description="Toy-scale generative image codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def decode_opts(sp, bypass=True):
        sp.add_argument("--steps", type=int, default=25, help="DDIM steps")
        sp.add_argument("--seed", type=int, default=0, help="sampler seed")
        if bypass:
            sp.add_argument("--bypass-diffusion", action="store_true",
                            help="decode z_c directly through the prior decoder")

    sp = sub.add_parser("train", help="run one training stage")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stage", choices=("1", "2", "3", "joint"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--init", help="start from this checkpoint (default: OUT/model.ckpt if present)")
    sp.add_argument("--resume", help="resume an interrupted run from a periodic checkpoint")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("compress")
    sp.add_argument("--model", required=True)
    sp.add_argument("-i", "--input", required=True)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(fn=cmd_compress)

    sp = sub.add_parser("decompress")
    sp.add_argument("--model", required=True)
    sp.add_argument("-i", "--input", required=True)
    sp.add_argument("-o", "--output", required=True)
    decode_opts(sp)
    sp.set_defaults(fn=cmd_decompress)

    sp = sub.add_parser("eval", help="per-image bpp, PSNR and MS-SSIM")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out", required=True)
    decode_opts(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("rd-curve", help="one RD point per model")
    sp.add_argument("--models", nargs="+", required=True)
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--label", default="ffabic")
    decode_opts(sp)
    sp.set_defaults(fn=cmd_rd_curve)

    sp = sub.add_parser("bd-rate")
    sp.add_argument("--anchor", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--metric", default="psnr")
    sp.set_defaults(fn=cmd_bd_rate)

    sp = sub.add_parser("bands", help="per-band activation maps of every FFAB block")
    sp.add_argument("--model", required=True)
    sp.add_argument("-i", "--input", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_bands)

    sp = sub.add_parser("ablate-windows", help="train and score window_base 2, 4, 8")
    sp.add_argument("--config", required=True)
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, help="stage-2 steps per window base")
    sp.add_argument("--bases", type=int, nargs="+", default=[2, 4, 8])
    sp.add_argument("--decode-steps", type=int, default=25)
    sp.set_defaults(fn=cmd_ablate_windows)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except DATA_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, FFABError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        # unreadable image or bitstream contents
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
