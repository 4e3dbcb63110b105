"""Command-line entry point.

Subcommands cover the whole pipeline: gen-data, train, regularize, evaluate,
render. Exit codes: 0 success, 2 usage or configuration error, 3 numerical
failure (training divergence).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import metrics, nets, synthdata, trainer
from . import tensor as tc
from .config import ConfigError, RunConfig, resolve_config
from .nets import CheckpointError
from .synthdata import DatasetError
from .tensor import ShapeError, Tensor
from .trainer import TrainingDiverged

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True,
                   help="preset name (desk, paper) or path to a config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config, args.overrides)
    out = Path(args.out)
    synthdata.build_dataset(cfg.dataset_count, cfg.gen_spec(), cfg.dataset_seed, out)
    cfg.write(out / "resolved.cfg")
    print(f"wrote {cfg.dataset_count} triples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.overrides)
    dataset = synthdata.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved.cfg")

    def progress(t, record):
        if (t + 1) % args.print_every == 0:
            print(f"batch {t + 1}/{cfg.total_batches} "
                  f"L_D={record['L_D']:.4f} total={record['total']:.4f}", flush=True)

    result = trainer.run_training(
        dataset, out,
        net_config=cfg.net_config(), schedule=cfg.schedule(),
        weights=cfg.loss_weights(), affinity_params=cfg.affinity_params(),
        batch_size=cfg.batch_size, seed=cfg.train_seed,
        checkpoint_interval=cfg.checkpoint_interval,
        resume=args.resume, stop_after=args.stop_after, threads=cfg.threads,
        bce_one_sided=cfg.bce_one_sided,
        progress=progress if args.print_every > 0 else None)
    print(f"finished {result.batches_run} batches; checkpoint: {result.checkpoint}")
    return EXIT_OK


def _load_eval_bundle(path):
    bundle, _, _ = nets.load_checkpoint(path)
    return bundle


def cmd_regularize(args) -> int:
    bundle = _load_eval_bundle(args.checkpoint)
    mask = synthdata.load_png(args.mask)
    image = synthdata.load_png(args.image)
    if mask.shape[1:] != image.shape[1:]:
        print(f"error: mask raster {mask.shape[1:]} != image raster {image.shape[1:]}",
              file=sys.stderr)
        return EXIT_USAGE
    with tc.no_grad():
        out = nets.generator_forward(Tensor(mask[None]), Tensor(image[None]),
                                     bundle, training=False)
    synthdata.save_png(args.out, out.data[0])
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle = _load_eval_bundle(args.checkpoint)
    dataset = synthdata.load_dataset(args.data)
    report = metrics.evaluate_dataset(bundle, dataset, args.split)
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"scores_{args.split}.csv").write_text(report.to_csv())
        (out / f"scores_{args.split}.txt").write_text(report.to_text() + "\n")
        print(f"wrote score tables to {out}")
    return EXIT_OK


def _gray_to_rgb(mask01: np.ndarray) -> np.ndarray:
    return np.repeat(mask01.reshape(1, *mask01.shape[-2:]), 3, axis=0)


def cmd_render(args) -> int:
    bundle = _load_eval_bundle(args.checkpoint)
    dataset = synthdata.load_dataset(args.data)
    if not 0 <= args.index < len(dataset):
        print(f"error: index {args.index} outside dataset of {len(dataset)}",
              file=sys.stderr)
        return EXIT_USAGE
    x = dataset.x[args.index]
    z = dataset.z[args.index]
    y = dataset.y[args.index]
    with tc.no_grad():
        g = nets.generator_forward(Tensor(x[None]), Tensor(z[None]),
                                   bundle, training=False).data[0]
    panels = [z, _gray_to_rgb(x[0]), _gray_to_rgb(g[0]), _gray_to_rgb(y[0])]
    strip = np.concatenate(panels, axis=2)     # [image | input | regularized | ideal]
    synthdata.save_png(args.out, strip)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freg",
        description="Adversarial regularization of building footprints")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic footprint dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the regularization networks")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory for checkpoints/logs")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int, default=None,
                   help="interrupt after this many total batches")
    p.add_argument("--print-every", type=int, default=100)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("regularize", help="regularize one mask PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", required=True, help="input mask PNG (grayscale)")
    p.add_argument("--image", required=True, help="intensity image PNG (RGB)")
    p.add_argument("--out", required=True, help="output mask PNG")
    p.set_defaults(fn=cmd_regularize)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--out", default=None, help="directory for CSV/text tables")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("render", help="write a side-by-side comparison strip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, CheckpointError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
