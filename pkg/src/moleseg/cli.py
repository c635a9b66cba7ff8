"""Command-line entry point.

Subcommands mirror the experiment lifecycle: ``gen-data`` builds a synthetic
dataset, ``train`` runs the training loop, ``eval`` scores one scenario, and
``matrix`` sweeps every nonempty modality subset.

Exit codes: 0 success, 2 usage, 3 config, 4 data I/O, 5 numeric divergence.
``MMSEG_LOG`` (error|info|debug) controls verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import DataError, NoiseSpec, gen_synthetic, load_manifest, load_split
from .evaluation import Scenario, all_subset_scenarios, run_scenarios, write_results_csv
from .training import DivergenceError, train_loop

log = logging.getLogger("moleseg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5

ERROR_PREFIX = "moleseg: error:"


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("MMSEG_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            v = int(parts[0])
            return v, v
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moleseg",
        description="multi-modal segmentation: synthetic data, training, robustness grids")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-modal dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=32)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--size", type=_parse_size, default=(64, 64), metavar="N|HxW")
    g.add_argument("--modalities", default="rgb,depth,event,lidar")

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--threads", type=int, default=1)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one scenario")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--modalities", default=None,
                   help="comma list; default: all trained modalities")
    e.add_argument("--noise", choices=("gaussian", "uniform"), default=None)
    e.add_argument("--noise-modality", default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None, help="results CSV path")
    e.add_argument("--threads", type=int, default=1)

    m = sub.add_parser("matrix", help="evaluate every nonempty modality subset")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--split", default="test", choices=("train", "val", "test"))
    m.add_argument("--out", required=True)
    m.add_argument("--threads", type=int, default=1)
    return parser


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    modalities = [m for m in args.modalities.split(",") if m]
    if not modalities:
        raise UsageError("--modalities must name at least one modality")
    h, w = args.size
    manifest = gen_synthetic(args.out, args.seed, args.count, args.classes,
                             h, w, modalities)
    for key, value in manifest.items():
        print(f"{key} = {value}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    samples = load_split(cfg.data.root, "train")
    manifest = load_manifest(cfg.data.root)
    missing = [m for m in cfg.data.modalities if m not in manifest["modalities"]]
    if missing:
        raise ConfigError(f"config requests modalities absent from the dataset: {missing}")
    samples = [_restrict(s, cfg.data.modalities) for s in samples]
    from .checkpoint import build_model
    model = build_model(cfg)
    summary = train_loop(model, samples, cfg, args.out, threads=args.threads)
    print(f"steps = {summary['steps']}")
    print(f"best_train_miou = {summary['best_train_miou']:.4f}")
    print(f"metrics = {summary['metrics']}")
    return EXIT_OK


def _restrict(sample, modalities):
    from .data import drop_modalities
    return drop_modalities(sample, [m for m in modalities if m in sample.modalities])


def _load_ckpt_and_data(args):
    from .checkpoint import load_checkpoint
    model, cfg, step = load_checkpoint(args.checkpoint)
    samples = load_split(args.data, args.split)
    return model, cfg, samples


def cmd_eval(args) -> int:
    model, cfg, samples = _load_ckpt_and_data(args)
    keep = (tuple(m for m in args.modalities.split(",") if m)
            if args.modalities else tuple(model.modalities))
    unknown = [m for m in keep if m not in model.modalities]
    if unknown:
        raise DataError(f"modalities {unknown} were not part of training "
                        f"(trained: {model.modalities})")
    noise = None
    if args.noise:
        if not args.noise_modality:
            raise UsageError("--noise requires --noise-modality")
        noise = NoiseSpec(kind=args.noise, modality=args.noise_modality,
                          seed=args.seed)
        if noise.modality not in keep:
            raise DataError(f"noise target {noise.modality!r} is not among kept "
                            f"modalities {list(keep)}")
    scenario = Scenario(name="+".join(keep), keep=keep, noise=noise)
    results = run_scenarios(model, samples, [scenario], threads=args.threads)
    if args.out:
        write_results_csv(args.out, results, model.num_classes)
    print(f"miou = {results[0].miou:.4f}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    model, cfg, samples = _load_ckpt_and_data(args)
    scenarios = all_subset_scenarios(model.modalities)
    results = run_scenarios(model, samples, scenarios, threads=args.threads)
    write_results_csv(args.out, results, model.num_classes)
    for res in results:
        print(f"{res.scenario.name}: miou = {res.miou:.4f}")
    return EXIT_OK


class UsageError(Exception):
    pass


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train,
                "eval": cmd_eval, "matrix": cmd_matrix}
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
