"""Command-line interface.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 numerical failure. Heavy imports happen inside command handlers so the
thread-count flag can pin BLAS pools before numpy loads.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys


def _set_threads(n):
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


# ------------------------------------------------------------- run config

_TASKS = ("segment", "count")
_MODELS = ("unet", "contextual-unet")


class RunConfig:
    """Fully resolved training run description (parsed from a JSON file)."""

    def __init__(self, task, model, seed, out_dir, data_dir, split, network,
                 trainspec, optimizer, augmentation, density_sigma, precision, init):
        self.task = task
        self.model = model
        self.seed = seed
        self.out_dir = out_dir
        self.data_dir = data_dir
        self.split = split
        self.network = network
        self.trainspec = trainspec
        self.optimizer = optimizer
        self.augmentation = augmentation
        self.density_sigma = density_sigma
        self.precision = precision
        self.init = init

    @classmethod
    def from_dict(cls, d):
        from .augment import AugmentationSpec
        from .data import SplitSpec
        from .errors import ConfigError
        from .network import HEAD_DENSITY, HEAD_SEGMENTATION, HourglassConfig
        from .optim import OptimizerConfig
        from .training import TrainSpec

        def need(section, key, path):
            if key not in section:
                raise ConfigError(f"missing required config field: {path}")
            return section[key]

        task = need(d, "task", "task")
        if task not in _TASKS:
            raise ConfigError(f"task must be one of {_TASKS}, got {task!r}")
        model = d.get("model", "contextual-unet")
        if model not in _MODELS:
            raise ConfigError(f"model must be one of {_MODELS}, got {model!r}")
        seed = need(d, "seed", "seed")
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        out_dir = need(d, "out_dir", "out_dir")

        data = need(d, "data", "data")
        data_dir = need(data, "dir", "data.dir")
        split_d = need(data, "split", "data.split")
        try:
            split = SplitSpec(train=int(need(split_d, "train", "data.split.train")),
                              val=int(need(split_d, "val", "data.split.val")),
                              test=int(split_d.get("test", 0)),
                              shuffle=bool(split_d.get("shuffle", False)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad data.split: {exc}") from exc

        net_d = need(d, "network", "network")
        default_out = 1 if task == "count" else 2
        try:
            network = HourglassConfig(
                depth=int(need(net_d, "depth", "network.depth")),
                base_filters=int(need(net_d, "base_filters", "network.base_filters")),
                in_channels=int(net_d.get("in_channels", 1)),
                out_channels=int(net_d.get("out_channels", default_out)),
                mirror_shortcuts=bool(net_d.get("mirror_shortcuts", True)),
                contextual_links=net_d.get("contextual_links"),
                head=HEAD_DENSITY if task == "count" else HEAD_SEGMENTATION,
            )
            network.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad network section: {exc}") from exc

        try:
            trainspec = TrainSpec.from_dict(d.get("train", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad train section: {exc}") from exc
        try:
            optimizer = OptimizerConfig.from_dict(d.get("optimizer", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad optimizer section: {exc}") from exc
        augmentation = AugmentationSpec.from_dict(d.get("augment", {}))

        precision = net_d.get("precision", "single")
        init = net_d.get("init", "xavier")
        if init not in ("xavier", "he-uniform"):
            raise ConfigError(f"network.init must be 'xavier' or 'he-uniform', got {init!r}")
        density_sigma = float(data.get("density_sigma", 3.0))
        return cls(task, model, seed, out_dir, data_dir, split, network,
                   trainspec, optimizer, augmentation, density_sigma, precision, init)

    def to_dict(self):
        return {
            "task": self.task,
            "model": self.model,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "data": {
                "dir": self.data_dir,
                "split": {"train": self.split.train, "val": self.split.val,
                          "test": self.split.test, "shuffle": self.split.shuffle},
                "density_sigma": self.density_sigma,
            },
            "network": dict(self.network.to_dict(),
                            precision=self.precision, init=self.init),
            "train": self.trainspec.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "augment": self.augmentation.to_dict(),
        }


def _load_run_config(path):
    from .errors import ConfigError

    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {path}: {exc}") from exc
    return RunConfig.from_dict(raw)


def _build_model(cfg):
    from .network import build_contextual_unet, build_unet
    from .tensor import resolve_dtype, seeded_rng

    dtype = resolve_dtype(cfg.precision)
    rng = seeded_rng(cfg.seed, "init")
    if cfg.model == "unet":
        return build_unet(cfg.network, rng, dtype=dtype, init=cfg.init)
    return build_contextual_unet(cfg.network, rng, dtype=dtype, init=cfg.init)


# ---------------------------------------------------------------- commands

def cmd_train(args):
    from .data import load_dataset, split_dataset
    from .errors import ConfigError
    from .tensor import seeded_rng
    from .training import train

    cfg = _load_run_config(args.config)
    if not os.path.isdir(cfg.data_dir):
        raise ConfigError(f"data.dir does not exist: {cfg.data_dir}")
    samples = load_dataset(cfg.data_dir, cfg.task, density_sigma=cfg.density_sigma)
    splits = split_dataset(samples, cfg.split,
                           rng=seeded_rng(cfg.seed, "split") if cfg.split.shuffle else None)
    net = _build_model(cfg)

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    report = train(net, splits, cfg.trainspec, cfg.optimizer,
                   augmentation=cfg.augmentation, seed=cfg.seed, out_dir=cfg.out_dir)
    for key, value in report.summary.items():
        print(f"{key}={value}")
    return 0


def cmd_infer(args):
    from .checkpoint import load_checkpoint
    from .data import load_image, save_image_u8, save_image_u16
    from .errors import ShapeError
    from .network import HEAD_DENSITY

    import numpy as np

    net = load_checkpoint(args.checkpoint)
    paths = sorted(glob.glob(args.input))
    if not paths:
        print(f"no inputs match {args.input!r}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    div = 2 ** net.config.depth
    for path in paths:
        image = load_image(path)
        h, w = image.shape[2:]
        if h % div or w % div:
            pad_h = ((h + div - 1) // div) * div
            pad_w = ((w + div - 1) // div) * div
            print(f"{path}: size {h}x{w} not divisible by {div}; "
                  f"pad to {pad_h}x{pad_w}", file=sys.stderr)
            return 2
        try:
            out = net.forward(image.astype(net.dtype))
        except ShapeError as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            return 2
        stem = os.path.splitext(os.path.basename(path))[0]
        if net.config.head == HEAD_DENSITY:
            # A density map is non-negative; clamp the raw head output and
            # report the count of the map actually emitted.
            density = np.maximum(out.value[0, 0].astype(np.float64), 0.0)
            count = float(density.sum())
            peak = float(density.max())
            scale = 65535.0 / peak if peak > 0 else 1.0
            plane = np.clip(np.rint(density * scale), 0, 65535).astype(np.uint16)
            save_image_u16(os.path.join(args.out, f"{stem}.png"), plane)
            with open(os.path.join(args.out, f"{stem}_scale.txt"), "w",
                      encoding="utf-8") as fh:
                fh.write(f"scale={scale!r}\npredicted_count={count!r}\n")
            print(f"{stem} predicted_count={count:.6f}")
        else:
            pred = out.value[0].argmax(axis=0).astype(np.uint8)
            classes = net.config.out_channels
            step = 255 // (classes - 1) if classes > 1 else 255
            save_image_u8(os.path.join(args.out, f"{stem}.png"), pred * step)
            print(f"{stem} classes={classes} wrote argmax map")
    return 0


def cmd_gradcheck(args):
    from .verify import TOLERANCE, gradcheck_network, gradcheck_ops

    if args.scope == "ops":
        results = gradcheck_ops(seed=args.seed)
    else:
        results = gradcheck_network(seed=args.seed)
    failures = []
    for name, err in results:
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name}: max_rel_err={err:.3e} [{status}]")
        if err >= TOLERANCE:
            failures.append(name)
    if failures:
        print(f"gradcheck failed for: {', '.join(failures)}", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args):
    from .data import synth_counting_set, synth_segmentation_set, write_dataset
    from .tensor import seeded_rng

    rng = seeded_rng(args.seed, "synth")
    if args.task == "count":
        samples = synth_counting_set(args.n, (args.min_count, args.max_count),
                                     rng, size=args.size)
    else:
        samples = synth_segmentation_set(args.n, rng, size=args.size)
    write_dataset(samples, args.out, args.task)
    print(f"wrote {len(samples)} {args.task} samples to {args.out}")
    return 0


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .data import load_dataset, split_dataset
    from .errors import ConfigError
    from .tensor import seeded_rng
    from .training import evaluate_counting, evaluate_segmentation

    config_path = args.config or os.path.join(os.path.dirname(args.checkpoint),
                                              "config.json")
    cfg = _load_run_config(config_path)
    net = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data, cfg.task, density_sigma=cfg.density_sigma)
    splits = split_dataset(samples, cfg.split,
                           rng=seeded_rng(cfg.seed, "split") if cfg.split.shuffle else None)
    chosen = getattr(splits, args.split)
    if not chosen:
        raise ConfigError(f"split {args.split!r} is empty")
    if cfg.task == "count":
        mae = evaluate_counting(net, chosen)
        print(f"mae={mae:.9e}")
    else:
        metrics = evaluate_segmentation(net, chosen)
        print(f"pixel_accuracy={metrics['pixel_accuracy']:.9e}")
        print(f"mean_iou={metrics['mean_iou']:.9e}")
    return 0


def cmd_bench(args):
    from .bench import run_benchmark
    from .optim import OptimizerConfig
    from .training import PhaseSpec, TrainSpec

    spec = TrainSpec(phase1=PhaseSpec(True, args.epochs, args.patience),
                     phase2=PhaseSpec(False, max(1, args.epochs // 2), args.patience),
                     batch_size=args.batch_size)
    results, path = run_benchmark(
        args.out, seeds=list(range(args.seeds)), n_train=args.train_images,
        n_val=args.val_images, n_test=args.test_images, size=args.size,
        trainspec=spec, optconfig=OptimizerConfig())
    with open(path, "r", encoding="utf-8") as fh:
        print(fh.read(), end="")
    return 0


# ------------------------------------------------------------------ parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="ctxunet",
        description="Train, run, and verify U-Net / Contextual U-Net models.")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP thread count (default 1, reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint on images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="input image glob")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--scope", choices=("ops", "network"), default="ops")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--task", choices=_TASKS, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-count", type=int, default=25)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), required=True)
    p.add_argument("--config", help="resolved config (default: next to checkpoint)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="side-by-side U-Net vs Contextual U-Net run")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--train-images", type=int, default=8)
    p.add_argument("--val-images", type=int, default=4)
    p.add_argument("--test-images", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=2)
    p.set_defaults(handler=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    from .errors import (ConfigError, ContractError, DataError, FormatError,
                         NumericalError, ShapeError)
    try:
        return args.handler(args)
    except (ConfigError, DataError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
