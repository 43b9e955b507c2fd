"""Side-by-side benchmark: U-Net vs Contextual U-Net on the counting task.

Each seed gets one synthetic dataset shared by both models; every run trains
with the same schedule and reports the held-out-test MAE. The emitted report
is purely comparative and makes no claim about margins.
"""

from __future__ import annotations

import os

import numpy as np

from .data import SplitSpec, split_dataset, synth_counting_set
from .network import HEAD_DENSITY, HourglassConfig, build_contextual_unet, build_unet
from .tensor import seeded_rng
from .training import evaluate_counting, train

MODELS = ("unet", "contextual-unet")


def run_benchmark(out_dir, seeds, *, n_train=8, n_val=4, n_test=8, size=32,
                  count_range=(3, 9), depth=2, base_filters=8,
                  trainspec=None, optconfig=None, augmentation=None,
                  density_sigma=3.0):
    """Train both models under every seed; returns (results, report_path).

    results maps (model, seed) -> test MAE.
    """
    from .optim import OptimizerConfig
    from .training import TrainSpec

    trainspec = trainspec or TrainSpec()
    optconfig = optconfig or OptimizerConfig()
    os.makedirs(out_dir, exist_ok=True)

    results = {}
    for seed in seeds:
        data = synth_counting_set(n_train + n_val + n_test, count_range,
                                  seeded_rng(seed, "synth"), size=size,
                                  density_sigma=density_sigma)
        splits = split_dataset(data, SplitSpec(n_train, n_val, n_test))
        for model in MODELS:
            config = HourglassConfig(depth=depth, base_filters=base_filters,
                                     in_channels=1, out_channels=1,
                                     head=HEAD_DENSITY,
                                     contextual_links=[] if model == "unet" else None)
            build = build_unet if model == "unet" else build_contextual_unet
            net = build(config, seeded_rng(seed, "init"))
            run_dir = os.path.join(out_dir, f"{model}_seed{seed}")
            train(net, splits, trainspec, optconfig, augmentation=augmentation,
                  seed=seed, out_dir=run_dir)
            results[(model, seed)] = evaluate_counting(net, splits.test)

    report_path = os.path.join(out_dir, "benchmark.txt")
    lines = [f"{'model':<18} {'seed':>4}  {'test_mae':>12}"]
    for model in MODELS:
        for seed in seeds:
            lines.append(f"{model:<18} {seed:>4}  {results[(model, seed)]:>12.6e}")
    for model in MODELS:
        mean = float(np.mean([results[(model, s)] for s in seeds]))
        lines.append(f"mean {model:<18} {mean:.6e}")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return results, report_path
