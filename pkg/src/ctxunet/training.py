"""Training harness: two-phase strategy, early stopping, and evaluation.

Phase 1 trains on augmented data, phase 2 fine-tunes on undistorted data;
each phase runs until its validation loss has not improved for `patience`
epochs (or max_epochs is hit), then the phase's best weights are restored.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .augment import augment
from .autodiff import Tape
from .checkpoint import save_checkpoint
from .errors import ConfigError
from .network import HEAD_DENSITY
from .ops import mse_loss, softmax_cross_entropy
from .optim import Optimizer
from .tensor import seeded_rng


@dataclass
class PhaseSpec:
    augmented: bool
    max_epochs: int
    patience: int

    def validate(self, name):
        if self.max_epochs < 1:
            raise ConfigError(f"{name}.max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError(f"{name}.patience must be >= 1")


@dataclass
class TrainSpec:
    phase1: PhaseSpec = field(default_factory=lambda: PhaseSpec(True, 50, 10))
    phase2: PhaseSpec = field(default_factory=lambda: PhaseSpec(False, 25, 10))
    batch_size: int = 1

    def validate(self):
        self.phase1.validate("phase1")
        self.phase2.validate("phase2")
        if not self.phase1.augmented or self.phase2.augmented:
            raise ConfigError("phase1 must be augmented, phase2 must not be")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self):
        return {
            "batch_size": self.batch_size,
            "phase1": {"max_epochs": self.phase1.max_epochs,
                       "patience": self.phase1.patience},
            "phase2": {"max_epochs": self.phase2.max_epochs,
                       "patience": self.phase2.patience},
        }

    @classmethod
    def from_dict(cls, d):
        p1 = d.get("phase1", {})
        p2 = d.get("phase2", {})
        spec = cls(
            phase1=PhaseSpec(True, int(p1.get("max_epochs", 50)),
                             int(p1.get("patience", 10))),
            phase2=PhaseSpec(False, int(p2.get("max_epochs", 25)),
                             int(p2.get("patience", 10))),
            batch_size=int(d.get("batch_size", 1)),
        )
        spec.validate()
        return spec


@dataclass
class EpochRecord:
    epoch: int
    phase: int
    train_loss: float
    val_loss: float
    metric: float

    def format(self):
        return (f"epoch={self.epoch} phase={self.phase} "
                f"train_loss={self.train_loss:.9e} val_loss={self.val_loss:.9e} "
                f"metric={self.metric:.9e}")


@dataclass
class TrainingReport:
    records: list
    phase_end_epochs: dict
    best_checkpoint: str | None
    summary: dict

    def format_lines(self):
        return [r.format() for r in self.records]

    def format_summary(self):
        lines = [f"{k}={v}" for k, v in self.summary.items()]
        return lines

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        report_path = os.path.join(out_dir, "report.txt")
        with open(report_path, "w", encoding="utf-8") as fh:
            for line in self.format_lines():
                fh.write(line + "\n")
        summary_path = os.path.join(out_dir, "summary.txt")
        with open(summary_path, "w", encoding="utf-8") as fh:
            for line in self.format_summary():
                fh.write(line + "\n")
        return report_path, summary_path


def _loss_fn(head):
    if head == HEAD_DENSITY:
        return mse_loss
    return softmax_cross_entropy


def _validation_pass(net, samples, loss_fn):
    total, count = 0.0, 0
    for s in samples:
        out = net.forward(s.image.astype(net.dtype))
        loss = loss_fn(out, s.target)
        total += loss.item() * s.target[0, 0].size
        count += s.target[0, 0].size
    return total / count


def train(net, splits, spec, opt_config, *, augmentation=None, seed=0,
          out_dir=None, checkpoint_name="checkpoint.ckpt"):
    """Run the two-phase schedule; returns a TrainingReport.

    splits: DatasetSplits with non-empty train and val lists. The report and
    the best checkpoint are written under out_dir when it is given.
    """
    spec.validate()
    opt_config.validate()
    if not splits.train or not splits.val:
        raise ConfigError("train and val splits must both be non-empty")

    head = net.config.head
    loss_fn = _loss_fn(head)
    optimizer = Optimizer(net.params, opt_config)
    rng_order = seeded_rng(seed, "data-order")
    rng_aug = seeded_rng(seed, "augment")

    records = []
    phase_end_epochs = {}
    epoch = 0
    for phase_idx, phase in ((1, spec.phase1), (2, spec.phase2)):
        best_val = np.inf
        best_state = net.state_arrays()
        stale = 0
        for _ in range(phase.max_epochs):
            epoch += 1
            order = rng_order.permutation(len(splits.train))
            loss_sum, sample_count = 0.0, 0
            for start in range(0, len(order), spec.batch_size):
                idx = order[start:start + spec.batch_size]
                batch = [splits.train[i] for i in idx]
                if phase.augmented and augmentation is not None:
                    batch = [augment(s, augmentation, rng_aug) for s in batch]
                images = np.concatenate([s.image for s in batch]).astype(net.dtype)
                targets = np.concatenate([s.target for s in batch])
                optimizer.zero_grad()
                with Tape() as tape:
                    loss = loss_fn(net.forward(images), targets)
                tape.backward(loss)
                optimizer.step()
                loss_sum += loss.item() * len(batch)
                sample_count += len(batch)
            train_loss = loss_sum / sample_count
            val_loss = _validation_pass(net, splits.val, loss_fn)
            if head == HEAD_DENSITY:
                metric = evaluate_counting(net, splits.val)
            else:
                metric = evaluate_segmentation(net, splits.val)["pixel_accuracy"]
            records.append(EpochRecord(epoch, phase_idx, train_loss, val_loss, metric))
            if val_loss < best_val:
                best_val = val_loss
                best_state = net.state_arrays()
                stale = 0
            else:
                stale += 1
            if stale >= phase.patience:
                break
        net.load_state_arrays(best_state)
        phase_end_epochs[phase_idx] = epoch

    checkpoint_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = save_checkpoint(net, os.path.join(out_dir, checkpoint_name))

    summary = {
        "epochs_total": epoch,
        "phase1_end_epoch": phase_end_epochs[1],
        "phase2_end_epoch": phase_end_epochs[2],
        "final_train_loss": f"{records[-1].train_loss:.9e}",
        "final_val_loss": f"{_validation_pass(net, splits.val, loss_fn):.9e}",
    }
    if head == HEAD_DENSITY:
        summary["final_val_mae"] = f"{evaluate_counting(net, splits.val):.9e}"
        summary["final_train_mae"] = f"{evaluate_counting(net, splits.train):.9e}"
    else:
        seg_val = evaluate_segmentation(net, splits.val)
        seg_train = evaluate_segmentation(net, splits.train)
        summary["final_val_pixel_accuracy"] = f"{seg_val['pixel_accuracy']:.9e}"
        summary["final_val_mean_iou"] = f"{seg_val['mean_iou']:.9e}"
        summary["final_train_pixel_accuracy"] = f"{seg_train['pixel_accuracy']:.9e}"
        summary["final_train_mean_iou"] = f"{seg_train['mean_iou']:.9e}"
    if checkpoint_path:
        summary["checkpoint"] = os.path.basename(checkpoint_path)

    report = TrainingReport(records=records, phase_end_epochs=phase_end_epochs,
                            best_checkpoint=checkpoint_path, summary=summary)
    if out_dir is not None:
        report.write(out_dir)
    return report


def evaluate_segmentation(net, samples):
    """Pixel accuracy and mean per-class IoU of channel-argmax predictions."""
    classes = net.config.out_channels
    inter = np.zeros(classes, dtype=np.int64)
    union = np.zeros(classes, dtype=np.int64)
    correct, total = 0, 0
    for s in samples:
        out = net.forward(s.image.astype(net.dtype))
        pred = out.value.argmax(axis=1)
        label = s.target[:, 0]
        correct += int((pred == label).sum())
        total += label.size
        for k in range(classes):
            p = pred == k
            l = label == k
            inter[k] += int(np.logical_and(p, l).sum())
            union[k] += int(np.logical_or(p, l).sum())
    present = union > 0
    mean_iou = float(np.mean(inter[present] / union[present])) if present.any() else 0.0
    return {"pixel_accuracy": correct / total, "mean_iou": mean_iou}


def evaluate_counting(net, samples):
    """Mean absolute error between predicted and true per-image counts.

    The predicted count of an image is the sum of its predicted density map.
    """
    errors = []
    for s in samples:
        out = net.forward(s.image.astype(net.dtype))
        predicted = float(out.value.sum())
        true = float(s.target.sum())
        errors.append(abs(predicted - true))
    return float(np.mean(errors)) if errors else 0.0
