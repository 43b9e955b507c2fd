"""CLI behavior: exit codes, artifacts, determinism, verification wiring."""

import json
import os

import numpy as np
import pytest

from ctxunet import cli
from ctxunet.autodiff import record
from ctxunet.data import load_image
from ctxunet import verify


def _write_config(path, data_dir, out_dir, task="segment", depth=1, base=2,
                  train=2, val=1, test=1, epochs=2, seed=7, extra=None):
    cfg = {
        "task": task,
        "model": "contextual-unet",
        "seed": seed,
        "out_dir": out_dir,
        "data": {"dir": data_dir,
                 "split": {"train": train, "val": val, "test": test}},
        "network": {"depth": depth, "base_filters": base},
        "train": {"batch_size": 2,
                  "phase1": {"max_epochs": epochs, "patience": epochs},
                  "phase2": {"max_epochs": 1, "patience": 1}},
        "optimizer": {"kind": "adam", "learning_rate": 1e-3},
        "augment": {"flip_horizontal": True, "flip_vertical": False,
                    "rotate90": False},
    }
    if extra:
        for key, value in extra.items():
            cfg[key] = value
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh)
    return cfg


@pytest.fixture
def seg_dataset(tmp_path):
    data_dir = str(tmp_path / "data")
    assert cli.main(["synth", "--task", "segment", "--n", "4", "--out", data_dir,
                     "--seed", "3", "--size", "16"]) == 0
    return data_dir


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        rc = cli.main(["train", "--config", str(tmp_path / "nope.json")])
        assert rc == 2
        assert "nope.json" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path, capsys):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as fh:
            fh.write("{not json")
        assert cli.main(["train", "--config", path]) == 2

    def test_missing_field_named(self, tmp_path, capsys):
        path = str(tmp_path / "cfg.json")
        with open(path, "w") as fh:
            json.dump({"task": "segment", "seed": 1, "out_dir": "x",
                       "data": {"split": {"train": 1, "val": 1}}}, fh)
        assert cli.main(["train", "--config", path]) == 2
        assert "data.dir" in capsys.readouterr().err

    def test_missing_data_dir(self, tmp_path, capsys):
        cfg_path = str(tmp_path / "cfg.json")
        _write_config(cfg_path, str(tmp_path / "absent"), str(tmp_path / "out"))
        assert cli.main(["train", "--config", cfg_path]) == 2


class TestSynth:
    def test_zero_images_valid_empty_dataset(self, tmp_path):
        out = str(tmp_path / "empty")
        assert cli.main(["synth", "--task", "count", "--n", "0", "--out", out,
                         "--seed", "1"]) == 0
        assert os.path.isdir(os.path.join(out, "images"))
        assert os.listdir(os.path.join(out, "images")) == []

    def test_counting_set_on_disk(self, tmp_path):
        out = str(tmp_path / "blobs")
        assert cli.main(["synth", "--task", "count", "--n", "3", "--out", out,
                         "--seed", "2", "--size", "32", "--min-count", "2",
                         "--max-count", "5"]) == 0
        assert len(os.listdir(os.path.join(out, "images"))) == 3
        assert len(os.listdir(os.path.join(out, "dots"))) == 3


class TestTrain:
    def test_smoke_run_writes_artifacts(self, tmp_path, seg_dataset):
        out_dir = str(tmp_path / "run")
        cfg_path = str(tmp_path / "cfg.json")
        _write_config(cfg_path, seg_dataset, out_dir)
        assert cli.main(["train", "--config", cfg_path]) == 0
        for name in ("checkpoint.ckpt", "report.txt", "summary.txt", "config.json"):
            assert os.path.isfile(os.path.join(out_dir, name)), name

    def test_repeat_run_byte_identical(self, tmp_path, seg_dataset):
        outs = []
        for tag in ("a", "b"):
            out_dir = str(tmp_path / tag)
            cfg_path = str(tmp_path / f"cfg_{tag}.json")
            _write_config(cfg_path, seg_dataset, out_dir)
            assert cli.main(["train", "--config", cfg_path]) == 0
            outs.append(out_dir)
        for name in ("report.txt", "summary.txt", "checkpoint.ckpt"):
            a = open(os.path.join(outs[0], name), "rb").read()
            b = open(os.path.join(outs[1], name), "rb").read()
            assert a == b, f"{name} differs between identical runs"


class TestEval:
    def test_reproduces_summary_metric(self, tmp_path, seg_dataset, capsys):
        out_dir = str(tmp_path / "run")
        cfg_path = str(tmp_path / "cfg.json")
        _write_config(cfg_path, seg_dataset, out_dir)
        assert cli.main(["train", "--config", cfg_path]) == 0
        capsys.readouterr()

        rc = cli.main(["eval", "--checkpoint", os.path.join(out_dir, "checkpoint.ckpt"),
                       "--data", seg_dataset, "--split", "val"])
        assert rc == 0
        printed = dict(line.split("=") for line in
                       capsys.readouterr().out.strip().splitlines())
        summary = dict(line.split("=") for line in
                       open(os.path.join(out_dir, "summary.txt")).read().splitlines())
        assert abs(float(printed["pixel_accuracy"])
                   - float(summary["final_val_pixel_accuracy"])) < 1e-6

    def test_empty_split_rejected(self, tmp_path, seg_dataset, capsys):
        out_dir = str(tmp_path / "run")
        cfg_path = str(tmp_path / "cfg.json")
        _write_config(cfg_path, seg_dataset, out_dir, test=0)
        assert cli.main(["train", "--config", cfg_path]) == 0
        rc = cli.main(["eval", "--checkpoint", os.path.join(out_dir, "checkpoint.ckpt"),
                       "--data", seg_dataset, "--split", "test"])
        assert rc == 2


class TestInfer:
    def _trained(self, tmp_path, seg_dataset):
        out_dir = str(tmp_path / "run")
        cfg_path = str(tmp_path / "cfg.json")
        _write_config(cfg_path, seg_dataset, out_dir)
        assert cli.main(["train", "--config", cfg_path]) == 0
        return os.path.join(out_dir, "checkpoint.ckpt")

    def test_one_output_per_input_named_by_stem(self, tmp_path, seg_dataset):
        ckpt = self._trained(tmp_path, seg_dataset)
        pred_dir = str(tmp_path / "pred")
        rc = cli.main(["infer", "--checkpoint", ckpt,
                       "--input", os.path.join(seg_dataset, "images", "*.png"),
                       "--out", pred_dir])
        assert rc == 0
        inputs = sorted(os.listdir(os.path.join(seg_dataset, "images")))
        outputs = sorted(os.listdir(pred_dir))
        assert outputs == inputs

    def test_deterministic(self, tmp_path, seg_dataset):
        ckpt = self._trained(tmp_path, seg_dataset)
        blobs = []
        for tag in ("p1", "p2"):
            pred_dir = str(tmp_path / tag)
            assert cli.main(["infer", "--checkpoint", ckpt,
                             "--input", os.path.join(seg_dataset, "images", "*.png"),
                             "--out", pred_dir]) == 0
            name = sorted(os.listdir(pred_dir))[0]
            blobs.append(open(os.path.join(pred_dir, name), "rb").read())
        assert blobs[0] == blobs[1]

    def test_indivisible_input_suggests_padding(self, tmp_path, seg_dataset, capsys):
        ckpt = self._trained(tmp_path, seg_dataset)
        from ctxunet.data import save_image_u8
        odd = str(tmp_path / "odd.png")
        save_image_u8(odd, np.zeros((15, 16), dtype=np.uint8))
        rc = cli.main(["infer", "--checkpoint", ckpt, "--input", odd,
                       "--out", str(tmp_path / "pred")])
        assert rc == 2
        assert "pad" in capsys.readouterr().err

    def test_counting_sidecar_consistent(self, tmp_path, capsys):
        data_dir = str(tmp_path / "blobs")
        assert cli.main(["synth", "--task", "count", "--n", "4", "--out", data_dir,
                         "--seed", "5", "--size", "32", "--min-count", "2",
                         "--max-count", "6"]) == 0
        out_dir = str(tmp_path / "run")
        cfg_path = str(tmp_path / "cfg.json")
        _write_config(cfg_path, data_dir, out_dir, task="count", depth=1,
                      train=2, val=1, test=1, epochs=1)
        assert cli.main(["train", "--config", cfg_path]) == 0
        pred_dir = str(tmp_path / "pred")
        capsys.readouterr()
        rc = cli.main(["infer", "--checkpoint", os.path.join(out_dir, "checkpoint.ckpt"),
                       "--input", os.path.join(data_dir, "images", "img_0000.png"),
                       "--out", pred_dir])
        assert rc == 0
        sidecar = dict(line.split("=") for line in
                       open(os.path.join(pred_dir, "img_0000_scale.txt")).read()
                       .strip().splitlines())
        png = np.asarray(load_image(os.path.join(pred_dir, "img_0000.png")))[0, 0]
        reconstructed = float((png * 65535.0 / float(sidecar["scale"])).sum())
        predicted = float(sidecar["predicted_count"])
        assert abs(reconstructed - predicted) <= max(1e-2 * abs(predicted), 1e-2)


class TestGradcheckCommand:
    def test_ops_scope_passes_and_covers_every_op(self, capsys):
        assert cli.main(["gradcheck", "--scope", "ops", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        names = [line.split(":")[0] for line in out.strip().splitlines()
                 if "max_rel_err" in line]
        assert sorted(names) == sorted([
            "conv2d_same", "transposed_conv2d", "maxpool2", "selu",
            "context_index_map", "contextual_conv", "concat_channels",
            "softmax_cross_entropy", "mse_loss"])
        assert len(names) == len(set(names))

    def test_corrupted_backward_rule_fails(self, monkeypatch, capsys):
        # Fault injection: an op whose recorded backward rule drops half the
        # gradient must be flagged by the suite.
        from ctxunet.autodiff import finite_difference_check, vsum

        def broken_double(x):
            return record(2.0 * x.value, (x,), lambda g: (g,))   # wrong: needs 2g

        def check_broken(rng, epsilon):
            return finite_difference_check(
                lambda v: vsum(broken_double(v)), rng.uniform(-1, 1, (1, 1, 2, 2)),
                epsilon)

        monkeypatch.setattr(verify, "OP_CHECKS",
                            verify.OP_CHECKS + [("broken_double", check_broken)])
        assert cli.main(["gradcheck", "--scope", "ops", "--seed", "0"]) == 1
        err = capsys.readouterr().err
        assert "broken_double" in err


class TestBench:
    def test_tiny_side_by_side_run(self, tmp_path, capsys):
        out = str(tmp_path / "bench")
        rc = cli.main(["bench", "--out", out, "--seeds", "1",
                       "--train-images", "2", "--val-images", "1",
                       "--test-images", "2", "--size", "16",
                       "--epochs", "1", "--patience", "1", "--batch-size", "2"])
        assert rc == 0
        text = open(os.path.join(out, "benchmark.txt")).read()
        assert "unet" in text and "contextual-unet" in text
        assert "mean" in text
