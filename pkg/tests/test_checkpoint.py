"""Checkpoint format: round trips, truncation, version handling."""

import struct

import numpy as np
import pytest

from ctxunet.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from ctxunet.errors import FormatError
from ctxunet.network import HourglassConfig, build_contextual_unet, build_unet
from ctxunet.tensor import seeded_rng


def _net(seed=0, contextual=True):
    cfg = HourglassConfig(depth=2, base_filters=4, in_channels=1, out_channels=2)
    build = build_contextual_unet if contextual else build_unet
    return build(cfg, seeded_rng(seed, "init"))


class TestRoundTrip:
    def test_parameters_bit_identical(self, tmp_path):
        net = _net()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert list(back.params) == list(net.params)
        for name in net.params:
            assert np.array_equal(back.params[name].value, net.params[name].value)
            assert back.params[name].value.dtype == np.float32

    def test_config_restored(self, tmp_path):
        net = _net()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert back.config.to_dict() == net.config.to_dict()

    def test_forward_identical_after_reload(self, tmp_path):
        net = _net()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        x = seeded_rng(1).uniform(0, 1, (1, 1, 16, 16)).astype(np.float32)
        assert np.array_equal(net.forward(x).value, back.forward(x).value)

    def test_double_save_identical_bytes(self, tmp_path):
        net = _net()
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(net, p1)
        save_checkpoint(net, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()


class TestMalformedFiles:
    def test_truncated_file(self, tmp_path):
        net = _net()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(net, path)
        blob = open(path, "rb").read()
        for cut in (2, 6, len(blob) // 2, len(blob) - 3):
            bad = str(tmp_path / f"cut{cut}.ckpt")
            with open(bad, "wb") as fh:
                fh.write(blob[:cut])
            with pytest.raises(FormatError):
                load_checkpoint(bad)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "junk.ckpt")
        with open(path, "wb") as fh:
            fh.write(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        net = _net()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(net, path)
        blob = bytearray(open(path, "rb").read())
        blob[4:8] = struct.pack("<I", 2)
        bad = str(tmp_path / "v2.ckpt")
        with open(bad, "wb") as fh:
            fh.write(blob)
        with pytest.raises(FormatError, match="version 2"):
            load_checkpoint(bad)

    def test_truncation_reports_offset(self, tmp_path):
        net = _net()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(net, path)
        blob = open(path, "rb").read()
        bad = str(tmp_path / "cut.ckpt")
        with open(bad, "wb") as fh:
            fh.write(blob[:-1])
        with pytest.raises(FormatError) as info:
            load_checkpoint(bad)
        assert info.value.offset is not None

    def test_missing_parameter_detected(self, tmp_path):
        net = _net()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(net, path)
        blob = open(path, "rb").read()
        # Drop the final parameter record (head.bias: u32 len + 9 bytes name
        # + u8 rank + u32 dim + 2 floats).
        tail = 4 + len(b"head.bias") + 1 + 4 + 4 * net.config.out_channels
        bad = str(tmp_path / "short.ckpt")
        with open(bad, "wb") as fh:
            fh.write(blob[:-tail])
        with pytest.raises(FormatError, match="head.bias"):
            load_checkpoint(bad)


class TestPrecision:
    def test_double_net_saves_single(self, tmp_path):
        cfg = HourglassConfig(depth=1, base_filters=2, in_channels=1, out_channels=2)
        net = build_unet(cfg, seeded_rng(0, "init"), dtype=np.float64)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(net, path)
        back = load_checkpoint(path, dtype=np.float64)
        for name in net.params:
            stored = net.params[name].value.astype(np.float32)
            assert np.array_equal(back.params[name].value,
                                  stored.astype(np.float64))
