"""Binary model checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  "CTXH"
    version u32      currently 1
    config  u32 length + UTF-8 JSON (network config)
    then per parameter, in registry order:
        name    u32 length + UTF-8 bytes
        rank    u8
        dims    rank * u32
        data    prod(dims) * f32 little-endian

Parameters are stored in single precision regardless of compute precision.
Writes go to a temp file followed by an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError
from .network import HourglassConfig, build_from_config
from .tensor import SINGLE

MAGIC = b"CTXH"
VERSION = 1


def save_checkpoint(net, path):
    """Serialize a network's config and parameters to path."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    config_json = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(config_json))
    blob += config_json
    for name, var in net.params.items():
        name_b = name.encode("utf-8")
        arr = np.ascontiguousarray(var.value, dtype="<f4")
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    @property
    def exhausted(self):
        return self.offset >= len(self.data)


def load_checkpoint(path, dtype=SINGLE):
    """Reconstruct a Network from a checkpoint written by save_checkpoint."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())

    if reader.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic, not a checkpoint: {path}", 0)
    (version,) = struct.unpack("<I", reader.take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (config_len,) = struct.unpack("<I", reader.take(4, "config length"))
    config_bytes = reader.take(config_len, "config")
    try:
        config = HourglassConfig.from_dict(json.loads(config_bytes.decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad config block: {exc}", 8) from exc

    arrays = {}
    while not reader.exhausted:
        start = reader.offset
        (name_len,) = struct.unpack("<I", reader.take(4, "parameter name length"))
        name = reader.take(name_len, "parameter name").decode("utf-8")
        (rank,) = struct.unpack("<B", reader.take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        raw = reader.take(4 * count, f"data of {name}")
        if name in arrays:
            raise FormatError(f"duplicate parameter {name!r}", start)
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)

    net = build_from_config(config, rng=None, dtype=dtype)
    missing = set(net.params) - set(arrays)
    extra = set(arrays) - set(net.params)
    if missing or extra:
        raise FormatError(
            f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    for name, var in net.params.items():
        arr = arrays[name]
        if arr.shape != var.value.shape:
            raise FormatError(
                f"parameter {name!r}: stored shape {arr.shape} != expected {var.value.shape}"
            )
        var.value = arr.astype(net.dtype)
    return net
