"""Dense rank-4 tensors: creation, elementwise arithmetic, weight initializers, seeded RNG.

Tensors are plain numpy arrays with layout (n, c, h, w), C-contiguous, w fastest.
Precision is float32 ("single") for training and float64 ("double") for
gradient-checking builds; every creation function takes a dtype.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

SINGLE = np.float32
DOUBLE = np.float64

_PRECISIONS = {"single": SINGLE, "double": DOUBLE}

# Largest element count we allow; beyond this flat indices overflow np.intp.
_MAX_ELEMENTS = np.iinfo(np.intp).max


def resolve_dtype(precision):
    """Map a precision name ("single"/"double") or numpy dtype to a numpy dtype."""
    if isinstance(precision, str):
        try:
            return _PRECISIONS[precision]
        except KeyError:
            raise ConfigError(f"unknown precision {precision!r}, expected 'single' or 'double'")
    dt = np.dtype(precision)
    if dt not in (np.dtype(SINGLE), np.dtype(DOUBLE)):
        raise ConfigError(f"unsupported dtype {dt}, expected float32 or float64")
    return dt.type


def check_shape(shape):
    """Validate an (n, c, h, w) shape tuple; returns it as a tuple of ints."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected rank-4 shape (n, c, h, w), got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all shape components must be >= 1, got {shape}")
    total = 1
    for s in shape:
        total *= s
    if total > _MAX_ELEMENTS:
        raise ShapeError(f"tensor of shape {shape} overflows the index range")
    return shape


def zeros(shape, dtype=SINGLE):
    """All-zero tensor of the given (n, c, h, w) shape."""
    return np.zeros(check_shape(shape), dtype=dtype)


def ones(shape, dtype=SINGLE):
    return np.ones(check_shape(shape), dtype=dtype)


def full(shape, value, dtype=SINGLE):
    return np.full(check_shape(shape), value, dtype=dtype)


def as_tensor(data, dtype=SINGLE):
    """Coerce nested lists or an array to a validated rank-4 tensor."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    check_shape(arr.shape)
    return arr


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    """Elementwise sum; shapes must be identical."""
    _check_same_shape(a, b)
    return a + b


def mul(a, b):
    """Elementwise product; shapes must be identical."""
    _check_same_shape(a, b)
    return a * b


def scale(a, s):
    """Multiply every element by the scalar s."""
    return a * a.dtype.type(s)


def tensor_sum(a):
    """Sum of all elements, as a python float."""
    return float(np.sum(a))


def map_elementwise(a, fn):
    """Apply a vectorized callable elementwise; output shape must match."""
    out = np.asarray(fn(a), dtype=a.dtype)
    _check_same_shape(a, out)
    return out


def seeded_rng(seed, stream=""):
    """Deterministic PCG64 generator for (seed, stream).

    Distinct stream names derive independent generators from one top-level
    seed, so e.g. toggling augmentation draws never shifts the init draws.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if stream:
        entropy.append(zlib.crc32(stream.encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def xavier_init(shape, fan_in, fan_out, rng, dtype=SINGLE):
    """Uniform init on [-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ContractError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


def he_uniform_init(shape, fan_in, rng, dtype=SINGLE):
    """Uniform init on [-b, b] with b = sqrt(6 / fan_in)."""
    if fan_in < 1:
        raise ContractError(f"fan_in must be >= 1, got {fan_in}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)
