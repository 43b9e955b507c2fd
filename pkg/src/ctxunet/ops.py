"""Neural operators: convolutions, pooling, SeLU, losses, and the contextual
convolution whose two filter banks move in lock-step over feature maps of
different spatial sizes.

All operators are pure functions of Variables (see autodiff). Stride is 1 and
padding "same" for every ordinary convolution; the only strided op is the
transposed convolution used for decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Variable, record
from .errors import ContractError, DataError, ShapeError
from .tensor import SINGLE, he_uniform_init, xavier_init

_SCALAR_SHAPE = (1, 1, 1, 1)

# Self-normalizing activation constants (fixed-point of unit-Gaussian
# moment preservation).
SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


@dataclass
class ConvFilter:
    """Weight bank + bias for one convolutional unit.

    weights: (out_channels, in_channels, k, k); bias: (out_channels,).
    Square kernels only. conv2d_same additionally requires k odd.
    """

    weights: Variable
    bias: Variable

    def __post_init__(self):
        w = self.weights.value
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"filter weights must be (out, in, k, k), got {w.shape}")
        if self.bias.value.shape != (w.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.value.shape} does not match {w.shape[0]} output channels"
            )

    @property
    def out_channels(self):
        return self.weights.value.shape[0]

    @property
    def in_channels(self):
        return self.weights.value.shape[1]

    @property
    def kernel_size(self):
        return self.weights.value.shape[2]


@dataclass
class ContextLink:
    """Paired filter banks of a contextual convolution.

    bank_small convolves the small (context) map, bank_large the large map;
    their outputs are summed position-wise under the tied index map and
    passed through SeLU. Both banks run stride 1, same padding, and each
    applies its own bias before the summation.
    """

    bank_small: ConvFilter
    bank_large: ConvFilter

    def __post_init__(self):
        if self.bank_small.out_channels != self.bank_large.out_channels:
            raise ShapeError(
                "contextual banks must share out_channels, got "
                f"{self.bank_small.out_channels} vs {self.bank_large.out_channels}"
            )

    @property
    def out_channels(self):
        return self.bank_large.out_channels


def make_conv_filter(in_channels, out_channels, kernel_size, rng=None, dtype=SINGLE,
                     init="xavier"):
    """Build a ConvFilter with initialized weights and zero bias.

    rng=None yields zero weights (used when loading checkpoints).
    Fans count kernel taps: fan_in = in_channels*k*k, fan_out = out_channels*k*k.
    """
    shape = (out_channels, in_channels, kernel_size, kernel_size)
    if rng is None:
        w = np.zeros(shape, dtype=dtype)
    else:
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        if init == "xavier":
            w = xavier_init(shape, fan_in, fan_out, rng, dtype=dtype)
        elif init == "he-uniform":
            w = he_uniform_init(shape, fan_in, rng, dtype=dtype)
        else:
            raise ContractError(f"unknown init {init!r}, expected 'xavier' or 'he-uniform'")
    b = np.zeros((out_channels,), dtype=dtype)
    return ConvFilter(Variable(w), Variable(b))


def _require_feature_map(x, name="input"):
    if x.value.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n, c, h, w), got shape {x.value.shape}")


def _conv_same_raw(x, w):
    """Stride-1 same-padded cross-correlation of x (n,c,h,w) with w (o,c,k,k)."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))      # (n, c, h, wd, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wd, c * k * k)
    out = cols @ w.reshape(o, -1).T                          # (n*h*wd, o)
    return out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)


def _conv_same_grad_w(x, g, k):
    """d(conv)/d(weights) given input x and upstream g, both (n,*,h,w)."""
    n, c, h, wd = x.shape
    o = g.shape[1]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wd, c * k * k)
    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * wd, o)
    return (gmat.T @ cols).reshape(o, c, k, k)


def conv2d_same(x, f):
    """Same-padded stride-1 convolution; output (n, out_channels, h, w).

    out[n,o,i,j] = bias[o] + sum_{c,u,v} w[o,c,u,v] * x_padded[n,c,i+u,j+v]
    with zero padding of width (k-1)/2 on every side.
    """
    _require_feature_map(x)
    w, b = f.weights, f.bias
    k = f.kernel_size
    if k % 2 == 0:
        raise ShapeError(f"conv2d_same requires an odd kernel, got k={k}")
    if x.value.shape[1] != f.in_channels:
        raise ShapeError(
            f"input has {x.value.shape[1]} channels but filter expects {f.in_channels}"
        )
    x_val, w_val = x.value, w.value
    value = _conv_same_raw(x_val, w_val) + b.value[None, :, None, None]

    def backward_fn(g):
        # Input gradient is the same-padded conv with the transposed,
        # spatially flipped bank: exact adjoint of the forward map.
        w_flip = w_val[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _conv_same_raw(g, np.ascontiguousarray(w_flip))
        gw = _conv_same_grad_w(x_val, g, k)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return record(value, (x, w, b), backward_fn)


def transposed_conv2d(x, f, stride=2):
    """Transposed convolution, the adjoint of a strided convolution.

    out[n,o,p,q] = bias[o] + sum_{c,i,j} x[n,c,i,j] * w[o,c,p-stride*i,q-stride*j]
    over valid kernel offsets. Output spatial size is stride*(h-1)+k, i.e.
    (2h, 2w) for the decoder default stride=2, k=2.
    """
    _require_feature_map(x)
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    w, b = f.weights, f.bias
    k = f.kernel_size
    if x.value.shape[1] != f.in_channels:
        raise ShapeError(
            f"input has {x.value.shape[1]} channels but filter expects {f.in_channels}"
        )
    x_val, w_val = x.value, w.value
    n, c, h, wd = x_val.shape
    o = f.out_channels
    oh, ow = stride * (h - 1) + k, stride * (wd - 1) + k

    xm = np.ascontiguousarray(x_val.transpose(0, 2, 3, 1)).reshape(n * h * wd, c)
    value = np.zeros((n, o, oh, ow), dtype=x_val.dtype)
    for u in range(k):
        for v in range(k):
            contrib = (xm @ w_val[:, :, u, v].T).reshape(n, h, wd, o).transpose(0, 3, 1, 2)
            value[:, :, u:u + stride * (h - 1) + 1:stride,
                  v:v + stride * (wd - 1) + 1:stride] += contrib
    value += b.value[None, :, None, None]

    def backward_fn(g):
        gx = np.zeros_like(x_val)
        gw = np.zeros_like(w_val)
        for u in range(k):
            for v in range(k):
                gsub = g[:, :, u:u + stride * (h - 1) + 1:stride,
                         v:v + stride * (wd - 1) + 1:stride]
                gmat = np.ascontiguousarray(gsub.transpose(0, 2, 3, 1)).reshape(n * h * wd, o)
                gx += (gmat @ w_val[:, :, u, v]).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
                gw[:, :, u, v] = gmat.T @ xm
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return record(value, (x, w, b), backward_fn)


def maxpool2(x):
    """2x2 max pooling with stride 2; gradient routes to the argmax.

    Ties go to the first element of the block in row-major scan order.
    """
    _require_feature_map(x)
    n, c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even spatial dims, got {h}x{w}")
    hh, ww = h // 2, w // 2
    blocks = x.value.reshape(n, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, hh, ww, 4)
    idx = blocks.argmax(axis=-1)
    value = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record(value, (x,), backward_fn)


def selu(x):
    """Self-normalizing activation: scale*x for x>0, scale*alpha*(exp(x)-1) else."""
    v = x.value
    pos = v > 0
    # exp only sees the non-positive lane, so large activations cannot
    # overflow through the discarded branch.
    neg = np.minimum(v, 0)
    value = np.where(pos, SELU_SCALE * v, (SELU_SCALE * SELU_ALPHA) * np.expm1(neg))
    value = value.astype(v.dtype, copy=False)

    def backward_fn(g):
        slope = np.where(pos, SELU_SCALE, (SELU_SCALE * SELU_ALPHA) * np.exp(neg))
        return (g * slope.astype(v.dtype, copy=False),)

    return record(value, (x,), backward_fn)


def context_index_map(i, j, h1, w1, h2, w2):
    """Small-grid position tied to large-grid position (i, j).

    One movement on the large grid advances the small-grid filter by the
    cumulative fraction h1/h2 (w1/w2): position (i, j) maps to
    (floor(i*h1/h2), floor(j*w1/w2)), always inside the small grid.
    """
    if h2 < h1 or w2 < w1:
        raise ContractError(f"small grid {h1}x{w1} must fit inside large grid {h2}x{w2}")
    if not (0 <= i < h2 and 0 <= j < w2):
        raise ContractError(f"position ({i}, {j}) outside large grid {h2}x{w2}")
    return (i * h1) // h2, (j * w1) // w2


def _context_rows(small, large):
    return (np.arange(large) * small) // large


def _gather_context(x, out_h, out_w):
    """Upsample by the tied index map; adjoint is a scatter-add over the
    large-grid positions sharing a small-grid cell."""
    n, c, h, w = x.value.shape
    rows = _context_rows(h, out_h)
    cols = _context_rows(w, out_w)
    value = x.value[:, :, rows[:, None], cols[None, :]]

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        return (gx,)

    return record(value, (x,), backward_fn)


def contextual_conv(small, large, link):
    """Contextual convolution: two banks tied by the floor-scaled index map.

    out[n,o,i,j] = SeLU( conv(large, bank_large)[n,o,i,j]
                         + conv(small, bank_small)[n,o,r,s] )
    with (r, s) = context_index_map(i, j, ...). Each bank applies its own
    bias before the summation.
    """
    _require_feature_map(small, "small")
    _require_feature_map(large, "large")
    n1, _, h1, w1 = small.value.shape
    n2, _, h2, w2 = large.value.shape
    if n1 != n2:
        raise ShapeError(f"batch mismatch: {n1} vs {n2}")
    if h1 > h2 or w1 > w2:
        raise ShapeError(
            f"small map {h1}x{w1} must not exceed large map {h2}x{w2} spatially"
        )
    ctx = conv2d_same(small, link.bank_small)
    base = conv2d_same(large, link.bank_large)
    return selu(base + _gather_context(ctx, h2, w2))


def concat_channels(a, b):
    """Concatenate along the channel axis; a's channels come first."""
    _require_feature_map(a, "a")
    _require_feature_map(b, "b")
    na, ca, ha, wa = a.value.shape
    nb, cb, hb, wb = b.value.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            f"concat requires matching (n, h, w): {a.value.shape} vs {b.value.shape}"
        )
    value = np.concatenate([a.value, b.value], axis=1)

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return record(value, (a, b), backward_fn)


def softmax_cross_entropy(logits, labels):
    """Mean per-pixel categorical cross entropy from raw logits.

    labels: integer class indices of shape (n, h, w) or (n, 1, h, w).
    Softmax is taken over the channel axis with max-subtraction stabilization.
    """
    _require_feature_map(logits)
    n, c, h, w = logits.value.shape
    labels = np.asarray(labels)
    if labels.ndim == 4 and labels.shape[1] == 1:
        labels = labels[:, 0]
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {(n, h, w)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c}), got range "
                        f"[{labels.min()}, {labels.max()}]")

    v = logits.value
    shifted = v - v.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sumexp = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sumexp)
    picked = np.take_along_axis(log_probs, labels[:, None], axis=1)[:, 0]
    count = n * h * w
    value = (-picked.sum() / count).reshape(_SCALAR_SHAPE).astype(v.dtype)

    def backward_fn(g):
        grad = exp / sumexp
        grad[np.arange(n)[:, None, None], labels,
             np.arange(h)[None, :, None], np.arange(w)[None, None, :]] -= 1.0
        return (grad * (g.reshape(()) / count),)

    return record(value, (logits,), backward_fn)


def mse_loss(pred, target):
    """Mean over all elements of (pred - target)^2."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.value.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.value.shape} vs {target.shape}")
    diff = pred.value - target
    count = diff.size
    value = (np.sum(diff * diff) / count).reshape(_SCALAR_SHAPE).astype(pred.dtype)

    def backward_fn(g):
        return (diff * (2.0 * g.reshape(()) / count),)

    return record(value, (pred,), backward_fn)
