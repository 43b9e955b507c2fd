"""Finite-difference verification suites for operators and whole networks.

Everything here runs in double precision. An operator check builds a scalar
loss from the op (projected against a fixed random tensor so every output
coordinate matters) and compares tape gradients with central differences.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Variable, finite_difference_check, vsum
from .network import HourglassConfig, build_contextual_unet
from .ops import (ContextLink, ConvFilter, concat_channels, context_index_map,
                  contextual_conv, conv2d_same, maxpool2, mse_loss, selu,
                  softmax_cross_entropy, transposed_conv2d)
from .tensor import seeded_rng

TOLERANCE = 1e-4
EPSILON = 1e-4


def _rand(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _filter(rng, in_c, out_c, k):
    return ConvFilter(Variable(_rand(rng, (out_c, in_c, k, k))),
                      Variable(_rand(rng, (out_c,))))


def _away_from_zero(x, margin=0.05):
    return x + np.sign(x) * margin


def _check_conv2d_same(rng, epsilon):
    x0 = _rand(rng, (2, 2, 5, 5))
    filt = _filter(rng, 2, 3, 3)
    proj = _rand(rng, (2, 3, 5, 5))
    errs = [
        finite_difference_check(lambda v: vsum(conv2d_same(v, filt) * proj), x0, epsilon),
        finite_difference_check(
            lambda wv: vsum(conv2d_same(Variable(x0), ConvFilter(wv, filt.bias)) * proj),
            filt.weights.value, epsilon),
        finite_difference_check(
            lambda bv: vsum(conv2d_same(Variable(x0), ConvFilter(filt.weights, bv)) * proj),
            filt.bias.value, epsilon),
    ]
    return max(errs)


def _check_transposed_conv2d(rng, epsilon):
    x0 = _rand(rng, (2, 3, 4, 4))
    filt = _filter(rng, 3, 2, 2)
    proj = _rand(rng, (2, 2, 8, 8))
    errs = [
        finite_difference_check(
            lambda v: vsum(transposed_conv2d(v, filt) * proj), x0, epsilon),
        finite_difference_check(
            lambda wv: vsum(transposed_conv2d(Variable(x0), ConvFilter(wv, filt.bias)) * proj),
            filt.weights.value, epsilon),
        finite_difference_check(
            lambda bv: vsum(transposed_conv2d(Variable(x0), ConvFilter(filt.weights, bv)) * proj),
            filt.bias.value, epsilon),
    ]
    return max(errs)


def _check_maxpool2(rng, epsilon):
    x0 = rng.normal(0.0, 1.0, size=(2, 2, 6, 6))
    proj = _rand(rng, (2, 2, 3, 3))
    return finite_difference_check(lambda v: vsum(maxpool2(v) * proj), x0, epsilon)


def _check_selu(rng, epsilon):
    x0 = _away_from_zero(_rand(rng, (2, 3, 4, 4)))
    proj = _rand(rng, (2, 3, 4, 4))
    return finite_difference_check(lambda v: vsum(selu(v) * proj), x0, epsilon)


def _check_contextual_conv(rng, epsilon):
    small0 = _rand(rng, (1, 2, 3, 3))
    large0 = _rand(rng, (1, 3, 7, 7))
    link = ContextLink(bank_small=_filter(rng, 2, 2, 3),
                       bank_large=_filter(rng, 3, 2, 3))
    proj = _rand(rng, (1, 2, 7, 7))

    def loss(small, large, lnk):
        return vsum(contextual_conv(small, large, lnk) * proj)

    errs = [
        finite_difference_check(
            lambda v: loss(v, Variable(large0), link), small0, epsilon),
        finite_difference_check(
            lambda v: loss(Variable(small0), v, link), large0, epsilon),
        finite_difference_check(
            lambda wv: loss(Variable(small0), Variable(large0),
                            ContextLink(ConvFilter(wv, link.bank_small.bias),
                                        link.bank_large)),
            link.bank_small.weights.value, epsilon),
        finite_difference_check(
            lambda wv: loss(Variable(small0), Variable(large0),
                            ContextLink(link.bank_small,
                                        ConvFilter(wv, link.bank_large.bias))),
            link.bank_large.weights.value, epsilon),
        finite_difference_check(
            lambda bv: loss(Variable(small0), Variable(large0),
                            ContextLink(ConvFilter(link.bank_small.weights, bv),
                                        link.bank_large)),
            link.bank_small.bias.value, epsilon),
        finite_difference_check(
            lambda bv: loss(Variable(small0), Variable(large0),
                            ContextLink(link.bank_small,
                                        ConvFilter(link.bank_large.weights, bv))),
            link.bank_large.bias.value, epsilon),
    ]
    return max(errs)


def _check_concat_channels(rng, epsilon):
    a0 = _rand(rng, (2, 2, 4, 4))
    b0 = _rand(rng, (2, 3, 4, 4))
    proj = _rand(rng, (2, 5, 4, 4))
    errs = [
        finite_difference_check(
            lambda v: vsum(concat_channels(v, Variable(b0)) * proj), a0, epsilon),
        finite_difference_check(
            lambda v: vsum(concat_channels(Variable(a0), v) * proj), b0, epsilon),
    ]
    return max(errs)


def _check_softmax_cross_entropy(rng, epsilon):
    logits0 = _rand(rng, (2, 3, 4, 4))
    labels = rng.integers(0, 3, size=(2, 4, 4))
    return finite_difference_check(
        lambda v: softmax_cross_entropy(v, labels), logits0, epsilon)


def _check_mse_loss(rng, epsilon):
    pred0 = _rand(rng, (2, 2, 4, 4))
    target = _rand(rng, (2, 2, 4, 4))
    return finite_difference_check(lambda v: mse_loss(v, target), pred0, epsilon)


def _check_context_index_map(rng, epsilon):
    return 0.0 if index_map_violations(limit=16) == 0 else np.inf


# One entry per operator; the report lists each exactly once.
OP_CHECKS = [
    ("conv2d_same", _check_conv2d_same),
    ("transposed_conv2d", _check_transposed_conv2d),
    ("maxpool2", _check_maxpool2),
    ("selu", _check_selu),
    ("context_index_map", _check_context_index_map),
    ("contextual_conv", _check_contextual_conv),
    ("concat_channels", _check_concat_channels),
    ("softmax_cross_entropy", _check_softmax_cross_entropy),
    ("mse_loss", _check_mse_loss),
]


def gradcheck_ops(seed=0, epsilon=EPSILON, checks=None):
    """Run every operator check; returns [(op_name, max_relative_error)]."""
    results = []
    for name, check in (OP_CHECKS if checks is None else checks):
        rng = seeded_rng(seed, f"gradcheck.{name}")
        results.append((name, float(check(rng, epsilon))))
    return results


def index_map_violations(limit=32, cross_limit=8):
    """Exhaustively verify the tied index map; returns the violation count.

    Per axis, for every (small, large) pair with 1 <= small <= large <= limit
    and every position: result in-range, monotone non-decreasing, exact
    identity when sizes are equal. The map acts on the two axes
    independently; a full (h1, w1, h2, w2) cross product up to cross_limit
    re-checks that independence against the per-axis results.
    """
    bad = 0
    axis_map = {}
    for small in range(1, limit + 1):
        for large in range(small, limit + 1):
            rows = []
            prev = 0
            for i in range(large):
                r, _ = context_index_map(i, 0, small, 1, large, 1)
                if not (0 <= r < small):
                    bad += 1
                if r < prev:
                    bad += 1
                if small == large and r != i:
                    bad += 1
                prev = r
                rows.append(r)
            axis_map[(small, large)] = rows
    for h1 in range(1, cross_limit + 1):
        for h2 in range(h1, cross_limit + 1):
            for w1 in range(1, cross_limit + 1):
                for w2 in range(w1, cross_limit + 1):
                    for i in range(h2):
                        for j in range(w2):
                            r, s = context_index_map(i, j, h1, w1, h2, w2)
                            if r != axis_map[(h1, h2)][i] or s != axis_map[(w1, w2)][j]:
                                bad += 1
    return bad


def gradcheck_network(seed=0, epsilon=EPSILON, depth=2, base_filters=2,
                      spatial=8, names=None):
    """Central-difference check of a full contextual U-Net loss.

    One backward pass provides analytic gradients for every parameter and
    the input; the numeric side perturbs each coordinate in place and
    re-runs the forward pass. Returns [(name, max_relative_error)] over all
    parameters plus "input", or only over `names` when given.
    """
    rng = seeded_rng(seed, "gradcheck.network")
    config = HourglassConfig(depth=depth, base_filters=base_filters,
                             in_channels=1, out_channels=2)
    net = build_contextual_unet(config, seeded_rng(seed, "init"), dtype=np.float64)
    x0 = rng.uniform(0.0, 1.0, size=(1, 1, spatial, spatial))
    labels = rng.integers(0, 2, size=(1, spatial, spatial))

    x_var = Variable(x0.copy())
    net.zero_grads()
    with Tape() as tape:
        loss = softmax_cross_entropy(net.forward(x_var), labels)
    tape.backward(loss)
    analytic = {name: var.grad.copy() for name, var in net.params.items()}
    analytic["input"] = x_var.grad.copy()

    def loss_value():
        out = net.forward(x_var)
        return float(softmax_cross_entropy(out, labels).value.reshape(()))

    results = []
    targets = dict(net.params)
    targets["input"] = x_var
    if names is not None:
        targets = {n: targets[n] for n in names}
    for name, var in targets.items():
        arr = var.value
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = loss_value()
            flat[i] = orig - epsilon
            f_minus = loss_value()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * epsilon)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        results.append((name, float(np.max(np.abs(a - numeric) / denom))))
    return results
