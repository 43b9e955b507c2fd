"""Reverse-mode automatic differentiation over a dynamically recorded tape.

Usage:

    x = Variable(np.ones((1, 1, 2, 2)))
    with Tape() as tape:
        loss = vsum(x * x)
    tape.backward(loss)          # x.grad now holds d loss / d x

Operations record themselves on the innermost active tape; with no tape
active they just compute values, which is the inference fast path.
Gradients accumulate into Variable.grad, so a value consumed by k ops
receives the sum of k contributions and running backward twice without
zeroing doubles every gradient exactly.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import ContractError

_SCALAR_SHAPE = (1, 1, 1, 1)

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    """The innermost active Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Variable:
    """A numpy array enrolled in gradient tracking.

    grad is lazily allocated: None until a backward pass reaches the
    variable, after which it has the same shape as value.
    """

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self):
        if self.value.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.value.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Variable(shape={self.shape}, dtype={self.dtype})"

    # Elementwise arithmetic. Operands must have identical shapes; the only
    # non-Variable operands accepted are python scalars and constant arrays,
    # which do not receive gradients.

    def __add__(self, other):
        if isinstance(other, Variable):
            _check_same_shape(self, other)
            return record(self.value + other.value, (self, other), lambda g: (g, g))
        const = np.asarray(other, dtype=self.dtype)
        return record(self.value + const, (self,), lambda g: (g,))

    __radd__ = __add__

    def __neg__(self):
        return record(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Variable) else -np.asarray(other))

    def __mul__(self, other):
        if isinstance(other, Variable):
            _check_same_shape(self, other)
            a, b = self.value, other.value
            return record(a * b, (self, other), lambda g: (g * b, g * a))
        const = np.asarray(other, dtype=self.dtype)
        return record(self.value * const, (self,), lambda g: (g * const,))

    __rmul__ = __mul__


def _check_same_shape(a, b):
    if a.value.shape != b.value.shape:
        raise ContractError(f"shape mismatch: {a.value.shape} vs {b.value.shape}")


class Tape:
    """Ordered record of operations; replayed in reverse by backward().

    Recording order is creation order, which is topological by construction:
    an operation's inputs always exist before its output. backward() visits
    each recorded node exactly once, in reverse order, accumulating adjoints
    in a per-call buffer that is flushed into Variable.grad at the end.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, loss):
        """Populate grad on every Variable reachable from loss.

        backward_fn(upstream) returns one gradient array (or None) per input.
        """
        if not isinstance(loss, Variable):
            raise ContractError("backward expects a Variable loss")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        adjoint = {id(loss): np.ones_like(loss.value)}
        holders = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._nodes):
            upstream = adjoint.get(id(out))
            if upstream is None:
                continue
            holders.setdefault(id(out), out)
            for var, g in zip(inputs, backward_fn(upstream)):
                if g is None:
                    continue
                key = id(var)
                holders.setdefault(key, var)
                prev = adjoint.get(key)
                adjoint[key] = g if prev is None else prev + g
        for key, g in adjoint.items():
            var = holders[key]
            var.grad = g if var.grad is None else var.grad + g


def record(value, inputs, backward_fn):
    """Create the output Variable of an op, recording it if a tape is active."""
    out = Variable(value)
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def vsum(x):
    """Sum of all elements as a scalar Variable of shape (1, 1, 1, 1)."""
    value = np.sum(x.value).reshape(_SCALAR_SHAPE).astype(x.dtype)
    shape = x.value.shape

    def backward_fn(g):
        return (np.full(shape, g.reshape(()), dtype=g.dtype),)

    return record(value, (x,), backward_fn)


def finite_difference_check(f, x, epsilon=1e-4):
    """Max relative error between tape gradients of f and central differences.

    f must be a pure, deterministic Variable -> scalar Variable function.
    Returns max over coordinates of |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-8). A non-finite value anywhere in the
    evaluations makes the returned error infinite.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    leaf = Variable(x.copy())
    with Tape() as tape:
        out = f(leaf)
    tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    probe = x.copy()
    flat = probe.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(f(Variable(probe)).value.reshape(()))
        flat[i] = orig - epsilon
        f_minus = float(f(Variable(probe)).value.reshape(()))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            return math.inf
        numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * epsilon)

    if not np.all(np.isfinite(analytic)):
        return math.inf
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
