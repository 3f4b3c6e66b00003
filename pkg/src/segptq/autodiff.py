"""Dense float64 tensors with reverse-mode differentiation on a replayable tape.

Every primitive that sees a gradient-tracked input appends one node to the
active tape; ``backward`` replays the tape in exact reverse order of
recording. The tape is single-threaded: tensors without gradient tracking
are safe to share read-only, but no two threads may record simultaneously.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_COEF = 0.044715


class GradTape:
    """Ordered record of primitive ops, traversed back-to-front by backward()."""

    def __init__(self):
        self._nodes = []

    def record(self, out, inputs, grad_fn):
        self._nodes.append((out, inputs, grad_fn))

    def clear(self):
        """Drop all recorded nodes; a re-run forward re-records deterministically."""
        self._nodes.clear()

    def __len__(self):
        return len(self._nodes)


_TAPE = GradTape()
_GRAD_ENABLED = True


def tape() -> GradTape:
    return _TAPE


def clear_tape():
    _TAPE.clear()


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values unaffected)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; non-Tensor operands are treated as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _accumulate(t: Tensor, g: np.ndarray):
    if g is None or not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.zeros_like(t.data)
    t._grad += g


def apply_op(out_data, inputs, grad_fn) -> Tensor:
    """Create an output tensor and record a node with a user-defined gradient.

    ``grad_fn(g)`` must return one gradient array (or None) per input, in
    order. This is the extension point for custom backward rules such as
    straight-through estimators.
    """
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    track = _GRAD_ENABLED and any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=track)
    if track:
        _TAPE.record(out, tensors, grad_fn)
    return out


def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    Tensors that were recorded on the tape but receive no flow end up with
    zero gradients. Raises on a non-scalar loss.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._grad is None:
        loss._grad = np.ones_like(loss.data)
    for out, inputs, grad_fn in reversed(_TAPE._nodes):
        g = out._grad
        if g is None:
            continue
        grads = grad_fn(g)
        for t, gi in zip(inputs, grads):
            _accumulate(t, gi)
    # on-tape parameters with no flow hold zeros rather than None
    for _, inputs, _ in _TAPE._nodes:
        for t in inputs:
            if t.requires_grad and t._grad is None:
                t._grad = np.zeros_like(t.data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return apply_op(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return apply_op(out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("division by zero in tensor div")
    out = a.data / b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return apply_op(out, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    """Matrix product with matching leading batch dimensions."""
    a, b = _const(a), _const(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return apply_op(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# shape ops (all exact bijections on the data they keep)
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _const(x)
    old = x.shape
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(old),)

    return apply_op(out, (x,), grad_fn)


def swapaxes(x, ax1, ax2) -> Tensor:
    x = _const(x)
    out = np.swapaxes(x.data, ax1, ax2)

    def grad_fn(g):
        return (np.swapaxes(g, ax1, ax2),)

    return apply_op(out, (x,), grad_fn)


def concat(parts, axis=0) -> Tensor:
    parts = [_const(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(out, tuple(parts), grad_fn)


def take(x, idx) -> Tensor:
    x = _const(x)
    out = x.data[idx]
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return apply_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = _const(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op(out, (x,), grad_fn)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _const(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax_lastdim(x) -> Tensor:
    """Row-stable softmax over the last dimension (max subtracted before exp)."""
    x = _const(x)
    if x.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    _check_finite(y, "softmax")

    def grad_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y,)

    return apply_op(y, (x,), grad_fn)


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine.

    A zero-variance slice maps to the beta value (the variance is floored
    by eps rather than raising).
    """
    x, gamma, beta = _const(x), _const(gamma), _const(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError("gamma/beta must match the last dimension of x")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    y = xh * gamma.data + beta.data
    _check_finite(y, "layer_norm")
    gdat = gamma.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xh).sum(axis=lead)
        gxh = g * gdat
        gx = inv * (
            gxh
            - gxh.mean(axis=-1, keepdims=True)
            - xh * (gxh * xh).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return apply_op(y, (x, gamma, beta), grad_fn)


def gelu(x) -> Tensor:
    """tanh-approximation GELU."""
    x = _const(x)
    xd = x.data
    u = _SQRT_2_OVER_PI * (xd + _GELU_COEF * xd ** 3)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_COEF * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return apply_op(y, (x,), grad_fn)


def relu(x) -> Tensor:
    x = _const(x)
    y = np.maximum(x.data, 0.0)
    pos = x.data > 0.0

    def grad_fn(g):
        return (g * pos,)

    return apply_op(y, (x,), grad_fn)


def sigmoid(x) -> Tensor:
    x = _const(x)
    y = 1.0 / (1.0 + np.exp(-x.data))

    def grad_fn(g):
        return (g * y * (1.0 - y),)

    return apply_op(y, (x,), grad_fn)


def clamp(x, lo, hi) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where x lies inside the bounds."""
    x = _const(x)
    y = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def grad_fn(g):
        return (g * inside,)

    return apply_op(y, (x,), grad_fn)


def absval(x) -> Tensor:
    x = _const(x)
    s = np.sign(x.data)

    def grad_fn(g):
        return (g * s,)

    return apply_op(np.abs(x.data), (x,), grad_fn)


def pow_scalar(x, p: float) -> Tensor:
    """x ** p for a scalar exponent; defined for non-negative x when p < 1."""
    x = _const(x)
    y = x.data ** p
    xd = x.data

    def grad_fn(g):
        return (g * p * xd ** (p - 1.0),)

    return apply_op(y, (x,), grad_fn)


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced a non-finite value")
