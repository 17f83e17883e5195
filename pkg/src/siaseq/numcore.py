"""Dense float64 tensors with a reverse-mode gradient tape.

The op set is deliberately small and the adjoint of each op is written out
by hand next to its forward computation, so it can be audited line by line
and cross-checked with `grad_check`. Ops record themselves on the innermost
active `Tape`; with no tape active they are plain numpy calls, which is what
inference paths use.

Broadcasting follows numpy rules (leading axes, size-1 axes, scalars); the
adjoints undo it by summing over the broadcast axes.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, SiaSeqError

_LOCAL = threading.local()


def _stack() -> list["Tape"]:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


def active_tape() -> "Tape | None":
    tapes = _stack()
    return tapes[-1] if tapes else None


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    Tensors are treated as immutable once created; `grad` is the only
    mutable slot and is written only during `Tape.backward`. Leaves created
    with `requires_grad=True` keep their gradient after a backward pass;
    everything else is an intermediate.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar, all routed through the module-level ops ----------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)


class Tape:
    """Execution-ordered record of op adjoints for one backward pass.

    Usage:
        with Tape() as tape:
            loss = f(params)
            tape.backward(loss)

    Replaying the entries in reverse execution order is a valid reverse
    topological order, so gradients of shared subexpressions accumulate
    correctly. A tape can be replayed once; build a fresh one per step.
    """

    def __init__(self):
        self._entries: list[Callable[[], None]] = []
        self._replayed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _stack().pop()
        if popped is not self:
            raise SiaSeqError("tape context exited out of order")
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, fn: Callable[[], None]) -> None:
        self._entries.append(fn)

    def clear(self) -> None:
        """Drop all recorded entries (and the intermediates they hold)."""
        self._entries.clear()

    def backward(self, root: Tensor) -> None:
        if self._replayed:
            raise SiaSeqError("tape already replayed; build a fresh tape")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.data.shape}")
        self._replayed = True
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for fn in reversed(self._entries):
            fn()


# -- plumbing shared by every op ------------------------------------------


def _value(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcasting introduced for `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # copy: pulls may hand back views of the output gradient
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _apply(out_vals: np.ndarray, pulls) -> Tensor:
    """Wrap op output and record its adjoint on the active tape.

    `pulls` is a list of (operand, fn) pairs where fn maps the output
    gradient to that operand's gradient contribution (already shaped like
    the operand).
    """
    tape = active_tape()
    out = Tensor(out_vals)
    if tape is None:
        return out
    tracked = [(t, pull) for t, pull in pulls if isinstance(t, Tensor) and t.requires_grad]
    if not tracked:
        return out
    out.requires_grad = True

    def _backward():
        g = out.grad
        if g is None:
            return
        for t, pull in tracked:
            _accumulate(t, pull(g))

    tape.record(_backward)
    return out


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    return _apply(av + bv, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ])


def sub(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    return _apply(av - bv, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    ])


def mul(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    return _apply(av * bv, [
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ])


def div(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    return _apply(av / bv, [
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
    ])


def matmul(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape} do not align")
    out_vals = av @ bv
    return _apply(out_vals, [
        (a, lambda g: _unbroadcast(g @ bv.swapaxes(-1, -2), av.shape)),
        (b, lambda g: _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape)),
    ])


def log(x) -> Tensor:
    xv = _value(x)
    if np.any(xv <= 0.0):
        raise NumericError("log requires strictly positive input")
    return _apply(np.log(xv), [(x, lambda g: g / xv)])


def exp(x) -> Tensor:
    xv = _value(x)
    out_vals = np.exp(xv)
    return _apply(out_vals, [(x, lambda g: g * out_vals)])


def tanh(x) -> Tensor:
    xv = _value(x)
    out_vals = np.tanh(xv)
    return _apply(out_vals, [(x, lambda g: g * (1.0 - out_vals * out_vals))])


def power(x, exponent: float) -> Tensor:
    """Elementwise x**exponent for a real scalar exponent.

    exponent == 0 returns exact ones with zero gradient, so weight
    formulas of the form (1-p)**alpha degrade cleanly at alpha == 0.
    """
    xv = _value(x)
    p = float(exponent)
    if p == 0.0:
        return _apply(np.ones_like(xv), [])
    out_vals = xv ** p
    return _apply(out_vals, [(x, lambda g: g * p * xv ** (p - 1.0))])


def clamp_max(x, cap: float) -> Tensor:
    """min(x, cap); gradient passes only where x <= cap."""
    xv = _value(x)
    cap = float(cap)
    return _apply(np.minimum(xv, cap), [(x, lambda g: g * (xv <= cap))])


def mask_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is true with `value` (non-differentiable
    in the mask; gradient is zero at filled positions)."""
    xv = _value(x)
    mask = np.asarray(mask, dtype=bool)
    out_vals = np.where(mask, float(value), xv)
    return _apply(out_vals, [(x, lambda g: _unbroadcast(np.where(mask, 0.0, g), xv.shape))])


# -- reductions -------------------------------------------------------------


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spread(g: np.ndarray, in_shape: tuple[int, ...], axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(g.reshape((1,) * len(in_shape)), in_shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    xv = _value(x)
    axes = _normalize_axes(axis, xv.ndim)
    out_vals = xv.sum(axis=axes, keepdims=keepdims)
    return _apply(out_vals, [(x, lambda g: _spread(g, xv.shape, axes, keepdims).copy())])


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    xv = _value(x)
    axes = _normalize_axes(axis, xv.ndim)
    if axes is None:
        count = xv.size
    else:
        count = int(np.prod([xv.shape[a] for a in axes]))
    out_vals = xv.mean(axis=axes, keepdims=keepdims)
    return _apply(out_vals, [(x, lambda g: _spread(g, xv.shape, axes, keepdims) / count)])


# -- shape ops --------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    xv = _value(x)
    shape = tuple(shape)
    return _apply(xv.reshape(shape), [(x, lambda g: g.reshape(xv.shape))])


def transpose(x, axes) -> Tensor:
    xv = _value(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _apply(xv.transpose(axes), [(x, lambda g: g.transpose(inverse))])


# -- softmax family ---------------------------------------------------------


def softmax(x) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    xv = _value(x)
    if np.isnan(xv).any():
        raise NumericError("softmax input contains NaN")
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_vals = e / e.sum(axis=-1, keepdims=True)

    def _pull(g):
        return (g - (g * out_vals).sum(axis=-1, keepdims=True)) * out_vals

    return _apply(out_vals, [(x, _pull)])


def log_softmax(x) -> Tensor:
    xv = _value(x)
    if np.isnan(xv).any():
        raise NumericError("log_softmax input contains NaN")
    shifted = xv - xv.max(axis=-1, keepdims=True)
    out_vals = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def _pull(g):
        return g - np.exp(out_vals) * g.sum(axis=-1, keepdims=True)

    return _apply(out_vals, [(x, _pull)])


# -- gather / scatter -------------------------------------------------------


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]`; the adjoint scatter-adds into the rows."""
    tv = _value(table)
    ids = np.asarray(ids, dtype=np.int64)
    if tv.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got shape {tv.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise ShapeError(f"embedding ids out of range for table with {tv.shape[0]} rows")
    out_vals = tv[ids]

    def _pull(g):
        z = np.zeros_like(tv)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, tv.shape[1]))
        return z

    return _apply(out_vals, [(table, _pull)])


def take_along_last(x, indices: np.ndarray) -> Tensor:
    """out[..., ] = x[..., indices[...]]: pick one entry per row of the last
    axis. Used to gather target-token log-probabilities."""
    xv = _value(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != xv.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} must match leading shape {xv.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= xv.shape[-1]):
        raise ShapeError(f"indices out of range for last axis of extent {xv.shape[-1]}")
    out_vals = np.take_along_axis(xv, idx[..., None], axis=-1)[..., 0]

    def _pull(g):
        z = np.zeros_like(xv)
        np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
        return z

    return _apply(out_vals, [(x, _pull)])


# -- gradient checking ------------------------------------------------------


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient of `f` at `x` and
    central finite differences (f(x+h) - f(x-h)) / 2h per component.

    `f` must map `x` to a scalar Tensor and depend on no other tensor that
    requires grad. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    if not (0.0 < step <= 1e-2):
        raise ConfigError(f"grad_check step must be in (0, 1e-2], got {step}")
    if not isinstance(x, Tensor) or not x.requires_grad:
        raise ConfigError("grad_check needs a Tensor with requires_grad=True")
    x.grad = None
    with Tape() as tape:
        y = f(x)
        if not isinstance(y, Tensor) or y.data.size != 1:
            raise ShapeError("grad_check function must return a scalar Tensor")
        tape.backward(y)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).copy()
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x).data)
        flat[i] = orig - step
        fm = float(f(x).data)
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
