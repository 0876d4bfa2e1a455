"""Dense tensors with tape-based reverse-mode automatic differentiation.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` replays them in reverse. Outside a tape, ops run as plain
numpy with no graph overhead, which is what inference paths rely on.

Broadcasting is limited to leading batch dimensions: the shorter operand's
shape must equal the trailing dimensions of the longer one.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateRowError, ShapeError

_DEBUG = os.environ.get("MCSD_DEBUG", "") not in ("", "0")
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable operations.

    A tape is confined to the thread that entered it. Each node is
    ``(output, parents, backward_fn)`` and nodes are appended in execution
    order, so every node's inputs precede it.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: "Tensor", parents: tuple, backward: Callable) -> None:
        self.nodes.append((out, parents, backward))

    def backward(self, loss: "Tensor", grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf that requires grad."""
        if grad is None:
            if loss.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g


class Tensor:
    """A floating-point array that can participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def _wrap(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError("non-finite value produced from finite inputs")
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward)
    return out


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} differ beyond leading batch dimensions")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix(a.shape, b.shape, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix(a.shape, b.shape, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix(a.shape, b.shape, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _check_suffix(a.shape[:-2], b.shape[:-2], "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


# ------------------------------------------------------------------ pointwise

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    x = a.data
    return _result(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    x2 = x * x
    inner = c * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(0.5 * x * (1.0 + t), (a,), backward)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries map to exactly zero."""
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateRowError("softmax row has no finite entry")
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _result(s, (a,), backward)


def rms_norm(x: Tensor, gain: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps)`` over the last axis, times optional gain."""
    if eps <= 0:
        raise ContractError("rms_norm eps must be positive")
    xd = x.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    normed = xd * r
    if gain is not None:
        _check_suffix(gain.shape, x.shape, "rms_norm")
        if gain.shape[-1:] != x.shape[-1:]:
            raise ShapeError(f"rms_norm gain {gain.shape} does not match features of {x.shape}")
        out = normed * gain.data
    else:
        out = normed

    def backward(g):
        gg = g * gain.data if gain is not None else g
        dx = r * (gg - normed * np.mean(gg * normed, axis=-1, keepdims=True))
        dgain = None
        if gain is not None and gain.requires_grad:
            dgain = _unbroadcast(g * normed, gain.shape)
        return (dx, dgain) if gain is not None else (dx,)

    parents = (x, gain) if gain is not None else (x,)
    return _result(out, parents, backward)


# -------------------------------------------------------------------- shaping

def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes {tensors[0].shape} and {t.shape} differ")
    sizes = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=-1))

    return _result(np.concatenate([t.data for t in tensors], axis=-1), tensors, backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(np.asarray(a.data.mean()), (a,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight``; the backward pass scatter-adds."""
    ids = np.asarray(ids)

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(len(t))
    loss = -logp[rows, t].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return ((g / len(t)) * p.reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), backward)


# ----------------------------------------------------------------- checking

def grad_check(f: Callable, x, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f(x)`` must return a scalar
    Tensor. The error per element is ``|auto - cd| / (|cd| + 1e-8)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.data.dtype != np.float64:
            raise ContractError("grad_check requires 64-bit tensors")
        t.data = np.array(t.data, copy=True, order="C")
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
    tape.backward(y)

    worst = 0.0
    for t in xs:
        auto = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)
        err = np.abs(auto.reshape(-1) - numeric) / (np.abs(numeric) + 1e-8)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
