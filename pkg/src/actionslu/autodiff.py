"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

All arrays are row-major float64 and every reduction has a fixed order, so
repeated runs on identical inputs are bit-identical.  Ops record themselves on
the innermost active :class:`Tape`; with no tape active they just compute
values, which is the inference fast path.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GradCheckError, InvalidInputError, ShapeError, TapeStateError

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"

    # A small set of operator conveniences; everything routes through the
    # module-level op functions so recording stays in one place.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive ops, replayable in reverse exactly once."""

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self._records.append(_Record(out, inputs, vjp))

    def reset(self) -> None:
        self._records.clear()
        self._consumed = False

    def __len__(self):
        return len(self._records)

    def replay_adjoints(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeStateError("tape already replayed; call reset() first")
        self._consumed = True
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            out_grad = rec.out.grad
            if out_grad is None:
                continue
            grads = rec.vjp(out_grad)
            for t, g in zip(rec.inputs, grads):
                if g is None:
                    continue
                # Accumulation always reassigns (never +=), so sharing the
                # returned array is safe even when it aliases out_grad.
                t.grad = g if t.grad is None else t.grad + g


def _current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _register(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _current_tape()
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _register(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                             _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _register(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                             _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _register(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                             _unbroadcast(g * a.data, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _register(out, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _register(out, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c) -> Tensor:
    """Add a constant array (no gradient through the constant)."""
    out = Tensor(a.data + c)
    return _register(out, (a,), lambda g: (_unbroadcast(g, a.data.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _register(out, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    return _register(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(np.transpose(a.data, axes))
    return _register(out, (a,), lambda g: (np.transpose(g, inv),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[...,:] = table[ids[...], :]."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _register(out, (table,), vjp)


def pick(a: Tensor, ids: np.ndarray) -> Tensor:
    """Select one entry along the last axis: out[...] = a[..., ids[...]]."""
    ids = np.asarray(ids)
    out = Tensor(np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0])

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, ids[..., None], g[..., None], axis=-1)
        return (ga,)

    return _register(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth everywhere, which finite differences like."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    from scipy.special import erf  # local import keeps module load light

    e = erf(a.data * inv_sqrt2)
    out = Tensor(0.5 * a.data * (1.0 + e))

    def vjp(g):
        pdf = np.exp(-0.5 * a.data * a.data) / math.sqrt(2.0 * math.pi)
        return (g * (0.5 * (1.0 + e) + a.data * pdf),)

    return _register(out, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def vjp(g):
        n = x.data.shape[-1]
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes).reshape(gamma.data.shape)
        gbeta = g.sum(axis=reduce_axes).reshape(beta.data.shape)
        return gx, ggamma, gbeta

    return _register(out, (x, gamma, beta), vjp)


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    if not np.all(np.isfinite(a.data)):
        raise InvalidInputError("softmax received non-finite input")
    y = _softmax_np(a.data, axis)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _register(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise InvalidInputError("log_softmax received non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - logz
    out = Tensor(y)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _register(out, (a,), vjp)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # Branch on sign so neither exp overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (ez + 1.0)
    return out


def sigmoid(a: Tensor) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise InvalidInputError("sigmoid received non-finite input")
    y = _sigmoid_np(a.data)
    out = Tensor(y)
    return _register(out, (a,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log σ(x) = −log1p(exp(−x)), computed without underflow to −inf."""
    if not np.all(np.isfinite(a.data)):
        raise InvalidInputError("log_sigmoid received non-finite input")
    out = Tensor(-np.logaddexp(0.0, -a.data))
    return _register(out, (a,), lambda g: (g * _sigmoid_np(-a.data),))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _register(out, (a,), vjp)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / count)


# ---------------------------------------------------------------------------
# validated user-facing numerics
# ---------------------------------------------------------------------------

def cross_entropy(dist: Tensor, gold: int, tol: float = 1e-6) -> Tensor:
    """−log dist[gold] for an explicit probability vector."""
    p = dist.data
    if p.ndim != 1:
        raise ShapeError("cross_entropy expects a probability vector")
    if not (0 <= gold < p.shape[0]):
        raise IndexError(f"gold index {gold} out of range for {p.shape[0]} classes")
    if abs(p.sum() - 1.0) > tol:
        raise InvalidInputError(f"distribution sums to {p.sum()!r}, not 1")
    picked = pick(dist, np.asarray(gold))
    return neg(log(picked))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _register(out, (a,), lambda g: (g / a.data,))


def cross_entropy_logits(logits: Tensor, gold: np.ndarray) -> Tensor:
    """Fused log-softmax + NLL over the last axis; returns per-element losses."""
    return neg(pick(log_softmax(logits), gold))


def bce_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy against constant 0/1 targets."""
    targets = np.asarray(targets, dtype=np.float64)
    pos = mul(log_sigmoid(logits), Tensor(targets))
    negp = mul(log_sigmoid(neg(logits)), Tensor(1.0 - targets))
    return neg(add(pos, negp))


# ---------------------------------------------------------------------------
# backward + gradient checking
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Replay adjoints; parameters unreachable from ``loss`` get zero grads."""
    tape.replay_adjoints(loss)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_coords_per_tensor: int = 8, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must be a deterministic closure over ``params`` returning a scalar
    Tensor.  Coordinates are subsampled per tensor when there are more than
    ``max_coords_per_tensor``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidInputError(f"eps {eps} outside [1e-7, 1e-3]")
    base1 = fn().data.item()
    base2 = fn().data.item()
    if base1 != base2:
        raise GradCheckError("fn is not deterministic across evaluations")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(tape, loss, params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = flat.size
        if n <= max_coords_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().data.item()
            flat[i] = orig - eps
            f_minus = fn().data.item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = gflat[i]
            err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
