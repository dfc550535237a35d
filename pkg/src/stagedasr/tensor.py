"""Minimal dense-tensor numerics with taped reverse-mode gradients.

Tensors wrap contiguous row-major numpy arrays. Every primitive checks its
shapes explicitly; the single implicit broadcast allowed anywhere is the
bias add over the leading axis (`add_bias`). When a `Graph` is active,
primitives append (output, inputs, backward) records to its tape, and
`Graph.backward` replays the tape in exact reverse order, accumulating
into `Tensor.grad`.

Double precision is the default; training may opt into float32, but the
finite-difference oracle only makes sense in float64.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DataError, NumericsError, ShapeError

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense row-major array with an optional gradient buffer.

    `grad` is filled lazily during backward and always matches `data` in
    shape. Tensors are treated as immutable once they enter a graph,
    except for gradient accumulation and explicit optimizer updates.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tracked = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tracked = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"{what} contains non-finite values")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Graph:
    """Ordered tape of primitive ops, replayed in reverse for backward."""

    _active: "Graph | None" = None

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outer: "Graph | None" = None

    def __enter__(self) -> "Graph":
        self._outer = Graph._active
        Graph._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Graph._active = self._outer
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise ShapeError("backward requires a scalar loss")
        if not np.isfinite(loss.data):
            raise NumericsError("loss is non-finite")
        loss.grad = np.ones_like(loss.data)
        for out, _inputs, back in reversed(self._ops):
            if out.grad is not None:
                back(out.grad)


def _record(out: Tensor, inputs: tuple[Tensor, ...], back: Callable) -> Tensor:
    graph = Graph._active
    if graph is not None and any(t.requires_grad or t._tracked for t in inputs):
        out._tracked = True
        graph._ops.append((out, inputs, back))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._tracked):
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    out = Tensor._wrap(np.ascontiguousarray(a.data.T))

    def back(g):
        _accum(a, np.ascontiguousarray(g.T))

    return _record(out, (a,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data + b.data)

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias add, the only implicit broadcast in the library."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias needs (n,d)+(d,), got {x.shape} and {b.shape}")
    out = Tensor._wrap(x.data + b.data)

    def back(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _record(out, (x, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data * b.data)

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._wrap(a.data * c)

    def back(g):
        _accum(a, g * c)

    return _record(out, (a,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.ndim == 0 or x.data.shape[axis] < 1:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(s)

    def back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - dot))

    return _record(out, (x,), back)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite differences stay usable."""
    c = erf(x.data * _SQRT1_2)
    out = Tensor._wrap(0.5 * x.data * (1.0 + c))

    def back(g):
        d = 0.5 * (1.0 + c) + x.data * np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, g * d)

    return _record(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D tensor, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor._wrap(xhat * gain.data + bias.data)

    def back(g):
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        _accum(x, term * inv)

    return _record(out, (x, gain, bias), back)


def embedding(table: Tensor, ids) -> Tensor:
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = Tensor._wrap(table.data[idx])

    def back(g):
        if not (table.requires_grad or table._tracked):
            return
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accum(table, full)

    return _record(out, (table,), back)


def slice_rows(x: Tensor, n: int) -> Tensor:
    if x.data.ndim != 2 or not (0 < n <= x.shape[0]):
        raise ShapeError(f"bad row slice [:{n}] of shape {x.shape}")
    out = Tensor._wrap(np.ascontiguousarray(x.data[:n]))

    def back(g):
        full = np.zeros_like(x.data)
        full[:n] = g
        _accum(x, full)

    return _record(out, (x,), back)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.shape[1]):
        raise ShapeError(f"bad column slice [{lo}:{hi}] of shape {x.shape}")
    out = Tensor._wrap(np.ascontiguousarray(x.data[:, lo:hi]))

    def back(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        _accum(x, full)

    return _record(out, (x,), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols parts must be 2-D with equal row counts")
    widths = [p.shape[1] for p in parts]
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))

    def back(g):
        lo = 0
        for p, w in zip(parts, widths):
            _accum(p, np.ascontiguousarray(g[:, lo:lo + w]))
            lo += w

    return _record(out, tuple(parts), back)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum()))

    def back(g):
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _record(out, (x,), back)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-softmax probability of targets over kept positions."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be (T,V), got {logits.shape}")
    t, v = logits.shape
    targ = np.asarray(targets, dtype=np.int64)
    if targ.shape != (t,):
        raise ShapeError(f"targets shape {targ.shape} != ({t},)")
    if ignore_index is None:
        keep = np.ones(t, dtype=bool)
    else:
        keep = targ != ignore_index
    bad = keep & ((targ < 0) | (targ >= v))
    if bad.any():
        raise IndexError(f"target id out of range [0, {v}) at positions {np.flatnonzero(bad)}")
    n = int(keep.sum())
    if n == 0:
        raise DataError("cross_entropy: every target position is ignored")
    safe = np.where(keep, targ, 0)
    m = logits.data.max(axis=1)
    lz = m + np.log(np.exp(logits.data - m[:, None]).sum(axis=1))
    picked = logits.data[np.arange(t), safe]
    out = Tensor._wrap(np.asarray(((lz - picked) * keep).sum() / n))

    def back(g):
        p = np.exp(logits.data - lz[:, None])
        p[np.arange(t), safe] -= 1.0
        p *= keep[:, None]
        _accum(logits, (float(g) / n) * p)

    return _record(out, (logits,), back)


def finite_diff_grad(f: Callable[[], float], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of `f()` with respect to `param`.

    `f` takes no arguments and must recompute its value from `param.data`,
    which is perturbed in place one element at a time and restored. This is
    the independent oracle for the taped backward pass; keep it in float64.
    """
    data = param.data
    grad = np.empty_like(data)
    for idx in np.ndindex(data.shape):
        orig = data[idx]
        data[idx] = orig + eps
        fp = float(f())
        data[idx] = orig - eps
        fm = float(f())
        data[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericsError(f"finite_diff_grad: f is non-finite at index {idx}")
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad
