"""Minimal reverse-mode autodiff over numpy arrays.

Every ``Tensor`` produced by an op remembers its parents and a closure that
pushes its gradient to them. ``backward`` walks the reachable graph in
reverse creation order, which is a fixed topological order, so gradient
accumulation is deterministic.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "uid", "name")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.uid = next(_ids)
        self.name = name

    # -- conveniences
    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return sum_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _track(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _make(data, parents, fn) -> Tensor:
    if _track(*parents):
        return Tensor(data, True, parents, fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


# ------------------------------------------------------------------ ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def fn(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))
    return _make(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _acc(a, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def fn(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(out, (a, b), fn)


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a`` (N x I) @ ``w`` (I x O)."""
    a, w = as_tensor(a), as_tensor(w)
    out = a.data @ w.data

    def fn(g):
        if a.requires_grad:
            _acc(a, g @ w.data.T)
        if w.requires_grad:
            _acc(w, a.data.T @ g)
    return _make(out, (a, w), fn)


def relu(a: Tensor) -> Tensor:
    # NaN must survive so the divergence guard can see it
    mask = a.data > 0.0
    return _make(np.where(mask | np.isnan(a.data), a.data, 0.0), (a,), lambda g: _acc(a, g * mask))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: _acc(a, g * (1.0 - y * y)))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: _acc(a, g * y * (1.0 - y)))


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: _acc(a, np.broadcast_to(g, shape).copy()))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.data.shape
    return _make(a.data.sum(axis=axis), (a,),
                 lambda g: _acc(a, np.broadcast_to(np.expand_dims(g, axis), shape).copy()))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def fn(g):
        for t, part in zip(ts, np.split(g, sizes, axis=axis)):
            _acc(t, part)
    return _make(out, tuple(ts), fn)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    out = a.data[idx]
    shape = a.data.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        _acc(a, full)
    return _make(out, (a,), fn)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    return getitem(a, np.asarray(rows, dtype=np.intp))


def segment_sum(a: Tensor, segments: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``a`` into ``n`` buckets; bucket ``k`` gets rows with segments == k."""
    seg = np.asarray(segments, dtype=np.intp)
    out = np.zeros((n,) + a.data.shape[1:])
    np.add.at(out, seg, a.data)
    return _make(out, (a,), lambda g: _acc(a, g[seg]))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: _acc(a, g.reshape(old)))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def mix(base: Tensor, source: Tensor, mask: np.ndarray) -> Tensor:
    """``base`` where mask is 0, ``source`` where it is 1 (mask is constant)."""
    keep = 1.0 - mask
    out = base.data * keep + source.data * mask

    def fn(g):
        if base.requires_grad:
            _acc(base, _unbroadcast(g * keep, base.data.shape))
        if source.requires_grad:
            _acc(source, _unbroadcast(g * mask, source.data.shape))
    return _make(out, (base, source), fn)


def where_rows(base: Tensor, source: Tensor, mask: np.ndarray) -> Tensor:
    """Select elements from ``source`` where the boolean ``mask`` is set, else ``base``.

    Unlike ``mix`` this copies values exactly (no arithmetic on the kept part).
    """
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, source.data, base.data)

    def fn(g):
        if base.requires_grad:
            _acc(base, _unbroadcast(np.where(m, 0.0, g), base.data.shape))
        if source.requires_grad:
            _acc(source, _unbroadcast(np.where(m, g, 0.0), source.data.shape))
    return _make(out, (base, source), fn)


# --------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d loss / d t into ``t.grad`` for every tracked ancestor."""
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.uid in nodes:
            continue
        nodes[t.uid] = t
        for p in t.parents:
            if p.requires_grad and p.uid not in nodes:
                stack.append(p)
    # transient grads on intermediates are cleared; leaves keep accumulating
    for t in nodes.values():
        if t.backward_fn is not None:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for uid in sorted(nodes, reverse=True):
        t = nodes[uid]
        if t.backward_fn is not None and t.grad is not None:
            t.backward_fn(t.grad)
            if t is not loss:
                t.grad = None
