"""Dense tensors with reverse-mode automatic differentiation.

Everything in this engine is a plain numpy array wrapped in a ``Tensor``
node.  Operations record closures so that :func:`backward` can walk the
graph in reverse topological order and accumulate gradients with ``+=``
(shared parameters such as memory tokens receive contributions from
several paths, so gradients are never overwritten).

Tests and gradient checks run in float64; training code may opt into
float32 via the ``dtype`` argument of the constructors.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation was called outside of its contract."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node in the differentiation graph.

    ``data`` is always a numpy array.  ``grad`` is lazily allocated and
    has the same shape as ``data``.  Non-leaf tensors keep references to
    their parents plus a backward closure mapping the incoming gradient
    to per-parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, *, dtype=None,
                 _parents=(), _backward=None, op=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _make(data, parents, backward, op):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents),
                  _backward=backward, op=op)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- primitives ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"multiply: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward, "multiply")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(a.data * c, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 1 or a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward, "concat")


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * t.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = t.data[idx]

    def backward(g):
        gt = np.zeros_like(t.data)
        gt[idx] = g
        return (gt,)

    return _make(out, (t,), backward, "slice")


def reshape(t: Tensor, shape) -> Tensor:
    out = t.data.reshape(shape)

    def backward(g):
        return (g.reshape(t.data.shape),)

    return _make(out, (t,), backward, "reshape")


def transpose(t: Tensor, axes=None) -> Tensor:
    out = np.transpose(t.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(out, (t,), backward, "transpose")


def broadcast_to(t: Tensor, shape) -> Tensor:
    out = np.broadcast_to(t.data, shape).copy()

    def backward(g):
        return (_unbroadcast(g, t.shape),)

    return _make(out, (t,), backward, "broadcast_to")


def relu(t: Tensor) -> Tensor:
    out = np.maximum(t.data, 0.0)

    def backward(g):
        return (g * (t.data > 0),)

    return _make(out, (t,), backward, "relu")


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    if t.shape[axis] == 0:
        raise ContractError("softmax: empty axis")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (t,), backward, "softmax")


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1,
               eps: float = 1e-5) -> Tensor:
    if gamma.shape != (t.shape[axis],) or beta.shape != (t.shape[axis],):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not "
            f"match normalized extent {t.shape[axis]}")
    mu = t.data.mean(axis=axis, keepdims=True)
    var = t.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (t.data - mu) * inv
    # gamma/beta broadcast along the normalized axis (assumed last)
    out = xhat * gamma.data + beta.data
    n = t.shape[axis]

    def backward(g):
        dxhat = g * gamma.data
        gx = inv * (dxhat
                    - dxhat.mean(axis=axis, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return gx, ggamma, gbeta

    if axis not in (-1, t.data.ndim - 1):
        raise ContractError("layer_norm: only the last axis is supported")
    return _make(out, (t, gamma, beta), backward, "layer_norm")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding_lookup: id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), backward, "embedding_lookup")


def masked_fill(t: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=t.dtype), t.data)

    def backward(g):
        return (np.where(mask, 0.0, g),)

    return _make(out, (t,), backward, "masked_fill")


def dropout(t: Tensor, p: float, training: bool, rng: "DropoutRng") -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return t
    keep = rng.draw(t.shape) >= p
    m = keep.astype(t.dtype) / (1.0 - p)
    out = t.data * m

    def backward(g):
        return (g * m,)

    return _make(out, (t,), backward, "dropout")


def sum_all(t: Tensor) -> Tensor:
    out = np.asarray(t.data.sum())

    def backward(g):
        return (np.broadcast_to(g, t.data.shape).astype(t.dtype),)

    return _make(out, (t,), backward, "sum")


def take_last_axis(t: Tensor, idx) -> Tensor:
    """Gather along the last axis with a per-row index matrix.

    ``t`` has shape (..., R, N) and ``idx`` shape (R, C); the output is
    ``out[..., i, j] = t[..., i, idx[i, j]]``.  Used to turn per-distance
    attention scores into per-key scores.
    """
    idx = np.asarray(idx)
    rows = np.arange(idx.shape[0])[:, None]
    out = t.data[..., rows, idx]

    def backward(g):
        gt = np.zeros_like(t.data)
        lead = t.data.shape[:-2]
        gt2 = gt.reshape((-1,) + t.data.shape[-2:])
        g2 = g.reshape((-1,) + g.shape[-2:])
        m = np.arange(gt2.shape[0])[:, None, None]
        np.add.at(gt2, (m, rows[None], idx[None]), g2)
        return (gt2.reshape(t.data.shape),)

    return _make(out, (t,), backward, "take_last_axis")


def cross_entropy_from_logits(logits: Tensor, targets, mask=None,
                              reduction: str = "mean") -> Tensor:
    """Cross entropy of integer ``targets`` under ``logits`` rows.

    ``logits`` is (N, V); ``targets`` is (N,) ints; ``mask`` selects which
    rows contribute.  Reduction is the mean (or sum) over selected rows.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: targets shape {targets.shape} does not match "
            f"logits rows {logits.shape[0]}")
    if mask is None:
        mask = np.ones(logits.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n_sel = int(mask.sum())
    if n_sel == 0:
        raise ContractError("cross_entropy: mask selects no positions")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = lse - z[np.arange(z.shape[0]), targets]
    denom = n_sel if reduction == "mean" else 1
    out = np.asarray((nll * mask).sum() / denom)

    def backward(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(z.shape[0]), targets] -= 1.0
        p *= (mask.astype(z.dtype) / denom)[:, None]
        return (p * g,)

    return _make(out, (logits,), backward, "cross_entropy")


def detach(t: Tensor) -> Tensor:
    """Value-identical tensor through which backward never propagates."""
    return Tensor(t.data, op="detach")


# -- generic dispatch ------------------------------------------------------

_PRIMITIVES: dict[str, Callable] = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "multiply": lambda inputs, attrs: multiply(*inputs),
    "scale": lambda inputs, attrs: scale(inputs[0], attrs["c"]),
    "concat": lambda inputs, attrs: concat(inputs, attrs["axis"]),
    "slice": lambda inputs, attrs: slice_axis(inputs[0], attrs["axis"],
                                              attrs["start"], attrs["stop"]),
    "softmax": lambda inputs, attrs: softmax(inputs[0], attrs.get("axis", -1)),
    "layer_norm": lambda inputs, attrs: layer_norm(inputs[0], inputs[1], inputs[2],
                                                   attrs.get("axis", -1)),
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "embedding_lookup": lambda inputs, attrs: embedding_lookup(inputs[0], attrs["ids"]),
    "transpose": lambda inputs, attrs: transpose(inputs[0], attrs.get("axes")),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "masked_fill": lambda inputs, attrs: masked_fill(inputs[0], attrs["mask"],
                                                     attrs["value"]),
    "dropout": lambda inputs, attrs: dropout(inputs[0], attrs["p"],
                                             attrs["training"], attrs["rng"]),
    "cross_entropy_from_logits": lambda inputs, attrs: cross_entropy_from_logits(
        inputs[0], attrs["targets"], attrs.get("mask"),
        attrs.get("reduction", "mean")),
    "sum": lambda inputs, attrs: sum_all(inputs[0]),
    "take_last_axis": lambda inputs, attrs: take_last_axis(inputs[0], attrs["idx"]),
    "broadcast_to": lambda inputs, attrs: broadcast_to(inputs[0], attrs["shape"]),
    "detach": lambda inputs, attrs: detach(inputs[0]),
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch a primitive by name; see module functions for semantics."""
    if kind not in _PRIMITIVES:
        raise ContractError(f"unknown primitive {kind!r}")
    return _PRIMITIVES[kind](list(inputs), attrs or {})


# -- backward pass ---------------------------------------------------------


def backward(loss: Tensor):
    """Accumulate gradients of a scalar ``loss`` into ``.grad`` fields."""
    if loss.data.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.accumulate_grad(g)
        if node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp


# -- oracles & rng ---------------------------------------------------------


def finite_difference_grad(f: Callable[[Tensor], float], x: Tensor,
                           eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element."""
    if eps <= 0:
        raise ContractError("finite_difference_grad: eps must be positive")
    base = x.data.astype(np.float64).copy()
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base.reshape(x.shape))))
        flat[i] = orig - eps
        fm = float(f(Tensor(base.reshape(x.shape))))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


class DropoutRng:
    """Counter-based dropout noise source; replays bit-exactly per seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def draw(self, shape) -> np.ndarray:
        g = np.random.default_rng((self.seed, self.counter))
        self.counter += 1
        return g.random(shape)

    def reset(self):
        self.counter = 0


def check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        bad = "nan" if np.any(np.isnan(arr)) else "inf"
        raise NumericError(f"non-finite value ({bad}) in {name}")
