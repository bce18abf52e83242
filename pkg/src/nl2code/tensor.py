"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery for an encoder-decoder transformer: batched matmul,
broadcasting elementwise ops, softmax, RMS normalization, embedding gather,
and masked cross-entropy. Buffers are numpy arrays, float32 by default;
gradient checking builds float64 graphs instead (finite differences in
float32 are too noisy for tight tolerances).

The tape is distributed: each non-leaf tensor records its parents and a
closure that propagates the output gradient. `backward` walks that record
once in reverse topological order and then retires it, so a second call on
the same loss raises.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np

from .rng import SplitMix64

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording, e.g. during decoding and evaluation."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # graph-building operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Iterable[Tensor], bw: Callable[[np.ndarray], None]) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward_ran = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bw
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Run the chain rule from a scalar loss; each recorded node fires once."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_ran:
        raise RuntimeError("backward already ran on this tape; rebuild the graph first")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    loss._backward_ran = True


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, like=a)
    data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, like=a)
    data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires >=2-d operands, got shapes {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        _accum(a, _unbroadcast(np.matmul(g, bt), a.shape))
        _accum(b, _unbroadcast(np.matmul(at, g), b.shape))

    return _result(data, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _result(data, (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _result(data, (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def bw(g):
        _accum(a, np.transpose(g, inverse))

    return _result(data, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _result(np.asarray(data), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stabilized softmax along `axis`; rows sum to one."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - inner))

    return _result(y, (x,), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y = gain * x / sqrt(mean(x^2) + eps), per row of the last axis."""
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ValueError(f"gain shape {gain.shape} does not match last dimension {d}")
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    y = x.data * inv * gain.data

    def bw(g):
        gg = g * gain.data
        inner = np.mean(gg * x.data, axis=-1, keepdims=True)
        _accum(x, inv * gg - (inv**3) * x.data * inner)
        axes = tuple(range(x.ndim - 1))
        _accum(gain, (g * x.data * inv).sum(axis=axes))

    return _result(y, (x, gain), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather; the backward pass scatter-adds into the table gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)].flat[0]
        raise ValueError(f"embedding id {bad} outside table of {v} rows")
    data = table.data[ids]

    def bw(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return _result(data, (table,), bw)


def cross_entropy(logits: Tensor, targets, ignore_id: int, position_weights=None) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_id.

    Ignored positions contribute nothing to the value or the gradient. With
    `position_weights`, kept positions are averaged with those weights
    instead of uniformly.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise ValueError(f"cross_entropy expects [T,V] logits and T targets, got {logits.shape} and {targets.shape}")
    kept = targets != ignore_id
    if position_weights is None:
        w = kept.astype(logits.data.dtype)
    else:
        w = np.where(kept, np.asarray(position_weights, dtype=logits.data.dtype), 0.0)
    w_total = w.sum()
    if not kept.any() or w_total <= 0:
        raise ValueError("cross_entropy: every position is ignored, mean is undefined")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    log_z = np.log(se).squeeze(1) + m.squeeze(1)
    rows = np.arange(z.shape[0])
    safe_targets = np.where(kept, targets, 0)
    nll = log_z - z[rows, safe_targets]
    loss = np.asarray((nll * w).sum() / w_total, dtype=z.dtype)

    def bw(g):
        p = e / se
        p[rows, safe_targets] -= 1.0
        _accum(logits, p * (w * (float(g) / w_total))[:, None])

    return _result(loss, (logits,), bw)


def dropout(x: Tensor, rate: float, seed: int) -> Tensor:
    """Inverted dropout with an explicit seed; rate 0 is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    rng = SplitMix64(seed)
    keep = np.fromiter((rng.next_float() >= rate for _ in range(x.data.size)), dtype=bool, count=x.data.size)
    scale = (keep.reshape(x.shape) / (1.0 - rate)).astype(x.data.dtype)

    def bw(g):
        _accum(x, g * scale)

    return _result(x.data * scale, (x,), bw)


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-numpy log-softmax for decoding paths that never need gradients."""
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def nonfinite_count(t: Tensor) -> int:
    return int((~np.isfinite(t.data)).sum())


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    return math.sqrt(total)
