"""Minimal reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps an ndarray and records the operations that produced
it; ``backward()`` walks the graph in reverse topological order and
accumulates gradients into ``.grad``. Only the operations needed by the
grounding model are implemented, each with a hand-written backward rule that
is verified against central finite differences in the test suite.

Graph recording can be suspended with :func:`no_grad` (used for evaluation).
All computation stays in the dtype of the inputs, so gradient checks can run
in float64 while training runs in float32.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "concat",
    "conv2d",
    "maxpool2x2",
    "embedding",
    "softmax",
    "dropout",
    "make_op",
]

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend graph recording inside the context."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(np.asarray(data), requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing --------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node; defaults to d(self)/d(self) = 1."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] += pg
                else:
                    grads[pid] = pg


def _needs_graph(*tensors: Tensor) -> bool:
    if not _grad_enabled:
        return False
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _needs_graph(*parents):
        out._parents = parents
        out._backward = backward
    return out


def make_op(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Build a graph node with a custom backward rule.

    ``backward(upstream_grad)`` must return an iterable of (parent, grad)
    pairs matching ``parents``.
    """
    return _make(np.asarray(data), parents, backward)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))
    return _make(a.data + b.data, (a, b), backward)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))
    return _make(a.data * b.data, (a, b), backward)


def _pow(a: Tensor, e: float) -> Tensor:
    def backward(g):
        return ((a, g * e * a.data ** (e - 1.0)),)
    return _make(a.data ** e, (a,), backward)


def _neg(a: Tensor) -> Tensor:
    def backward(g):
        return ((a, -g),)
    return _make(-a.data, (a,), backward)


Tensor.__add__ = lambda self, other: _add(self, _as_tensor(other, self))
Tensor.__radd__ = lambda self, other: _add(_as_tensor(other, self), self)
Tensor.__mul__ = lambda self, other: _mul(self, _as_tensor(other, self))
Tensor.__rmul__ = lambda self, other: _mul(_as_tensor(other, self), self)
Tensor.__neg__ = _neg
Tensor.__sub__ = lambda self, other: _add(self, _neg(_as_tensor(other, self)))
Tensor.__rsub__ = lambda self, other: _add(_as_tensor(other, self), _neg(self))
Tensor.__pow__ = _pow
Tensor.__truediv__ = lambda self, other: _mul(self, _pow(_as_tensor(other, self), -1.0))


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def _reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(g):
        return ((a, g.reshape(old)),)
    return _make(a.data.reshape(shape), (a,), backward)


def _transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        return ((a, g.transpose(inv)),)
    return _make(a.data.transpose(axes), (a,), backward)


def _getitem(a: Tensor, key) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return ((a, full),)
    return _make(a.data[key], (a,), backward)


Tensor.reshape = _reshape
Tensor.transpose = _transpose
Tensor.__getitem__ = _getitem


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple((t, p) for t, p in zip(tensors, parts))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.data.shape).copy()),)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def _mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in axes]))
    return _sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


Tensor.sum = _sum
Tensor.mean = _mean


# ---------------------------------------------------------------------------
# Matrix products
# ---------------------------------------------------------------------------

def _matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D or batched matmul; batched operands must share leading dims."""
    if a.data.ndim != b.data.ndim or a.data.ndim < 2:
        raise ValueError(f"matmul needs equal-rank operands >= 2D, got {a.shape} @ {b.shape}")
    if a.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(f"batched matmul leading dims must match, got {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, ga), (b, gb))
    return _make(a.data @ b.data, (a, b), backward)


Tensor.__matmul__ = _matmul


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def _relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return ((a, g * mask),)
    return _make(a.data * mask, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def _gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU; the backward differentiates this exact form."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        return ((a, g * d),)
    return _make(0.5 * x * (1.0 + t), (a,), backward)


def _sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return ((a, g * y * (1.0 - y)),)
    return _make(y, (a,), backward)


Tensor.relu = _relu
Tensor.gelu = _gelu
Tensor.sigmoid = _sigmoid


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    y = np.exp(x - x.max(axis=axis, keepdims=True))
    y /= y.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((a, (g - dot) * y),)
    return _make(y, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)

    def backward(g):
        return ((a, g * keep),)
    return _make(a.data * keep, (a,), backward)


# ---------------------------------------------------------------------------
# Table lookup
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError(f"token id out of range [0, {table.data.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return ((table, full),)
    return _make(table.data[idx], (table,), backward)


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation: x (N,Cin,H,W) with w (Cout,Cin,kh,kw).

    Implemented as one GEMM per kernel offset on strided views, which keeps
    both the forward and backward passes free of window-matrix copies.
    """
    n, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin} vs kernel {cin_w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # xm[i][j] is the (N, Cin, Ho, Wo) view of input pixels hit by kernel
    # offset (i, j); the conv is sum_ij xm[i][j] . w[:, :, i, j].
    xm = [
        [xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
         for j in range(kw)]
        for i in range(kh)
    ]
    out = np.zeros((n, ho, wo, cout), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(xm[i][j], w.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        need_x = x.requires_grad or x._parents
        need_w = w.requires_grad or w._parents
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (N, Ho, Wo, Cout)
        gw = np.empty_like(w.data) if need_w else None
        gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype) if need_x else None
        for i in range(kh):
            for j in range(kw):
                if need_w:
                    gw[:, :, i, j] = np.tensordot(gt, xm[i][j], axes=([0, 1, 2], [0, 2, 3]))
                if need_x:
                    gxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                        j : j + (wo - 1) * stride + 1 : stride] += np.tensordot(
                        gt, w.data[:, :, i, j], axes=([3], [0])
                    ).transpose(0, 3, 1, 2)
        if need_x:
            gx = gxp[:, :, pad : pad + h, pad : pad + wdt] if pad else gxp
            gx = np.ascontiguousarray(gx)
        else:
            gx = None
        out_pairs = [(x, gx), (w, gw)]
        if b is not None:
            out_pairs.append((b, g.sum(axis=(0, 2, 3))))
        return tuple(out_pairs)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties share the gradient equally."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    xr = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = xr.max(axis=(3, 5))

    def backward(g):
        ex = out[:, :, :, None, :, None]
        mask = (xr == ex).astype(g.dtype)
        counts = mask.sum(axis=(3, 5), keepdims=True)
        gx = mask * (g[:, :, :, None, :, None] / counts)
        return ((x, gx.reshape(n, c, h, w)),)
    return _make(out, (x,), backward)
