"""Minimal dense tensors with taped reverse-mode differentiation.

Only the operations the two networks need are provided.  Broadcasting in ``add``/``mul``
follows numpy rules; the backward pass sums gradients back onto the operand's shape.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

# per thread, so worker threads scanning sections cannot leave taping switched off
_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (p.requires_grad or p._backward is not None):
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def __getitem__(self, key):
        return getitem(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _needs_grad(*ts: Tensor) -> bool:
    return grad_enabled() and any(_tracked(t) for t in ts)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _needs_grad(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def scalar_gate(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply ``x`` by a learned scalar (shape () or (1,))."""
    if gate.data.size != 1:
        raise ShapeError("scalar_gate", x.shape, gate.shape)
    s = gate.data.reshape(())
    return _make(x.data * s, (x, gate),
                 lambda g: (g * s, np.asarray(np.sum(g * x.data)).reshape(gate.shape)))


# -- shape ops ----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(data, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    return _make(np.ascontiguousarray(data), (a,), lambda g: (_unbroadcast(g, a.shape),))


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``a[idx]`` along the first axis."""
    idx = np.asarray(idx)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


embedding_lookup = take_rows


def getitem(a: Tensor, key) -> Tensor:
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in parts)

    def back(g):
        out = np.zeros_like(a.data)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(np.array(a.data[key]), (a,), back)


# -- reductions ---------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def max_pool(a: Tensor, axis: int = -2, mask: np.ndarray | None = None) -> Tensor:
    """Max over ``axis`` keeping the axis; rows with ``mask`` False are excluded.

    ``mask`` has ``a``'s shape without the last axis (one flag per row).  A slice whose
    rows are all masked yields 0 with zero gradient.
    """
    x = a.data
    if mask is not None:
        m = np.broadcast_to(mask[..., None], x.shape)
        x = np.where(m, x, -np.inf)
    arg = np.argmax(x, axis=axis)
    arg_e = np.expand_dims(arg, axis)
    out = np.take_along_axis(x, arg_e, axis=axis)
    empty = ~np.isfinite(out)
    out = np.where(empty, 0.0, out)

    def back(g):
        dx = np.zeros_like(a.data)
        np.put_along_axis(dx, arg_e, np.where(empty, 0.0, g), axis=axis)
        return (dx,)

    return _make(out, (a,), back)


# -- linear algebra -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    flat = b.ndim == 2 and a.ndim > 2  # shared weight: one GEMM over all leading rows
    try:
        if flat:
            data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            data = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        if not _tracked(a):
            ga = None
        elif flat:
            ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
        else:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if not _tracked(b):
            gb = None
        elif b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- probabilistic ------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries with ``mask`` False get probability 0.

    A slice with no unmasked entry is all zeros.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(x - top)
    z = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    top = np.max(x, axis=axis, keepdims=True)
    lse = top + np.log(np.sum(np.exp(x - top), axis=axis, keepdims=True))
    y = x - lse
    p = np.exp(y)
    return _make(y, (a,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode, E[output] = input in train mode."""
    if not train or p <= 0:
        return a
    if rng is None:
        rng = np.random.default_rng()
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def weighted_softmax_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean over rows of ``weight * -log softmax(logits)[label]``.

    ``logits`` is [..., C]; ``labels`` and ``weights`` match its leading shape.
    """
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=logits.data.dtype)
    c = logits.shape[-1]
    if labels.shape != logits.shape[:-1] or weights.shape != labels.shape:
        raise ShapeError("weighted_softmax_cross_entropy", logits.shape, labels.shape, weights.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    x = logits.data
    top = np.max(x, axis=-1, keepdims=True)
    lse = top + np.log(np.sum(np.exp(x - top), axis=-1, keepdims=True))
    logp = x - lse
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    n = max(labels.size, 1)
    loss = -np.sum(weights * picked) / n

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * weights[..., None] / n,)

    return _make(np.asarray(loss), (logits,), back)


# -- convolution --------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x [B, C, H, W] * w [O, C, kh, kw] -> [B, O, Ho, Wo] (cross-correlation)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    kh, kw = w.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.einsum("bchwij,ocij->bohw", win, w.data, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def back(g):
        gw = np.einsum("bohw,bchwij->ocij", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    "bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back)


def max_pool2d(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling over the last two axes; remainders are dropped."""
    kh, kw = kernel
    bsz, c, h, wd = x.shape
    ho, wo = h // kh, wd // kw
    if ho == 0 or wo == 0:
        raise ShapeError("max_pool2d", x.shape, kernel)
    crop = x.data[:, :, :ho * kh, :wo * kw]
    blocks = crop.reshape(bsz, c, ho, kh, wo, kw).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, kh * kw)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gc = gb.reshape(bsz, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho * kh, wo * kw)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * kh, :wo * kw] = gc
        return (gx,)

    return _make(out, (x,), back)


# -- parameters ---------------------------------------------------------------------

def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> Tensor:
    limit = np.sqrt(6.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
