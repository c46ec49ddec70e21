"""Minimal reverse-mode autodiff over dense numpy arrays.

Two value kinds flow through the ops below: ``Tensor`` (a plain immutable
array holder) and ``GraphNode`` (a tensor plus the bookkeeping needed to
backpropagate). Every op accepts either kind; a GraphNode comes out only
when gradient tracking is enabled and at least one input is a GraphNode.
Every primitive checks its output for NaN/Inf and fails loudly.
"""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Immutable dense array of 32- or 64-bit floats."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        view = arr.view()
        view.flags.writeable = False
        object.__setattr__(self, "data", view)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class GraphNode:
    """A tensor value plus its place in the backward graph.

    ``parents`` holds the op inputs in positional order; ``rule`` names the
    primitive that produced the value; ``grad`` accumulates d(root)/d(value)
    during backward() and stays None until the node is reached.
    """

    __slots__ = ("value", "parents", "rule", "grad", "_backward")

    def __init__(self, value: Tensor, parents: tuple = (), rule: str = "leaf",
                 backward: Callable | None = None):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        self.value = value
        self.parents = parents
        self.rule = rule
        self.grad = None
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return self.value.item()

    def __repr__(self):
        return f"GraphNode(rule={self.rule!r}, shape={self.shape})"


def parameter(data, dtype=None) -> GraphNode:
    """Wrap an array as a trainable leaf node."""
    t = data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)
    return GraphNode(t)


def _raw(x):
    if isinstance(x, GraphNode):
        return x.value.data
    if isinstance(x, Tensor):
        return x.data
    return x  # python scalars stay weakly typed so float32 survives


def _tracking(*xs) -> bool:
    return _grad_enabled and any(isinstance(x, GraphNode) for x in xs)


def _check_finite(arr: np.ndarray, rule: str):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite value produced by '{rule}'")


def _result(arr, parents, rule, backward):
    _check_finite(arr, rule)
    if _tracking(*parents):
        return GraphNode(Tensor(arr), parents, rule, backward)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    z = np.exp(-np.abs(x))  # always <= 1, no overflow
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    out = _raw(a) + _raw(b)

    def backward(g):
        return (_unbroadcast(g, np.shape(_raw(a))),
                _unbroadcast(g, np.shape(_raw(b))))

    return _result(out, (a, b), "add", backward)


def sub(a, b):
    out = _raw(a) - _raw(b)

    def backward(g):
        return (_unbroadcast(g, np.shape(_raw(a))),
                _unbroadcast(-g, np.shape(_raw(b))))

    return _result(out, (a, b), "sub", backward)


def mul(a, b):
    av, bv = _raw(a), _raw(b)
    out = av * bv

    def backward(g):
        return (_unbroadcast(g * bv, np.shape(av)),
                _unbroadcast(g * av, np.shape(bv)))

    return _result(out, (a, b), "mul", backward)


def scale(a, c: float):
    out = _raw(a) * c

    def backward(g):
        return (g * c,)

    return _result(out, (a,), "scale", backward)


def matmul(a, b):
    av, bv = _raw(a), _raw(b)
    out = np.matmul(av, bv)

    def backward(g):
        if bv.ndim == 1:
            da = g[..., None] * bv
            db = (g[..., None] * av).reshape(-1, bv.shape[0]).sum(axis=0)
        elif av.ndim == 1:
            da = (bv * g[..., None, :]).sum(axis=-1).reshape(-1, av.shape[0]).sum(axis=0)
            db = _unbroadcast(av[:, None] * g[..., None, :], bv.shape)
        else:
            da = _unbroadcast(np.matmul(g, bv.swapaxes(-1, -2)), av.shape)
            db = _unbroadcast(np.matmul(av.swapaxes(-1, -2), g), bv.shape)
        return da, db

    return _result(out, (a, b), "matmul", backward)


def embedding(table, ids) -> "Tensor | GraphNode":
    """Row lookup: table [V,H] indexed by an integer array of any shape."""
    tv = _raw(table)
    idx = np.asarray(ids)
    out = tv[idx]

    def backward(g):
        dt = np.zeros_like(tv)
        np.add.at(dt, idx.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (dt,)

    return _result(out, (table,), "embedding", backward)


def rms_norm(x, gain, eps: float = 1e-6):
    """Root-mean-square normalization over the last axis, then a learned gain."""
    xv, gv = _raw(x), _raw(gain)
    ms = np.mean(xv * xv, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xn = xv * inv
    out = xn * gv

    def backward(g):
        gh = g * gv
        s = np.sum(gh * xv, axis=-1, keepdims=True)
        dx = inv * gh - xv * (inv ** 3) * s / xv.shape[-1]
        dgain = (g * xn).reshape(-1, gv.shape[-1]).sum(axis=0)
        return dx, dgain

    return _result(out, (x, gain), "rms_norm", backward)


def silu(x):
    xv = _raw(x)
    s = _sigmoid(xv)
    out = xv * s

    def backward(g):
        return (g * (s * (1.0 + xv * (1.0 - s))),)

    return _result(out, (x,), "silu", backward)


def transpose(x):
    """Swap the last two axes."""
    out = _raw(x).swapaxes(-1, -2)

    def backward(g):
        return (g.swapaxes(-1, -2),)

    return _result(out, (x,), "transpose", backward)


def reshape(x, shape):
    xv = _raw(x)
    out = xv.reshape(shape)

    def backward(g):
        return (g.reshape(xv.shape),)

    return _result(out, (x,), "reshape", backward)


def select_position(x, pos: int):
    """Pick one entry of the second-to-last axis: x[..., pos, :]."""
    xv = _raw(x)
    out = xv[..., pos, :]

    def backward(g):
        dx = np.zeros_like(xv)
        dx[..., pos, :] = g
        return (dx,)

    return _result(out, (x,), "select_position", backward)


def concat_last(a, b):
    av, bv = _raw(a), _raw(b)
    out = np.concatenate([av, bv], axis=-1)
    na = av.shape[-1]

    def backward(g):
        return g[..., :na], g[..., na:]

    return _result(out, (a, b), "concat_last", backward)


def reduce_sum(x, axis=None, keepdims: bool = False):
    xv = _raw(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _result(out, (x,), "reduce_sum", backward)


def reduce_mean(x, axis=None, keepdims: bool = False):
    xv = _raw(x)
    out = xv.mean(axis=axis, keepdims=keepdims)
    count = xv.size if axis is None else xv.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape) / count,)

    return _result(out, (x,), "reduce_mean", backward)


def softmax(x):
    """Softmax over the last axis."""
    xv = _raw(x)
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), "softmax", backward)


def detach(x) -> Tensor:
    """Cut the value out of the graph."""
    if isinstance(x, GraphNode):
        return x.value
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def softmax_cross_entropy(logits, target_ids, pad_id=None):
    """Mean token-level cross entropy over non-pad positions.

    logits [..., L, V], target_ids [..., L] -> per-sample loss of shape
    logits.shape[:-2]. A sample whose positions are all pad contributes 0.
    """
    lv = _raw(logits)
    ids = np.asarray(target_ids)
    idx = ids[..., None]
    m = lv.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(lv - m).sum(axis=-1))
    picked = np.take_along_axis(lv, idx, axis=-1)[..., 0]
    ce = lse - picked
    if pad_id is None:
        mask = np.ones_like(ce, dtype=lv.dtype)
    else:
        mask = (ids != pad_id).astype(lv.dtype)
    count = np.maximum(mask.sum(axis=-1), 1.0)
    out = (ce * mask).sum(axis=-1) / count

    def backward(g):
        sm = np.exp(lv - m)
        sm /= sm.sum(axis=-1, keepdims=True)
        np.put_along_axis(sm, idx, np.take_along_axis(sm, idx, axis=-1) - 1.0, axis=-1)
        w = (mask / count[..., None])[..., None]
        return (sm * w * np.asarray(g)[..., None, None],)

    return _result(out, (logits,), "softmax_cross_entropy", backward)


def bce_with_logits(logits, targets):
    """Elementwise binary cross entropy on raw logits, numerically stable."""
    lv = np.asarray(_raw(logits))
    tv = np.asarray(_raw(targets), dtype=lv.dtype)
    out = np.maximum(lv, 0.0) - lv * tv + np.log1p(np.exp(-np.abs(lv)))

    def backward(g):
        return (g * (_sigmoid(lv) - tv), None)

    return _result(out, (logits, targets), "bce_with_logits", backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: GraphNode):
    """Backpropagate from a scalar root, accumulating into node.grad.

    Propagation itself runs over a per-call gradient map, so whatever is
    already sitting in node.grad (from earlier calls) never feeds back into
    the computation; stored grads just accumulate call over call.
    """
    if not isinstance(root, GraphNode):
        raise TypeError("backward() needs a GraphNode root")
    if root.value.size != 1:
        raise ValueError("backward() root must be a scalar")

    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, GraphNode) and id(p) not in seen:
                stack.append((p, False))

    local = {id(root): np.ones_like(root.value.data)}
    for node in reversed(order):
        g = local.get(id(node))
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node.parents, node._backward(g)):
            if not isinstance(p, GraphNode) or pg is None:
                continue
            key = id(p)
            local[key] = pg if key not in local else local[key] + pg


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_gradient(f, params: dict, step: float = 1e-6) -> dict:
    """Central-difference gradients of a scalar function of named tensors.

    ``f`` maps {name: Tensor} -> float. Returns {name: ndarray}. Quadratic
    in nothing but linear in parameter count, so keep the inputs small.
    """
    grads = {}
    base = {k: np.array(v.data, dtype=np.float64) for k, v in params.items()}
    for name in params:
        arr = base[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = f({k: Tensor(v, dtype=np.float64) for k, v in base.items()})
            flat[i] = keep - step
            lo = f({k: Tensor(v, dtype=np.float64) for k, v in base.items()})
            flat[i] = keep
            gf[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads
