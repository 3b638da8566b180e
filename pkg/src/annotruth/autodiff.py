"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic tape in the micrograd style: each operation returns a new
:class:`Tensor` that remembers its parents and a closure mapping the output
adjoint to per-parent adjoint contributions.  :func:`backward` replays the
closures in reverse topological order and accumulates gradients into leaf
tensors (tensors created with ``requires_grad=True``).

Everything is float64 and single-threaded per graph.  Broadcasting is
deliberately restricted to scalar*tensor, bias-add, and the explicit
:func:`broadcast_to` op so every gradient rule stays auditable.
"""

from __future__ import annotations

import numbers
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are treated as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b) -> Tensor:
    """a + b where b is same-shape, a python scalar, or a 1-D bias.

    Bias rules: for 2-D a, b of length a.shape[1] is added per row; for 4-D a
    (NCHW), b of length a.shape[1] is added per channel.
    """
    a = _as_tensor(a)
    if isinstance(b, numbers.Number):
        return _result(a.data + float(b), (a,), lambda g: (g,))
    b = _as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim == 2 and b.size == a.shape[1]:
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    if b.ndim == 1 and a.ndim == 4 and b.size == a.shape[1]:
        return _result(
            a.data + b.data.reshape(1, -1, 1, 1),
            (a, b),
            lambda g: (g, g.sum(axis=(0, 2, 3))),
        )
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a python scalar (treated as a constant)."""
    a = _as_tensor(a)
    if isinstance(b, numbers.Number):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0) or not np.all(np.isfinite(a.data)):
        raise NumericError("log requires strictly positive finite input")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0  # subgradient at 0 is 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, or batched 3-D x 3-D with equal batch size."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: inner extents {a.shape} x {b.shape}")
        return _result(
            a.data @ b.data,
            (a, b),
            lambda g: (g @ b.data.T, a.data.T @ g),
        )
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise DimensionError(f"matmul: batched extents {a.shape} x {b.shape}")
        return _result(
            np.matmul(a.data, b.data),
            (a, b),
            lambda g: (
                np.matmul(g, b.data.transpose(0, 2, 1)),
                np.matmul(a.data.transpose(0, 2, 1), g),
            ),
        )
    raise DimensionError(f"matmul: unsupported ranks {a.ndim} and {b.ndim}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Exponentials normalized along ``axis``, computed with max-subtraction."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax: non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _result(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the gradient sums over the broadcast axes."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if len(shape) < a.ndim:
        raise DimensionError(f"broadcast_to: target {shape} shorter than {a.shape}")
    pad = len(shape) - a.ndim
    src = (1,) * pad + a.shape
    summed = []
    for i, (s, t) in enumerate(zip(src, shape)):
        if s == t:
            continue
        if s == 1:
            summed.append(i)
        else:
            raise DimensionError(f"broadcast_to: cannot expand {a.shape} to {shape}")

    def bwd(g):
        if summed:
            g = g.sum(axis=tuple(summed), keepdims=True)
        return (g.reshape(a.shape),)

    return _result(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), bwd)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _result(out, (a,), bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def gather(a: Tensor, index, axis: int = 1) -> Tensor:
    """Pick one entry along ``axis`` per position; gradient scatters back.

    ``index`` has a.shape with ``axis`` removed (integer array).
    """
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    expected = a.shape[:axis] + a.shape[axis + 1 :]
    if idx.shape != expected:
        raise DimensionError(f"gather: index shape {idx.shape}, expected {expected}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ValueError(f"gather: index out of range for axis extent {a.shape[axis]}")
    exp = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, exp, axis=axis).squeeze(axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, exp, np.expand_dims(g, axis), axis)
        return (ga,)

    return _result(out, (a,), bwd)


# ---------------------------------------------------------------------------
# spatial ops (NCHW, stride 1 convolutions)


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation of x (B,Cin,H,W) with w (Cout,Cin,KH,KW), stride 1."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: need 4-D operands, got {x.shape}, {w.shape}")
    B, cin, H, W = x.shape
    cout, cin2, KH, KW = w.shape
    if cin != cin2:
        raise DimensionError(f"conv2d: channel mismatch {cin} vs {cin2}")
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    OH, OW = xp.shape[2] - KH + 1, xp.shape[3] - KW + 1
    if OH <= 0 or OW <= 0:
        raise DimensionError(f"conv2d: kernel {KH}x{KW} too large for input {H}x{W}")
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))  # B,Cin,OH,OW,KH,KW
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B, OH * OW, cin * KH * KW
    )
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(B, cout, OH, OW)

    def bwd(g):
        gmat = g.reshape(B, cout, OH * OW).transpose(0, 2, 1)  # B,OHOW,Cout
        gw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(B, OH, OW, cin, KH, KW).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for kh in range(KH):
            for kw in range(KW):
                gxp[:, :, kh : kh + OH, kw : kw + OW] += gcols[:, :, :, :, kh, kw]
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return (gx, gw)

    return _result(out, (x, w), bwd)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling with window = stride = k."""
    x = _as_tensor(x)
    B, C, H, W = x.shape
    if H % k or W % k:
        raise DimensionError(f"maxpool2d: {H}x{W} not divisible by {k}")
    OH, OW = H // k, W // k
    xr = x.data.reshape(B, C, OH, k, OW, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        B, C, OH, OW, k * k
    )
    idx = xr.argmax(axis=-1)  # ties go to the first cell, deterministically
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gr = np.zeros((B, C, OH, OW, k * k))
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        return (
            gr.reshape(B, C, OH, OW, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),
        )

    return _result(out, (x,), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling along H and W."""
    x = _as_tensor(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor):
    order, visited = [], set()
    stack = [(root, iter(root._prev))]
    visited.add(id(root))
    while stack:
        node, children = stack[-1]
        advanced = False
        for child in children:
            if id(child) not in visited and child.requires_grad:
                visited.add(id(child))
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order  # children before parents; reverse gives root-first


def backward(loss: Tensor):
    """Populate .grad on every requires_grad leaf reachable from ``loss``.

    Repeated calls without zero_grad accumulate into the leaves.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accum_grad(g)
            continue
        contribs = node._backward(g)
        for parent, contrib in zip(node._prev, contribs):
            if contrib is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + contrib
            else:
                adjoint[key] = contrib


# ---------------------------------------------------------------------------
# finite-difference certification


@dataclass
class FdResult:
    passed: bool
    max_rel_err: float
    worst_index: tuple

    def __bool__(self):
        return self.passed


def fd_check(f, at, step: float = 1e-5, tol: float = 1e-4) -> FdResult:
    """Compare the analytic gradient of scalar-valued ``f`` against central
    finite differences, coordinate by coordinate."""
    base = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise ValueError("fd_check: f must return a scalar")
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        fp = f(Tensor(base)).item()
        flat[i] = saved - step
        fm = f(Tensor(base)).item()
        flat[i] = saved
        nflat[i] = (fp - fm) / (2.0 * step)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / scale
    worst = np.unravel_index(int(rel.argmax()), rel.shape) if rel.size else ()
    max_err = float(rel.max()) if rel.size else 0.0
    return FdResult(passed=max_err < tol, max_rel_err=max_err, worst_index=worst)
