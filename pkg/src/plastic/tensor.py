"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive defines its backward rule in terms of other primitives, so a
backward pass run with ``create_graph=True`` is itself recorded and can be
differentiated again. That is what :func:`hessian_vector_product` relies on.

Gradients flow through a dynamic graph: each non-leaf tensor keeps a
:class:`Node` naming the primitive that produced it, its parent tensors and the
closure computing parent gradients. A backward pass topologically sorts the
nodes reachable from the loss (the "tape") and replays them in reverse.
"""
from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "ContractError",
    "CapabilityError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "grad",
    "hessian_vector_product",
    "hvp",
    "tape_order",
]


class DimensionError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NumericError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class ContractError(ValueError):
    """A caller violated an API precondition."""


class CapabilityError(RuntimeError):
    """A primitive cannot take part in a second-order pass."""


_GRAD_ENABLED = True
# First-order backward passes skip the per-op finiteness check; optimizers
# validate the resulting gradients instead.
_CHECK_FINITE = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("op", "parents", "backward", "first_order_only")

    def __init__(self, op: str, parents: tuple, backward: Callable, first_order_only: bool = False):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.first_order_only = first_order_only


class Tensor:
    """Dense float64 array that may take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def op(self) -> str | None:
        return None if self._node is None else self._node.op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False) -> Tensor:
        return max_(self, axis, keepdims)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def relu(self) -> Tensor:
        return relu(self)

    def backward(self, grad_output: Any = None) -> None:
        backward(self, grad_output)


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _lift(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _finite(data: np.ndarray, op: str) -> np.ndarray:
    # sum() propagates any NaN/Inf and is cheaper than isfinite().all()
    if _CHECK_FINITE and not math.isfinite(float(data.sum())) and not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite value in output")
    return data


def _make(data: np.ndarray, op: str, parents: tuple, backward: Callable,
          first_order_only: bool = False) -> Tensor:
    out = Tensor(_finite(data, op))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, parents, backward, first_order_only)
    return out


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------

def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a} and {b}") from None


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of broadcasting)."""
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = sum_(x, axes, keepdims=True) if axes else x
    return reshape(out, shape)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape

    def bw(g):
        return (sum_to(g, src),)

    return _make(data, "broadcast_to", (x,), bw)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return sum_to(g, sa), sum_to(g, sb)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return sum_to(g, sa), sum_to(neg(g), sb)

    return _make(a.data - b.data, "sub", (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        _broadcast_shape("mul", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = sum_to(mul(g, b), sa) if a.requires_grad else None
        gb = sum_to(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        _broadcast_shape("div", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def bw(g):
        ga = sum_to(div(g, b), sa) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if b.requires_grad else None
        return ga, gb

    return _make(data, "div", (a, b), bw)


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    a = _lift(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data ** p

    def bw(g):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _make(data, "pow", (a,), bw)


def square(a) -> Tensor:
    a = _lift(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (mul(g, mul(2.0, a)),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    holder: list[Tensor] = []

    def bw(g):
        return (mul(g, holder[0]),)

    out = _make(data, "exp", (a,), bw)
    holder.append(out)
    return out


def log(a) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, "log", (a,), lambda g: (div(g, a),))


def tanh(a) -> Tensor:
    a = _lift(a)
    holder: list[Tensor] = []

    def bw(g):
        t = holder[0]
        return (mul(g, sub(1.0, mul(t, t))),)

    out = _make(np.tanh(a.data), "tanh", (a,), bw)
    holder.append(out)
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    holder: list[Tensor] = []

    def bw(g):
        s = holder[0]
        return (mul(g, mul(s, sub(1.0, s))),)

    out = _make(data, "sigmoid", (a,), bw)
    holder.append(out)
    return out


def softplus(a) -> Tensor:
    """Numerically stable ``log(1 + exp(a))``."""
    a = _lift(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(data, "softplus", (a,), lambda g: (mul(g, sigmoid(a)),))


def relu(a) -> Tensor:
    # subgradient at exactly 0 is 0
    a = _lift(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(np.where(a.data > 0, a.data, 0.0), "relu", (a,), lambda g: (mul(g, mask),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _lift(a)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _make(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (mul(g, mask),))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = (a.data <= b.data).astype(np.float64)
    pick_b = 1.0 - pick_a

    def bw(g):
        return mul(g, pick_a), mul(g, pick_b)

    return _make(np.minimum(a.data, b.data), "minimum", (a, b), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _make(data, "reshape", (a,), lambda g: (reshape(g, src),))


def flatten(a, start: int = 1) -> Tensor:
    a = _lift(a)
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (transpose(g, inv),))


def index(a, key) -> Tensor:
    """``a[key]`` for basic or integer-array keys."""
    a = _lift(a)
    try:
        data = a.data[key]
    except IndexError as exc:
        raise DimensionError(f"index: {exc}") from None
    src = a.shape
    return _make(np.array(data, dtype=np.float64), "index", (a,), lambda g: (index_put(g, key, src),))


def index_put(g, key, shape) -> Tensor:
    """Scatter-add ``g`` into zeros of ``shape`` at ``key``; adjoint of :func:`index`."""
    g = _lift(g)
    out = np.zeros(shape)
    np.add.at(out, key, g.data)
    return _make(out, "index_put", (g,), lambda gg: (index(gg, key),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        out = []
        for i in range(len(ts)):
            key = (slice(None),) * ax + (slice(int(bounds[i]), int(bounds[i + 1])),)
            out.append(index(g, key))
        return tuple(out)

    return _make(data, "concat", tuple(ts), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _keep_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kshape = _keep_shape(src, axes)

    def bw(g):
        return (broadcast_to(reshape(g, kshape), src),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return mul(sum_(a, axes, keepdims), 1.0 / n)


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry."""
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kshape = _keep_shape(src, axes)
    # move reduced axes to the back so a single argmax picks the first max
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = a.data.transpose(keep + list(axes)).reshape([src[i] for i in keep] + [-1])
    arg = moved.argmax(axis=-1)
    mask_moved = np.zeros_like(moved)
    np.put_along_axis(mask_moved, arg[..., None], 1.0, axis=-1)
    mask = mask_moved.reshape([src[i] for i in keep] + [src[i] for i in axes])
    mask = mask.transpose(np.argsort(keep + list(axes)))
    data = np.max(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        return (mul(broadcast_to(reshape(g, kshape), src), mask),)

    return _make(data, "max", (a,), bw)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kshape = _keep_shape(src, axes)
    m = np.max(a.data, axis=axes, keepdims=True)
    lse = m + np.log(np.sum(np.exp(a.data - m), axis=axes, keepdims=True))
    data = lse if keepdims else lse.reshape([s for i, s in enumerate(src) if i not in axes])
    holder: list[Tensor] = []

    def bw(g):
        out = reshape(holder[0], kshape)
        soft = exp(sub(a, broadcast_to(out, src)))
        return (mul(broadcast_to(reshape(g, kshape), src), soft),)

    out = _make(data, "logsumexp", (a,), bw)
    holder.append(out)
    return out


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Unfold (N, C, H, W) patches into rows of shape (N*OH*OW, C*kh*kw)."""
    x = _lift(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col: expected 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(f"im2col: kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")
    cols = _im2col_np(x.data, kh, kw, stride, pad)
    shape = x.shape
    return _make(np.ascontiguousarray(cols), "im2col", (x,),
                 lambda g: (col2im(g, shape, kh, kw, stride, pad),))


def col2im(cols, shape: tuple, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    cols = _lift(cols)
    n, c, h, w = shape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if cols.shape != (n * oh * ow, c * kh * kw):
        raise DimensionError(f"col2im: columns {cols.shape} do not match image shape {tuple(shape)}")
    patches = np.ascontiguousarray(cols.data.reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += patches[i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return _make(np.ascontiguousarray(out), "col2im", (cols,),
                 lambda g: (im2col(g, kh, kw, stride, pad),))


def _im2col_np(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: x (N, C, H, W), weight (O, C, kh, kw) -> (N, O, OH, OW).

    One graph node; the backward pass is expressed with im2col/col2im so it
    stays differentiable.
    """
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    n, _, h, w = x.shape
    o, c, kh, kw = weight.shape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")
    bias = None if bias is None else _lift(bias)
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({o},)")
    cols = _im2col_np(x.data, kh, kw, stride, pad)
    flat = cols @ weight.data.reshape(o, -1).T
    if bias is not None:
        flat = flat + bias.data
    data = flat.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    xshape = x.shape

    def bw(g):
        g2 = reshape(transpose(g, (0, 2, 3, 1)), (n * oh * ow, o))
        gx = gw = gb = None
        if x.requires_grad:
            gx = col2im(matmul(g2, reshape(weight, (o, c * kh * kw))), xshape, kh, kw, stride, pad)
        if weight.requires_grad:
            gw = reshape(matmul(transpose(g2), im2col(x, kh, kw, stride, pad)), (o, c, kh, kw))
        if bias is not None and bias.requires_grad:
            gb = sum_(g2, 0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(data), "conv2d", parents, bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` as a single node; x (N, in), weight (in, out), bias (out,)."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: shapes {x.shape} and {weight.shape} do not conform")
    bias = None if bias is None else _lift(bias)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape}, expected ({weight.shape[1]},)")
    data = x.data @ weight.data
    if bias is not None:
        data = data + bias.data

    def bw(g):
        gx = matmul(g, transpose(weight)) if x.requires_grad else None
        gw = matmul(transpose(x), g) if weight.requires_grad else None
        gb = sum_(g, 0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, "linear", parents, bw)


def crelu(x, axis: int = 1) -> Tensor:
    """``concat([relu(x), relu(-x)], axis)`` as one node."""
    x = _lift(x)
    ax = axis % x.ndim
    d = x.shape[ax]
    pos = x.data > 0
    neg = x.data < 0
    data = np.concatenate([np.where(pos, x.data, 0.0), np.where(neg, -x.data, 0.0)], axis=ax)
    lo = (slice(None),) * ax + (slice(0, d),)
    hi = (slice(None),) * ax + (slice(d, 2 * d),)
    fpos, fneg = pos.astype(np.float64), neg.astype(np.float64)

    def bw(g):
        if not _GRAD_ENABLED:
            return (Tensor(g.data[lo] * fpos - g.data[hi] * fneg),)
        return (sub(mul(index(g, lo), fpos), mul(index(g, hi), fneg)),)

    return _make(data, "crelu", (x,), bw)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over all non-batch axes, then scale and shift.

    ``gain`` and ``shift`` have shape ``x.shape[1:]``.
    """
    x, gain, shift = _lift(x), _lift(gain), _lift(shift)
    if x.ndim < 2 or gain.shape != x.shape[1:] or shift.shape != x.shape[1:]:
        raise DimensionError(f"layer_norm: input {x.shape}, gain {gain.shape}, shift {shift.shape}")
    axes = tuple(range(1, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    xhat = centered * inv
    data = xhat * gain.data + shift.data

    def bw(g):
        if not _GRAD_ENABLED:
            gd = g.data
            gn = gd * gain.data
            dx = inv * (gn - gn.mean(axis=axes, keepdims=True)
                        - xhat * (gn * xhat).mean(axis=axes, keepdims=True))
            return Tensor(dx), Tensor((gd * xhat).sum(axis=0)), Tensor(gd.sum(axis=0))
        # rebuild the normalization from differentiable pieces so the result can be differentiated again
        c = sub(x, mean(x, axis=axes, keepdims=True))
        inv_t = power(add(mean(square(c), axis=axes, keepdims=True), eps), -0.5)
        xh = mul(c, inv_t)
        gn = mul(g, gain)
        dx = mul(inv_t, sub(sub(gn, mean(gn, axis=axes, keepdims=True)),
                            mul(xh, mean(mul(gn, xh), axis=axes, keepdims=True))))
        return dx, sum_(mul(g, xh), 0), sum_(g, 0)

    return _make(data, "layer_norm", (x, gain, shift), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = _lift(logits)
    return sub(logits, logsumexp(logits, axis=axis, keepdims=True))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer class targets."""
    logits = _lift(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    picked = index(logits, (np.arange(logits.shape[0]), targets))
    return mean(sub(logsumexp(logits, axis=1), picked))


def squared_error(pred, target) -> Tensor:
    """Mean squared error."""
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise DimensionError(f"squared_error: shapes {pred.shape} and {target.shape} differ")
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------------------
# backward passes
# ---------------------------------------------------------------------------

def tape_order(root: Tensor) -> list[Tensor]:
    """Non-leaf tensors reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._node.parents:
            if p._node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(root: Tensor, seed: Tensor, create_graph: bool) -> dict[int, tuple[Tensor, Tensor]]:
    """Propagate ``seed`` from ``root``; returns id -> (tensor, grad) for every visited tensor."""
    global _CHECK_FINITE
    grads: dict[int, tuple[Tensor, Tensor]] = {id(root): (root, seed)}
    prev_check = _CHECK_FINITE
    _CHECK_FINITE = create_graph
    try:
        _backprop_loop(root, grads, create_graph)
    finally:
        _CHECK_FINITE = prev_check
    return grads


def _backprop_loop(root: Tensor, grads: dict, create_graph: bool) -> None:
    with _grad_mode(create_graph):
        for t in reversed(tape_order(root)):
            entry = grads.get(id(t))
            if entry is None:
                continue
            node = t._node
            if create_graph and node.first_order_only:
                raise CapabilityError(f"{node.op}: no second-order support")
            pgrads = node.backward(entry[1])
            for p, g in zip(node.parents, pgrads):
                if g is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = (p, g if prev is None else add(prev[1], g))


def _seed(root: Tensor, grad_output: Any) -> Tensor:
    if grad_output is None:
        if root.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {root.shape}")
        return Tensor(np.ones_like(root.data))
    g = _lift(grad_output)
    if g.shape != root.shape:
        raise DimensionError(f"backward: grad_output shape {g.shape} != output shape {root.shape}")
    return g


def backward(root: Tensor, grad_output: Any = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not root.requires_grad:
        raise ContractError("backward: output does not require grad")
    seed = _seed(root, grad_output)
    for t, g in _backprop(root, seed, create_graph=False).values():
        if t._node is None and t.requires_grad:
            t.grad = g.data.copy() if t.grad is None else t.grad + g.data


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output: Any = None,
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``output`` with respect to ``inputs`` without touching ``.grad``.

    With ``create_graph=True`` the returned tensors are themselves differentiable.
    Inputs the output does not depend on get zero gradients.
    """
    if not output.requires_grad:
        return [Tensor(np.zeros_like(x.data)) for x in inputs]
    seed = _seed(output, grad_output)
    grads = _backprop(output, seed, create_graph)
    out = []
    for x in inputs:
        entry = grads.get(id(x))
        out.append(entry[1] if entry is not None else Tensor(np.zeros_like(x.data)))
    return out


def hvp(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], vecs: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Hessian-vector product for a loss closing over ``params``.

    Computes grad(<grad(L), v>) with a recorded first backward pass.
    """
    with _grad_mode(True):
        loss = loss_fn()
        if loss.size != 1:
            raise ContractError(f"hvp: loss must be scalar, got shape {loss.shape}")
        gs = grad(loss, params, create_graph=True)
        dot = None
        for g, v in zip(gs, vecs):
            term = sum_(mul(g, np.asarray(v, dtype=np.float64).reshape(g.shape)))
            dot = term if dot is None else add(dot, term)
        if dot is None or not dot.requires_grad:
            return [np.zeros_like(p.data) for p in params]
        hv = grad(dot, params)
    return [h.data for h in hv]


def hessian_vector_product(loss_fn: Callable[[Tensor], Tensor], params: np.ndarray, v: np.ndarray) -> np.ndarray:
    """H(params) @ v for a scalar loss of a flat parameter vector."""
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if params.shape != v.shape:
        raise DimensionError(f"hessian_vector_product: params {params.shape} vs v {v.shape}")
    w = Tensor(params.copy(), requires_grad=True)
    return hvp(lambda: loss_fn(w), [w], [v])[0]
