"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule returns one thunk per input, and each thunk is written in
terms of differentiable tensor operations.  A gradient computed with
``create_graph=True`` is therefore itself part of a graph and can be
differentiated again.  That is what the stationarity loss needs:
it contains a parameter gradient and is then differentiated w.r.t. inputs.

Tensors are immutable.  Broadcasting is only performed between a tensor and a
0-d tensor (or Python scalar); every other shape disagreement is an error.
Use :func:`expand` when an explicit broadcast is wanted.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "GradError",
    "as_tensor", "grad", "no_grad", "grad_mode", "is_grad_enabled",
    "add", "sub", "mul", "neg", "matmul", "transpose", "reshape", "expand",
    "sum", "mean", "exp", "relu", "abs", "pow", "clip", "signed_sqrt",
    "log_sum_exp", "softmax", "l1_norm", "l2_norm_sq", "take", "put_add",
    "take_rows", "concat", "flip", "pad2d", "crop2d", "conv2d", "maxpool2x2",
    "bilinear_resize", "resize_matrix",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite value in {op}")
        self.op = op


class GradError(RuntimeError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return grad_mode(False)


class Tensor:
    """Immutable n-d float64 array that may participate in a gradient graph."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor creation")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: pow(self, p)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow(other, -1.0))
        return mul(self, 1.0 / float(other))

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis, keepdims)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _raise_item(t):
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op: str, parents: tuple[Tensor, ...], backward: Callable | None) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    if data.flags.writeable:
        data.flags.writeable = False
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    if backward is not None and is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _attach(out: Tensor, backward: Callable) -> Tensor:
    # for rules that need the output node itself (exp)
    if out.requires_grad:
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise

def _binary_check(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _fit(g: Tensor, like: Tensor) -> Tensor:
    # undo the scalar broadcast
    if like.ndim == 0 and g.ndim != 0:
        return sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (lambda: _fit(g, a), lambda: _fit(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (lambda: _fit(g, a), lambda: _fit(neg(g), b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b),
                   lambda g: (lambda: _fit(mul(g, b), a), lambda: _fit(mul(g, a), b)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (lambda: neg(g),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _result(data, "exp", (a,), lambda g: None)
    return _attach(out, lambda g: (lambda: mul(g, out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor(a.data > 0)
    return _result(a.data * mask.data, "relu", (a,), lambda g: (lambda: mul(g, mask),))


def abs(a) -> Tensor:
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))  # subgradient 0 at 0
    return _result(np.abs(a.data), "abs", (a,), lambda g: (lambda: mul(g, sign),))


def pow(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.power(a.data, p)
    return _result(data, "pow", (a,), lambda g: (lambda: mul(g, mul(p, pow(a, p - 1.0))),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes where the input was inside the box."""
    a = as_tensor(a)
    mask = Tensor((a.data >= lo) & (a.data <= hi))
    return _result(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (lambda: mul(g, mask),))


SQRT_EPS = 1e-12


def signed_sqrt(a) -> Tensor:
    """sign(a)*sqrt(|a|).

    The derivative 1/(2 sqrt|a|) is evaluated as 1/(2 sqrt(|a| + 1e-12)) so
    that it stays finite at zero.
    """
    a = as_tensor(a)
    data = np.sign(a.data) * np.sqrt(np.abs(a.data))
    return _result(data, "signed_sqrt", (a,),
                   lambda g: (lambda: mul(g, mul(0.5, pow(add(abs(a), SQRT_EPS), -0.5))),))


# ---------------------------------------------------------------- structural

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc
    old = a.shape
    return _result(data, "reshape", (a,), lambda g: (lambda: reshape(g, old),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,), lambda g: (lambda: transpose(g, inv),))


def expand(a, shape) -> Tensor:
    """Explicit broadcast of size-1 axes (same rank required)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    return _result(np.broadcast_to(a.data, shape).copy(), "expand", (a,),
                   lambda g: (lambda: sum(g, axes, keepdims=True) if axes else g,))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    shape = a.shape
    return _result(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,),
                   lambda g: (lambda: expand(reshape(g, kept), shape),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean of an empty tensor")
    return mul(sum(a, axis, keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, "matmul", (a, b),
                   lambda g: (lambda: matmul(g, transpose(b)), lambda: matmul(transpose(a), g)))


def take(a, index: np.ndarray, shape=None) -> Tensor:
    """Gather ``a.ravel()[index]``; adjoint of :func:`put_add`."""
    a = as_tensor(a)
    index = np.asarray(index)
    shape = index.shape if shape is None else tuple(shape)
    src = a.shape
    return _result(a.data.reshape(-1)[index].reshape(shape), "take", (a,),
                   lambda g: (lambda: put_add(g, index, src),))


def put_add(g, index: np.ndarray, shape) -> Tensor:
    """Scatter-add ``g`` into a zero tensor of ``shape`` at flat ``index``."""
    g = as_tensor(g)
    shape = tuple(shape)
    size = int(np.prod(shape))
    flat = np.bincount(np.asarray(index).reshape(-1), weights=g.data.reshape(-1), minlength=size)
    return _result(flat.reshape(shape), "put_add", (g,), lambda gg: (lambda: take(gg, index, g.shape),))


def take_rows(a, rows) -> Tensor:
    """Select entries along axis 0."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    inner = int(np.prod(a.shape[1:]))
    index = rows[:, None] * inner + np.arange(inner)[None, :]
    return take(a, index, (len(rows),) + a.shape[1:])


def _slice(a: Tensor, key: tuple) -> Tensor:
    src = a.shape
    return _result(a.data[key].copy(), "slice", (a,), lambda g: (lambda: _unslice(g, key, src),))


def _unslice(g: Tensor, key: tuple, shape: tuple) -> Tensor:
    out = np.zeros(shape)
    out[key] = g.data
    return _result(out, "unslice", (g,), lambda gg: (lambda: _slice(gg, key),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    axis = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])
    keys = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        key = [slice(None)] * ts[0].ndim
        key[axis] = slice(int(lo), int(hi))
        keys.append(tuple(key))
    data = np.concatenate([t.data for t in ts], axis=axis)
    return _result(data, "concat", tuple(ts), lambda g: tuple((lambda k=k: _slice(g, k)) for k in keys))


def flip(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return _result(np.flip(a.data, axis).copy(), "flip", (a,), lambda g: (lambda: flip(g, axis),))


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    a = as_tensor(a)
    if pad == 0:
        return a
    *lead, h, w = a.shape
    key = (Ellipsis, slice(pad, pad + h), slice(pad, pad + w))
    return _unslice(a, key, (*lead, h + 2 * pad, w + 2 * pad))


def crop2d(a, top: int, left: int, height: int, width: int) -> Tensor:
    a = as_tensor(a)
    if top < 0 or left < 0 or top + height > a.shape[-2] or left + width > a.shape[-1]:
        raise ShapeError(f"crop2d: window outside {a.shape}")
    return _slice(a, (Ellipsis, slice(top, top + height), slice(left, left + width)))


# ---------------------------------------------------------------- reductions

def log_sum_exp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    m = a.data.max(axis=axis, keepdims=True)
    data = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    kept = data.shape
    if not keepdims:
        data = data.squeeze(axis)
    shape = a.shape
    return _result(data, "log_sum_exp", (a,),
                   lambda g: (lambda: mul(expand(reshape(g, kept), shape), softmax(a, axis)),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return exp(sub(a, expand(log_sum_exp(a, axis, keepdims=True), a.shape)))


def l1_norm(a) -> Tensor:
    return sum(abs(a))


def l2_norm_sq(a) -> Tensor:
    a = as_tensor(a)
    return sum(mul(a, a))


# ---------------------------------------------------------------- images

@lru_cache(maxsize=64)
def _im2col_index(shape: tuple, k: int) -> np.ndarray:
    b, c, h, w = shape
    ho, wo = h - k + 1, w - k + 1
    base = np.arange(b * c * h * w).reshape(b, c, h, w)
    win = np.lib.stride_tricks.sliding_window_view(base, (k, k), axis=(2, 3))
    # (b, c, ho, wo, k, k) -> (b, ho, wo, c, k, k)
    idx = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)
    idx.flags.writeable = False
    return idx


def conv2d(x, weight, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation. x: (B, Cin, H, W); weight: (Cout, Cin, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] \
            or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} with kernel {weight.shape}")
    b = x.shape[0]
    cout, cin, k, _ = weight.shape
    xp = pad2d(x, padding)
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {xp.shape}")
    cols = take(xp, _im2col_index(xp.shape, k))
    out = matmul(cols, transpose(reshape(weight, (cout, cin * k * k))))
    return transpose(reshape(out, (b, ho, wo, cout)), (0, 3, 1, 2))


def maxpool2x2(x) -> Tensor:
    """2x2/stride-2 max pooling; ties resolve to the first maximal position."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2x2: bad input shape {x.shape}")
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    base = np.arange(x.size).reshape(x.shape)[:, :, :2 * h2, :2 * w2]
    base = base.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    vals = x.data.reshape(-1)[base]
    pick = vals.argmax(axis=-1)
    index = np.take_along_axis(base, pick[..., None], axis=-1)[..., 0]
    return take(x, index)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights (half-pixel centres, edge clamped)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    data = np.einsum("ij,...jk,lk->...il", rows, x.data, cols)
    return _result(data, "bilinear_resize", (x,), lambda g: (lambda: _separable(g, rows.T, cols.T),))


def bilinear_resize(x, height: int, width: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("bilinear_resize needs at least 2 axes")
    return _separable(x, resize_matrix(x.shape[-2], height), resize_matrix(x.shape[-1], width))


# ---------------------------------------------------------------- gradients

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, leaves, create_graph: bool = False):
    """Gradient of a scalar ``output`` with respect to each of ``leaves``.

    Pass a single tensor to get a single tensor back, or a sequence to get a
    list.  With ``create_graph=True`` the returned gradients carry their own
    graph and can be differentiated again.
    """
    single = isinstance(leaves, Tensor)
    leaves = [leaves] if single else list(leaves)
    if output.size != 1:
        raise GradError(f"grad needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise GradError("leaf not in graph: output does not depend on any differentiable input")
    order = _toposort(output)
    present = {id(n) for n in order}
    for leaf in leaves:
        if id(leaf) not in present:
            raise GradError("leaf not in graph")
    wanted = {id(leaf) for leaf in leaves}
    # only propagate into nodes that lead to a requested leaf
    needed: set[int] = set()
    for node in order:
        if id(node) in wanted or any(id(p) in needed for p in node._parents):
            needed.add(id(node))
    found: dict[int, Tensor] = {}
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape))}
    with grad_mode(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                found[id(node)] = g
            if node._backward is None:
                continue
            for parent, thunk in zip(node._parents, node._backward(g)):
                if id(parent) not in needed:
                    continue
                pg = thunk()
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    out = [found.get(id(leaf), Tensor(np.zeros(leaf.shape))) for leaf in leaves]
    return out[0] if single else out
