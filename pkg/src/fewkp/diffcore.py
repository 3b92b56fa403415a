"""Reverse-mode differentiable tensors on top of numpy (float64 throughout).

Every op records a node holding its parents and a closure that maps the
output gradient to parent gradients.  ``backward`` orders the recorded nodes
topologically and visits each one exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.size == 0:
            raise ShapeError(f"empty tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, out: np.ndarray) -> None:
    # one reduction is much cheaper than isfinite().all(); fall back only on failure
    with np.errstate(over="ignore", invalid="ignore"):
        s = np.add.reduce(out, axis=None)
    if not np.isfinite(s) and not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite output")


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, checked: bool = True) -> Tensor:
    # ops that map finite inputs to finite outputs (relu, reshape, ...) pass checked=False
    if checked:
        _check_finite(op, out)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.node = Node(op, tuple(parents), backward_fn)
    else:
        t.requires_grad = False
        t.node = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), bw)


def _unary(op: str, x, fwd: Callable, dfdx: Callable, bounded: bool = False) -> Tensor:
    x = as_tensor(x)
    with np.errstate(all="ignore"):
        out = fwd(x.data)

    def bw(g):
        return (g * dfdx(x.data, out),)

    return _make(op, out, (x,), bw, checked=not bounded)


def relu(x) -> Tensor:
    return _unary("relu", x, lambda a: np.maximum(a, 0.0), lambda a, o: (a > 0).astype(DTYPE), True)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    return _unary("sigmoid", x, _sigmoid, lambda a, o: o * (1.0 - o), True)


def softplus(x) -> Tensor:
    return _unary("softplus", x, lambda a: np.logaddexp(0.0, a), lambda a, o: _sigmoid(a))


def exp(x) -> Tensor:
    return _unary("exp", x, np.exp, lambda a, o: o)


def log(x) -> Tensor:
    return _unary("log", x, np.log, lambda a, o: 1.0 / a)


def sqrt(x) -> Tensor:
    return _unary("sqrt", x, np.sqrt, lambda a, o: 0.5 / o)


def square(x) -> Tensor:
    return _unary("square", x, np.square, lambda a, o: 2.0 * a)


def abs_(x) -> Tensor:
    return _unary("abs", x, np.abs, lambda a, o: np.sign(a), True)


def clamp_min(x, lo: float) -> Tensor:
    return _unary("clamp_min", x, lambda a: np.maximum(a, lo), lambda a, o: (a > lo).astype(DTYPE), True)


def clamp_max(x, hi: float) -> Tensor:
    return _unary("clamp_max", x, lambda a: np.minimum(a, hi), lambda a, o: (a < hi).astype(DTYPE), True)


def clip(x, lo: float, hi: float) -> Tensor:
    return _unary(
        "clip", x, lambda a: np.clip(a, lo, hi), lambda a, o: ((a > lo) & (a < hi)).astype(DTYPE), True
    )


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", np.asarray(out, dtype=DTYPE), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / n)


def max_reduce(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties route the subgradient to the lowest index."""
    x = as_tensor(x)
    ax = axis % x.ndim
    idx = np.argmax(x.data, axis=ax)
    idx_k = np.expand_dims(idx, ax)
    out = np.take_along_axis(x.data, idx_k, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, idx_k, gk, axis=ax)
        return (gx,)

    t = _make("max_reduce", out, (x,), bw, checked=False)
    return t


def argmax_of(x: Tensor, axis: int = -1) -> np.ndarray:
    return np.argmax(as_tensor(x).data, axis=axis)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), bw, checked=False)


# -------------------------------------------------------------- shape & index


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), bw, checked=False)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make("transpose", out, (x,), bw, checked=False)


def slice_(x, idx) -> Tensor:
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        raise TypeError("slice: index must be an int/slice/array, not a Tensor")
    out = np.array(x.data[idx], dtype=DTYPE, copy=True)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        if basic:  # basic indexing never repeats an element
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make("slice", out, (x,), bw, checked=False)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    ax = axis % out.ndim
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", out, xs, bw, checked=False)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % (xs[0].ndim + 1)
    return concat([reshape(x, x.shape[:ax] + (1,) + x.shape[ax:]) for x in xs], axis=ax)


# --------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        g = np.ascontiguousarray(g)
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d(x, w, stride: int = 1, bias=None) -> Tensor:
    """NHWC convolution with kernel (kh, kw, cin, cout) and 'same'-style zero padding.

    With stride s the output is ceil(H/s) x ceil(W/s).  An optional (cout,)
    bias is fused into the op.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw, c, co = w.shape
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {co} output channels")
    if kh == 1 and kw == 1 and stride == 1:
        out, bw = _conv1x1(x, w)
    elif stride == 1 and co < c:
        out, bw = _conv_shift(x, w)
    else:
        out, bw = _conv_im2col(x, w, stride)
    if bias is None:
        return _make("conv2d", out, (x, w), bw)
    out += bias.data

    def bw_bias(g):
        g = np.ascontiguousarray(g)
        gx, gw = bw(g)
        gb = None
        if bias.requires_grad:
            g2 = g.reshape(-1, co)
            gb = np.ones(len(g2)) @ g2
        return gx, gw, gb

    return _make("conv2d", out, (x, w, bias), bw_bias)


def _conv1x1(x: Tensor, w: Tensor) -> Tensor:
    c, co = w.shape[2:]
    wm = w.data.reshape(c, co)
    xm = x.data.reshape(-1, c)
    out = (xm @ wm).reshape(x.shape[:3] + (co,))

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(-1, co)
        gx = (g2 @ wm.T).reshape(x.shape) if x.requires_grad else None
        gw = (xm.T @ g2).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return out, bw


def _conv_shift(x: Tensor, w: Tensor) -> Tensor:
    # one (pixels x cin) @ (cin x k*k*cout) product, then k*k shifted adds;
    # cheaper than im2col whenever cout < cin
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    hp, wp = h + kh - 1, wd + kw - 1
    xp = np.pad(x.data, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    xm = xp.reshape(-1, c)
    wm = w.data.transpose(2, 0, 1, 3).reshape(c, kh * kw * co)
    y = (xm @ wm).reshape(n, hp, wp, kh, kw, co)
    out = y[:, :h, :wd, 0, 0, :].copy()
    for i in range(kh):
        for j in range(kw):
            if i or j:
                out += y[:, i : i + h, j : j + wd, i, j, :]
    del y

    def bw(g):
        dy = np.zeros((n, hp, wp, kh, kw, co), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dy[:, i : i + h, j : j + wd, i, j, :] = g
        dy = dy.reshape(-1, kh * kw * co)
        gw = (xm.T @ dy).reshape(c, kh, kw, co).transpose(1, 2, 0, 3) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = (dy @ wm.T).reshape(n, hp, wp, c)[:, ph : ph + h, pw : pw + wd, :]
        return gx, gw

    return out, bw


def _conv_im2col(x: Tensor, w: Tensor, stride: int) -> Tensor:
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    pad_b = max((ho - 1) * stride + kh - h - ph, 0)
    pad_r = max((wo - 1) * stride + kw - wd - pw, 0)
    xp = np.pad(x.data, ((0, 0), (ph, pad_b), (pw, pad_r), (0, 0)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(kh * kw * c, co)
    out = (cols @ wm).reshape(n, ho, wo, co)

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(-1, co)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wm.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, ph : ph + h, pw : pw + wd, :]
        return gx, gw

    return out, bw


def upsample(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of an NHWC tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample: expected NHWC, got {x.shape}")
    n, h, w, c = x.shape
    out = np.empty((n, h, factor, w, factor, c), dtype=DTYPE)
    out[...] = x.data[:, :, None, :, None, :]
    out = out.reshape(n, h * factor, w * factor, c)

    def bw(g):
        # strided adds beat a reduction over the two small axes
        gx = g[:, ::factor, ::factor].copy()
        for i in range(factor):
            for j in range(factor):
                if i or j:
                    gx += g[:, i::factor, j::factor]
        return (gx,)

    return _make("upsample", out, (x,), bw, checked=False)


def avg_pool(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool: {x.shape} not divisible by {factor}")
    r = reshape(x, (n, h // factor, factor, w // factor, factor, c))
    return mean(r, axis=(2, 4))


# ------------------------------------------------------------------- generic

OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "upsample": upsample,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "sum": sum_,
    "mean": mean,
    "max_reduce": max_reduce,
    "softmax": softmax,
    "abs": abs_,
    "concat": lambda *xs, axis=0: concat(xs, axis),
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "clamp_min": clamp_min,
    "clamp_max": clamp_max,
    "clip": clip,
}


def forward(op: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Apply a named op.  ``attrs`` are passed as keyword arguments."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(*inputs, **(attrs or {}))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = np.array(g, dtype=DTYPE) if t.grad is None else t.grad + g
            continue
        pgrads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


def grad_check(f: Callable, x, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is a Tensor or a sequence of Tensors and ``f(x)`` must return a
    scalar Tensor.  Error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)

    def call():
        return f(x)

    for t in xs:
        t.requires_grad = True
        t.grad = None
    y = call()
    if not np.isfinite(y.data).all():
        raise NonFiniteError("grad_check: f non-finite at x")
    backward(y)
    worst = 0.0
    with no_grad():
        for t in xs:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = call().data.item()
                flat[i] = orig - h
                fm = call().data.item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"grad_check: f non-finite near coordinate {i}")
                num = (fp - fm) / (2.0 * h)
                a = analytic.reshape(-1)[i]
                err = abs(a - num) / max(1.0, abs(a), abs(num))
                worst = max(worst, err)
    return worst


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------------------ archive
#
# Checkpoint layout (all integers little-endian):
#
#   magic     8 bytes  b"FEWKPAR1"
#   count     uint32   number of arrays
#   per array:
#     name_len  uint16, name  utf-8 bytes
#     ndim      uint8,  dims  ndim x uint32
#     payload   prod(dims) x float64 little-endian, row-major
#   meta_len  uint32, meta  utf-8 JSON object (may be "{}")

ARCHIVE_MAGIC = b"FEWKPAR1"


class ArchiveError(ValueError):
    pass


def save_archive(path, arrays: dict, meta: dict | None = None) -> None:
    import json
    import struct

    chunks = [ARCHIVE_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    mb = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(mb)) + mb)
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_archive(path) -> tuple[dict, dict]:
    """Read an archive; returns ({name: float64 array}, meta)."""
    import json
    import struct

    buf = open(path, "rb").read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ArchiveError(f"{path}: truncated archive")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(8) != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: not a checkpoint archive (bad magic)")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (nd,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{nd}I", take(4 * nd))
        size = int(np.prod(dims)) if nd else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    (ml,) = struct.unpack("<I", take(4))
    meta = json.loads(take(ml).decode("utf-8"))
    if pos != len(buf):
        raise ArchiveError(f"{path}: {len(buf) - pos} trailing bytes")
    return arrays, meta
