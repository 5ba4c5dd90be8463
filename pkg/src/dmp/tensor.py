"""Minimal reverse-mode automatic differentiation on top of numpy.

Every differentiable operation produces a new :class:`Tensor` and, when any of
its inputs requires a gradient, records a :class:`Node` carrying the parents
and a backward rule.  Nodes are numbered in creation order; :func:`backward`
replays the nodes reachable from the loss in exactly the reverse of that
order, so gradients are accumulated deterministically.

Only the operators the matcher needs are provided.  Values are kept in the
dtype of the inputs (float32 by default, float64 for gradient checks).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, NonFiniteError, UsageError

_sequence = itertools.count()
_grad_enabled = True

DEFAULT_DTYPE = np.float32


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("seq", "op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node(seq={self.seq}, op={self.op!r})"


class Tensor:
    """An n-dimensional float array that can take part in a recorded graph."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", "initial data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def _not_scalar():
    raise UsageError("item() requires a single-element tensor")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


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


def is_grad_enabled() -> bool:
    return _grad_enabled


def make_op(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as the result of ``op`` and record it if needed.

    ``backward_fn(grad)`` must return one gradient (or ``None``) per parent.
    Raises :class:`NonFiniteError` when ``out`` holds NaN/Inf.
    """
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.node = None
    t.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if t.requires_grad:
        t.node = Node(op, tuple(parents), backward_fn)
    return t


# ---------------------------------------------------------------------------
# tape replay


def tape(loss: Tensor) -> list[Node]:
    """Nodes reachable from ``loss`` in recording order (topological)."""
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        n = t.node
        if n is None or id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append(n)
        stack.extend(n.parents)
    nodes.sort(key=lambda n: n.seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    # output tensors are not kept on the tape, so gradients are keyed by node
    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise AssertionError(f"{node.op}: grad shape {pg.shape} != {p.data.shape}")
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(node.op, "in backward pass")
            if p.node is None:
                p.grad = pg.astype(p.data.dtype, copy=True) if p.grad is None else p.grad + pg
            else:
                key = id(p.node)
                grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    # python scalars and arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, dtype=b.dtype)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_op("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data
    return make_op("log", out, (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,),
                   lambda g: (g * mask,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data).astype(a.dtype)
    sa, sb = a.shape, b.shape
    return make_op("where", out, (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0), sa),
                              _unbroadcast(np.where(cond, 0, g), sb)))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return make_op("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(a.dtype),)

    return make_op("mean", out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return make_op("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    """Concatenate CHW (or NCHW) tensors along the channel axis."""
    return concat(tensors, axis=-3)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather ``indices`` along ``axis``."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return make_op("take", out, (a,), bw)


def diagonal(a) -> Tensor:
    """Main diagonal of a square 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError(f"diagonal needs a square matrix, got {a.shape}")
    n = a.shape[0]

    def bw(g):
        full = np.zeros((n, n), dtype=g.dtype)
        full[np.arange(n), np.arange(n)] = g
        return (full,)

    return make_op("diagonal", np.diagonal(a.data).copy(), (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_op("matmul", ad @ bd, (a, b),
                   lambda g: (g @ bd.T if a.requires_grad else None,
                              ad.T @ g if b.requires_grad else None))


# ---------------------------------------------------------------------------
# softmax family


def softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """``exp((x - max) / T)`` normalised along ``axis``."""
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = (x.data - x.data.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((out * (g - (g * out).sum(axis=axis, keepdims=True))) / temperature,)

    return make_op("softmax", out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op("log_softmax", out, (x,), bw)


# ---------------------------------------------------------------------------
# image ops


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with OIHW weights."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects NCHW/OIHW, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ConfigurationError(f"conv2d channel mismatch: input {c}, weight expects {ci}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d needs stride >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ConfigurationError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ConfigurationError(f"conv2d bias shape {bias.shape} != ({o},)")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col: rows ordered (C, kh, kw) to match the flattened OIHW weight
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xc = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wd = weight.data
    wmat = wd.reshape(o, c * kh * kw)
    acc = wmat @ cols
    if bias is not None:
        acc += bias.data[:, None]
    if n == 1:
        out = acc.reshape(1, o, ho, wo)
    else:
        out = np.ascontiguousarray(acc.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if n == 1:
            g2 = g.reshape(o, ho * wo)
        else:
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(o, c, kh, kw)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = gx.reshape(n, c, h, w) if n == 1 else np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op("conv2d", out, parents, bw)


def l2_normalize(x, axis: int = -3, eps: float = 1e-8) -> Tensor:
    """Scale the vector along ``axis`` (channels by default) to unit length.

    Zero vectors stay zero.
    """
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    d = norm + eps
    out = xd / d

    def bw(g):
        dot = (g * xd).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1)
        coef = np.where(norm > 0, dot / (d * d * safe), 0)
        return (g / d - xd * coef,)

    return make_op("l2_normalize", out, (x,), bw)


def bilinear_sample(src, coords) -> tuple[Tensor, np.ndarray]:
    """Sample a CHW map at absolute pixel positions.

    ``coords`` has shape (2, H', W') with x in channel 0 and y in channel 1.
    Returns the sampled (C, H', W') tensor and a boolean validity mask; a
    position is valid when it lies inside ``[0, W-1] x [0, H-1]``.  The map is
    zero-padded, so values fade to 0 across the one-pixel fringe outside the
    valid box and are exactly 0 (with no gradient) beyond it.
    """
    src = as_tensor(src)
    coords = as_tensor(coords, dtype=src.dtype)
    if src.ndim != 3 or coords.ndim != 3 or coords.shape[0] != 2:
        raise ConfigurationError(f"bilinear_sample expects CHW map and 2HW coords, got {src.shape}, {coords.shape}")
    c, h, w = src.shape
    xs, ys = coords.data[0], coords.data[1]
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    reach = (xs > -1) & (xs < w) & (ys > -1) & (ys < h)
    x0f = np.floor(np.where(reach, xs, 0))
    y0f = np.floor(np.where(reach, ys, 0))
    fx = np.where(reach, xs - x0f, 0).astype(src.dtype)
    fy = np.where(reach, ys - y0f, 0).astype(src.dtype)
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    in_x0, in_x1 = (x0 >= 0) & reach, (x1 <= w - 1) & reach
    in_y0, in_y1 = y0 >= 0, y1 <= h - 1
    x0, x1c = np.clip(x0, 0, w - 1), np.minimum(x1, w - 1)
    y0, y1c = np.clip(y0, 0, h - 1), np.minimum(y1, h - 1)

    flat = src.data.reshape(c, h * w)
    i00 = y0 * w + x0
    i01 = y0 * w + x1c
    i10 = y1c * w + x0
    i11 = y1c * w + x1c
    m00 = (in_x0 & in_y0).astype(src.dtype)
    m01 = (in_x1 & in_y0).astype(src.dtype)
    m10 = (in_x0 & in_y1).astype(src.dtype)
    m11 = (in_x1 & in_y1).astype(src.dtype)
    v00 = flat[:, i00] * m00
    v01 = flat[:, i01] * m01
    v10 = flat[:, i10] * m10
    v11 = flat[:, i11] * m11
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g):
        gsrc = gcoords = None
        if src.requires_grad:
            n = g.shape[1] * g.shape[2]
            offs = (np.arange(c) * (h * w))[:, None]
            gf = g.reshape(c, n)
            idx = np.concatenate([(offs + i.reshape(1, n)).ravel() for i in (i00, i01, i10, i11)])
            wts = np.concatenate([(gf * (wt * m).reshape(1, n)).ravel()
                                  for wt, m in ((w00, m00), (w01, m01), (w10, m10), (w11, m11))])
            gsrc = np.bincount(idx, weights=wts, minlength=c * h * w).astype(src.dtype).reshape(c, h, w)
        if coords.requires_grad:
            gx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * g
            gy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * g
            gcoords = np.stack([gx.sum(axis=0), gy.sum(axis=0)]) * reach
            gcoords = gcoords.astype(coords.dtype)
        return gsrc, gcoords

    return make_op("bilinear_sample", out, (src, coords), bw), valid


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) linear-interpolation matrix with half-pixel alignment."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - f)
    np.add.at(m, (rows, i1), f)
    return m.astype(dtype)


def upsample_bilinear(x, out_size: tuple[int, int]) -> Tensor:
    """Bilinearly resize the last two axes to ``out_size`` (half-pixel centres)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ho, wo = int(out_size[0]), int(out_size[1])
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"invalid output size {out_size}")
    if (ho, wo) == (h, w):
        return make_op("upsample_bilinear", x.data.copy(), (x,), lambda g: (g,))
    ry = resize_matrix(h, ho, x.dtype)
    rx = resize_matrix(w, wo, x.dtype)
    out = ry @ x.data @ rx.T
    return make_op("upsample_bilinear", out, (x,), lambda g: (ry.T @ g @ rx,))
