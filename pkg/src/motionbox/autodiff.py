"""Tape-based reverse-mode differentiation over float64 arrays.

Operations record onto the innermost active :class:`Graph` (a per-thread
stack) whenever at least one input requires a gradient. Outside any graph,
the same functions just compute values, which is how inference and finite
differences run.

Shapes never broadcast: binary operations demand identical shapes.
"""

from __future__ import annotations

import struct
import threading
from collections.abc import Callable, Sequence
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from . import kernels

__all__ = [
    "DomainError",
    "Graph",
    "GraphError",
    "ShapeError",
    "Tensor",
    "add",
    "affine",
    "bce_with_logits",
    "channel_max",
    "channel_sum",
    "clamp",
    "concat_channels",
    "conv2d",
    "div",
    "elementwise",
    "exp",
    "gather",
    "GradCheckReport",
    "grad_check",
    "grad_check_report",
    "load_checkpoint",
    "log",
    "max_axis",
    "mul",
    "neg",
    "relu",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "slice_channels",
    "smooth_l1",
    "sub",
    "total",
]


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_graph", "_is_leaf")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._graph = None
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self._graph is None:
            raise GraphError("tensor was not produced inside a Graph")
        self._graph.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return gather(self, key)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


_local = threading.local()


def _stack():
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


class Graph:
    """Execution record for one forward pass.

    Use as a context manager; ``backward`` may be called exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward):
        if self.consumed:
            raise GraphError("graph already consumed by backward; start a new forward pass")
        out._graph = self
        out._is_leaf = False
        out.requires_grad = True
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, root: Tensor, grad: np.ndarray | None = None):
        if self.consumed:
            raise GraphError("backward called twice on the same graph")
        if root._graph is not self:
            raise GraphError("root tensor does not belong to this graph")
        if grad is None:
            if root.data.size != 1:
                raise ShapeError("implicit backward needs a scalar root")
            grad = np.ones_like(root.data)
        self.consumed = True
        grads = {id(root): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._is_leaf:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg


def _branch(decision):
    """Note which side of a kink a nonsmooth op took (only while grad_check listens)."""
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(np.ascontiguousarray(decision).tobytes())


def _active():
    st = _stack()
    return st[-1] if st else None


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._graph = None
    out._is_leaf = True
    out.requires_grad = False
    g = _active()
    if g is not None and any(p.requires_grad for p in parents):
        g.record(out, parents, backward)
    return out


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a):
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a):
    a = _wrap(a)
    mask = a.data > 0
    _branch(mask)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = _wrap(a)
    s = expit(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a):
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a):
    a = _wrap(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def affine(a, scale=1.0, shift=0.0):
    """``scale * a + shift`` with python-scalar coefficients."""
    a = _wrap(a)
    return _make(a.data * scale + shift, (a,), lambda g: (g * scale,))


def clamp(a, lo=None, hi=None):
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    _branch(inside)
    return _make(out, (a,), lambda g: (g * inside,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "log": log, "exp": exp, "neg": neg}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op, a, b=None):
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def bce_with_logits(x, target):
    """Per-element binary cross-entropy on logits; ``target`` is a constant array."""
    x = _wrap(x)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != x.shape:
        raise ShapeError(f"bce_with_logits: shape mismatch {x.shape} vs {t.shape}")
    xd = x.data
    out = np.maximum(xd, 0.0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
    return _make(out, (x,), lambda g: (g * (expit(xd) - t),))


def smooth_l1(x, target, beta=1.0):
    x = _wrap(x)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != x.shape:
        raise ShapeError(f"smooth_l1: shape mismatch {x.shape} vs {t.shape}")
    d = x.data - t
    ad = np.abs(d)
    small = ad < beta
    _branch(small)
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    return _make(out, (x,), lambda g: (g * np.where(small, d / beta, np.sign(d)),))


# ---------------------------------------------------------------------------
# reductions and reshaping


def total(a):
    """Sum of all entries as a shape-(1,) tensor."""
    a = _wrap(a)
    shape = a.shape
    return _make(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def reshape(a, shape):
    a = _wrap(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _basic_key(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is Ellipsis for k in items)


def gather(a, key):
    """``a[key]`` for any numpy index; duplicate indices accumulate in backward."""
    a = _wrap(a)
    shape = a.shape
    basic = _basic_key(key)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(a.data[key], dtype=np.float64), (a,), backward)


def max_axis(a, axis):
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    a = _wrap(a)
    arg = np.argmax(a.data, axis=axis)
    _branch(arg)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# channel ops


def concat_channels(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[0]
    return _make(np.concatenate([a.data, b.data], axis=0), (a, b), lambda g: (g[:ca], g[ca:]))


def slice_channels(a, start, stop):
    a = _wrap(a)
    if a.ndim != 3:
        raise ShapeError("slice_channels expects CxHxW")
    return gather(a, (slice(start, stop),))


def channel_sum(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "channel_sum")
    return add(a, b)


def channel_max(a, b):
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "channel_max")
    take_a = a.data >= b.data
    _branch(take_a)
    out = np.where(take_a, a.data, b.data)
    return _make(out, (a, b), lambda g: (g * take_a, g * ~take_a))


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of a CxHxW map with an OxCxKhxKw kernel."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects CxHxW input and OxCxKxK weight, got {x.shape}, {weight.shape}")
    c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cw}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d: kernel must be square with odd extent")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride >= 1 and padding >= 0 required")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output extents ({ho}, {wo})")
    parents = (x, weight)
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias must have shape ({o},), got {bias.shape}")
        parents = (x, weight, bias)

    if padding:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
        xp[:, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    hp, wp = xp.shape[1:]
    if kh == 1 and stride == 1:
        cols = xp.reshape(c, hp * wp)
    else:
        cols = kernels.im2col(xp, kh, stride, ho, wo)
    w2 = weight.data.reshape(o, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, ho, wo)

    def backward(g):
        g2 = g.reshape(o, ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = w2.T @ g2
            if kh == 1 and stride == 1:
                gxp = gcols.reshape(c, hp, wp)
            else:
                gxp = kernels.col2im(gcols, c, hp, wp, kh, stride, ho, wo)
            gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# verification


_MACHEPS = float(np.finfo(np.float64).eps)


class GradCheckReport(NamedTuple):
    max_rel_error: float
    max_abs_error: float
    checked: int
    skipped_kinks: int


def _evaluate(f, inputs, listen):
    if not listen:
        return float(f(*inputs).data.reshape(-1)[0]), None
    _local.branches = []
    try:
        value = float(f(*inputs).data.reshape(-1)[0])
        return value, _local.branches
    finally:
        _local.branches = None


def grad_check_report(f, inputs, eps=1e-5, floor=1e-8, skip_kinks=True):
    """Compare backprop against central differences coordinate by coordinate.

    The difference quotient is only resolved to about ``macheps * |f| / eps``;
    that much disagreement is forgiven before dividing by the gradient size.
    Coordinates where ``|analytic| + |numeric| <= floor`` are skipped. With
    ``skip_kinks`` a coordinate is also skipped when the two perturbed
    evaluations take different branches of a nonsmooth op (a ReLU sign, an
    argmax, a clamp or smooth-L1 regime): the difference quotient then spans
    a kink and says nothing about the derivative.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Graph() as g:
        out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if out._graph is g:
        g.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in inputs]

    worst = worst_abs = 0.0
    checked = skipped = 0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp, bp = _evaluate(f, inputs, skip_kinks)
            flat[i] = orig - eps
            fm, bm = _evaluate(f, inputs, skip_kinks)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite value at perturbed coordinate {i}")
            if skip_kinks and bp != bm:
                skipped += 1
                continue
            num = (fp - fm) / (2.0 * eps)
            a = ana_flat[i]
            scale = abs(a) + abs(num)
            if scale <= floor:
                continue
            checked += 1
            worst_abs = max(worst_abs, abs(a - num))
            resolution = 4.0 * _MACHEPS * max(abs(fp), abs(fm)) / eps
            worst = max(worst, max(abs(a - num) - resolution, 0.0) / max(abs(a), abs(num)))
    return GradCheckReport(float(worst), float(worst_abs), checked, skipped)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences (kink-straddling coordinates skipped)."""
    return grad_check_report(f, inputs, eps, floor).max_rel_error


# ---------------------------------------------------------------------------
# checkpoint file
#
# b"MSWT" | u32 version | records until EOF
# record: u32 name_len | name (utf-8) | u32 rank | u32 extents[rank] | f64 data (row-major)
# All integers and floats little-endian.

CHECKPOINT_MAGIC = b"MSWT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays):
    """Write ``{name: array}`` in insertion order."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    if len(buf) < 8:
        raise ValueError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise ValueError("truncated name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise ValueError("truncated payload")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated record") from exc
    return out
