"""Dense tensors with tape-based reverse-mode differentiation.

Arrays live in numpy.  A :class:`Graph` context records every operation
whose inputs require gradients; :func:`backward` replays the tape in
reverse.  The graph also fixes the scalar precision: compute mode is
float32, wide mode (``Graph(wide=True)``) is float64 and is what the
oracle and gradient tests run in.

Every kernel checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating it.  Kernels that perform
multiply-accumulates report them to any active :func:`count_macs` context.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

COMPUTE = np.float32
WIDE = np.float64


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


_local = threading.local()


def _stack(name):
    s = getattr(_local, name, None)
    if s is None:
        s = []
        setattr(_local, name, s)
    return s


def active_graph():
    s = _stack("graphs")
    return s[-1] if s else None


class Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Tape of recorded ops.  Use as a context manager."""

    def __init__(self, wide=False):
        self.wide = wide
        self.dtype = WIDE if wide else COMPUTE
        self.nodes: list[Node] = []

    def __enter__(self):
        _stack("graphs").append(self)
        return self

    def __exit__(self, *exc):
        _stack("graphs").pop()

    def __len__(self):
        return len(self.nodes)


@contextmanager
def count_macs():
    """Collect multiply-accumulate counts from kernels run in this block.

    Keys: ``macs`` (total) plus one key per kernel, and ``samples`` for
    the number of bilinear sample points evaluated.
    """
    c = Counter()
    s = _stack("counters")
    s.append(c)
    try:
        yield c
    finally:
        s.remove(c)


def _count(kernel, macs, samples=0):
    for c in _stack("counters"):
        c["macs"] += int(macs)
        c[kernel] += int(macs)
        if samples:
            c["samples"] += int(samples)


class Tensor:
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        g = active_graph()
        arr = np.asarray(data)
        if g is not None:
            arr = arr.astype(g.dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(COMPUTE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._leaf = True

    @classmethod
    def _wrap(cls, data, requires_grad):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._leaf = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(self.data, False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _arr(t):
    g = active_graph()
    if g is not None and t.data.dtype != g.dtype:
        return t.data.astype(g.dtype)
    return t.data


def _check(op, data):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite values in output")


def _make(op, data, inputs, backward):
    _check(op, data)
    g = active_graph()
    req = g is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, req)
    if req:
        g.nodes.append(Node(op, out, inputs, backward))
    return out


def backward(loss, graph=None, inputs=None):
    """Back-propagate from a scalar ``loss`` through ``graph``.

    Gradients accumulate into ``.grad`` of every leaf that requires them.
    If ``inputs`` is given, their gradients are also returned, with zeros
    for leaves that the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else active_graph()
    if graph is None:
        raise RuntimeError("backward called without a graph")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        for t, gi in zip(node.inputs, node.backward(g, needs)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            grads[k] = grads[k] + gi if k in grads else gi
            if t._leaf:
                leaves[k] = t
    for k, t in leaves.items():
        gk = grads[k].astype(t.data.dtype, copy=False)
        t.grad = gk.copy() if t.grad is None else t.grad + gk
    if inputs is not None:
        out = []
        for t in inputs:
            gk = grads.get(id(t))
            out.append(np.zeros_like(t.data) if gk is None else gk)
        return out
    return None


# --- elementwise ---------------------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(i, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _make("add", _arr(a) + _arr(b), (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _make("sub", _arr(a) - _arr(b), (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _arr(a), _arr(b)

    def bw(g, needs):
        return (_unbroadcast(g * y, x.shape) if needs[0] else None,
                _unbroadcast(g * x, y.shape) if needs[1] else None)

    return _make("mul", x * y, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _arr(a), _arr(b)
    out = x / y

    def bw(g, needs):
        return (_unbroadcast(g / y, x.shape) if needs[0] else None,
                _unbroadcast(-g * out / y, y.shape) if needs[1] else None)

    return _make("div", out, (a, b), bw)


def relu(a):
    a = as_tensor(a)
    x = _arr(a)
    pos = x > 0

    def bw(g, needs):
        return (g * pos,)

    return _make("relu", np.where(pos, x, 0).astype(x.dtype), (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    x = _arr(a)
    out = np.empty_like(x)
    p = x >= 0
    out[p] = 1.0 / (1.0 + np.exp(-x[p]))
    e = np.exp(x[~p])
    out[~p] = e / (1.0 + e)

    def bw(g, needs):
        return (g * out * (1 - out),)

    return _make("sigmoid", out, (a,), bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(_arr(a))

    def bw(g, needs):
        return (g * out,)

    return _make("exp", out, (a,), bw)


def log(a):
    a = as_tensor(a)
    x = _arr(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)

    def bw(g, needs):
        return (g / x,)

    return _make("log", out, (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    x = _arr(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x)

    def bw(g, needs):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _make("sqrt", out, (a,), bw)


def square(a):
    a = as_tensor(a)
    x = _arr(a)

    def bw(g, needs):
        return (2.0 * g * x,)

    return _make("square", x * x, (a,), bw)


def clip(a, lo, hi):
    """Clamp; the gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    x = _arr(a)
    inside = (x >= lo) & (x <= hi)

    def bw(g, needs):
        return (g * inside,)

    return _make("clip", np.clip(x, lo, hi), (a,), bw)


# --- reductions and shape ops -------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    x = _arr(a)
    shape = x.shape

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(x.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    x = _arr(a)
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    x = _arr(a)
    src = x.shape
    try:
        out = x.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from e

    def bw(g, needs):
        return (g.reshape(src),)

    return _make("reshape", out, (a,), bw)


def transpose(a, axes=None):
    a = as_tensor(a)
    x = _arr(a)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g, needs):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make("transpose", np.ascontiguousarray(x.transpose(axes)), (a,), bw)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    arrs = [_arr(t) for t in ts]
    ax = axis % arrs[0].ndim
    try:
        out = np.concatenate(arrs, axis=ax)
    except ValueError as e:
        raise ShapeError(f"concat shapes {[x.shape for x in arrs]} along {axis}") from e
    bounds = np.cumsum([x.shape[ax] for x in arrs])[:-1]

    def bw(g, needs):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", out, tuple(ts), bw)


def _is_advanced(key):
    key = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in key)


def index(a, key):
    """Numpy-style indexing with gradient (repeated indices accumulate)."""
    a = as_tensor(a)
    x = _arr(a)
    adv = _is_advanced(key)

    def bw(g, needs):
        gx = np.zeros_like(x)
        if adv:
            np.add.at(gx, key, g)
        else:
            gx[key] += g
        return (gx,)

    return _make("index", np.array(x[key]), (a,), bw)


def gather(a, idx, axis=0):
    """Select entries ``idx`` (flat index list) along ``axis``."""
    a = as_tensor(a)
    x = _arr(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather index out of range for extent {n}")
    out = np.take(x, idx, axis=axis)

    def bw(g, needs):
        gx = np.zeros_like(x)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make("gather", out, (a,), bw)


def scatter(base, idx, src, axis=0):
    """Copy of ``base`` with slices ``idx`` along ``axis`` replaced by ``src``.

    Indices must be distinct; overlapping writes are rejected.
    """
    base, src = as_tensor(base), as_tensor(src)
    x, s = _arr(base), _arr(src)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"scatter index out of range for extent {n}")
    if np.unique(idx).size != idx.size:
        raise ValueError("scatter indices must be distinct")
    out = x.copy()
    om = np.moveaxis(out, axis, 0)
    om[idx] = np.moveaxis(s, axis, 0)

    def bw(g, needs):
        gb = gs = None
        if needs[0]:
            gb = g.copy()
            np.moveaxis(gb, axis, 0)[idx] = 0
        if needs[1]:
            gs = np.take(g, idx, axis=axis)
        return gb, gs

    return _make("scatter", out, (base, src), bw)


# --- linear algebra -----------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _arr(a), _arr(b)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {x.shape} @ {y.shape}")
    out = np.matmul(x, y)
    _count("matmul", out.size * x.shape[-1])

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    x = _arr(a)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, kernel, stride=1, pad=0):
    """Cross-correlation of an HxWxCin map with a kxkxCinxCout kernel.

    Zero padding.  Odd kernels may be padded; even kernels (patch
    embeddings) require ``pad=0``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xa, w = _arr(x), _arr(kernel)
    if xa.ndim != 3 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[2] != xa.shape[2]:
        raise ShapeError(f"conv2d shapes incompatible: x {xa.shape}, kernel {w.shape}")
    k = w.shape[0]
    if k % 2 == 0 and pad:
        raise ShapeError("even kernels must use pad=0")
    H, W, C = xa.shape
    Ho, Wo = _conv_out(H, k, stride, pad), _conv_out(W, k, stride, pad)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d output extent non-positive: {(Ho, Wo)}")
    xp = np.pad(xa, ((pad, pad), (pad, pad), (0, 0))) if pad else xa
    cols = np.empty((Ho, Wo, k, k, C), dtype=xa.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[dy:dy + stride * (Ho - 1) + 1:stride,
                                    dx:dx + stride * (Wo - 1) + 1:stride]
    cols = cols.reshape(Ho * Wo, k * k * C)
    wm = w.reshape(k * k * C, -1)
    out = (cols @ wm).reshape(Ho, Wo, -1)
    _count("conv2d", Ho * Wo * k * k * C * wm.shape[1])

    def bw(g, needs):
        g2 = g.reshape(Ho * Wo, -1)
        gx = gw = None
        if needs[1]:
            gw = (cols.T @ g2).reshape(w.shape)
        if needs[0]:
            gc = (g2 @ wm.T).reshape(Ho, Wo, k, k, C)
            gp = np.zeros_like(xp)
            for dy in range(k):
                for dx in range(k):
                    gp[dy:dy + stride * (Ho - 1) + 1:stride,
                       dx:dx + stride * (Wo - 1) + 1:stride] += gc[:, :, dy, dx]
            gx = gp[pad:pad + H, pad:pad + W] if pad else gp
        return gx, gw

    return _make("conv2d", out, (x, kernel), bw)


def max_pool2d(x, k, stride=None):
    """Window max over an HxWxC map (no padding).  Ties route to the first max."""
    x = as_tensor(x)
    stride = k if stride is None else stride
    xa = _arr(x)
    H, W, C = xa.shape
    Ho, Wo = _conv_out(H, k, stride, 0), _conv_out(W, k, stride, 0)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"max_pool2d output extent non-positive: {(Ho, Wo)}")
    if stride == k and H % k == 0 and W % k == 0:
        win = xa.reshape(Ho, k, Wo, k, C).transpose(0, 2, 1, 3, 4).reshape(Ho, Wo, k * k, C)
        arg = win.argmax(axis=2)
        out = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]

        def bw(g, needs):
            gw = np.zeros((Ho, Wo, k * k, C), dtype=g.dtype)
            np.put_along_axis(gw, arg[:, :, None], g[:, :, None], axis=2)
            return (gw.reshape(Ho, Wo, k, k, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C),)

        return _make("max_pool2d", np.ascontiguousarray(out), (x,), bw)

    taps = [xa[dy:dy + stride * (Ho - 1) + 1:stride, dx:dx + stride * (Wo - 1) + 1:stride]
            for dy in range(k) for dx in range(k)]
    stack = np.stack(taps)
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def bw_general(g, needs):
        gx = np.zeros_like(xa)
        for t in range(k * k):
            dy, dx = divmod(t, k)
            gx[dy:dy + stride * (Ho - 1) + 1:stride,
               dx:dx + stride * (Wo - 1) + 1:stride] += g * (arg == t)
        return (gx,)

    return _make("max_pool2d", out, (x,), bw_general)


def avg_pool2d(x, k):
    """Non-overlapping kxk mean pooling."""
    H, W, C = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: {(H, W)} not divisible by {k}")
    return mean(reshape(x, (H // k, k, W // k, k, C)), axis=(1, 3))


# --- resampling ---------------------------------------------------------


def _interp_matrix(n, factor, dtype):
    """Row i holds the align_corners=False weights of output sample i."""
    m = np.zeros((n * factor, n), dtype=dtype)
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    rows = np.arange(n * factor)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def upsample_bilinear(x, factor):
    """Bilinear upsampling of an HxWxC map, align_corners=False."""
    x = as_tensor(x)
    xa = _arr(x)
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    if factor == 1:
        return _make("upsample_bilinear", xa.copy(), (x,), lambda g, needs: (g,))
    H, W, C = xa.shape
    uh = _interp_matrix(H, factor, xa.dtype)
    uw = _interp_matrix(W, factor, xa.dtype)
    y = (uh @ xa.reshape(H, W * C)).reshape(H * factor, W, C)
    out = np.matmul(uw, y)
    _count("upsample_bilinear", 4 * out.size)

    def bw(g, needs):
        gy = np.matmul(uw.T, g)
        return ((uh.T @ gy.reshape(H * factor, W * C)).reshape(H, W, C),)

    return _make("upsample_bilinear", out, (x,), bw)


def _bilinear_taps(H, W, pts):
    """Flat tap indices, validity masks, and weights for (x, y) points."""
    x, y = pts[:, 0], pts[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        flat = np.where(ok, yy * W + xx, 0)
        taps.append((flat, ok, wgt))
    return taps, fx, fy


def bilinear_sample(value, points):
    """Sample an HxWxC grid at continuous (x, y) pixel coordinates.

    Four-tap bilinear interpolation; taps outside the grid read zero.
    Differentiable with respect to both ``value`` and ``points``.
    """
    value, points = as_tensor(value), as_tensor(points)
    v, p = _arr(value), _arr(points)
    if v.ndim != 3 or p.ndim != 2 or p.shape[1] != 2:
        raise ShapeError(f"bilinear_sample shapes: value {v.shape}, points {p.shape}")
    H, W, C = v.shape
    P = p.shape[0]
    vf = v.reshape(H * W, C)
    taps, fx, fy = _bilinear_taps(H, W, p)
    rows = np.tile(np.arange(P), 4)
    cols = np.concatenate([t[0] for t in taps])
    vals = np.concatenate([np.where(t[1], t[2], 0.0) for t in taps]).astype(v.dtype)
    S = sp.csr_matrix((vals, (rows, cols)), shape=(P, H * W))
    out = np.asarray(S @ vf, dtype=v.dtype)
    _count("bilinear_sample", 4 * P * C, samples=P)

    def bw(g, needs):
        gv = gp = None
        if needs[0]:
            gv = np.asarray(S.T @ g, dtype=v.dtype).reshape(H, W, C)
        if needs[1]:
            t00, t01, t10, t11 = (np.where(ok[:, None], vf[flat], 0.0) for flat, ok, _ in taps)
            dx = (1 - fy)[:, None] * (t01 - t00) + fy[:, None] * (t11 - t10)
            dy = (1 - fx)[:, None] * (t10 - t00) + fx[:, None] * (t11 - t01)
            gp = np.stack([(g * dx).sum(1), (g * dy).sum(1)], axis=1).astype(p.dtype)
        return gv, gp

    return _make("bilinear_sample", out, (value, points), bw)
