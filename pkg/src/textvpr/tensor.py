"""Small dense-tensor engine with reverse-mode gradients.

Tensors wrap numpy arrays. Operations executed while a :class:`Tape` is
active (``with Tape() as tape:``) are appended to it; ``backward(loss)``
replays the tape in reverse and accumulates ``.grad`` on every tensor that
requires it. Outside a tape nothing is recorded, which is how inference
runs.

Broadcasting is limited to a trailing-axis suffix (bias/gain style), so
every gradient rule stays a one-liner.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy import sparse

__all__ = [
    "DimensionError", "TapeError", "Tensor", "Tape", "precision", "default_dtype",
    "tensor", "parameter", "backward",
    "add", "sub", "mul", "scale", "matmul", "transpose", "reshape", "concat",
    "take", "index", "relu", "sigmoid", "tanh", "exp", "log", "abs_", "sum_", "mean",
    "softmax", "log_softmax", "layer_norm", "bilinear_sample",
    "upsample2x", "avgpool2x", "clip_unit",
]


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes or axes."""


class TapeError(RuntimeError):
    """Raised on invalid use of a computation tape."""


_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(name):
    """Switch the default float width ("float32" or "float64") for new tensors."""
    dt = {"float32": np.float32, "float64": np.float64}[name]
    prev = default_dtype()
    _state.dtype = dt
    try:
        yield dt
    finally:
        _state.dtype = prev


def _active_tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None, name=None, checked=True):
        dtype = dtype or default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if checked and not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, name=None, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Single owner: do not share one tape between concurrent trainers.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn):
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        output._tape = self
        self.nodes.append(_Node(op, inputs, output, backward_fn))


def _result(op, data, inputs, backward_fn):
    """Wrap an op result; record it when a tape is active and any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    tape = _active_tape()
    need = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = need
    if need:
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss):
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on a tape")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")
    if not tape.nodes:
        raise TapeError("tape is empty")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is tape:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                # leaf (parameter or input created outside the tape)
                t.grad = gi.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + gi
    tape.consumed = True
    tape.nodes = []


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), checked=False)


def _check_suffix(a, b, op):
    if a.shape == b.shape:
        return False
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    b = _as_tensor(b, a)
    _check_suffix(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (g, _reduce_to(g, sb)) if sa != sb else (g, g))


def sub(a, b):
    b = _as_tensor(b, a)
    _check_suffix(a.data, b.data, "sub")
    sb = b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, sb)))


def mul(a, b):
    b = _as_tensor(b, a)
    _check_suffix(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    sb = b.shape
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, sb)))


def scale(a, c):
    c = float(c)
    return _result("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def relu(a):
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                   lambda g: (g * mask,))


def sigmoid(a):
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def tanh(a):
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1 - y * y),))


def exp(a):
    y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a):
    x = a.data
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def abs_(a):
    s = np.sign(a.data)
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def clip_unit(a):
    """Clamp into [0, 1]; gradient passes only through the interior."""
    x = a.data
    inside = (x > 0) & (x < 1)
    return _result("clip_unit", np.clip(x, 0, 1), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None):
    shape = a.shape
    if axis is None:
        out = a.data.sum().reshape(1)
        return _result("sum", out, (a,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))
    axis = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axis)
    return _result("sum", out, (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[_norm_axis(axis, a.data.ndim)]
    return scale(sum_(a, axis), 1.0 / n)


def _norm_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} invalid for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _result("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _result("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    ndim = tensors[0].data.ndim
    axis = _norm_axis(axis, ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        sl = [slice(None)] * ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _result("concat", out, tuple(tensors), bw)


def index(a, key):
    """Basic slicing ``a[key]`` (no fancy indexing)."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _result("index", a.data[key], (a,), bw)


def take(a, idx, axis=0):
    """Gather ``a`` along ``axis`` with an integer index array (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    axis = _norm_axis(axis, a.data.ndim)
    shape = a.shape
    flat = idx.reshape(-1)
    order = np.argsort(flat, kind="stable")
    uniq, starts = np.unique(flat[order], return_index=True)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        gm = np.moveaxis(g, axis, 0).reshape((flat.size,) + tuple(np.delete(shape, axis)))
        fm = np.moveaxis(full, axis, 0)
        fm[uniq] = np.add.reduceat(gm[order], starts, axis=0)
        return (full,)

    return _result("take", np.take(a.data, idx, axis=axis), (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} differ")
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result("matmul", out, (a, b), bw)


# ---------------------------------------------------------------- normalisation

def softmax(a, axis=-1):
    axis = _norm_axis(axis, a.data.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (a,), bw)


def log_softmax(a, axis=-1):
    axis = _norm_axis(axis, a.data.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", y, (a,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {d}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, d)
        return (gx, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0))

    return _result("layer_norm", out.astype(xd.dtype, copy=False), (x, gain, bias), bw)


# ---------------------------------------------------------------- sampling

def bilinear_sample(feat, points):
    """Bilinearly sample ``feat`` at normalised ``points``.

    ``feat`` is ``[H, W, C]`` or ``[B, H, W, C]``; ``points`` is ``[N, 2]`` or
    ``[B, N, 2]`` holding (x, y) in [0, 1]^2. Points are clamped into the unit
    square, and (i + 0.5) / W addresses the centre of column i. Differentiable
    in both the feature map and (inside the clamp region) the points.
    """
    batched = feat.data.ndim == 4
    fd = feat.data if batched else feat.data[None]
    pd = points.data if batched else points.data[None]
    if fd.ndim != 4 or fd.size == 0:
        raise DimensionError(f"bilinear_sample: empty or malformed feature map {feat.shape}")
    if pd.ndim != 3 or pd.shape[-1] != 2 or pd.shape[0] != fd.shape[0]:
        raise DimensionError(f"bilinear_sample: points {points.shape} vs features {feat.shape}")
    B, H, W, C = fd.shape
    N = pd.shape[1]
    # continuous cell coordinates, border-replicated
    ux = np.clip(pd[..., 0], 0.0, 1.0) * W - 0.5
    uy = np.clip(pd[..., 1], 0.0, 1.0) * H - 0.5
    fx = np.clip(ux, 0, W - 1)
    fy = np.clip(uy, 0, H - 1)
    live_x = (pd[..., 0] > 0) & (pd[..., 0] < 1) & (ux > 0) & (ux < W - 1)
    live_y = (pd[..., 1] > 0) & (pd[..., 1] < 1) & (uy > 0) & (uy < H - 1)
    x0 = np.minimum(np.floor(fx).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (fx - x0).astype(fd.dtype)
    wy = (fy - y0).astype(fd.dtype)
    # sparse interpolation operator: row (b, n) mixes four cells of image b
    rows = np.repeat(np.arange(B * N), 4)
    base = (np.arange(B) * (H * W))[:, None]
    cols = np.stack([base + y0 * W + x0, base + y0 * W + x1,
                     base + y1 * W + x0, base + y1 * W + x1], axis=-1).reshape(-1)
    vals = np.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], axis=-1).reshape(-1)
    interp = sparse.csr_matrix((vals, (rows, cols)), shape=(B * N, B * H * W))
    flat = fd.reshape(B * H * W, C)
    out = np.asarray(interp @ flat).reshape(B, N, C).astype(fd.dtype, copy=False)

    def bw(g):
        g = (g if batched else g[None]).reshape(B * N, C)
        gf = np.asarray(interp.T @ g).reshape(B, H, W, C).astype(fd.dtype, copy=False)
        c = cols.reshape(B * N, 4)
        f00, f01, f10, f11 = flat[c[:, 0]], flat[c[:, 1]], flat[c[:, 2]], flat[c[:, 3]]
        wx_ = wx.reshape(-1, 1)
        wy_ = wy.reshape(-1, 1)
        dx = (f01 - f00) * (1 - wy_) + (f11 - f10) * wy_
        dy = (f10 - f00) * (1 - wx_) + (f11 - f01) * wx_
        gp = np.empty(pd.shape, dtype=fd.dtype)
        gp[..., 0] = (g * dx).sum(-1).reshape(B, N) * W * live_x
        gp[..., 1] = (g * dy).sum(-1).reshape(B, N) * H * live_y
        if not batched:
            return gf[0], gp[0]
        return gf, gp

    res = out if batched else out[0]
    return _result("bilinear_sample", res, (feat, points), bw)


def upsample2x(a):
    """Nearest-neighbour 2x upsampling of ``[..., H, W, C]``."""
    x = a.data
    out = x.repeat(2, axis=-3).repeat(2, axis=-2)

    def bw(g):
        s = g.shape
        g = g.reshape(s[:-3] + (s[-3] // 2, 2, s[-2] // 2, 2, s[-1]))
        return (g.sum(axis=(-4, -2)),)

    return _result("upsample2x", out, (a,), bw)


def avgpool2x(a):
    """2x2 average pooling of ``[..., H, W, C]`` (H, W even)."""
    x = a.data
    s = x.shape
    if s[-3] % 2 or s[-2] % 2:
        raise DimensionError(f"avgpool2x needs even spatial dims, got {s}")
    blocks = x.reshape(s[:-3] + (s[-3] // 2, 2, s[-2] // 2, 2, s[-1]))
    out = blocks.mean(axis=(-4, -2))

    def bw(g):
        g4 = np.expand_dims(np.expand_dims(g, -2), -4) * 0.25
        return (np.broadcast_to(g4, blocks.shape).reshape(s).copy(),)

    return _result("avgpool2x", out.astype(x.dtype, copy=False), (a,), bw)
