"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Covers exactly the op set the rest of the package needs: conv2d,
last-dim average pooling, group norm, elementwise math (including the
spike step with a surrogate derivative), correlation volume/lookup,
bilinear and convex upsampling, concatenation/reshape and reductions.

Tensors are immutable after creation except for parameter updates
between optimizer steps. Every forward op checks its output for
NaN/Inf and raises instead of propagating. Gradients flow through an
acyclic graph of closures; backward() walks it in reverse topological
order, visiting each node exactly once.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .backend import kernels as K

DEFAULT_DTYPE = np.float64

CHECK_FINITE = True

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_default_dtype(dtype):
    global DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None,
                 name=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents = parents if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))


def tensor(data, requires_grad=False, name=None):
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad, name=name)


def zeros(shape, requires_grad=False, name=None):
    return Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE), requires_grad, name=name)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _make(data, parents, backward_fn, opname):
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError(f"non-finite values in '{opname}' output")
    rg = any(p.requires_grad for p in parents)
    if rg and _GRAD_ENABLED:
        return Tensor(data, True, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data)


def _accum(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


# ----------------------------------------------------------- broadcasting

def _broadcast_ok(sa, sb):
    """Only identical shapes, true scalars, and per-channel [C,1,1] vs
    [C,H,W] are allowed to broadcast — spatial-dim broadcasting is a bug
    more often than a feature here."""
    if sa == sb:
        return True
    if math.prod(sa) == 1 or math.prod(sb) == 1:
        return True
    if len(sa) == 3 and len(sb) == 3 and sa[0] == sb[0]:
        if (sa[1] == 1 and sa[2] == 1) or (sb[1] == 1 and sb[2] == 1):
            return True
    return False


def _reduce_grad(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_pair(a, b, opname):
    if not _broadcast_ok(a.data.shape, b.data.shape):
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} may not broadcast")


# ------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        _accum(a, _reduce_grad(g, a.data.shape))
        _accum(b, _reduce_grad(g, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "add")


def neg(a):
    a = _as_tensor(a)

    def backward_fn(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward_fn, "neg")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        _accum(a, _reduce_grad(g * b.data, a.data.shape))
        _accum(b, _reduce_grad(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "mul")


def sigmoid(a):
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backward_fn(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), backward_fn, "sigmoid")


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def backward_fn(g):
        _accum(a, g * (1.0 - y * y))

    return _make(y, (a,), backward_fn, "tanh")


def relu(a):
    a = _as_tensor(a)
    y = np.maximum(a.data, 0.0)

    def backward_fn(g):
        # Subgradient 1 at exactly zero: the disparity clamp starts the
        # rollout at 0.0 precisely, and a 0 there would block all learning.
        _accum(a, g * (a.data >= 0.0))

    return _make(y, (a,), backward_fn, "relu")


def abs_(a):
    a = _as_tensor(a)

    def backward_fn(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward_fn, "abs")


def heaviside_surrogate(a, slope=4.0, gain=1.0):
    """Spike step: forward is the hard threshold with theta(0)=1, backward
    is the scaled sigmoid derivative g'(x) = gain*slope*sig(slope*x)*(1-sig)."""
    a = _as_tensor(a)
    y = (a.data >= 0.0).astype(a.data.dtype)

    def backward_fn(g):
        s = 1.0 / (1.0 + np.exp(-slope * a.data))
        _accum(a, g * (gain * slope * s * (1.0 - s)))

    return _make(y, (a,), backward_fn, "heaviside_surrogate")


def softmax(a, axis=0):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), backward_fn, "softmax")


# ------------------------------------------------------- shape plumbing

def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes "
                         f"{[t.data.shape for t in tensors]} along axis "
                         f"{axis}: {exc}") from None
    sizes = [t.data.shape[axis] for t in tensors]

    def backward_fn(g):
        start = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            _accum(t, g[tuple(sl)])
            start += s

    return _make(out_data, tuple(tensors), backward_fn, "concat")


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape

    def backward_fn(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward_fn, "reshape")


def crop_hw(a, h, w):
    """Keep the top-left h×w window of the trailing two axes."""
    a = _as_tensor(a)
    old = a.data.shape

    def backward_fn(g):
        gx = np.zeros(old, dtype=g.dtype)
        gx[..., :h, :w] = g
        _accum(a, gx)

    return _make(np.ascontiguousarray(a.data[..., :h, :w]), (a,), backward_fn, "crop_hw")


def sum_all(a):
    a = _as_tensor(a)

    def backward_fn(g):
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _make(np.asarray(a.data.sum()), (a,), backward_fn, "sum_all")


# --------------------------------------------------------- dense kernels

def conv2d(x, w, stride=1, padding=0):
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected [C,H,W] input and [O,C,kh,kw] kernel, "
                         f"got {x.data.shape} and {w.data.shape}")
    if x.data.shape[0] != w.data.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.data.shape[0]} != kernel "
                         f"channels {w.data.shape[1]}")
    cin, h, wd = x.data.shape
    kh, kw = w.data.shape[2], w.data.shape[3]
    if (h + 2 * padding - kh) // stride + 1 < 1 or (wd + 2 * padding - kw) // stride + 1 < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input "
                         f"{h}x{wd} with padding {padding}")
    y = K.conv2d_fwd(x.data, w.data, stride, padding)

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accum(x, K.conv2d_bwd_x(g, w.data, stride, padding, h, wd))
        if w.requires_grad:
            _accum(w, K.conv2d_bwd_w(g, x.data, kh, kw, stride, padding))

    return _make(y, (x, w), backward_fn, "conv2d")


def avg_pool_lastdim(x, kernel, stride):
    x = _as_tensor(x)
    d = x.data.shape[-1]
    if kernel > d:
        raise ShapeError(f"avg_pool_lastdim: kernel {kernel} exceeds last dim {d}")
    lead = x.data.shape[:-1]
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y2 = K.avgpool_fwd(flat, kernel, stride)
    y = y2.reshape(lead + (y2.shape[-1],))

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
        _accum(x, K.avgpool_bwd(g2, d, kernel, stride).reshape(x.data.shape))

    return _make(y, (x,), backward_fn, "avg_pool_lastdim")


def group_norm(x, gamma, beta, groups, eps=1e-5):
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c, h, w = x.data.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: channels {c} not divisible by groups {groups}")
    grouped = x.data.reshape(groups, -1)
    mu = grouped.mean(axis=1, keepdims=True)
    var = grouped.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mu) * inv_std).reshape(c, h, w)
    y = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def backward_fn(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(1, 2)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(1, 2)))
        if x.requires_grad:
            dxhat = (g * gamma.data[:, None, None]).reshape(groups, -1)
            xh = xhat.reshape(groups, -1)
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xh).mean(axis=1, keepdims=True)
            gx = inv_std * (dxhat - m1 - xh * m2)
            _accum(x, gx.reshape(c, h, w))

    return _make(y, (x, gamma, beta), backward_fn, "group_norm")


def bilinear_up2(x):
    x = _as_tensor(x)
    c, h, w = x.data.shape
    y = K.up2_fwd(x.data)

    def backward_fn(g):
        _accum(x, K.up2_bwd(np.ascontiguousarray(g), h, w))

    return _make(y, (x,), backward_fn, "bilinear_up2")


def corr_volume(f_left, f_right):
    f_left, f_right = _as_tensor(f_left), _as_tensor(f_right)
    if f_left.data.shape != f_right.data.shape:
        raise ShapeError(f"corr_volume: feature shapes differ, "
                         f"{f_left.data.shape} vs {f_right.data.shape}")
    c = f_left.data.shape[0]
    scale = 1.0 / math.sqrt(c)
    vol = K.corr_fwd(f_left.data, f_right.data) * scale

    def backward_fn(g):
        gfl, gfr = K.corr_bwd(np.ascontiguousarray(g * scale),
                              f_left.data, f_right.data)
        _accum(f_left, gfl)
        _accum(f_right, gfr)

    return _make(vol, (f_left, f_right), backward_fn, "corr_volume")


def corr_lookup(levels, disp, radius):
    """Sample each pyramid level at (j - d)/2^L + delta for delta in
    [-radius, radius], linear interpolation, clamp to edge. Output is
    level-major: [(2r+1)*len(levels), H, W]."""
    levels = [_as_tensor(v) for v in levels]
    disp = _as_tensor(disp)
    h, w = disp.data.shape
    nt = 2 * radius + 1
    chunks = []
    for li, vol in enumerate(levels):
        if vol.data.shape[:2] != (h, w):
            raise ShapeError(f"corr_lookup: level {li} leading dims "
                             f"{vol.data.shape[:2]} != disparity {disp.data.shape}")
        chunks.append(K.lookup_fwd(vol.data, disp.data, float(2 ** li), radius))
    out = np.concatenate(chunks, axis=0)

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        for li, vol in enumerate(levels):
            gv, gd = K.lookup_bwd(np.ascontiguousarray(g[li * nt:(li + 1) * nt]),
                                  vol.data, disp.data, float(2 ** li), radius)
            _accum(vol, gv)
            _accum(disp, gd)

    return _make(out, tuple(levels) + (disp,), backward_fn, "corr_lookup")


def convex_combine(d, weights):
    """4x upsample: each output pixel is a convex combination (weights
    pre-softmaxed, [9,16,H,W]) of its 3x3 coarse neighborhood times 4."""
    d, weights = _as_tensor(d), _as_tensor(weights)
    h, w = d.data.shape
    if weights.data.shape != (9, 16, h, w):
        raise ShapeError(f"convex_combine: weights {weights.data.shape} != "
                         f"(9, 16, {h}, {w})")
    y = K.convex_fwd(d.data, weights.data)

    def backward_fn(g):
        gd, gw = K.convex_bwd(np.ascontiguousarray(g), d.data, weights.data)
        _accum(d, gd)
        _accum(weights, gw)

    return _make(y, (d, weights), backward_fn, "convex_combine")


# ----------------------------------------------------------------- engine

def backward(loss):
    """Reverse-mode sweep from a scalar loss. Gradients accumulate on every
    tensor with requires_grad along the way (leaves keep theirs)."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
