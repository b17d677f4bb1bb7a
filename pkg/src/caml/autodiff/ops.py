"""Differentiable kernels.

Kernel table (shapes; ``...`` = any leading dims):

=================  ==========================================  ======================
op                 inputs                                      output
=================  ==========================================  ======================
add/sub/mul/div    broadcastable a, b                          broadcast shape
exp, log, relu     x                                           x.shape
matmul             (..., n, k), (..., k, m)                    (..., n, m)
linear             x (..., i), W (i, o), b (o,) optional       (..., o)
softmax            x, axis                                     x.shape
log_softmax        x, axis                                     x.shape
layer_norm         x (..., c), gamma (c,), beta (c,)           x.shape (last axis)
sum / mean         x, axis=None, keepdims=False                reduced
reshape            x, shape                                    shape
transpose          x, axes                                     permuted
concat             [x...], axis                                joined
getitem            x, numpy index (slices, ints, int arrays)   indexed
conv3d             x (b,ci,D,H,W), w (co,ci,k,k,k), b (co,)    (b,co,D',H',W')
upsample2x         x (b,c,D,H,W)                               (b,c,2D,2H,2W)
cosine_normalize   x (..., c)                                  x / (||x|| + 1e-8)
=================  ==========================================  ======================

Every kernel validates shapes and raises ``ValueError`` on mismatch.
"""
from __future__ import annotations

import numpy as np

from caml import kernels as _k
from caml.autodiff.tensor import Tensor, as_tensor, record

COSINE_EPS = 1e-8


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.value + b.value,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.value - b.value,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return record("mul", (a, b), av * bv, bwd)


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    out = av / bv

    def bwd(g):
        return (_unbroadcast(g / bv, av.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None)

    return record("div", (a, b), out, bwd)


def exp(x):
    y = np.exp(x.value)
    return record("exp", (x,), y, lambda g: (g * y,))


def log(x):
    xv = x.value
    return record("log", (x,), np.log(xv), lambda g: (g / xv,))


def relu(x):
    mask = x.value > 0
    return record("relu", (x,), np.where(mask, x.value, 0).astype(x.dtype),
                  lambda g: (g * mask,))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul: inputs must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", (a, b), av @ bv, bwd)


def linear(x, w, b=None):
    """``x @ w + b`` with ``w`` stored (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xv, wv = x.value, w.value
    x2 = xv.reshape(-1, wv.shape[0])
    out = x2 @ wv
    if b is not None:
        out = out + b.value
    out = out.reshape(xv.shape[:-1] + (wv.shape[1],))

    def bwd(g):
        g2 = g.reshape(-1, wv.shape[1])
        gx = (g2 @ wv.T).reshape(xv.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("linear", inputs, out, bwd)


# -- normalisations ------------------------------------------------------------

def softmax(x, axis=-1):
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", (x,), y,
                  lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", (x,), y, bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    c = x.shape[-1]
    if c == 0:
        raise ValueError("layer_norm over an empty axis")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: affine params must be ({c},)")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.value + beta.value

    def bwd(g):
        gx = gg = gb = None
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gamma.value
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return record("layer_norm", (x, gamma, beta), out, bwd)


def cosine_normalize(x, eps=COSINE_EPS):
    """Divide by the L2 norm along the last axis (``eps`` added to the norm)."""
    xv = x.value
    n = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    d = n + eps
    y = xv / d

    def bwd(g):
        safe = np.where(n > 0, n, 1)
        proj = (g * xv).sum(axis=-1, keepdims=True) / (safe * d * d)
        return (g / d - xv * np.where(n > 0, proj, 0),)

    return record("cosine_normalize", (x,), y, bwd)


# -- reductions and reshaping --------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = x.shape
    out = np.asarray(x.value.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record("sum", (x,), out, bwd)


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    if count == 0:
        raise ValueError("mean over an empty axis")
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {old} as {shape}") from None
    return record("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return record("transpose", (x,), np.ascontiguousarray(x.value.transpose(axes)),
                  lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of nothing")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.value for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bwd(g):
        sl = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            res.append(g[tuple(sl)])
        return tuple(res)

    return record("concat", tuple(tensors), out, bwd)


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(x, index):
    shape, dtype = x.shape, x.dtype
    out = np.ascontiguousarray(x.value[index])
    basic = _is_basic(index)

    def bwd(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return record("getitem", (x,), out, bwd)


# -- volumetric ----------------------------------------------------------------

def conv3d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation over (D, H, W) with cubic zero padding."""
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d: expected 5-d input and weight, got {x.shape}, {w.shape}")
    B, ci, D, H, W = x.shape
    co, wci, kd, kh, kw = w.shape
    if wci != ci:
        raise ValueError(f"conv3d: input has {ci} channels, weight expects {wci}")
    if b is not None and b.shape != (co,):
        raise ValueError(f"conv3d: bias {b.shape} does not match {co} output channels")
    p, s = padding, stride
    Dp, Hp, Wp = D + 2 * p, H + 2 * p, W + 2 * p
    if Dp < kd or Hp < kh or Wp < kw:
        raise ValueError("conv3d: kernel larger than padded input")
    pointwise = kd == kh == kw == s == 1 and p == 0
    xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.value
    cols = x.value if pointwise else _k.im2col3d(xp, kd, kh, kw, s)
    Do, Ho, Wo = cols.shape[2:]
    K = ci * kd * kh * kw
    cols3 = cols.reshape(B, K, Do * Ho * Wo)
    wm = w.value.reshape(co, K)
    out = np.matmul(wm, cols3)
    if b is not None:
        out += b.value[:, None]
    out = out.reshape(B, co, Do, Ho, Wo)

    def bwd(g):
        g3 = g.reshape(B, co, Do * Ho * Wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g3, cols3.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wm.T, g3).reshape(B, K, Do, Ho, Wo)
            if pointwise:
                return gcols, gw, gb
            gxp = _k.col2im3d(gcols, ci, Dp, Hp, Wp, kd, kh, kw, s)
            gx = gxp[:, :, p:p + D, p:p + H, p:p + W] if p else gxp
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv3d", inputs, out, bwd)


_UPSAMPLE_CACHE = {}


def _upsample_matrix(n, dtype):
    key = (n, np.dtype(dtype).str)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        m = np.zeros((2 * n, n), dtype=np.float64)
        for i in range(2 * n):
            src = max((i + 0.5) / 2 - 0.5, 0.0)
            i0 = min(int(np.floor(src)), n - 1)
            i1 = min(i0 + 1, n - 1)
            w1 = src - i0
            m[i, i0] += 1 - w1
            m[i, i1] += w1
        m = m.astype(dtype)
        _UPSAMPLE_CACHE[key] = m
    return m


def _along(arr, mat, axis):
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


def upsample2x(x):
    """Trilinear x2 upsampling (half-pixel centres, edge clamped)."""
    if x.ndim != 5:
        raise ValueError(f"upsample2x: expected (b,c,D,H,W), got {x.shape}")
    mats = [_upsample_matrix(n, x.dtype) for n in x.shape[2:]]
    y = x.value
    for ax, m in zip((2, 3, 4), mats):
        y = _along(y, m, ax)
    y = np.ascontiguousarray(y)

    def bwd(g):
        for ax, m in zip((4, 3, 2), mats[::-1]):
            g = _along(g, m.T, ax)
        return (np.ascontiguousarray(g),)

    return record("upsample2x", (x,), y, bwd)
