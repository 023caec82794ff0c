"""Reverse-mode automatic differentiation on dense numpy arrays.

A ``Tape`` records every differentiable op in creation order while active as
a context manager.  ``Tape.backward`` walks the records in reverse and
accumulates vector-Jacobian products into ``Tensor.grad``.  With no active
tape, ops run forward-only, which is what evaluation rollouts use.

Tensors wrap numpy arrays of any float dtype; ops preserve the dtype of
their tensor inputs.  ``scale_grad`` is the identity on values but shrinks
the gradient flowing through it, which is how rollout training attenuates
long-horizon gradient paths.

``grad_check`` and ``grad_check_directional`` compare analytic gradients
against central finite differences.
"""

import numpy as np

from . import kernels

_ACTIVE = None


class Tensor:
    """A numpy array plus an accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)

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

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Tape:
    """Creation-order op record; one per rollout/backward pass."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, out, seed=None):
        """Accumulate d(out)/d(leaf) into .grad of every reachable tensor."""
        if seed is None:
            seed = np.ones_like(out.data)
        out.grad = np.broadcast_to(np.asarray(seed, dtype=out.data.dtype),
                                   out.data.shape).copy()
        for node_out, inputs, vjp in reversed(self._nodes):
            g = node_out.grad
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi

    def clear(self):
        self._nodes = []


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data, inputs, vjp):
    tape = _ACTIVE
    req = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        tape._nodes.append((out, inputs, vjp))
    return out


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp)


def sub(a, b):
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), vjp)


def mul(a, b):
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), vjp)


def div(a, b):
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def neg(a):
    a = _wrap(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a):
    a = _wrap(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False),
                   (a,), lambda g: (g * mask,))


def elu(a, alpha=1.0):
    a = _wrap(a)
    ex = np.exp(np.minimum(a.data, 0.0))
    pos = a.data > 0
    out = np.where(pos, a.data, alpha * (ex - 1.0)).astype(a.dtype, copy=False)

    def vjp(g):
        return (g * np.where(pos, 1.0, alpha * ex),)

    return _record(out, (a,), vjp)


def sigmoid(a):
    a = _wrap(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(a.dtype, copy=False)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), vjp)


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), vjp)


def softplus(a):
    """log(1 + exp(x)) computed without overflow."""
    a = _wrap(a)
    x = a.data
    out = (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))).astype(a.dtype, copy=False)
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * sig,)

    return _record(out, (a,), vjp)


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    a = _wrap(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def square(a):
    a = _wrap(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (g * 2.0 * ad,))


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes only inside the interval."""
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


def minimum(a, b):
    """Elementwise min; ties send the gradient to the first argument."""
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g * take_a, a.data.shape),
                _unbroadcast(g * ~take_a, b.data.shape))

    return _record(out, (a, b), vjp)


def maximum(a, b):
    """Elementwise max; ties send the gradient to the first argument."""
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g * take_a, a.data.shape),
                _unbroadcast(g * ~take_a, b.data.shape))

    return _record(out, (a, b), vjp)


def smooth_l1(a, delta=1.0):
    """Elementwise huberized absolute value.

    0.5*x**2 inside |x| < delta, delta*(|x| - 0.5*delta) outside.
    """
    a = _wrap(a)
    x = a.data
    q = np.abs(x)
    inner = q < delta
    out = np.where(inner, 0.5 * x * x, delta * (q - 0.5 * delta))
    out = out.astype(a.dtype, copy=False)

    def vjp(g):
        return (g * np.where(inner, x, delta * np.sign(x)),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape, dtype = a.data.shape, a.data.dtype

    def vjp(g):
        if axis is None:
            return (np.full(shape, g, dtype=dtype) if np.ndim(g) == 0
                    else np.broadcast_to(g, shape).astype(dtype, copy=False).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def norm(a, axis=-1, eps=1e-12):
    """Euclidean norm along an axis, smoothed by eps under the square root."""
    a = _wrap(a)
    s = np.sum(a.data * a.data, axis=axis) + eps
    out = np.sqrt(s)
    ad = a.data

    def vjp(g):
        return (np.expand_dims(g / out, axis) * ad,)

    return _record(out.astype(a.dtype, copy=False), (a,), vjp)


def reshape(a, *shape):
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = _wrap(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape, dtype = a.data.shape, a.data.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[idx] = g
        return (gx,)

    return _record(a.data[idx], (a,), vjp)


def gather_rows(a, index):
    """out[k] = a[index[k]]; backward scatter-adds duplicate rows."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.int64)
    shape, dtype = a.data.shape, a.data.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(a.data[index], (a,), vjp)


def scale_grad(a, factor):
    """Identity forward; multiplies the backward gradient by ``factor``.

    Used to attenuate gradient flow across rollout step boundaries.
    """
    if not (0.0 < factor <= 1.0):
        raise ValueError(f"scale_grad factor must be in (0, 1], got {factor}")
    a = _wrap(a)
    return _record(a.data, (a,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d(x, w, bias, stride=(1, 1), pad=(1, 1), wrap=True):
    """2-d convolution with horizontally circular (or zero) padding.

    x : (B, C, H, W), w : (O, C, kh, kw), bias : (O,)
    stride : (sh, sw), pad : (ph, pw)
    wrap : pad the width axis circularly (azimuth wrap-around); the height
        axis is always zero padded.
    """
    x, w, bias = _wrap(x), _wrap(w), _wrap(bias)
    sh, sw = stride
    ph, pw = pad
    b, c, h, wid = x.shape
    xd = x.data
    if pw > 0:
        if wrap:
            xp = np.concatenate([xd[:, :, :, -pw:], xd, xd[:, :, :, :pw]], axis=3)
        else:
            zw = np.zeros((b, c, h, pw), dtype=xd.dtype)
            xp = np.concatenate([zw, xd, zw], axis=3)
    else:
        xp = xd
    if ph > 0:
        zh = np.zeros((b, c, ph, xp.shape[3]), dtype=xd.dtype)
        xp = np.concatenate([zh, xp, zh], axis=2)
    xp = np.ascontiguousarray(xp)
    out = kernels.conv2d_forward(xp, w.data, bias.data, sh, sw)
    wd = w.data
    kh, kw = wd.shape[2], wd.shape[3]
    hp, wp = xp.shape[2], xp.shape[3]

    def vjp(g):
        g = np.ascontiguousarray(g)
        gxp = kernels.conv2d_backward_input(wd, g, hp, wp, sh, sw)
        gw = kernels.conv2d_backward_weight(xp, g, kh, kw, sh, sw)
        gb = g.sum(axis=(0, 2, 3))
        gx = gxp[:, :, ph:ph + h, pw:pw + wid].copy()
        if pw > 0 and wrap:
            gx[:, :, :, wid - pw:] += gxp[:, :, ph:ph + h, :pw]
            gx[:, :, :, :pw] += gxp[:, :, ph:ph + h, pw + wid:]
        return gx, gw, gb

    return _record(out, (x, w, bias), vjp)


def maxpool2d(x, k):
    """Non-overlapping k x k max pooling; ties route to the first maximum."""
    x = _wrap(x)
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"maxpool2d: ({h}, {w}) not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(b, c, ho, wo, k * k)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        return (gf.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, h, w),)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# finite-difference verification


def _rel_err(analytic, fd):
    return abs(analytic - fd) / max(1.0, abs(fd))


def grad_check(fn, wrt, eps=1e-6, max_coords=None, rng=None):
    """Compare analytic gradients of ``fn()`` against central differences.

    fn must rebuild its graph from scratch on every call, return a scalar
    Tensor, and be deterministic (freeze any noise).  Perturbs every
    coordinate of every tensor in ``wrt``, or a random subset of
    ``max_coords`` per tensor when given.  Returns the max relative error
    |analytic - fd| / max(1, |fd|).
    """
    for t in wrt:
        t.zero_grad()
    with Tape() as tape:
        out = fn()
        tape.backward(out)
    analytic = [None if t.grad is None else t.grad.copy() for t in wrt]
    worst = 0.0
    for t, g in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = range(n)
        gflat = None if g is None else g.reshape(-1)
        for cidx in coords:
            old = flat[cidx]
            flat[cidx] = old + eps
            f_hi = float(fn().data)
            flat[cidx] = old - eps
            f_lo = float(fn().data)
            flat[cidx] = old
            fd = (f_hi - f_lo) / (2.0 * eps)
            an = 0.0 if gflat is None else float(gflat[cidx])
            worst = max(worst, _rel_err(an, fd))
    return worst


def grad_check_directional(fn, wrt, n_dirs=8, eps=1e-5, rng=None):
    """Directional-derivative check across all of ``wrt`` jointly.

    Draws ``n_dirs`` random unit directions in the concatenated parameter
    space and compares the analytic directional derivative (grad . u)
    against a two-point central difference along u.  Returns the max
    relative error.  Much cheaper than coordinate-wise checking when
    ``wrt`` holds many thousands of parameters.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for t in wrt:
        t.zero_grad()
    with Tape() as tape:
        out = fn()
        tape.backward(out)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
             for t in wrt]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(t.data.shape) for t in wrt]
        scale = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / scale for d in dirs]
        an = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        for t, d in zip(wrt, dirs):
            t.data += eps * d
        f_hi = float(fn().data)
        for t, d in zip(wrt, dirs):
            t.data -= 2.0 * eps * d
        f_lo = float(fn().data)
        for t, d in zip(wrt, dirs):
            t.data += eps * d
        fd = (f_hi - f_lo) / (2.0 * eps)
        worst = max(worst, _rel_err(an, fd))
    return worst
