"""Minimal reverse-mode autodiff over numpy arrays.

Every operation carries a hand-derived backward pass; composition happens
through a recorded tape (each output remembers its parents and a closure
that scatters the output gradient back to them). There is no expression
compiler: the op set is small, fixed, and individually verified against
central finite differences (see grad_check).

Gradients accumulate into `Tensor.grad` buffers. The tape is only recorded
while gradients are enabled (see `no_grad`) and at least one input requires
them, so inference-time code pays no graph cost.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only execution)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            raise TypeError("Tensor(data) expects an array, not a Tensor")
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- introspection -----------------------------------------------------
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

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping ----------------------------------------------
    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)  # copy: g may be a view
        else:
            self.grad += g

    def backward(self):
        """Reverse sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def const(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


def _as_tensor(v, like: Tensor) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v, dtype=like.data.dtype))


def _node(data, parents, backward):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(out, (a, b), bw)


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a)
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _node(out, (a, b), bw)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bw)


def neg(a):
    def bw(g):
        if a.requires_grad:
            a._accum(-g)

    return _node(-a.data, (a,), bw)


def matmul(a: Tensor, b: Tensor):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))

    return _node(out, (a, b), bw)


def reshape(a: Tensor, shape):
    old = a.shape

    def bw(g):
        if a.requires_grad:
            a._accum(g.reshape(old))

    return _node(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes):
    inv = np.argsort(axes)

    def bw(g):
        if a.requires_grad:
            a._accum(g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), bw)


def getitem(a: Tensor, idx):
    """Basic indexing (ints/slices); gradient scatters back into the slice."""
    out = a.data[idx]

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += g

    return _node(np.ascontiguousarray(out), (a,), bw)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _node(out, tuple(tensors), bw)


def sum_(a: Tensor, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if a.requires_grad:
            if axis is None:
                a._accum(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(ge, a.shape))

    return _node(out, (a,), bw)


def mean_(a: Tensor, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_max(a: Tensor, axis):
    """Max-reduction; gradient flows to the first argmax along `axis` (ties broken low)."""
    am = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(am, axis), axis=axis).squeeze(axis)

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, np.expand_dims(am, axis), np.expand_dims(g, axis), axis=axis)
            a._accum(buf)

    return _node(out, (a,), bw)


def relu(a: Tensor):
    mask = a.data > 0
    out = a.data * mask

    def bw(g):
        if a.requires_grad:
            a._accum(g * mask)

    return _node(out, (a,), bw)


def sigmoid(a: Tensor):
    out = _sigmoid_np(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * out * (1.0 - out))

    return _node(out, (a,), bw)


def tanh(a: Tensor):
    out = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * (1.0 - out * out))

    return _node(out, (a,), bw)


def _sigmoid_np(x):
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Dense / normalization blocks
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor):
    """y = x @ w + b over the last axis: (..., din) -> (..., dout)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine shape mismatch: x {x.shape} vs w {w.shape}")
    out = x.data @ w.data + b.data

    def bw(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            w._accum(x2.T @ g2)
        if b.requires_grad:
            b._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _node(out, (x, w, b), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError("layer_norm parameter shapes must match the last axis of x")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gamma.data
            t1 = gy.mean(axis=-1, keepdims=True)
            t2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accum((gy - t1 - xhat * t2) * inv)

    return _node(out, (x, gamma, beta), bw)


def softmax(x: Tensor, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            x._accum(s * (g - dot))

    return _node(s, (x,), bw)


def masked_softmax(x: Tensor, mask, axis=-1):
    """Softmax over `axis` restricted to entries where `mask` is True.

    Masked entries get exactly zero weight and zero gradient; rows with no
    valid entry produce an all-zero row (callers handle those separately).
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    neg = np.where(m, x.data, -np.inf)
    mx = neg.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(np.where(m, x.data - mx, 0.0)) * m
    denom = e.sum(axis=axis, keepdims=True)
    s = e / np.where(denom > 0, denom, 1.0)  # all-masked rows stay exactly zero

    def bw(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            x._accum(s * (g - dot))

    return _node(s, (x,), bw)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, pad=1):
    """2-D convolution, channels-last: x (S, H, W, Cin) -> (S, Ho, Wo, Cout).

    w is (kh, kw, Cin, Cout). Implemented as im2col + one GEMM; the
    backward scatters through a small per-tap loop instead of a generic
    scatter-add, which keeps it vectorized.
    """
    S, H, W, Cin = x.shape
    kh, kw, wcin, Cout = w.shape
    if wcin != Cin:
        raise ValueError(f"conv2d channel mismatch: x has {Cin}, w expects {wcin}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]          # (S, Ho, Wo, Cin, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(S * Ho * Wo, kh * kw * Cin)
    wflat = w.data.reshape(kh * kw * Cin, Cout)
    out = (cols @ wflat + b.data).reshape(S, Ho, Wo, Cout)

    def bw(g):
        g2 = g.reshape(-1, Cout)
        if w.requires_grad:
            w._accum((cols.T @ g2).reshape(w.shape))
        if b.requires_grad:
            b._accum(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wflat.T).reshape(S, Ho, Wo, kh, kw, Cin)
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, ki:ki + Ho * stride:stride, kj:kj + Wo * stride:stride, :] += gcols[:, :, :, ki, kj, :]
            x._accum(gxp[:, pad:pad + H, pad:pad + W, :])

    return _node(out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_sample(fm: Tensor, uv: Tensor):
    """Sample feature map(s) at normalized coordinates.

    fm: (H, W, C) with uv (M, 2), or batched fm (S, H, W, C) with uv (S, M, 2).
    uv lives in [0, 1]^2 and maps onto the pixel lattice [0, W-1] x [0, H-1];
    coordinates outside [0, 1]^2 return zeros and receive zero gradient
    (both for the map and for uv). Gradients flow to fm values and to uv.
    """
    batched = fm.ndim == 4
    if not batched and fm.ndim != 3:
        raise ValueError(f"feature map must be (H,W,C) or (S,H,W,C), got {fm.shape}")
    if fm.size == 0:
        raise ValueError("feature map is empty")
    fmd = fm.data if batched else fm.data[None]
    uvd = uv.data if batched else uv.data[None]
    S, H, W, C = fmd.shape
    M = uvd.shape[-2]
    uvf = uvd.reshape(S, M, 2)

    u, v = uvf[..., 0], uvf[..., 1]
    inb = (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (v <= 1.0)
    x = np.clip(u, 0.0, 1.0) * (W - 1)
    y = np.clip(v, 0.0, 1.0) * (H - 1)
    # Keep fractional parts in the map dtype: an int64 mix would silently
    # promote everything downstream to float64.
    x0f = np.clip(np.floor(x), 0, max(W - 2, 0))
    y0f = np.clip(np.floor(y), 0, max(H - 2, 0))
    fx = (x - x0f).astype(fmd.dtype, copy=False)
    fy = (y - y0f).astype(fmd.dtype, copy=False)
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)

    flat = fmd.reshape(S * H * W, C)
    base = (np.arange(S, dtype=np.int64) * H * W)[:, None]
    i00 = base + y0 * W + x0
    i01 = i00 + (1 if W > 1 else 0)
    i10 = i00 + (W if H > 1 else 0)
    i11 = i10 + (1 if W > 1 else 0)
    f00, f01 = flat[i00], flat[i01]
    f10, f11 = flat[i10], flat[i11]
    w00 = ((1 - fx) * (1 - fy))[..., None]
    w01 = (fx * (1 - fy))[..., None]
    w10 = ((1 - fx) * fy)[..., None]
    w11 = (fx * fy)[..., None]
    inbf = inb[..., None].astype(fmd.dtype)
    out = (w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11) * inbf
    if not batched:
        out = out[0]

    def bw(g):
        gm = (g if batched else g[None]) * inbf
        if fm.requires_grad:
            gflat = np.zeros_like(flat)
            idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
            vals = np.concatenate(
                [
                    (w00 * gm).reshape(-1, C),
                    (w01 * gm).reshape(-1, C),
                    (w10 * gm).reshape(-1, C),
                    (w11 * gm).reshape(-1, C),
                ]
            )
            np.add.at(gflat, idx, vals)
            fm._accum(gflat.reshape(fm.shape))
        if uv.requires_grad:
            dx = ((1 - fy)[..., None] * (f01 - f00) + fy[..., None] * (f11 - f10))
            dy = ((1 - fx)[..., None] * (f10 - f00) + fx[..., None] * (f11 - f01))
            gu = (gm * dx).sum(axis=-1) * (W - 1)
            gv = (gm * dy).sum(axis=-1) * (H - 1)
            guv = np.stack([gu, gv], axis=-1)
            uv._accum(guv if batched else guv[0])

    return _node(out, (fm, uv), bw)


def deform_attend(values: Tensor, uv: Tensor, weights: Tensor, heads: int) -> Tensor:
    """Fused weighted bilinear read: the deformable-attention inner loop.

    values (S, H, W, C); uv (S, Q, heads, P, 2) normalized; weights
    (S, Q, heads, P) already normalized per (s, q, head). Per head the
    output channel block is sum_p weights * bilinear(values_block, uv).
    Returns (S, Q, C).

    Equivalent to composing bilinear_sample / mul / sum, but the backward
    into the feature maps goes through per-sample interpolation matrices
    and dense GEMMs instead of a giant scatter-add, which is what makes
    training throughput acceptable. Gradients flow to all three inputs.
    """
    S, H, W, C = values.shape
    _, Q, Hh, P, _ = uv.shape
    if C % heads or Hh != heads:
        raise ValueError(f"deform_attend: C={C} heads={heads} uv head dim {Hh}")
    Ch = C // heads
    dt = values.data.dtype

    u, v = uv.data[..., 0], uv.data[..., 1]
    inb = (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (v <= 1.0)
    x = np.clip(u, 0.0, 1.0) * (W - 1)
    y = np.clip(v, 0.0, 1.0) * (H - 1)
    x0f = np.clip(np.floor(x), 0, max(W - 2, 0))
    y0f = np.clip(np.floor(y), 0, max(H - 2, 0))
    fx = (x - x0f).astype(dt, copy=False)
    fy = (y - y0f).astype(dt, copy=False)
    cell = (y0f.astype(np.int64) * W + x0f.astype(np.int64))  # (S, Q, Hh, P)
    inbf = inb.astype(dt)
    w00 = (1 - fx) * (1 - fy) * inbf
    w01 = fx * (1 - fy) * inbf
    w10 = (1 - fx) * fy * inbf
    w11 = fx * fy * inbf

    off01 = 1 if W > 1 else 0
    off10 = W if H > 1 else 0
    off11 = off10 + off01
    vflat = values.data.reshape(S, H * W, C)
    sidx = np.arange(S, dtype=np.int64)[:, None, None]
    f00 = np.empty((S, Q, Hh, P, Ch), dtype=dt)
    f01, f10, f11 = np.empty_like(f00), np.empty_like(f00), np.empty_like(f00)
    for h in range(Hh):
        vh = np.ascontiguousarray(vflat[:, :, h * Ch:(h + 1) * Ch])
        ch = cell[:, :, h]
        f00[:, :, h] = vh[sidx, ch]
        f01[:, :, h] = vh[sidx, ch + off01]
        f10[:, :, h] = vh[sidx, ch + off10]
        f11[:, :, h] = vh[sidx, ch + off11]
    samp = (w00[..., None] * f00 + w01[..., None] * f01
            + w10[..., None] * f10 + w11[..., None] * f11)   # (S, Q, Hh, P, Ch)
    out = (weights.data[..., None] * samp).sum(axis=-2)
    out = np.ascontiguousarray(out).reshape(S, Q, C)

    def bw(g):
        gh = g.reshape(S, Q, Hh, Ch)
        if weights.requires_grad:
            weights._accum((samp * gh[:, :, :, None, :]).sum(axis=-1))
        wts = weights.data
        if values.requires_grad:
            # Interpolation matrices folded with the attention weights:
            # B[s, h, q, bin] = sum_p w_attn * w_corner. Then per (s, h):
            # d vblock = B^T @ g_h, a (HW x Q) @ (Q x Ch) GEMM.
            B = np.zeros((S, Hh, Q, H * W), dtype=dt)
            Bflat = B.reshape(-1)
            row = ((np.arange(S, dtype=np.int64)[:, None, None, None] * Hh
                    + np.arange(Hh, dtype=np.int64)[None, None, :, None]) * Q
                   + np.arange(Q, dtype=np.int64)[None, :, None, None]) * (H * W)
            for corner_w, off in ((w00, 0), (w01, off01), (w10, off10), (w11, off11)):
                np.add.at(Bflat, (row + cell + off).ravel(), (wts * corner_w).ravel())
            gv = np.matmul(B.transpose(0, 1, 3, 2), gh.transpose(0, 2, 1, 3))  # (S, Hh, HW, Ch)
            values._accum(np.ascontiguousarray(gv.transpose(0, 2, 1, 3)).reshape(values.shape))
        if uv.requires_grad:
            coef = wts[..., None] * gh[:, :, :, None, :]             # (S, Q, Hh, P, Ch)
            dx = (1 - fy)[..., None] * (f01 - f00) + fy[..., None] * (f11 - f10)
            dy = (1 - fx)[..., None] * (f10 - f00) + fx[..., None] * (f11 - f01)
            gu = (coef * dx).sum(-1) * ((W - 1) * inbf)
            gvv = (coef * dy).sum(-1) * ((H - 1) * inbf)
            uv._accum(np.stack([gu, gvv], axis=-1))

    return _node(out, (values, uv, weights), bw)


# ---------------------------------------------------------------------------
# Recurrent / pooling blocks
# ---------------------------------------------------------------------------

def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor):
    """One standard LSTM step. w: (din + dh, 4*dh), gate order [i, f, g, o]."""
    dh = h.shape[-1]
    z = affine(concat([x, h], axis=-1), w, b)
    i = sigmoid(z[..., 0 * dh:1 * dh])
    f = sigmoid(z[..., 1 * dh:2 * dh])
    g = tanh(z[..., 2 * dh:3 * dh])
    o = sigmoid(z[..., 3 * dh:4 * dh])
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    return h2, c2


def max_pool_set(tokens: Tensor):
    """Elementwise max over the token axis: (..., I, C) -> (..., C)."""
    return reduce_max(tokens, axis=-2)


# ---------------------------------------------------------------------------
# Losses (mean-reduced, numerically stabilized logit forms)
# ---------------------------------------------------------------------------

def _check_same_shape(a, b, name):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def mse(pred: Tensor, target):
    target = _as_tensor(target, pred)
    _check_same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = max(pred.size, 1)
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def bw(g):
        if pred.requires_grad:
            pred._accum(g * 2.0 * diff / n)
        if target.requires_grad:
            target._accum(g * -2.0 * diff / n)

    return _node(out, (pred, target), bw)


def l1(pred: Tensor, target):
    target = _as_tensor(target, pred)
    _check_same_shape(pred, target, "l1")
    diff = pred.data - target.data
    n = max(pred.size, 1)
    out = np.asarray(np.abs(diff).sum() / n, dtype=pred.dtype)

    def bw(g):
        s = np.sign(diff) / n
        if pred.requires_grad:
            pred._accum(g * s)
        if target.requires_grad:
            target._accum(g * -s)

    return _node(out, (pred, target), bw)


def masked_l1(pred: Tensor, target, mask):
    """Mean absolute error over the elements selected by a constant mask.

    The mask broadcasts against pred; unselected elements contribute
    neither loss nor gradient. An all-empty mask yields exactly 0.
    """
    target = _as_tensor(target, pred)
    _check_same_shape(pred, target, "masked_l1")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape).astype(pred.dtype)
    denom = max(float(m.sum()), 1.0)
    diff = (pred.data - target.data) * m
    out = np.asarray(np.abs(diff).sum() / denom, dtype=pred.dtype)

    def bw(g):
        s = np.sign(diff) * m / denom
        if pred.requires_grad:
            pred._accum(g * s)
        if target.requires_grad:
            target._accum(g * -s)

    return _node(out, (pred, target), bw)


def bce_logits(logit: Tensor, label):
    """Binary cross-entropy on raw logits, mean-reduced. Labels in [0, 1]."""
    label = _as_tensor(label, logit)
    _check_same_shape(logit, label, "bce_logits")
    z, y = logit.data, label.data
    n = max(logit.size, 1)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.sum() / n, dtype=logit.dtype)

    def bw(g):
        if logit.requires_grad:
            logit._accum(g * (_sigmoid_np(z) - y) / n)
        if label.requires_grad:
            label._accum(g * -z / n)

    return _node(out, (logit, label), bw)


def cross_entropy_logits(logits: Tensor, labels):
    """Categorical cross-entropy over the last axis; integer labels; mean-reduced."""
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy_logits: labels {lab.shape} vs logits {logits.shape}")
    z = logits.data
    mx = z.max(axis=-1, keepdims=True)
    e = np.exp(z - mx)
    denom = e.sum(axis=-1, keepdims=True)
    logp = z - mx - np.log(denom)
    n = max(lab.size, 1)
    picked = np.take_along_axis(logp, lab[..., None], axis=-1)[..., 0]
    out = np.asarray(-picked.sum() / n, dtype=logits.dtype)

    def bw(g):
        if logits.requires_grad:
            p = e / denom
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
            logits._accum(g * (p - onehot) / n)

    return _node(out, (logits,), bw)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, inputs, eps=1e-5, seed=0):
    """Max relative error between analytic and central-difference gradients.

    `fn(*inputs)` may return a tensor of any shape; a fixed random
    projection reduces it to a scalar so one backward pass yields all
    analytic gradients. Every coordinate of every input is then perturbed
    by +-eps. The error is max over coordinates of
    |a - n| / max(|a|, |n|, 1e-8).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.zero_grad()
        t.requires_grad = True

    out = fn(*inputs)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(out.shape)

    def project(o):
        return float((o.data * w).sum())

    loss = sum_(mul(out, const(w)))
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = a.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = project(fn(*inputs))
                flat[j] = orig - eps
                fm = project(fn(*inputs))
                flat[j] = orig
                num = (fp - fm) / (2.0 * eps)
                rel = abs(aflat[j] - num) / max(abs(aflat[j]), abs(num), 1e-8)
                worst = max(worst, rel)
    for t in inputs:
        t.zero_grad()
    return worst
