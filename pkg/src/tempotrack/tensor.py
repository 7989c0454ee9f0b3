"""Dense float arrays with reverse-mode automatic differentiation.

Everything is backed by contiguous row-major numpy buffers. Ops record
onto an append-only graph (tape); backward walks the tape in strict
reverse insertion order, so gradient accumulation order is fixed and
results are reproducible. One graph per training step; use
``fresh_graph()`` around a step and ``no_grad()`` for inference.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

NEG_INF_LOGIT = -1e9  # additive mask value; exp() underflows to exactly 0.0


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class _Node:
    __slots__ = ("out", "parents", "backfn")

    def __init__(self, out, parents, backfn):
        self.out = out
        self.parents = parents
        self.backfn = backfn


class Graph:
    """Append-only op record. Insertion order is the topological order:
    every parent is recorded before its consumer, and backward visits
    nodes in strict reverse insertion order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        """Free saved activations. Call after backward when the step is done."""
        self.nodes.clear()

    def zero_grads(self):
        """Drop every grad buffer touched by this graph (outputs and parents)."""
        for node in self.nodes:
            node.out.grad = None
            for p in node.parents:
                p.grad = None


_GRAPH_STACK = [Graph()]
_GRAD_ENABLED = [True]


def active_graph() -> Graph:
    return _GRAPH_STACK[-1]


@contextlib.contextmanager
def fresh_graph():
    """Push a new recording graph; clear it on exit. One per training step."""
    g = Graph()
    _GRAPH_STACK.append(g)
    try:
        yield g
    finally:
        _GRAPH_STACK.pop()
        g.clear()


@contextlib.contextmanager
def no_grad():
    """Disable recording: ops run as plain numpy, outputs never require grad."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """n-d float32/float64 array plus an optional grad buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the functional forms below do the work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __getitem__(self, idx):
        return getitem(self, idx)


def param(data, dtype=np.float32) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out(data, parents, backfn) -> Tensor:
    """Wrap op output; record a node if grad is enabled and any parent needs it."""
    req = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        active_graph().nodes.append(_Node(out, parents, backfn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root: Tensor):
    """Populate grads of requires_grad leaves reachable from a scalar root.

    Walks the active graph in reverse insertion order. Repeated calls
    accumulate into leaf grads unless they are zeroed in between.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    nodes = active_graph().nodes
    produced = {id(n.out) for n in nodes}
    pending = {id(root): np.ones_like(root.data)}
    if id(root) not in produced and root.requires_grad:
        g = pending[id(root)]
        root.grad = g if root.grad is None else root.grad + g
        return
    owned = set()  # pending buffers we allocated ourselves (safe for in-place +=)
    for node in reversed(nodes):
        g_out = pending.pop(id(node.out), None)
        if g_out is None:
            continue
        owned.discard(id(node.out))
        grads = node.backfn(g_out)
        for p, gp in zip(node.parents, grads):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in produced:
                if key not in pending:
                    pending[key] = gp
                elif key in owned:
                    np.add(pending[key], gp, out=pending[key])
                else:
                    pending[key] = pending[key] + gp
                    owned.add(key)
            else:
                p.grad = gp if p.grad is None else p.grad + gp


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backfn(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _out(data, (a, b), backfn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backfn(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = -_unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _out(data, (a, b), backfn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def backfn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _out(data, (a, b), backfn)


def scale(x, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)

    def backfn(g):
        return (g * s,)

    return _out(x.data * s, (x,), backfn)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    data = np.ascontiguousarray(x.data.reshape(shape))  # copies: no strided views

    def backfn(g):
        return (g.reshape(old),)

    return _out(data, (x,), backfn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def backfn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _out(data, (x,), backfn)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing with scatter-add backward."""
    data = np.ascontiguousarray(x.data[idx])
    shape = x.data.shape

    def backfn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _out(data, (x,), backfn)


def stack(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backfn(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.ascontiguousarray(np.squeeze(p, axis=axis)) for p in parts)

    return _out(data, tuple(tensors), backfn)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def backfn(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _out(np.asarray(data), (x,), backfn)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b), x: (..., Cin), w: (Cin, Cout), b: (Cout,)."""
    cin = x.data.shape[-1]
    if w.data.ndim != 2 or w.data.shape[0] != cin:
        raise ShapeError(
            f"linear: last axis of x is {cin} but weight is {w.data.shape} (axis 0 must match)"
        )
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    y2 = x2 @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"linear: bias shape {b.data.shape} != ({w.data.shape[1]},)")
        y2 += b.data
    y = y2.reshape(*lead, w.data.shape[1])
    wd = w.data
    parents = (x, w) if b is None else (x, w, b)

    def backfn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(x.data.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        out = [gx, gw]
        if b is not None:
            out.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(out)

    return _out(y, parents, backfn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul (..., m, k) @ (..., k, n); leading dims must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands need ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner axes differ, {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(
            f"matmul: batch dims differ, {a.data.shape[:-2]} vs {b.data.shape[:-2]}"
        )
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def backfn(g):
        ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
        gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _out(data, (a, b), backfn)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def _softmax_core(z: np.ndarray, axis: int) -> np.ndarray:
    """In-place softmax of a freshly allocated logit buffer."""
    z -= z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def _softmax_backfn(y, tau, axis):
    def backfn(g):
        gy = g * y
        dot = gy.sum(axis=axis, keepdims=True)
        out = g - dot
        out *= y
        if tau != 1.0:
            out *= tau
        return (out,)

    return backfn


def softmax(x: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """softmax(tau * x) along `axis`; output sums to 1 along that axis."""
    y = _softmax_core(x.data * tau, axis)
    return _out(y, (x,), _softmax_backfn(y, tau, axis))


def masked_softmax(x: Tensor, additive_mask: np.ndarray, tau: float = 1.0, axis: int = -1) -> Tensor:
    """softmax(tau * x + mask). A mask entry of NEG_INF_LOGIT removes the
    position exactly: its weight underflows to 0 and valid weights sum to 1."""
    z = x.data * tau
    z += additive_mask
    y = _softmax_core(z, axis)
    return _out(y, (x,), _softmax_backfn(y, tau, axis))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis. Zero-variance input maps to zeros
    before the affine part (eps keeps the denominator finite)."""
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"layernorm: affine params must be ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = np.square(xhat).mean(axis=-1, keepdims=True)
    var += eps
    inv = 1.0 / np.sqrt(var)
    xhat *= inv
    y = xhat * gamma.data
    y += beta.data
    gd = gamma.data

    def backfn(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        if x.requires_grad:
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = dxhat
            gx -= m1
            gx -= xhat * m2
            gx *= inv
        else:
            gx = None
        return gx, ggamma, gbeta

    return _out(y, (x, gamma, beta), backfn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    xd = x.data
    t = xd * xd
    t *= 0.044715
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)  # t = tanh(c * (x + 0.044715 x^3))
    y = t + 1.0
    y *= xd
    y *= 0.5

    def backfn(g):
        du = xd * xd
        du *= 3 * 0.044715
        du += 1.0
        du *= _GELU_C
        du *= 1.0 - t * t
        du *= xd
        du += t
        du += 1.0
        du *= 0.5
        du *= g  # dy/dx = 0.5 * ((1 + t) + x (1 - t^2) c (1 + 3a x^2))
        return (du,)

    return _out(y, (x,), backfn)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Unit-normalize along `axis`; all-zero vectors map to zero (no NaN)."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(n, eps)
    y = x.data / safe
    live = n > eps

    def backfn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        gx = (g - y * dot) / safe
        return (np.where(live, gx, 0.0),)

    return _out(y, (x,), backfn)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _promote_nhwc(x: Tensor):
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"conv input must be (H,W,C) or (B,H,W,C), got {x.data.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. x: (H,W,Cin) or (B,H,W,Cin); w: (kh,kw,Cin,Cout).

    kh, kw must be odd. Output extent is floor((H + 2*padding - kh)/stride) + 1.
    """
    xd, squeeze = _promote_nhwc(x)
    kh, kw, cin_w, cout = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got ({kh},{kw})")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    B, H, W, cin = xd.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d: input channel axis is {cin} but kernel expects {cin_w}"
        )
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel ({kh},{kw}) larger than padded extents "
            f"({H + 2 * padding},{W + 2 * padding})"
        )
    # floor semantics: trailing rows/cols that do not fit a full stride step
    # are ignored, as in mainstream conv implementations
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = np.pad(xd, [(0, 0), (padding, padding), (padding, padding), (0, 0)])
    y = np.zeros((B, Ho, Wo, cout), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
            y += tap @ w.data[i, j]
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
        y = y + b.data
    wd = w.data
    parents = (x, w) if b is None else (x, w, b)

    def backfn(g):
        if squeeze:
            g = g[None] if g.ndim == 3 else g
        gx = gw = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += g @ wd[i, j].T
            gx = np.ascontiguousarray(dxp[:, padding : padding + H, padding : padding + W, :])
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    tap = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
                    gw[i, j] = np.tensordot(tap, g, axes=([0, 1, 2], [0, 1, 2]))
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 1, 2)) if b.requires_grad else None)
        return tuple(out)

    return _out(y[0] if squeeze else y, parents, backfn)


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Fractionally-strided convolution, the adjoint of conv2d on the same
    geometry. x: (H,W,Cin) or (B,H,W,Cin); w: (kh,kw,Cin,Cout).

    Hout = (H-1)*stride + kh - 2*padding + output_padding.
    """
    xd, squeeze = _promote_nhwc(x)
    kh, kw, cin_w, cout = w.data.shape
    B, H, W, cin = xd.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv_transpose2d: input channel axis is {cin} but kernel expects {cin_w}"
        )
    if not 0 <= output_padding < max(stride, 1):
        raise ShapeError("conv_transpose2d: output_padding must be in [0, stride)")
    Hf = (H - 1) * stride + kh + output_padding
    Wf = (W - 1) * stride + kw + output_padding
    Ho = Hf - 2 * padding
    Wo = Wf - 2 * padding
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv_transpose2d: padding larger than produced extent")
    yf = np.zeros((B, Hf, Wf, cout), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            yf[:, i : i + stride * H : stride, j : j + stride * W : stride, :] += xd @ w.data[i, j]
    y = np.ascontiguousarray(yf[:, padding : padding + Ho, padding : padding + Wo, :])
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeError(f"conv_transpose2d: bias shape {b.data.shape} != ({cout},)")
        y = y + b.data
    wd = w.data
    parents = (x, w) if b is None else (x, w, b)

    def backfn(g):
        if squeeze:
            g = g[None] if g.ndim == 3 else g
        gf = np.zeros((B, Hf, Wf, cout), dtype=g.dtype)
        gf[:, padding : padding + Ho, padding : padding + Wo, :] = g
        gx = gw = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    gx += gf[:, i : i + stride * H : stride, j : j + stride * W : stride, :] @ wd[i, j].T
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    tap = gf[:, i : i + stride * H : stride, j : j + stride * W : stride, :]
                    gw[i, j] = np.tensordot(xd, tap, axes=([0, 1, 2], [0, 1, 2]))
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 1, 2)) if b.requires_grad else None)
        return tuple(out)

    return _out(y[0] if squeeze else y, parents, backfn)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, pad_t: int = 0, pad_s: int = 0) -> Tensor:
    """Stride-1 3D convolution over (T, H, W, Cin) with w (kt, kh, kw, Cin, Cout).

    Temporal axis zero-padded by pad_t, spatial axes by pad_s.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv3d expects (T,H,W,C), got {x.data.shape}")
    kt, kh, kw, cin_w, cout = w.data.shape
    T, H, W, cin = x.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d: input channel axis is {cin} but kernel expects {cin_w}")
    To = T + 2 * pad_t - kt + 1
    Ho = H + 2 * pad_s - kh + 1
    Wo = W + 2 * pad_s - kw + 1
    if To <= 0 or Ho <= 0 or Wo <= 0:
        raise ShapeError("conv3d: kernel larger than padded input")
    xp = np.pad(x.data, [(pad_t, pad_t), (pad_s, pad_s), (pad_s, pad_s), (0, 0)])
    y = np.zeros((To, Ho, Wo, cout), dtype=x.data.dtype)
    for a in range(kt):
        for i in range(kh):
            for j in range(kw):
                y += xp[a : a + To, i : i + Ho, j : j + Wo, :] @ w.data[a, i, j]
    if b is not None:
        y = y + b.data
    wd = w.data
    parents = (x, w) if b is None else (x, w, b)

    def backfn(g):
        gx = gw = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for a in range(kt):
                for i in range(kh):
                    for j in range(kw):
                        dxp[a : a + To, i : i + Ho, j : j + Wo, :] += g @ wd[a, i, j].T
            gx = np.ascontiguousarray(
                dxp[pad_t : pad_t + T, pad_s : pad_s + H, pad_s : pad_s + W, :]
            )
        if w.requires_grad:
            gw = np.zeros_like(wd)
            for a in range(kt):
                for i in range(kh):
                    for j in range(kw):
                        tap = xp[a : a + To, i : i + Ho, j : j + Wo, :]
                        gw[a, i, j] = np.tensordot(tap, g, axes=([0, 1, 2], [0, 1, 2]))
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 1, 2)) if b.requires_grad else None)
        return tuple(out)

    return _out(y, parents, backfn)


def dwconv1d_time(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Depthwise temporal convolution: x (T,H,W,C), w (N,C), zero-padded so
    the output keeps T frames. Each channel/location filtered independently."""
    if x.data.ndim != 4:
        raise ShapeError(f"dwconv1d_time expects (T,H,W,C), got {x.data.shape}")
    N, cw = w.data.shape
    T, H, W, c = x.data.shape
    if c != cw:
        raise ShapeError(f"dwconv1d_time: channel axis is {c} but kernel expects {cw}")
    if N % 2 == 0:
        raise ShapeError(f"dwconv1d_time: kernel must be odd, got {N}")
    k = (N - 1) // 2
    xp = np.pad(x.data, [(k, k), (0, 0), (0, 0), (0, 0)])
    y = np.zeros_like(x.data)
    for n in range(N):
        y += xp[n : n + T] * w.data[n]
    if b is not None:
        y = y + b.data
    wd = w.data
    parents = (x, w) if b is None else (x, w, b)

    def backfn(g):
        gx = gw = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for n in range(N):
                dxp[n : n + T] += g * wd[n]
            gx = np.ascontiguousarray(dxp[k : k + T])
        if w.requires_grad:
            gw = np.zeros_like(wd)
            for n in range(N):
                gw[n] = (xp[n : n + T] * g).sum(axis=(0, 1, 2))
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 1, 2)) if b.requires_grad else None)
        return tuple(out)

    return _out(y, parents, backfn)


def band_from_offsets(p: Tensor, size: int) -> Tensor:
    """Spread per-offset values p (length 2k+1) onto the diagonals of a
    (size, size) matrix: out[i, j] = p[j - i + k] for |i - j| <= k, else 0."""
    n = p.data.shape[0]
    if p.data.ndim != 1 or n % 2 == 0:
        raise ShapeError(f"band_from_offsets expects odd-length vector, got {p.data.shape}")
    k = (n - 1) // 2
    out = np.zeros((size, size), dtype=p.data.dtype)
    ii, jj = np.indices((size, size))
    off = jj - ii
    valid = np.abs(off) <= k
    out[valid] = p.data[off[valid] + k]

    def backfn(g):
        gp = np.zeros_like(p.data)
        np.add.at(gp, off[valid] + k, g[valid])
        return (gp,)

    return _out(out, (p,), backfn)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _bilinear_corners(xs, ys, Hp, Wp):
    xs = np.clip(xs, 0.0, Wp - 1.0)
    ys = np.clip(ys, 0.0, Hp - 1.0)
    x0 = np.clip(np.floor(xs), 0, max(Wp - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, max(Hp - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, Wp - 1)
    y1 = np.minimum(y0 + 1, Hp - 1)
    fx = xs - x0
    fy = ys - y0
    return x0, x1, y0, y1, fx, fy


def bilinear_sample2d(feature: Tensor, x: float, y: float) -> Tensor:
    """Sample a (Hp,Wp,C) grid at real coordinates, clamped to the border.

    Differentiable w.r.t. the feature values; (x, y) are plain numbers.
    """
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ValueError(f"bilinear_sample2d: coordinates must be finite, got ({x}, {y})")
    if feature.data.ndim != 3:
        raise ShapeError(f"bilinear_sample2d expects (Hp,Wp,C), got {feature.data.shape}")
    Hp, Wp, _ = feature.data.shape
    fd = feature.data
    x0, x1, y0, y1, fx, fy = _bilinear_corners(np.float64(x), np.float64(y), Hp, Wp)
    w00 = fd.dtype.type((1 - fx) * (1 - fy))
    w01 = fd.dtype.type(fx * (1 - fy))
    w10 = fd.dtype.type((1 - fx) * fy)
    w11 = fd.dtype.type(fx * fy)
    out = w00 * fd[y0, x0] + w01 * fd[y0, x1] + w10 * fd[y1, x0] + w11 * fd[y1, x1]

    def backfn(g):
        gf = np.zeros_like(fd)
        gf[y0, x0] += w00 * g
        gf[y0, x1] += w01 * g
        gf[y1, x0] += w10 * g
        gf[y1, x1] += w11 * g
        return (gf,)

    return _out(out.astype(fd.dtype), (feature,), backfn)


def bilinear_gather(features: Tensor, t_idx, xs, ys) -> Tensor:
    """Batched bilinear sampling from a (T,Hp,Wp,C) stack.

    t_idx, xs, ys: arrays of shape (N,). Returns (N, C). Coordinates are
    clamped to the grid border; gradients scatter-add into the stack.
    """
    if features.data.ndim != 4:
        raise ShapeError(f"bilinear_gather expects (T,Hp,Wp,C), got {features.data.shape}")
    t_idx = np.asarray(t_idx, dtype=np.int64)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise ValueError("bilinear_gather: coordinates must be finite")
    T, Hp, Wp, C = features.data.shape
    if (t_idx < 0).any() or (t_idx >= T).any():
        raise ValueError("bilinear_gather: frame index out of range")
    x0, x1, y0, y1, fx, fy = _bilinear_corners(xs, ys, Hp, Wp)
    fd = features.data
    w00 = ((1 - fx) * (1 - fy))[:, None].astype(fd.dtype)
    w01 = (fx * (1 - fy))[:, None].astype(fd.dtype)
    w10 = ((1 - fx) * fy)[:, None].astype(fd.dtype)
    w11 = (fx * fy)[:, None].astype(fd.dtype)
    out = (
        w00 * fd[t_idx, y0, x0]
        + w01 * fd[t_idx, y0, x1]
        + w10 * fd[t_idx, y1, x0]
        + w11 * fd[t_idx, y1, x1]
    )

    def backfn(g):
        gf = np.zeros_like(fd)
        np.add.at(gf, (t_idx, y0, x0), w00 * g)
        np.add.at(gf, (t_idx, y0, x1), w01 * g)
        np.add.at(gf, (t_idx, y1, x0), w10 * g)
        np.add.at(gf, (t_idx, y1, x1), w11 * g)
        return (gf,)

    return _out(out.astype(fd.dtype), (features,), backfn)


# ---------------------------------------------------------------------------
# tracking loss
# ---------------------------------------------------------------------------

def huber_track_loss(preds: Tensor, gts: np.ndarray, visible: np.ndarray, delta: float) -> Tensor:
    """Visibility-masked Huber loss over predicted tracks.

    preds: (Q, T, 2) predicted positions, gts: (Q, T, 2) targets, visible:
    (Q, T) bools. Per track: mean Huber over visible frames (0 if none);
    result is the mean over the Q tracks. Occluded frames get exactly zero
    gradient.
    """
    if preds.data.ndim != 3 or preds.data.shape[-1] != 2:
        raise ShapeError(f"huber_track_loss expects (Q,T,2) preds, got {preds.data.shape}")
    gts = np.asarray(gts, dtype=preds.data.dtype)
    if gts.shape != preds.data.shape:
        raise ShapeError(f"huber_track_loss: target shape {gts.shape} != {preds.data.shape}")
    visible = np.asarray(visible, dtype=bool)
    if visible.shape != preds.data.shape[:2]:
        raise ShapeError(f"huber_track_loss: visibility shape {visible.shape} != {preds.data.shape[:2]}")
    if not np.isfinite(gts).all() or not np.isfinite(preds.data).all():
        raise ValueError("huber_track_loss: non-finite inputs")
    delta = float(delta)
    if delta <= 0:
        raise ValueError(f"huber_track_loss: delta must be positive, got {delta}")
    Q = preds.data.shape[0]
    d = preds.data - gts
    e = np.sqrt((d * d).sum(axis=-1))
    quad = e <= delta
    per = np.where(quad, 0.5 * e * e, delta * (e - 0.5 * delta))
    v = visible.astype(preds.data.dtype)
    denom = np.maximum(v.sum(axis=1), 1.0)
    loss = ((per * v).sum(axis=1) / denom).mean()

    def backfn(g):
        slope = np.where(quad, 1.0, delta / np.maximum(e, 1e-30))
        coef = (v / denom[:, None]) / Q
        return ((float(g) * coef * slope)[..., None] * d,)

    return _out(np.asarray(loss, dtype=preds.data.dtype), (preds,), backfn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic grad of scalar f(x) and central
    finite differences: max |analytic - fd| / max(1, |fd|). Run in float64."""
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    x.zero_grad()
    with fresh_graph():
        out = f(x)
        if out.data.size != 1:
            raise ValueError("grad_check: f must be scalar-valued")
        out.backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2 * eps)
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    return float(err.max())
