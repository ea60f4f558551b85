"""Reverse-mode automatic differentiation over numpy arrays.

The `Tensor` class wraps an ndarray and records enough of the computation
graph to backpropagate gradients from a scalar result. Operations are pure
functions: they never mutate their inputs, so the same graph nodes can be
evaluated from multiple threads. Only optimizer updates write to `.data`,
and those are confined to the training thread.

Layout conventions:
    images / feature maps  (batch, height, width, channels)
    conv kernels           (kh, kw, in_channels, out_channels)
    depthwise kernels      (kh, kw, channels)
    projection matrices    (in_dim, out_dim)
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolationError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An immutable-shaped ndarray with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

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
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- gradient handling ---------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this node. Scalar outputs seed with 1."""
        if grad is None:
            if self.data.size != 1:
                raise ContractViolationError(
                    "backward() without an explicit gradient needs a scalar output, "
                    f"got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b):
    """Coerce both operands; bare Python scalars adopt the peer's dtype.

    np.asarray(0.5) is float64 and would promote a float32 graph, so scalar
    operands are cast to the tensor operand's dtype first.
    """
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and isinstance(a, (int, float)):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result, attaching the tape entry only when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), bw)


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    a = as_tensor(a)
    p = float(p)
    data = a.data**p

    def bw(g):
        if not a.requires_grad:
            return
        if p == 0.0:
            a._accumulate(np.zeros_like(a.data))
        elif p == 1.0:
            a._accumulate(g)
        else:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), bw)


def texp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), bw)


def tlog(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bw)


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            # zero subgradient at 0 keeps downstream-masked paths NaN-free
            scaled = np.asarray(g * 0.5)
            out = np.zeros_like(scaled)
            np.divide(scaled, data, out=out, where=data > 0)
            a._accumulate(out)

    return _make(data, (a,), bw)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) with a constant floor; subgradient 0 on the clamped set."""
    a = as_tensor(a)
    floor = float(floor)
    data = np.maximum(a.data, floor)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > floor))

    return _make(data, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(data, (a,), bw)


# -- reductions and shape ops ----------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tensors, bw)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; supports stacked (batched) operands like np.matmul."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), bw)


def dense(x, w) -> Tensor:
    """Project the last axis: out[..., o] = sum_i x[..., i] * w[i, o]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ContractViolationError(
            f"dense: input channels {x.shape[-1]} != projection rows {w.shape[0]}"
        )
    data = np.tensordot(x.data, w.data, axes=([-1], [0]))

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.tensordot(g, w.data, axes=([-1], [1])))
        if w.requires_grad:
            lead = tuple(range(x.ndim - 1))
            w._accumulate(np.tensordot(x.data, g, axes=(lead, lead)))

    return _make(data, (x, w), bw)


# -- softmax -------------------------------------------------------------------


def softmax_rowwise(logits, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stabilized softmax along `axis`.

    `mask` is an optional boolean array (broadcastable to the logits) marking
    valid entries; invalid entries get probability 0 and are excluded from
    the normalization. Every slice along `axis` must keep at least one valid
    entry.
    """
    x = as_tensor(logits)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    y = e / denom

    def bw(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            x._accumulate(y * (g - inner))

    return _make(y, (x,), bw)


# -- convolution family ----------------------------------------------------------


def _check_rank4(x: Tensor, name: str):
    if x.ndim != 4:
        raise ContractViolationError(f"{name} expects a rank-4 (B,H,W,C) tensor, got {x.shape}")


def _pad_amount(k: int, padding: str) -> int:
    if padding == "same":
        return (k - 1) // 2
    if padding == "valid":
        return 0
    raise ContractViolationError(f"unknown padding mode {padding!r}")


def _pad2d(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)), constant_values=value)


def conv2d(x, kernel, bias=None, padding: str = "same") -> Tensor:
    """2-D convolution (stride 1) of (B,H,W,Cin) with a (kh,kw,Cin,Cout) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank4(x, "conv2d")
    if kernel.ndim != 4:
        raise ContractViolationError(f"conv2d kernel must be (kh,kw,Cin,Cout), got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ContractViolationError(
            f"conv2d: input has {x.shape[3]} channels, kernel expects {cin}"
        )
    if kh == 1 and kw == 1 and padding == "same":
        out = dense(x, reshape(kernel, (cin, cout)))
        if bias is not None:
            out = out + as_tensor(bias)
        return out
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    xp = _pad2d(x.data, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (B,Ho,Wo,Cin,kh,kw)
    data = np.tensordot(win, kernel.data, axes=([3, 4, 5], [2, 0, 1]))
    b, h, w, _ = x.shape
    ho, wo = data.shape[1], data.shape[2]

    def bw(g):
        if kernel.requires_grad:
            gw = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2]))  # (Cin,kh,kw,Cout)
            kernel._accumulate(gw.transpose(1, 2, 0, 3))
        if x.requires_grad:
            gcols = np.tensordot(g, kernel.data, axes=([3], [3]))  # (B,Ho,Wo,kh,kw,Cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + ho, j : j + wo, :] += gcols[:, :, :, i, j, :]
            x._accumulate(gxp[:, ph : ph + h, pw : pw + w, :])

    out = _make(data, (x, kernel), bw)
    if bias is not None:
        out = out + as_tensor(bias)
    return out


def depthwise_conv2d(x, kernel, padding: str = "same") -> Tensor:
    """Per-channel convolution of (B,H,W,C) with a (kh,kw,C) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank4(x, "depthwise_conv2d")
    if kernel.ndim != 3:
        raise ContractViolationError(
            f"depthwise kernel must be (kh,kw,C) with one filter per channel, got {kernel.shape}"
        )
    kh, kw, c = kernel.shape
    if x.shape[3] != c:
        raise ContractViolationError(
            f"depthwise_conv2d: input has {x.shape[3]} channels, kernel expects {c}"
        )
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    xp = _pad2d(x.data, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (B,Ho,Wo,C,kh,kw)
    data = np.einsum("bxyckl,klc->bxyc", win, kernel.data, optimize=True)
    b, h, w, _ = x.shape
    ho, wo = data.shape[1], data.shape[2]

    def bw(g):
        if kernel.requires_grad:
            kernel._accumulate(np.einsum("bxyckl,bxyc->klc", win, g, optimize=True))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + ho, j : j + wo, :] += g * kernel.data[i, j, :]
            x._accumulate(gxp[:, ph : ph + h, pw : pw + w, :])

    return _make(data, (x, kernel), bw)


def sepconv2d(x, depthwise_kernel, pointwise_kernel, padding: str = "same") -> Tensor:
    """Depthwise-separable convolution: depthwise filter then 1x1 channel mix.

    `depthwise_kernel` is (kh,kw,Cin) with one filter per input channel;
    `pointwise_kernel` is a (Cin,Cout) matrix. Output keeps the input's
    spatial dims under "same" padding.
    """
    pw = as_tensor(pointwise_kernel)
    if pw.ndim != 2:
        raise ContractViolationError(
            f"pointwise kernel must be a (Cin,Cout) matrix, got shape {pw.shape}"
        )
    mid = depthwise_conv2d(x, depthwise_kernel, padding=padding)
    if mid.shape[3] != pw.shape[0]:
        raise ContractViolationError(
            f"sepconv2d: depthwise output channels {mid.shape[3]} != pointwise rows {pw.shape[0]}"
        )
    return dense(mid, pw)


def maxpool2d(x, size: int, stride: int, padding: str = "valid") -> Tensor:
    """Max pooling; "same" padding pads with -inf so borders take true maxima."""
    x = as_tensor(x)
    _check_rank4(x, "maxpool2d")
    if padding == "same":
        ph = pw = (size - 1) // 2
    else:
        ph = pw = 0
    xp = _pad2d(x.data, ph, pw, value=-np.inf) if ph else x.data
    win = sliding_window_view(xp, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    b, ho, wo, c = win.shape[:4]
    flat = win.reshape(b, ho, wo, c, size * size)
    idx = np.argmax(flat, axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        if not x.requires_grad:
            return
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for p in range(size * size):
            i, j = divmod(p, size)
            contrib = g * (idx == p)
            gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += contrib
        if ph:
            gxp = gxp[:, ph : ph + x.shape[1], pw : pw + x.shape[2], :]
        x._accumulate(gxp)

    return _make(data, (x,), bw)


# -- bilinear upsampling -------------------------------------------------------

_UPSAMPLE_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """(2n x n) interpolation matrix, half-pixel convention, edges clamped."""
    key = (n, np.dtype(dtype).str)
    cached = _UPSAMPLE_CACHE.get(key)
    if cached is not None:
        return cached
    dst = np.arange(2 * n, dtype=np.float64)
    src = np.clip((dst + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    m = np.zeros((2 * n, n), dtype=np.float64)
    m[np.arange(2 * n), i0] += 1.0 - w1
    m[np.arange(2 * n), i1] += w1
    m = m.astype(dtype)
    _UPSAMPLE_CACHE[key] = m
    return m


def upsample_bilinear_x2(x) -> Tensor:
    """Double both spatial dims of (B,H,W,C) by bilinear interpolation.

    Uses the half-pixel sample-position convention with clamped borders, so
    all interpolation weights are convex: outputs stay inside the input's
    value range.
    """
    x = as_tensor(x)
    _check_rank4(x, "upsample_bilinear_x2")
    b, h, w, c = x.shape
    mh = _upsample_matrix(h, x.dtype)
    mw = _upsample_matrix(w, x.dtype)
    data = np.einsum("ih,jw,bhwc->bijc", mh, mw, x.data, optimize=True)

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.einsum("ih,jw,bijc->bhwc", mh, mw, g, optimize=True))

    return _make(data, (x,), bw)


# -- feature geometry helpers ----------------------------------------------------


def l2_normalize(x, axis: int = -1, floor: float = 1e-8) -> Tensor:
    """x / max(||x||, floor) along `axis`; never divides by zero."""
    x = as_tensor(x)
    norm = tsqrt(tsum(x * x, axis=axis, keepdims=True))
    return x / clamp_min(norm, floor)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine of the angle between a and b along `axis` (zero-safe)."""
    return tsum(l2_normalize(a, axis) * l2_normalize(b, axis), axis=axis)


def sqrt_scalar(v: float) -> float:
    return math.sqrt(v)
