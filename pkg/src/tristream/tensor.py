"""Dense N-D tensor with reverse-mode differentiation.

Every op below takes and returns :class:`Tensor` objects.  Each op computes
its forward value with numpy (or one of the kernels in ``_kernels``) and
records a closure that maps the output gradient to gradients for exactly its
inputs.  ``Tensor.backward`` walks the recorded graph in reverse topological
order, summing contributions where a tensor feeds several consumers.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "precision", "no_grad", "get_default_dtype",
    "add", "sub", "mul", "scale", "bias_add", "matmul", "relu", "sigmoid", "tanh",
    "softmax", "log_softmax", "layernorm", "dropout", "conv3d", "maxpool3d", "roi_align",
    "reshape", "transpose", "concat", "stack", "take", "slice_axis", "mean", "sum",
    "cross_entropy", "bce_with_logits",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_state = {"dtype": np.float32, "grad": True}


def get_default_dtype():
    return _state["dtype"]


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data, parents, backward, op) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every leaf reachable from this tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for axis, (p, q) in enumerate(zip(a.shape, b.shape)):
            if p != q:
                raise ShapeError(f"{op}: extents differ on axis {axis} ({p} vs {q}); shapes {a.shape} and {b.shape}")
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, s) -> Tensor:
    """Multiply by a python scalar or by a one-element tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale: factor must hold one element, got shape {s.shape}")
        xd, sv = x.data, s.data.reshape(-1)[0]

        def back(g):
            gs = np.asarray(np.sum(g * xd, dtype=np.float64), dtype=s.data.dtype).reshape(s.shape)
            return g * sv, gs

        return Tensor._make(xd * sv, (x, s), back, "scale")
    s = float(s)
    return Tensor._make(x.data * x.data.dtype.type(s), (x,), lambda g: (g * g.dtype.type(s),), "scale")


def bias_add(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis`` (the only broadcasting add)."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias_add: bias shape {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    red = tuple(i for i in range(x.ndim) if i != axis)

    def back(g):
        return g, g.sum(axis=red, dtype=np.float64).astype(g.dtype)

    return Tensor._make(x.data + b.data.reshape(view), (x, b), back, "bias_add")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    return Tensor._make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


# ---------------------------------------------------------------------------
# linear algebra / normalisation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be a shared 2-D matrix."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape[-1]} vs {b.shape[-2]}) for {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), back, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(x.data.dtype)

    def back(g):
        dot = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64)
        return ((g - dot) * out).astype(g.dtype),

    return Tensor._make(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True, dtype=np.float64))
    out = (z - lse).astype(x.data.dtype)

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(g.dtype),

    return Tensor._make(out, (x,), back, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, axis=-1, eps: float = 1e-5,
              channel_axis: int = -1) -> Tensor:
    """Normalise over ``axis`` then apply per-channel gain and shift.

    ``axis`` is an int or tuple of axes reduced for the statistics; ``gain``
    and ``shift`` are 1-D with length ``x.shape[channel_axis]``.
    """
    axes = tuple(a % x.ndim for a in ((axis,) if isinstance(axis, int) else axis))
    channel_axis %= x.ndim
    if gain.shape != (x.shape[channel_axis],) or shift.shape != gain.shape:
        raise ShapeError(f"layernorm: affine shape {gain.shape}/{shift.shape} does not match axis {channel_axis} of {x.shape}")
    view = [1] * x.ndim
    view[channel_axis] = -1
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.data.reshape(view).astype(np.float64)
    out = (xhat * gv + shift.data.reshape(view)).astype(x.data.dtype)
    m = int(np.prod([x.shape[a] for a in axes]))
    red = tuple(i for i in range(x.ndim) if i != channel_axis)

    def back(g):
        g64 = g.astype(np.float64)
        ggain = (g64 * xhat).sum(axis=red).astype(gain.data.dtype)
        gshift = g64.sum(axis=red).astype(shift.data.dtype)
        dxhat = g64 * gv
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = inv * (dxhat - s1 / m - xhat * s2 / m)
        return dx.astype(g.dtype), ggain, gshift

    return Tensor._make(out, (x, gain, shift), back, "layernorm")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p) in training, identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _triple(v) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


_AXES = ("T", "H", "W")


def conv_output_size(size, ksize, stride, padding, dilation) -> tuple:
    out = []
    for ax, n, k, s, p, d in zip(_AXES, size, ksize, stride, padding, dilation):
        span = d * (k - 1) + 1
        if span > n + 2 * p:
            raise ShapeError(f"conv3d: kernel extent {span} exceeds padded input extent {n + 2 * p} on axis {ax}")
        out.append((n + 2 * p - span) // s + 1)
    return tuple(out)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0, dilation=1) -> Tensor:
    """3D cross-correlation over (N, C, T, H, W) input."""
    stride, padding, dilation = _triple(stride), _triple(padding), _triple(dilation)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    if min(dilation) < 1 or min(stride) < 1:
        raise ValueError("conv3d: stride and dilation must be >= 1")
    n, c, T, H, W = x.shape
    co, ci = weight.shape[:2]
    if ci != c:
        raise ShapeError(f"conv3d: channel axis mismatch, input has {c} channels but weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} should be ({co},)")
    ksize = weight.shape[2:]
    out_size = conv_output_size((T, H, W), ksize, stride, padding, dilation)
    pt, ph, pw = padding
    xp = x.data
    if any(padding):
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    cols = _kernels.vol2col(xp, ksize, stride, dilation, out_size)
    L = out_size[0] * out_size[1] * out_size[2]
    cols = cols.reshape(n, -1, L)
    wm = weight.data.reshape(co, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape((n, co) + out_size)
    padded_shape = xp.shape

    def back(g):
        g2 = g.reshape(n, co, L)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(wm.T, g2).reshape((n, c) + tuple(ksize) + out_size)
        gxp = _kernels.col2vol(gcols, padded_shape, stride, dilation)
        gx = gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
        gb = g2.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, back, "conv3d")


def maxpool3d(x: Tensor, kernel, stride=None) -> Tensor:
    """Max pooling without padding; the gradient goes to the first maximal element."""
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects 5-D input, got {x.shape}")
    out_size = conv_output_size(x.shape[2:], kernel, stride, (0, 0, 0), (1, 1, 1))
    out, argidx = _kernels.maxpool3d_forward(x.data, kernel, stride, out_size)
    in_shape = x.shape
    return Tensor._make(out, (x,), lambda g: (_kernels.maxpool3d_backward(g, argidx, in_shape),), "maxpool3d")


def roi_align(feat: Tensor, rois: np.ndarray, out_size) -> Tensor:
    """Bilinear ROI sampling replicated over time.

    ``rois`` is (B, 5): batch index then x1, y1, x2, y2 in feature-pixel units.
    Returns (B, C, T, oh, ow).
    """
    if feat.ndim != 5:
        raise ShapeError(f"roi_align expects 5-D features, got {feat.shape}")
    oh, ow = out_size
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    out = _kernels.roi_align_forward(feat.data, rois, oh, ow)
    shape = feat.shape
    return Tensor._make(out, (feat,), lambda g: (_kernels.roi_align_backward(g, rois, shape),), "roi_align")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                        lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    axis %= xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(p != q for i, (p, q) in enumerate(zip(t.shape, xs[0].shape)) if i != axis):
            raise ShapeError(f"concat: shapes {xs[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return Tensor._make(np.concatenate([t.data for t in xs], axis=axis), xs, back, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    for t in xs[1:]:
        _same_shape(xs[0], t, "stack")
    out = np.stack([t.data for t in xs], axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return Tensor._make(out, xs, back, "stack")


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.int64)
    axis %= x.ndim
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return gx,

    return Tensor._make(np.take(x.data, indices, axis=axis), (x,), back, "take")


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    axis %= x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return gx,

    return Tensor._make(x.data[idx], (x,), back, "slice")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = tuple(range(x.ndim)) if axis is None else tuple(a % x.ndim for a in ((axis,) if isinstance(axis, int) else axis))
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g / count, shape).astype(g.dtype),

    return Tensor._make(out, (x,), back, "mean")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = tuple(range(x.ndim)) if axis is None else tuple(a % x.ndim for a in ((axis,) if isinstance(axis, int) else axis))
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, shape).astype(g.dtype),

    return Tensor._make(out, (x,), back, "sum")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n)).astype(logits.data.dtype),

    return Tensor._make(np.asarray(loss, dtype=logits.data.dtype), (logits,), back, "cross_entropy")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean per-element binary cross-entropy on raw logits."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {logits.shape}")
    z = logits.data.astype(np.float64)
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
    count = z.size

    def back(g):
        p = np.where(z >= 0, 1 / (1 + np.exp(-z)), np.exp(z) / (1 + np.exp(z)))
        return ((p - y) * (float(g) / count)).astype(logits.data.dtype),

    return Tensor._make(np.asarray(loss, dtype=logits.data.dtype), (logits,), back, "bce_with_logits")


def param(data, dtype=None) -> Tensor:
    """Leaf tensor that requires a gradient."""
    return Tensor(data, requires_grad=True, dtype=dtype)
