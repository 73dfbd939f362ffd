"""Dense float tensors with reverse-mode automatic differentiation.

Each op links its output to its inputs, so a forward pass leaves behind an
implicit tape: the operation graph hanging off the loss tensor. backward()
orders that graph topologically and visits every node exactly once in
reverse, accumulating gradients into `.grad` of every tensor that requires
them. Data is float32 by default (float64 supported for gradient checking);
explicit reductions accumulate in 64-bit before casting back.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    LabelIndexError,
)

# one training context per thread: grad mode must not leak across concurrent jobs
_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    saved = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def backward(self):
        """Populate grads of every reachable tensor with requires_grad.

        Repeated calls without a reset accumulate; training code zeroes
        parameter grads at the start of each step.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        order = _tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _tape(root):
    """Topologically ordered op records reachable from `root`.

    Guarantees every node's inputs precede it, so the reverse walk in
    backward() touches each node exactly once with its grad complete.
    """
    order = []
    seen = set()

    def visit(t):
        if id(t) in seen:
            return
        seen.add(id(t))
        for p in t._parents:
            visit(p)
        order.append(t)

    visit(root)
    return order


def _make(data, parents, backward_fn):
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    # reduce a broadcasted gradient back down to `shape`
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def zero_grads(params):
    """Reset policy: zero every grad at the start of an optimization step."""
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise / shape ops

def add(a, b):
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b):
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def scale(a, s):
    s = float(s)

    def bw(g):
        _accum(a, g * s)

    return _make(a.data * np.asarray(s, dtype=a.data.dtype), (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0), (a,), bw)


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.data.shape}")

    def bw(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), bw)


def concat(parts, axis):
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, piece)

    return _make(out_data, tuple(parts), bw)


def tsum(a, axis=None):
    out_data = a.data.sum(axis=axis, dtype=np.float64).astype(a.data.dtype)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(out_data, (a,), bw)


def tmean(a, axis=None):
    out_data = a.data.mean(axis=axis, dtype=np.float64).astype(a.data.dtype)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy())

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes do not agree: {a.data.shape} x {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bw)


def conv2d(x, kernel, stride=1, pad=0):
    """Cross-correlation of NCHW input with FCkk kernels, zero padding."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    B, C, H, W = x.data.shape
    F, Ck, kh, kw = kernel.data.shape
    if Ck != C:
        raise DimensionError(f"conv2d channels mismatch: input {C}, kernel {Ck}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d invalid stride={stride} pad={pad}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {Hp}x{Wp}"
        )
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = kernel.data.reshape(F, C * kh * kw)
    out_data = (cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, F)
        _accum(kernel, (gm.T @ cols).reshape(F, C, kh, kw))
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + Ho * stride:stride, v:v + Wo * stride:stride] += \
                        gcols[:, :, :, :, u, v]
            _accum(x, gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp)

    return _make(np.ascontiguousarray(out_data), (x, kernel), bw)


def maxpool2d(x, size=2):
    B, C, H, W = x.data.shape
    if H % size or W % size:
        raise DimensionError(f"maxpool2d needs H, W divisible by {size}, got {H}x{W}")
    Ho, Wo = H // size, W // size
    xr = x.data.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5)
    xr = np.ascontiguousarray(xr).reshape(B, C, Ho, Wo, size * size)
    idx = xr.argmax(axis=-1)  # first max wins on ties: deterministic
    out_data = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gz = np.zeros_like(xr)
        np.put_along_axis(gz, idx[..., None], g[..., None], axis=-1)
        gx = gz.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, np.ascontiguousarray(gx).reshape(B, C, H, W))

    return _make(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# losses and normalization

def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be BxC, got shape {logits.data.shape}")
    B, C = logits.data.shape
    if C < 2:
        raise ContractError(f"softmax_cross_entropy needs C >= 2, got C={C}")
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= C:
        bad = labels[(labels < 0) | (labels >= C)][0]
        raise LabelIndexError(f"label {bad} out of range for {C} classes")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), labels].mean()
    p = np.exp(logp)

    def bw(g):
        gl = p.copy()
        gl[np.arange(B), labels] -= 1.0
        _accum(logits, (gl * (g / B)).astype(logits.data.dtype))

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def mse(a, b):
    """Mean squared elementwise deviation between two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"mse shapes do not agree: {a.data.shape} vs {b.data.shape}"
        )
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size
    loss = (diff * diff).sum() / n

    def bw(g):
        ga = ((2.0 / n) * diff * g).astype(a.data.dtype)
        _accum(a, ga)
        _accum(b, -ga)

    return _make(np.asarray(loss, dtype=a.data.dtype), (a, b), bw)


def l2_normalize(v, axis=-1, eps=1e-12):
    """Scale rows (along `axis`) to unit Euclidean norm."""
    sq = (v.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True)
    norms = np.sqrt(sq).astype(v.data.dtype)
    if np.any(norms <= eps):
        raise DegenerateVectorError(
            f"cannot normalize a vector with norm <= {eps}"
        )
    y = v.data / norms

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(v, (g - y * inner) / norms)

    return _make(y, (v,), bw)


def l2_normalize_or_zero(v, axis=-1, eps=1e-12):
    """Like l2_normalize, but degenerate rows map to zero with zero gradient.

    Used where a zero-norm row means "no signal" (e.g. a dead embedding at
    inference) and must yield zero cosines instead of aborting.
    """
    sq = (v.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True)
    norms = np.sqrt(sq).astype(v.data.dtype)
    alive = norms > eps
    safe = np.where(alive, norms, 1.0)
    y = np.where(alive, v.data / safe, 0.0)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(v, np.where(alive, (g - y * inner) / safe, 0.0))

    return _make(y, (v,), bw)
