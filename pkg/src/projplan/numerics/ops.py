"""Differentiable operations. Each op registers its gradient rule inline."""
from __future__ import annotations

import builtins

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray):
        return Tensor(x)
    return as_tensor(x, dtype=like.dtype if like is not None else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _lift(a)
        s = b
        return make_result(a.data * s, (a,), lambda g: (g * s,), "scale")
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return mul(a, 1.0 / b)
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


# -- shape ops ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(out, (x,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        parts = []
        for i in range(len(tensors)):
            sl = [builtins.slice(None)] * g.ndim
            sl[axis] = builtins.slice(int(bounds[i]), int(bounds[i + 1]))
            parts.append(g[tuple(sl)])
        return parts

    return make_result(out, tensors, bw, "concat")


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [builtins.slice(None)] * x.ndim
    sl[axis] = builtins.slice(start, stop)
    sl = tuple(sl)

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return make_result(x.data[sl], (x,), bw, "slice")


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_result(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),), "broadcast")


# -- reductions -------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False, dtype=None) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=dtype)
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return make_result(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_square(x: Tensor) -> Tensor:
    """mean(x**2), accumulated in float64."""
    count = x.size
    out = np.asarray(np.sum(np.square(x.data, dtype=np.float64)) / count)
    return make_result(out, (x,), lambda g: (((2.0 / count) * g * x.data).astype(x.dtype),), "mean_square")


# -- elementwise nonlinearities -------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x))."""
    v = x.data
    # tanh(log1p(e)) == e (e + 2) / (e (e + 2) + 2) with e = exp(v)
    e = np.exp(np.minimum(v, 20.0))
    num = e * (e + 2.0)
    t = num / (num + 2.0)
    out = v * t

    def bw(g):
        sig = e / (1.0 + e)
        return (g * (t + v * (1.0 - t * t) * sig),)

    return make_result(out, (x,), bw, "mish")


def silu(x: Tensor) -> Tensor:
    v = x.data
    s = _sigmoid(v)
    return make_result(v * s, (x,), lambda g: (g * (s + v * s * (1.0 - s)),), "silu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


# -- normalization ---------------------------------------------------------------------

def _normalize_backward(dxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axis) -> np.ndarray:
    m1 = dxhat.mean(axis=axis, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Group normalization over [batch, channels, length] input."""
    if x.ndim != 3:
        raise ShapeError(f"group_norm expects [batch, channels, length], got {x.shape}")
    B, C, L = x.shape
    if C % groups:
        raise ShapeError(f"group count {groups} does not divide channel dimension {C}")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(B, C, L)
    out = xhat
    if weight is not None:
        out = out * weight.data[None, :, None]
    if bias is not None:
        out = out + bias.data[None, :, None]
    parents = [x] + [p for p in (weight, bias) if p is not None]

    def bw(g):
        grads = []
        dxhat = g * weight.data[None, :, None] if weight is not None else g
        grads.append(_normalize_backward(dxhat.reshape(B, groups, -1), xhat_g, inv, -1).reshape(B, C, L))
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return make_result(out.astype(x.dtype, copy=False), parents, bw, "group_norm")


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (weight, bias) if p is not None]
    lead = tuple(range(v.ndim - 1))

    def bw(g):
        grads = []
        dxhat = g * weight.data if weight is not None else g
        grads.append(_normalize_backward(dxhat, xhat, inv, -1))
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return make_result(out.astype(x.dtype, copy=False), parents, bw, "layer_norm")


# -- temporal convolution ------------------------------------------------------------------

def conv1d_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if length + 2 * padding < kernel:
        raise ShapeError(
            f"temporal length {length} with padding {padding} is shorter than kernel size {kernel}")
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B, C_in, L] input with a [C_out, C_in, k] kernel.

    Products and sums are accumulated in float64 and rounded once to the input
    dtype, so the result does not depend on the BLAS summation order.
    """
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be [batch, channels, length], got {x.shape}")
    B, C_in, L = x.shape
    C_out, C_w, k = weight.shape
    if C_w != C_in:
        raise ShapeError(f"conv1d input channel dimension {C_in} != kernel input channel dimension {C_w}")
    if bias is not None and bias.shape != (C_out,):
        raise ShapeError(f"conv1d bias dimension {bias.shape} != output channels ({C_out},)")
    L_out = conv1d_output_length(L, k, stride, padding)
    if padding:
        xp = np.zeros((B, C_in, L + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + L] = x.data
    else:
        xp = x.data
    idx = np.arange(L_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[:, :, idx].transpose(0, 2, 1, 3).reshape(B * L_out, C_in * k)
    wmat = weight.data.reshape(C_out, C_in * k)
    acc = cols.astype(np.float64) @ wmat.T.astype(np.float64)
    if bias is not None:
        acc += bias.data.astype(np.float64)
    out = acc.reshape(B, L_out, C_out).transpose(0, 2, 1).astype(x.dtype)
    parents = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * L_out, C_out)
        gx = gw = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, L_out, C_in, k)
            dxp = np.zeros((B, C_in, L + 2 * padding), dtype=x.dtype)
            span = stride * (L_out - 1) + 1
            for j in range(k):
                dxp[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
            gx = dxp[:, :, padding:padding + L] if padding else dxp
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(C_out, C_in, k)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return make_result(out, parents, bw, "conv1d")
