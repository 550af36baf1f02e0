"""Differentiable operators used by the network.

Every function takes and returns :class:`~lobeseg.tensor.Tensor` objects and
records a backward rule when any input requires a gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .kernels import DimensionError
from .tensor import Tensor, _as_tensor, get_default_dtype

__all__ = [
    "DimensionError",
    "BatchNormState",
    "add",
    "scale",
    "mul",
    "sum",
    "concat",
    "conv3d",
    "conv_transpose3d",
    "prelu",
    "relu",
    "sigmoid",
    "softmax_channels",
    "batch_norm",
    "dropout",
    "dropout_mask",
]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._from_op(a.data + a.dtype.type(c), "add_scalar", (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return Tensor._from_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor._from_op(a.data * c, "scale", (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product. ``b`` may broadcast along size-1 axes (gating)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul shapes incompatible: {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, "mul", (a, b), backward)


def sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return Tensor._from_op(out, "sum", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat shapes disagree off axis {axis}: {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._from_op(out, "concat", tensors, backward)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation, NCDHW input, ``(Cout, Cin, k, k, k)`` weight."""
    xd, wd = x.data, w.data
    y = kernels.conv3d_fast(xd, wd, stride, padding)
    if b is not None:
        if b.shape != (wd.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match {wd.shape[0]} output channels")
        y += b.data.reshape(1, -1, 1, 1, 1)
    k = wd.shape[2:]

    def backward(g):
        gx = kernels.conv3d_backward_input(g, wd, xd.shape, stride, padding) if x.requires_grad else None
        gw = kernels.conv3d_backward_weight(xd, g, k, stride, padding) if w.requires_grad else None
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 2, 3, 4)) if b.requires_grad else None)
        return tuple(out)

    inputs = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(y, "conv3d", inputs, backward)


def conv_transpose3d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed 3D convolution; weight is ``(Cin, Cout, k, k, k)``.

    The forward map is the adjoint of :func:`conv3d` with the same weight, so
    ``<conv3d(z, w), x> == <z, conv_transpose3d(x, w)>``.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise DimensionError(f"conv_transpose3d expects 5-d input and weight, got {xd.shape}, {wd.shape}")
    if xd.shape[1] != wd.shape[0]:
        raise DimensionError(
            f"input channels do not match weight: input shape {xd.shape}, weight shape {wd.shape}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    k = wd.shape[2:]
    out_spatial = tuple(kernels.transposed_size(n, kk, stride, padding) for n, kk in zip(xd.shape[2:], k))
    if min(out_spatial) < 1:
        raise DimensionError(f"transposed conv output would be empty: {out_spatial}")
    out_shape = (xd.shape[0], wd.shape[1]) + out_spatial
    y = kernels.conv3d_backward_input(xd, wd, out_shape, stride, padding)
    if b is not None:
        if b.shape != (wd.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match {wd.shape[1]} output channels")
        y += b.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gx = kernels.conv3d_fast(g, wd, stride, padding) if x.requires_grad else None
        gw = kernels.conv3d_backward_weight(g, xd, k, stride, padding) if w.requires_grad else None
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 2, 3, 4)) if b.requires_grad else None)
        return tuple(out)

    inputs = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(y, "conv_transpose3d", inputs, backward)


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x: Tensor, a: Tensor) -> Tensor:
    """``x`` where ``x >= 0``, ``a[c] * x`` otherwise; ``a`` has one slope per channel."""
    if a.ndim != 1 or x.ndim < 2 or a.shape[0] != x.shape[1]:
        raise DimensionError(f"prelu needs one slope per channel: x {x.shape}, slopes {a.shape}")
    xd = x.data
    slope = _channel_view(a.data, xd.ndim)
    neg = xd < 0
    y = np.where(neg, xd * slope, xd)
    reduce_axes = (0,) + tuple(range(2, xd.ndim))

    def backward(g):
        gx = np.where(neg, g * slope, g) if x.requires_grad else None
        ga = np.where(neg, g * xd, 0).sum(axis=reduce_axes) if a.requires_grad else None
        return gx, ga

    return Tensor._from_op(y, "prelu", (x, a), backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    return Tensor._from_op(np.where(pos, xd, 0).astype(xd.dtype), "relu", (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return Tensor._from_op(y, "sigmoid", (x,), lambda g: (g * y * (1 - y),))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 with max subtraction."""
    if x.ndim < 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_channels needs a channel axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(y, "softmax_channels", (x,), backward)


@dataclass
class BatchNormState:
    """Running per-channel statistics carried between calls."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None) -> "BatchNormState":
        dtype = dtype or get_default_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization over (N, D, H, W).

    In ``"train"`` mode batch statistics are used and the running estimates in
    ``state`` are updated by momentum (unbiased variance). ``"eval"`` uses the
    running estimates only.
    """
    xd = x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm affine params must be ({c},), got {gamma.shape}, {beta.shape}")
    axes = (0,) + tuple(range(2, xd.ndim))
    m = int(np.prod([xd.shape[i] for i in axes]))
    gv = _channel_view(gamma.data, xd.ndim)
    bv = _channel_view(beta.data, xd.ndim)
    if mode == "train":
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        mom = state.momentum
        unbiased = var * (m / max(m - 1, 1))
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = _channel_view((1.0 / np.sqrt(var + state.eps)).astype(xd.dtype), xd.ndim)
    xhat = (xd - _channel_view(mean.astype(xd.dtype), xd.ndim)) * inv_std
    y = xhat * gv + bv
    training = mode == "train"

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gv
            if training:
                gx = inv_std * (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std
        return gx, gg, gb

    return Tensor._from_op(y, "batch_norm", (x, gamma, beta), backward)


def dropout_mask(shape: tuple[int, ...], p: float, seed: int) -> np.ndarray:
    """Boolean keep-mask; element kept with probability ``1 - p``."""
    return np.random.default_rng(seed).random(shape) >= p


def dropout(x: Tensor, p: float, mode: str = "train", rng_seed: int = 0) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    mult = dropout_mask(x.shape, p, rng_seed).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return Tensor._from_op(x.data * mult, "dropout", (x,), lambda g: (g * mult,))
