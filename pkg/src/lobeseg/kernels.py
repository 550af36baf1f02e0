"""Raw 3D convolution kernels on numpy arrays.

Two implementations live here. ``conv3d_naive`` is the seven-loop direct
convolution used as a test oracle. The ``*_fast`` functions pack the input
into a column matrix (im2col) and hand the contraction to BLAS; the
backward-to-input path scatters the columns back with a fixed-order loop
over kernel offsets, which keeps accumulation deterministic.

Layouts follow the usual NCDHW convention. Convolution weights are
``(Cout, Cin, k, k, k)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


def out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def transposed_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def check_conv_shapes(x_shape, w_shape, stride: int, padding: int) -> None:
    if len(x_shape) != 5:
        raise DimensionError(f"conv3d expects a 5-d input (N,C,D,H,W), got shape {tuple(x_shape)}")
    if len(w_shape) != 5:
        raise DimensionError(f"conv3d expects a 5-d weight, got shape {tuple(w_shape)}")
    if x_shape[1] != w_shape[1]:
        raise DimensionError(
            f"input channels do not match weight: input shape {tuple(x_shape)}, "
            f"weight shape {tuple(w_shape)}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    k = w_shape[2:]
    for n, kk in zip(x_shape[2:], k):
        if kk > n + 2 * padding:
            raise DimensionError(
                f"kernel {tuple(k)} larger than padded input {tuple(x_shape[2:])} (padding {padding})"
            )


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


# Upper bound on im2col buffer elements; larger problems are split into
# slabs along the output depth axis.
MAX_COL_ELEMENTS = 1 << 24


def _im2col_padded(xp: np.ndarray, k: tuple[int, int, int], stride: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, k, axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    od, oh, ow = win.shape[2:5]
    # (N, D', H', W', C, kd, kh, kw)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    return np.ascontiguousarray(cols).reshape(n * od * oh * ow, c * k[0] * k[1] * k[2])


def im2col(x: np.ndarray, k: tuple[int, int, int], stride: int, padding: int) -> np.ndarray:
    """Pack sliding windows into a ``(N*D'*H'*W', Cin*kd*kh*kw)`` matrix."""
    return _im2col_padded(_pad(x, padding), tuple(k), stride)


def _slabs(od: int, row_elems: int):
    """Split ``range(od)`` into contiguous output-depth slabs."""
    per = max(1, MAX_COL_ELEMENTS // max(row_elems, 1))
    for d0 in range(0, od, per):
        yield d0, min(od, d0 + per)


def _col2im_padded(out: np.ndarray, cols: np.ndarray, k, stride: int, od: int, oh: int, ow: int) -> None:
    """Scatter-add ``cols`` into the padded buffer ``out`` in place."""
    n, c = out.shape[:2]
    kd, kh, kw = k
    cols = cols.reshape(n, od, oh, ow, c, kd, kh, kw)
    s = stride
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                out[:, :, a:a + s * od:s, b:b + s * oh:s, e:e + s * ow:s] += (
                    cols[..., a, b, e].transpose(0, 4, 1, 2, 3)
                )


def col2im(
    cols: np.ndarray,
    x_shape: tuple[int, ...],
    k: tuple[int, int, int],
    stride: int,
    padding: int,
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    n, c, d, h, w = x_shape
    od, oh, ow = (out_size(s, kk, stride, padding) for s, kk in zip((d, h, w), k))
    p = padding
    out = np.zeros((n, c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    _col2im_padded(out, cols, tuple(k), stride, od, oh, ow)
    return _unpad(out, p)


def _unpad(a: np.ndarray, p: int) -> np.ndarray:
    if p:
        a = a[:, :, p:-p, p:-p, p:-p]
    return np.ascontiguousarray(a)


def conv3d_fast(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """im2col + GEMM convolution (no bias)."""
    check_conv_shapes(x.shape, w.shape, stride, padding)
    n = x.shape[0]
    cout, cin = w.shape[:2]
    k = tuple(w.shape[2:])
    od, oh, ow = (out_size(s, kk, stride, padding) for s, kk in zip(x.shape[2:], k))
    xp = _pad(x, padding)
    wm = w.reshape(cout, -1).T
    y = np.empty((n, cout, od, oh, ow), dtype=np.result_type(x, w))
    for d0, d1 in _slabs(od, n * oh * ow * cin * k[0] * k[1] * k[2]):
        xs = xp[:, :, d0 * stride:(d1 - 1) * stride + k[0]]
        ys = _im2col_padded(xs, k, stride) @ wm
        y[:, :, d0:d1] = ys.reshape(n, d1 - d0, oh, ow, cout).transpose(0, 4, 1, 2, 3)
    return y


def conv3d_backward_input(
    gy: np.ndarray, w: np.ndarray, x_shape: tuple[int, ...], stride: int, padding: int
) -> np.ndarray:
    """Gradient of ``conv3d_fast`` w.r.t. its input (also the transposed conv)."""
    n, cin, d, h, wd = x_shape
    cout = w.shape[0]
    k = tuple(w.shape[2:])
    od, oh, ow = gy.shape[2:]
    p = padding
    wm = w.reshape(cout, -1)
    out = np.zeros((n, cin, d + 2 * p, h + 2 * p, wd + 2 * p), dtype=np.result_type(gy, w))
    for d0, d1 in _slabs(od, n * oh * ow * cin * k[0] * k[1] * k[2]):
        gcols = gy[:, :, d0:d1].transpose(0, 2, 3, 4, 1).reshape(-1, cout) @ wm
        view = out[:, :, d0 * stride:(d1 - 1) * stride + k[0]]
        _col2im_padded(view, gcols, k, stride, d1 - d0, oh, ow)
    return _unpad(out, p)


def conv3d_backward_weight(
    x: np.ndarray, gy: np.ndarray, k: tuple[int, int, int], stride: int, padding: int
) -> np.ndarray:
    n, cin = x.shape[:2]
    cout = gy.shape[1]
    k = tuple(k)
    od, oh, ow = gy.shape[2:]
    xp = _pad(x, padding)
    gw = np.zeros((cout, cin * k[0] * k[1] * k[2]), dtype=np.result_type(x, gy))
    for d0, d1 in _slabs(od, n * oh * ow * cin * k[0] * k[1] * k[2]):
        xs = xp[:, :, d0 * stride:(d1 - 1) * stride + k[0]]
        gys = gy[:, :, d0:d1].transpose(1, 0, 2, 3, 4).reshape(cout, -1)
        gw += gys @ _im2col_padded(xs, k, stride)
    return gw.reshape((cout, cin) + k)


def conv3d_naive(x: np.ndarray, w: np.ndarray, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct convolution by explicit loops. Slow; for verification only."""
    check_conv_shapes(x.shape, w.shape, stride, padding)
    n, cin, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    xp = _pad(x, padding)
    od, oh, ow = out_size(d, kd, stride, padding), out_size(h, kh, stride, padding), out_size(wd, kw, stride, padding)
    y = np.zeros((n, cout, od, oh, ow), dtype=np.result_type(x, w))
    for b in range(n):
        for co in range(cout):
            for i in range(od):
                for j in range(oh):
                    for l in range(ow):
                        acc = 0.0 if bias is None else float(bias[co])
                        for ci in range(cin):
                            for a in range(kd):
                                for bb in range(kh):
                                    for e in range(kw):
                                        acc += (
                                            xp[b, ci, i * stride + a, j * stride + bb, l * stride + e]
                                            * w[co, ci, a, bb, e]
                                        )
                        y[b, co, i, j, l] = acc
    return y
