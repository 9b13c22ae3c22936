"""Raw numpy building blocks shared by the autodiff engine and the decoder.

Both callers run the exact same numpy call sequences, so a value computed
through the differentiable graph and the same value computed through the
plain inference path are bit-identical within a build.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "round_half_away",
    "bilinear_kernel4",
    "conv2d_raw",
    "conv2d_backward_input",
    "conv2d_backward_kernel",
    "im2col",
    "tconv2d_raw",
    "edge_pad1",
    "edge_pad1_backward",
    "avgpool2d_raw",
    "avgpool2d_backward",
]


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    """Round to nearest integer, halves away from zero.

    numpy's round() is half-to-even; every float-to-integer conversion in the
    codec goes through this one rule instead.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def bilinear_kernel4() -> np.ndarray:
    """The 4x4 separable bilinear stencil for stride-2 upsampling, shape (1,1,4,4)."""
    v = np.array([0.25, 0.75, 0.75, 0.25], dtype=np.float64)
    return np.outer(v, v).reshape(1, 1, 4, 4)


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(C, H, W) -> (C*k*k, Ho*Wo) patch matrix for a k x k / stride / zero-pad conv."""
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def conv2d_out_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def conv2d_raw(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Valid cross-correlation of (C_in, H, W) with (C_out, C_in, k, k)."""
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise ValueError(f"non-square kernel {kernel.shape}")
    if x.ndim != 3 or x.shape[0] != c_in:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs kernel {kernel.shape}")
    ho, wo = conv2d_out_hw(x.shape[1], x.shape[2], k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d empty output for input {x.shape} kernel k={k} stride={stride} pad={pad}")
    cols = im2col(x, k, stride, pad)
    w_mat = kernel.reshape(c_out, c_in * k * k)
    return (w_mat @ cols).reshape(c_out, ho, wo)


def _col2im(dcols: np.ndarray, c: int, k: int, stride: int, pad: int,
            h: int, w: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add (C*k*k, Ho*Wo) back to (C, H, W)."""
    dxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    d = dcols.reshape(c, k, k, ho, wo)
    for di in range(k):
        for dj in range(k):
            dxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += d[:, di, dj]
    if pad:
        return dxp[:, pad:-pad, pad:-pad]
    return dxp


def conv2d_backward_input(dy: np.ndarray, kernel: np.ndarray, in_hw: tuple[int, int],
                          stride: int, pad: int) -> np.ndarray:
    c_out, c_in, k, _ = kernel.shape
    ho, wo = dy.shape[1], dy.shape[2]
    w_mat = kernel.reshape(c_out, c_in * k * k)
    dcols = w_mat.T @ dy.reshape(c_out, ho * wo)
    return _col2im(dcols, c_in, k, stride, pad, in_hw[0], in_hw[1], ho, wo)


def conv2d_backward_kernel(dy: np.ndarray, x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    c_out = dy.shape[0]
    c_in = x.shape[0]
    cols = im2col(x, k, stride, pad)
    dw = dy.reshape(c_out, -1) @ cols.T
    return dw.reshape(c_out, c_in, k, k)


def tconv2d_raw(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Stride-2 transposed conv with a (C, C, 4, 4) kernel, zero input padding.

    Defined as the adjoint of conv2d(stride=2, pad=1, k=4) mapping (C, 2H, 2W)
    to (C, H, W); stripping that conv's pad is exactly the symmetric crop of
    the raw scatter output. (C, H, W) -> (C, 2H, 2W).
    """
    c_out, c_in, k, k2 = kernel.shape
    if k != 4 or k2 != 4:
        raise ValueError(f"transposed_conv2d requires a 4x4 kernel, got {kernel.shape}")
    if x.ndim != 3 or x.shape[0] != c_out:
        raise ValueError(f"transposed_conv2d shape mismatch: input {x.shape} vs kernel {kernel.shape}")
    h, w = x.shape[1], x.shape[2]
    return conv2d_backward_input(x, kernel, (2 * h, 2 * w), stride=2, pad=1)


def edge_pad1(x: np.ndarray) -> np.ndarray:
    """Replicate-pad the last two axes by one cell."""
    return np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")


def edge_pad1_backward(dy: np.ndarray) -> np.ndarray:
    """Adjoint of edge_pad1: fold border gradients back onto the edge cells."""
    dx = dy[:, 1:-1, 1:-1].copy()
    dx[:, 0, :] += dy[:, 0, 1:-1]
    dx[:, -1, :] += dy[:, -1, 1:-1]
    dx[:, :, 0] += dy[:, 1:-1, 0]
    dx[:, :, -1] += dy[:, 1:-1, -1]
    dx[:, 0, 0] += dy[:, 0, 0]
    dx[:, 0, -1] += dy[:, 0, -1]
    dx[:, -1, 0] += dy[:, -1, 0]
    dx[:, -1, -1] += dy[:, -1, -1]
    return dx


def _pool_counts(n: int, f: int) -> np.ndarray:
    starts = np.arange(0, n, f)
    ends = np.minimum(starts + f, n)
    return (ends - starts).astype(np.float64)


def avgpool2d_raw(x: np.ndarray, f: int) -> np.ndarray:
    """Average pool (C, H, W) by factor f with ceil-mode partial edge windows.

    Partial windows average over the cells they actually cover, so a constant
    input pools to the same constant.
    """
    if f == 1:
        return x.copy()
    c, h, w = x.shape
    ri = np.arange(0, h, f)
    ci = np.arange(0, w, f)
    sums = np.add.reduceat(np.add.reduceat(x, ri, axis=1), ci, axis=2)
    counts = np.outer(_pool_counts(h, f), _pool_counts(w, f))
    return sums / counts[None, :, :]


def avgpool2d_backward(dy: np.ndarray, in_hw: tuple[int, int], f: int) -> np.ndarray:
    if f == 1:
        return dy.copy()
    h, w = in_hw
    rc = _pool_counts(h, f).astype(np.int64)
    cc = _pool_counts(w, f).astype(np.int64)
    counts = np.outer(rc, cc).astype(np.float64)
    spread = dy / counts[None, :, :]
    return np.repeat(np.repeat(spread, rc, axis=1), cc, axis=2)
