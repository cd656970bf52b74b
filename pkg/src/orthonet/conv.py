"""Convolution as matrix multiplication.

A kernel tensor of shape ``(n_out, n_in, kh, kw)`` is handled as the matrix
``(n_out, n_in * kh * kw)`` whose row ``i`` is filter ``i`` flattened in
(channel, row, col) order.  ``im2col`` lays out local patches in the same order
so a convolution is ``kernel_to_matrix(K) @ im2col(x)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError


def kernel_to_matrix(kernel):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be 4-D, got shape {kernel.shape}")
    return kernel.reshape(kernel.shape[0], -1).copy()


def matrix_to_kernel(matrix, in_channels, kernel_h, kernel_w):
    matrix = np.asarray(matrix, dtype=np.float64)
    return matrix.reshape(matrix.shape[0], in_channels, kernel_h, kernel_w).copy()


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def im2col_batch(x, kernel_h, kernel_w, stride=1, pad=0):
    """Patch matrix for a batch ``x`` of shape ``(B, C, H, W)``.

    Returns ``(C*kh*kw, B*Ho*Wo)`` with columns ordered (batch, row, col).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"expected (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if h + 2 * pad < kernel_h or w + 2 * pad < kernel_w:
        raise DimensionError(
            f"{kernel_h}x{kernel_w} window does not fit {h}x{w} input with pad {pad}"
        )
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (kernel_h, kernel_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(1, 4, 5, 0, 2, 3)
    return cols.reshape(c * kernel_h * kernel_w, b * ho * wo)


def im2col(x, kernel_h, kernel_w, stride=1, pad=0):
    """Patch matrix ``(C*kh*kw, Ho*Wo)`` for one feature map ``(C, H, W)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected (C, H, W), got {x.shape}")
    return im2col_batch(x[None], kernel_h, kernel_w, stride, pad)


def col2im_batch(cols, x_shape, kernel_h, kernel_w, stride=1, pad=0):
    """Adjoint of :func:`im2col_batch`: scatter-add patches back to images."""
    b, c, h, w = x_shape
    ho = conv_output_size(h, kernel_h, stride, pad)
    wo = conv_output_size(w, kernel_w, stride, pad)
    cols = cols.reshape(c, kernel_h, kernel_w, b, ho, wo)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kernel_h):
        for j in range(kernel_w):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out
