"""Pure numpy implementations of the convolution and pooling kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors them loop for
loop.  All arrays are float64, NCHW.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo), rows ordered (c, ki, kj)."""
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    # (n, c, ho, wo, ki, kj) -> (n, c, ki, kj, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def col2im(cols, x_shape, k, stride, pad):
    """Adjoint of ``im2col``: scatter-add columns back onto the image."""
    n, c, h, w = x_shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, ho, wo)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            padded[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += cols[:, :, ki, kj]
    if pad:
        return padded[:, :, pad:pad + h, pad:pad + w].copy()
    return padded


def maxpool_forward(x, k, stride):
    """Return pooled output and the flat (y*W + x) index of each window's first max."""
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, 0), out_size(w, k, stride, 0)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    ki, kj = np.divmod(arg, k)
    rows = np.arange(ho)[:, None] * stride + ki
    colsx = np.arange(wo)[None, :] * stride + kj
    return np.ascontiguousarray(out), (rows * w + colsx).astype(np.int64)


def maxpool_backward(dout, idx, x_shape):
    n, c, h, w = x_shape
    dx = np.zeros((n * c, h * w))
    flat_idx = idx.reshape(n * c, -1)
    np.add.at(dx, (np.arange(n * c)[:, None], flat_idx), dout.reshape(n * c, -1))
    return dx.reshape(x_shape)
