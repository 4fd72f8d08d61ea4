# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution/pooling kernels; same contracts as ``_pykernels``."""

import numpy as np


def out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


cdef inline Py_ssize_t _lo(Py_ssize_t kj, Py_ssize_t pad, Py_ssize_t stride) nogil:
    # first output column whose input column ox*stride + kj - pad is >= 0
    if kj >= pad:
        return 0
    return (pad - kj + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t kj, Py_ssize_t pad, Py_ssize_t stride, Py_ssize_t w, Py_ssize_t wo) nogil:
    # one past the last output column whose input column is < w
    cdef Py_ssize_t top = w - 1 + pad - kj
    if top < 0:
        return 0
    top = top // stride + 1
    return top if top < wo else wo


def im2col(double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c * k * k, ho * wo))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t b, ch, ki, kj, oy, ox, iy, row, lo, hi, base
    cdef double *dst
    cdef const double *src
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        lo = _lo(kj, pad, stride)
                        hi = _hi(kj, pad, stride, w, wo)
                        for oy in range(ho):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            dst = &o[b, row, oy * wo]
                            src = &x[b, ch, iy, 0]
                            base = kj - pad
                            for ox in range(lo, hi):
                                dst[ox] = src[ox * stride + base]
    return out


def col2im(double[:, :, ::1] cols, tuple x_shape, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, ki, kj, oy, ox, iy, row, lo, hi, base
    cdef double *dst
    cdef const double *src
    # same (ki, kj)-outer accumulation order as the numpy version
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        lo = _lo(kj, pad, stride)
                        hi = _hi(kj, pad, stride, w, wo)
                        for oy in range(ho):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            src = &cols[b, row, oy * wo]
                            dst = &dx[b, ch, iy, 0]
                            base = kj - pad
                            for ox in range(lo, hi):
                                dst[ox * stride + base] += src[ox]
    return out


def maxpool_forward(double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1
    out = np.empty((n, c, ho, wo))
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] o = out
    cdef long long[:, :, :, ::1] ix_out = idx
    cdef Py_ssize_t b, ch, oy, ox, ki, kj, y, xx, best_i
    cdef double best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        y = oy * stride
                        xx = ox * stride
                        best = x[b, ch, y, xx]
                        best_i = y * w + xx
                        for ki in range(k):
                            for kj in range(k):
                                v = x[b, ch, y + ki, xx + kj]
                                if v > best:
                                    best = v
                                    best_i = (y + ki) * w + xx + kj
                        o[b, ch, oy, ox] = best
                        ix_out[b, ch, oy, ox] = best_i
    return out, idx


def maxpool_backward(double[:, :, :, ::1] dout, long long[:, :, :, ::1] idx, tuple x_shape):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    out = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, oy, ox, flat
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(dout.shape[2]):
                    for ox in range(dout.shape[3]):
                        flat = idx[b, ch, oy, ox]
                        dx[b, ch, flat // w, flat % w] += dout[b, ch, oy, ox]
    return out
