# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: patch extraction, its adjoint, 2x2 max pooling and the
xnor/popcount product.

Every routine here has a numpy twin in ``_fallback`` and the two must agree
bit for bit, so accumulation orders are mirrored exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int32_t, int64_t

cnp.import_array()

ctypedef fused real_t:
    float
    double

cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


def im2col(real_t[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    """Patch matrix of shape (N*OH*OW, C*kh*kw); one receptive field per row."""
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    cdef Py_ssize_t oh = (height + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (width + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real_t is float else np.float64
    out_arr = np.empty((n_img * oh * ow, chans * kh * kw), dtype=dtype)
    cdef real_t[:, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, r, q, row, col, src_r, src_q
    with nogil:
        for n in range(n_img):
            for r in range(oh):
                for q in range(ow):
                    row = (n * oh + r) * ow + q
                    col = 0
                    for c in range(chans):
                        for i in range(kh):
                            src_r = r * stride + i - pad
                            for j in range(kw):
                                src_q = q * stride + j - pad
                                if src_r < 0 or src_r >= height or src_q < 0 or src_q >= width:
                                    out[row, col] = 0
                                else:
                                    out[row, col] = x[n, c, src_r, src_q]
                                col += 1
    return out_arr


def col2im(real_t[:, ::1] cols, tuple x_shape, int kh, int kw, int stride, int pad):
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    cdef Py_ssize_t n_img = x_shape[0], chans = x_shape[1]
    cdef Py_ssize_t height = x_shape[2], width = x_shape[3]
    cdef Py_ssize_t hp = height + 2 * pad, wp = width + 2 * pad
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1
    dtype = np.float32 if real_t is float else np.float64
    padded_arr = np.zeros((n_img, chans, hp, wp), dtype=dtype)
    cdef real_t[:, :, :, ::1] padded = padded_arr
    cdef Py_ssize_t n, c, i, j, r, q, row, col
    # a given pixel receives its contributions in ascending (r, q) order, i.e.
    # descending kernel offset; the numpy twin walks the offsets in reverse
    with nogil:
        for n in range(n_img):
            for r in range(oh):
                for q in range(ow):
                    row = (n * oh + r) * ow + q
                    col = 0
                    for c in range(chans):
                        for i in range(kh):
                            for j in range(kw):
                                padded[n, c, r * stride + i, q * stride + j] += cols[row, col]
                                col += 1
    if pad:
        return np.ascontiguousarray(padded_arr[:, :, pad:pad + height, pad:pad + width])
    return padded_arr


def maxpool2x2(real_t[:, :, :, ::1] x):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t oh = x.shape[2] // 2, ow = x.shape[3] // 2
    dtype = np.float32 if real_t is float else np.float64
    out_arr = np.empty((n_img, chans, oh, ow), dtype=dtype)
    idx_arr = np.empty((n_img, chans, oh, ow), dtype=np.int8)
    cdef real_t[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t n, c, r, q
    cdef real_t best, v
    cdef cnp.int8_t arg
    with nogil:
        for n in range(n_img):
            for c in range(chans):
                for r in range(oh):
                    for q in range(ow):
                        best = x[n, c, 2 * r, 2 * q]
                        arg = 0
                        v = x[n, c, 2 * r, 2 * q + 1]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[n, c, 2 * r + 1, 2 * q]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[n, c, 2 * r + 1, 2 * q + 1]
                        if v > best:
                            best = v
                            arg = 3
                        out[n, c, r, q] = best
                        idx[n, c, r, q] = arg
    return out_arr, idx_arr


def maxpool2x2_backward(real_t[:, :, :, ::1] grad, cnp.int8_t[:, :, :, ::1] idx, tuple x_shape):
    cdef Py_ssize_t n_img = grad.shape[0], chans = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    dtype = np.float32 if real_t is float else np.float64
    dx_arr = np.zeros(x_shape, dtype=dtype)
    cdef real_t[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, c, r, q
    cdef int a
    with nogil:
        for n in range(n_img):
            for c in range(chans):
                for r in range(oh):
                    for q in range(ow):
                        a = idx[n, c, r, q]
                        dx[n, c, 2 * r + (a >> 1), 2 * q + (a & 1)] = grad[n, c, r, q]
    return dx_arr


def xnor_gemm(const uint64_t[:, ::1] a, const uint64_t[:, ::1] b, Py_ssize_t n_bits):
    """Signed dot products of packed rows: ``n - 2 * popcount(a ^ b)``."""
    cdef Py_ssize_t m = a.shape[0], k = b.shape[0], words = a.shape[1]
    if b.shape[1] != words:
        raise ValueError(f"word count mismatch: {a.shape[1]} vs {b.shape[1]}")
    out_arr = np.empty((m, k), dtype=np.int32)
    cdef int32_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, w
    cdef uint64_t tail_mask
    cdef int64_t diff
    cdef Py_ssize_t tail = n_bits - 64 * (words - 1)
    if words == 0:
        out_arr[...] = 0
        return out_arr
    if tail >= 64:
        tail_mask = <uint64_t>0xFFFFFFFFFFFFFFFF
    else:
        tail_mask = ((<uint64_t>1) << tail) - 1
    with nogil:
        for i in range(m):
            for j in range(k):
                diff = 0
                for w in range(words - 1):
                    diff += __builtin_popcountll(a[i, w] ^ b[j, w])
                diff += __builtin_popcountll((a[i, words - 1] ^ b[j, words - 1]) & tail_mask)
                out[i, j] = <int32_t>(n_bits - 2 * diff)
    return out_arr
