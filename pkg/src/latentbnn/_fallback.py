"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Results are bit-identical to the compiled versions; the tests compare the two
backends directly.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, c, oh, ow, kh, kw) -> (n, oh, ow, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    d = cols.reshape(n, oh, ow, c, kh, kw)
    padded = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    # reverse offset order reproduces the compiled kernel's summation order
    for i in reversed(range(kh)):
        for j in reversed(range(kw)):
            padded[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(padded[:, :, pad : pad + h, pad : pad + w])
    return padded


def maxpool2x2(x):
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    blocks = x[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, oh, ow, 4)
    idx = blocks.argmax(axis=-1).astype(np.int8)  # argmax keeps the first maximum
    out = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx, x_shape):
    n, c, oh, ow = grad.shape
    dx = np.zeros(x_shape, dtype=grad.dtype)
    nn, cc, rr, qq = np.indices((n, c, oh, ow), sparse=True)
    idx = idx.astype(np.intp)
    dx[nn, cc, 2 * rr + (idx >> 1), 2 * qq + (idx & 1)] = grad
    return dx


def xnor_gemm(a, b, n_bits, chunk=256):
    m, words = a.shape
    if b.shape[1] != words:
        raise ValueError(f"word count mismatch: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((m, b.shape[0]), dtype=np.int32)
    if words == 0:
        out[...] = 0
        return out
    tail = n_bits - 64 * (words - 1)
    mask = np.full(words, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    if tail < 64:
        mask[-1] = np.uint64((1 << tail) - 1)
    for start in range(0, m, chunk):
        diff = np.bitwise_and(np.bitwise_xor(a[start : start + chunk, None, :], b[None, :, :]), mask)
        ones = np.bitwise_count(diff).sum(axis=-1, dtype=np.int64)
        out[start : start + chunk] = n_bits - 2 * ones
    return out
