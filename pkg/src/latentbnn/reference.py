"""Slow scalar-loop reference implementations.

These exist to check the fast paths. They loop in Python on purpose and are
only practical on small inputs.
"""

import numpy as np


def naive_conv2d(x, weight, stride=1, pad=0):
    n, c, h, w = x.shape
    k, _, kh, kw = weight.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, oh, ow), dtype=np.float64)
    for b in range(n):
        for o in range(k):
            for r in range(oh):
                for q in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                y = r * stride + i - pad
                                z = q * stride + j - pad
                                if 0 <= y < h and 0 <= z < w:
                                    acc += float(x[b, ci, y, z]) * float(weight[o, ci, i, j])
                    out[b, o, r, q] = acc
    return out


def naive_matmul(a, b):
    m, kk = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(kk):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def naive_channel_stats(x):
    n, c, h, w = x.shape
    count = n * h * w
    mean = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        s = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    s += float(x[b, ch, i, j])
        m = s / count
        s2 = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    d = float(x[b, ch, i, j]) - m
                    s2 += d * d
        mean[ch] = m
        var[ch] = s2 / count
    return mean, var
