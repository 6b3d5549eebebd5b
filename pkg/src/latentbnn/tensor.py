"""Dense array primitives: convolution, matrix product, channel statistics and
seeded randomness.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Nothing here
broadcasts implicitly; mismatched shapes raise :class:`ShapeError`.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ShapeError


def check_same_shape(a, b, what="operands"):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x, weight, stride, pad):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kh, kw = weight.shape[2:]
    if kh > x.shape[2] + 2 * pad or kw > x.shape[3] + 2 * pad:
        raise ShapeError(
            f"kernel {tuple(weight.shape)} larger than padded input {tuple(x.shape)} (pad={pad})"
        )


def conv2d(x, weight, stride=1, pad=0, cols=None):
    """Cross-correlate ``x`` [N,C,H,W] with ``weight`` [K,C,kh,kw].

    ``cols`` may carry a precomputed patch matrix from :func:`kernels.im2col`.
    """
    _check_conv(x, weight, stride, pad)
    n, _, h, w = x.shape
    k, _, kh, kw = weight.shape
    oh, ow = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if cols is None:
        cols = kernels.im2col(x, kh, kw, stride, pad)
    out = cols @ weight.reshape(k, -1).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, weight, stride=1, pad=0, cols=None):
    """Return ``(grad_input, grad_weight)`` for :func:`conv2d`."""
    _check_conv(x, weight, stride, pad)
    n, _, h, w = x.shape
    k, c, kh, kw = weight.shape
    expect = (n, k, conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad))
    if grad_out.shape != expect:
        raise ShapeError(f"conv2d_backward: grad_out {tuple(grad_out.shape)} vs expected {expect}")
    if cols is None:
        cols = kernels.im2col(x, kh, kw, stride, pad)
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, k)
    grad_w = (g.T @ cols).reshape(weight.shape)
    dcols = g @ weight.reshape(k, -1)
    grad_x = kernels.col2im(dcols, x.shape, kh, kw, stride, pad)
    return grad_x, grad_w


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def channel_stats(x):
    """Per-channel mean and biased variance over the N, H, W axes."""
    if x.ndim != 4:
        raise ShapeError(f"channel_stats expects [N,C,H,W], got {tuple(x.shape)}")
    if x.shape[0] * x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"channel_stats needs at least one element per channel, got {tuple(x.shape)}")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    return mean, var


class Rng:
    """Seeded random stream (PCG64) whose state can be saved and restored."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, std=1.0, dtype=np.float32):
        return seeded_normal(self, shape, std, dtype)

    def permutation(self, n):
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size)

    def get_state(self) -> np.ndarray:
        """Encode the generator state as six unsigned 64-bit words."""
        st = self._gen.bit_generator.state
        mask = (1 << 64) - 1
        s, inc = st["state"]["state"], st["state"]["inc"]
        return np.array(
            [s >> 64, s & mask, inc >> 64, inc & mask, st["has_uint32"], st["uinteger"]],
            dtype=np.uint64,
        )

    def set_state(self, words) -> None:
        w = [int(v) for v in np.asarray(words, dtype=np.uint64)]
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
            "has_uint32": w[4],
            "uinteger": w[5],
        }


def seeded_normal(rng: Rng, shape, std=1.0, dtype=np.float32):
    """I.i.d. zero-mean normal draws with standard deviation ``std``."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return (rng.generator.standard_normal(size=shape) * std).astype(dtype)
