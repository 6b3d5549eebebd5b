"""Weight/activation binarization, per-channel scale factors and the
straight-through estimator.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import check_same_shape


@dataclass
class BinarizeResult:
    b: np.ndarray
    alpha: np.ndarray


def sign_forward(w):
    """Elementwise sign with ``sign(0) = +1``; output values are exactly +-1."""
    one = np.ones((), dtype=w.dtype)
    return np.where(w >= 0, one, -one)


def alpha_scale(w):
    """Per-output-channel scale minimising ``||W - alpha * sign(W)||^2``.

    The minimiser is the mean absolute value over each output channel's
    ``C * kh * kw`` kernel elements.
    """
    if w.ndim < 2 or w[0].size < 1:
        raise ValueError(f"alpha_scale needs a [K, ...] tensor with non-empty channels, got {w.shape}")
    return np.abs(w).reshape(w.shape[0], -1).mean(axis=1)


def binarize_weight(w):
    return BinarizeResult(sign_forward(w), alpha_scale(w))


def quantization_error(w, alpha):
    """Per-channel ``||W_k - alpha_k * sign(W_k)||^2``."""
    b = sign_forward(w).reshape(w.shape[0], -1)
    flat = w.reshape(w.shape[0], -1)
    return ((flat - np.asarray(alpha)[:, None] * b) ** 2).sum(axis=1)


def window_mask(x):
    """The indicator ``|x| < 1`` shared by the STE and hard_tanh's derivative."""
    return (np.abs(x) < 1).astype(x.dtype)


def ste_backward(grad_b, w):
    check_same_shape(grad_b, w, "ste_backward")
    return grad_b * window_mask(w)


def hard_tanh(x):
    return np.clip(x, -1, 1)


def hard_tanh_backward(grad, x):
    check_same_shape(grad, x, "hard_tanh_backward")
    return grad * window_mask(x)
