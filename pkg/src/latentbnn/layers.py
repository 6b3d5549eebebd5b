"""Layer primitives with explicit forward/backward passes, and the dual-path
convolution block.

A dual block runs two branches over shared parameters:

* binary: ``PReLU(BN_B(alpha * conv(sign(x), sign(W)))) + skip(x)``
* latent: ``PReLU(BN_W(conv(hard_tanh(x), W))) + skip(x)``

Both branches share ``gamma``/``beta`` and the PReLU slope but keep separate
running statistics. Only the binary branch is differentiated; the latent
branch is a pure feature extractor whose outputs never carry gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .binarize import alpha_scale, hard_tanh, hard_tanh_backward, sign_forward, ste_backward
from .errors import ShapeError, StateError
from .tensor import channel_stats, check_same_shape, conv2d, conv2d_backward

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PRELU_INIT = 0.25
NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def update(self, batch_mean, batch_var, momentum):
        self.mean[...] = (1 - momentum) * self.mean + momentum * batch_mean
        self.var[...] = (1 - momentum) * self.var + momentum * batch_var
        self.initialized = True

    def copy(self):
        return RunningStats(self.mean.copy(), self.var.copy(), self.initialized)


def batchnorm_forward(x, gamma, beta, mean=None, var=None, eps=BN_EPS):
    """Normalize per channel with the given statistics, or the batch's own
    statistics when ``mean``/``var`` are omitted.

    Returns ``(out, cache, batch_mean, batch_var)``; the batch moments are
    ``None`` when running statistics were supplied.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeError(f"batchnorm: input {tuple(x.shape)} vs gamma {tuple(gamma.shape)} beta {tuple(beta.shape)}")
    batch_mean = batch_var = None
    if mean is None:
        mean, var = batch_mean, batch_var = channel_stats(x)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma), batch_mean, batch_var


def batchnorm_backward(grad, cache):
    """Backward of train-mode batch normalization (batch statistics)."""
    xhat, inv_std, gamma = cache
    check_same_shape(grad, xhat, "batchnorm_backward")
    m = grad.shape[0] * grad.shape[2] * grad.shape[3]
    dgamma = (grad * xhat).sum(axis=(0, 2, 3))
    dbeta = grad.sum(axis=(0, 2, 3))
    dxhat = grad * gamma[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# elementwise / pooling / dense


def prelu_forward(x, slope):
    if x.ndim < 2 or x.shape[1] != slope.shape[0]:
        raise ShapeError(f"prelu: input {tuple(x.shape)} vs slope {tuple(slope.shape)}")
    s = slope.reshape((1, -1) + (1,) * (x.ndim - 2))
    return np.where(x > 0, x, s * x)


def prelu_backward(grad, x, slope):
    check_same_shape(grad, x, "prelu_backward")
    s = slope.reshape((1, -1) + (1,) * (x.ndim - 2))
    pos = x > 0
    dx = np.where(pos, grad, s * grad)
    axes = (0,) + tuple(range(2, x.ndim))
    dslope = np.where(pos, 0, grad * x).sum(axis=axes)
    return dx, dslope.astype(slope.dtype)


def maxpool2x2_forward(x):
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2x2 needs [N,C,H>=2,W>=2], got {tuple(x.shape)}")
    out, idx = kernels.maxpool2x2(x)
    return out, (idx, x.shape)


def maxpool2x2_backward(grad, cache):
    idx, x_shape = cache
    if grad.shape != idx.shape:
        raise ShapeError(f"maxpool2x2_backward: grad {tuple(grad.shape)} vs pooled {tuple(idx.shape)}")
    return kernels.maxpool2x2_backward(grad, idx, x_shape)


def global_avgpool(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool expects [N,C,H,W], got {tuple(x.shape)}")
    return x.mean(axis=(2, 3))


def global_avgpool_backward(grad, x_shape):
    n, c, h, w = x_shape
    if grad.shape != (n, c):
        raise ShapeError(f"global_avgpool_backward: grad {tuple(grad.shape)} vs {(n, c)}")
    scale = grad.dtype.type(1.0 / (h * w))
    return np.broadcast_to((grad * scale)[:, :, None, None], x_shape).copy()


def linear_forward(x, weight, bias=None):
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias[None, :]
    return out


def linear_backward(grad, x, weight, with_bias=True):
    if grad.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"linear_backward: grad {tuple(grad.shape)} vs {(x.shape[0], weight.shape[0])}")
    dx = grad @ weight
    dw = grad.T @ x
    db = grad.sum(axis=0) if with_bias else None
    return dx, dw, db


def l2_normalize(z, eps=NORM_EPS):
    norm = np.sqrt((z * z).sum(axis=1, keepdims=True) + eps)
    return z / norm, norm


def l2_normalize_backward(grad, z, norm):
    out = z / norm
    return grad / norm - out * ((grad * out).sum(axis=1, keepdims=True) / norm)


def pad_spatial(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def crop_spatial(x, pad):
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def skip_forward(x, out_channels):
    """Parameter-free shortcut: identity, or channel tiling when widening."""
    c = x.shape[1]
    if c == out_channels:
        return x
    if out_channels % c:
        raise ShapeError(f"shortcut cannot map {c} channels to {out_channels}")
    return np.tile(x, (1, out_channels // c, 1, 1))


def skip_backward(grad, in_channels):
    c_out = grad.shape[1]
    if c_out == in_channels:
        return grad
    n, _, h, w = grad.shape
    return grad.reshape(n, c_out // in_channels, in_channels, h, w).sum(axis=1)


# ---------------------------------------------------------------------------
# parameterised modules


class BatchNorm:
    """Single-statistics batch norm, used by the real-valued stem."""

    def __init__(self, channels, dtype=np.float32, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.stats = RunningStats.fresh(channels, dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, use_batch_stats, update=False):
        if use_batch_stats:
            out, cache, bm, bv = batchnorm_forward(x, self.gamma, self.beta, eps=self.eps)
            if update:
                self.stats.update(bm, bv, self.momentum)
            return out, cache
        if not self.stats.initialized:
            raise StateError("batch norm running statistics were never initialized; train or recalibrate first")
        out, cache, _, _ = batchnorm_forward(x, self.gamma, self.beta, self.stats.mean, self.stats.var, self.eps)
        return out, cache


class DualBatchNorm:
    """One affine pair shared by two branches, each with its own running stats."""

    def __init__(self, channels, dtype=np.float32, momentum=BN_MOMENTUM, eps=BN_EPS):
        if not 0 < momentum <= 1:
            raise ValueError(f"momentum must lie in (0, 1], got {momentum}")
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.stats_B = RunningStats.fresh(channels, dtype)
        self.stats_W = RunningStats.fresh(channels, dtype)
        self.momentum = momentum
        self.eps = eps

    def stats(self, which):
        if which == "B":
            return self.stats_B
        if which == "W":
            return self.stats_W
        raise ValueError(f"unknown statistics set {which!r}")

    def forward(self, x, which, use_batch_stats, update=False):
        if use_batch_stats:
            out, cache, bm, bv = batchnorm_forward(x, self.gamma, self.beta, eps=self.eps)
            if update:
                self.stats(which).update(bm, bv, self.momentum)
            return out, cache
        st = self.stats(which)
        if not st.initialized:
            raise StateError(
                f"running statistics stats_{which} were never initialized; train or recalibrate before evaluating"
            )
        out, cache, _, _ = batchnorm_forward(x, self.gamma, self.beta, st.mean, st.var, self.eps)
        return out, cache


@dataclass
class BlockCache:
    x_shape: tuple
    pool: tuple | None
    xp: np.ndarray
    s: np.ndarray
    cols: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    bn: tuple
    u: np.ndarray
    x_in_channels: int
    extras: dict = field(default_factory=dict)


class DualConvBlock:
    """One dual-path `BinAct-Conv-BN-Activation` layer with a residual skip.

    ``downsample`` applies 2x2 max pooling to the block input (both the
    convolution input and the shortcut) before anything else.
    """

    def __init__(self, w, stride=1, pad=1, downsample=False, skip=True, dtype=np.float32):
        k = w.shape[0]
        self.w = w.astype(dtype)
        self.bn = DualBatchNorm(k, dtype)
        self.prelu_slope = np.full(k, PRELU_INIT, dtype=dtype)
        self.stride = stride
        self.pad = pad
        self.downsample = downsample
        self.skip = skip
        # deployment-time frozen binary kernel; set by Model.freeze_binary()
        self.frozen = None
        # alpha held fixed during gradient checks of the surrogate network
        self.frozen_alpha = None

    @property
    def out_channels(self):
        return self.bn.gamma.shape[0]

    @property
    def in_channels(self):
        return (self.frozen[0] if self.frozen is not None else self.w).shape[1]

    def binary_kernel(self):
        """``(B, alpha)`` derived from the live latent weight."""
        if self.frozen is not None:
            return self.frozen
        return sign_forward(self.w), alpha_scale(self.w)

    def _enter(self, x):
        if self.downsample:
            return maxpool2x2_forward(x)
        return x, None

    def _residual(self, a, x_in):
        if not self.skip:
            return a
        return a + skip_forward(x_in, a.shape[1])

    def binary_forward(self, x, use_batch_stats, update_stats=False, surrogate=False, stats="B"):
        """Binary branch. Returns ``(y, cache)``.

        ``surrogate=True`` swaps sign() for hard_tanh() on activations and
        weights and holds alpha fixed, giving the differentiable network whose
        exact gradient the STE backward reproduces.
        """
        x_in, pool = self._enter(x)
        xp = pad_spatial(x_in, self.pad)
        if surrogate:
            s = hard_tanh(xp)
            b = hard_tanh(self.w)
            alpha = self.frozen_alpha if self.frozen_alpha is not None else alpha_scale(self.w)
        else:
            s = sign_forward(xp)
            b, alpha = self.binary_kernel()
        kh, kw = b.shape[2:]
        cols = kernels.im2col(s, kh, kw, self.stride, 0)
        # integer-valued conv first, then alpha: exact in float for the packed engine
        z = conv2d(s, b, self.stride, 0, cols=cols) * alpha.astype(s.dtype)[None, :, None, None]
        u, bn_cache = self.bn.forward(z, stats, use_batch_stats, update_stats)
        a = prelu_forward(u, self.prelu_slope)
        y = self._residual(a, x_in)
        cache = BlockCache(x.shape, pool, xp, s, cols, b, alpha, bn_cache, u, x_in.shape[1])
        return y, cache

    def latent_forward(self, x, use_batch_stats, update_stats=False, activation="hard_tanh", stats="W",
                       on_bn_input=None):
        """Latent branch: the real-valued W as feature extractor. No cache is kept.

        ``on_bn_input`` is called with the pre-normalization conv output.
        """
        if self.w is None:
            raise StateError("latent weights were dropped from this block (frozen for deployment)")
        x_in, _ = self._enter(x)
        xp = pad_spatial(x_in, self.pad)
        act = hard_tanh(xp) if activation == "hard_tanh" else sign_forward(xp)
        z = conv2d(act, self.w, self.stride, 0)
        if on_bn_input is not None:
            on_bn_input(z)
        u, _ = self.bn.forward(z, stats, use_batch_stats, update_stats)
        a = prelu_forward(u, self.prelu_slope)
        return self._residual(a, x_in)

    def binary_backward(self, cache: BlockCache, grad_y):
        """Gradients through the binary branch.

        Returns ``(grad_x, grads)`` where ``grads`` maps ``w``, ``gamma``,
        ``beta`` and ``prelu_slope`` to their gradients.
        """
        if grad_y.shape != cache.u.shape:
            raise ShapeError(f"block backward: grad {tuple(grad_y.shape)} vs output {tuple(cache.u.shape)}")
        grad_u, grad_slope = prelu_backward(grad_y, cache.u, self.prelu_slope)
        grad_z, grad_gamma, grad_beta = batchnorm_backward(grad_u, cache.bn)
        grad_zint = grad_z * cache.alpha.astype(grad_z.dtype)[None, :, None, None]
        grad_s, grad_b = conv2d_backward(grad_zint, cache.s, cache.b, self.stride, 0, cols=cache.cols)
        grad_w = ste_backward(grad_b, self.w)
        grad_x_in = crop_spatial(hard_tanh_backward(grad_s, cache.xp), self.pad)
        if self.skip:
            grad_x_in = grad_x_in + skip_backward(grad_y, cache.x_in_channels)
        if cache.pool is not None:
            grad_x = maxpool2x2_backward(np.ascontiguousarray(grad_x_in), cache.pool)
        else:
            grad_x = grad_x_in
        grads = {"w": grad_w, "gamma": grad_gamma, "beta": grad_beta, "prelu_slope": grad_slope}
        return grad_x, grads


def dual_block_forward(block: DualConvBlock, y_prev, ytil_prev, mode="train"):
    """Run both branches of ``block``.

    ``mode='train'`` normalizes with batch statistics and updates each branch's
    own running set; ``mode='eval'`` uses the running sets. Returns
    ``(y, ytil, cache)`` with the cache covering the binary branch only.
    """
    check_same_shape(y_prev, ytil_prev, "dual_block_forward inputs")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown block mode {mode!r}")
    train = mode == "train"
    y, cache = block.binary_forward(y_prev, use_batch_stats=train, update_stats=train)
    ytil = block.latent_forward(ytil_prev, use_batch_stats=train, update_stats=train)
    return y, ytil, cache


def dual_block_backward(block: DualConvBlock, cache, grad_y):
    """Returns ``(grad_y_prev, grad_w, grad_gamma, grad_beta, grad_slope)``."""
    grad_x, g = block.binary_backward(cache, grad_y)
    return grad_x, g["w"], g["gamma"], g["beta"], g["prelu_slope"]


class ProjectionHead:
    """Bias-free linear map followed by row-wise l2 normalization."""

    def __init__(self, weight):
        self.weight = weight

    @property
    def d(self):
        return self.weight.shape[0]

    def forward(self, feature):
        if feature.ndim != 2 or feature.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"projection: feature {tuple(feature.shape)} vs weight {tuple(self.weight.shape)}")
        z = feature @ self.weight.T
        out, norm = l2_normalize(z)
        return out, (feature, z, norm)

    def backward(self, grad_out, cache):
        feature, z, norm = cache
        grad_z = l2_normalize_backward(grad_out, z, norm)
        grad_feature = grad_z @ self.weight
        grad_weight = grad_z.T @ feature
        return grad_feature, grad_weight


def project(head: ProjectionHead, feature):
    return head.forward(feature)[0]
