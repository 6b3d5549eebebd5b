"""Word-packed binary inference.

Bit convention: bit ``k`` of word ``w`` holds element ``64*w + k``; a set bit
means +1. Convolution patches are packed in (C, kh, kw) row-major order.
Unused high bits of the last word are zero and masked out of every dot
product.

Zero padding is applied before sign(), so padded taps binarize to +1 exactly
as in the float binary path.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import kernels, serialize
from .binarize import sign_forward
from .errors import FormatError, ShapeError, StateError
from .layers import batchnorm_forward, global_avgpool, linear_forward, maxpool2x2_forward, pad_spatial, prelu_forward, skip_forward
from .models import Model
from .tensor import conv2d, conv_output_size

WORD = 64


def n_words(n):
    return (n + WORD - 1) // WORD


def pack(b):
    """Pack the last axis of a ±1 array into uint64 words. Returns ``(words, n)``."""
    b = np.asarray(b)
    if not np.all((b == 1) | (b == -1)):
        raise ValueError("pack expects elements in {-1, +1}")
    n = b.shape[-1]
    bits = (b > 0).astype(np.uint8)
    pad = n_words(n) * WORD - n
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1)
    by = np.packbits(bits, axis=-1, bitorder="little")
    words = np.ascontiguousarray(by).view("<u8").astype(np.uint64)
    return words, n


def unpack(words, n, dtype=np.float32):
    words = np.ascontiguousarray(words, dtype="<u8")
    if n > words.shape[-1] * WORD or n <= (words.shape[-1] - 1) * WORD:
        raise ShapeError(f"{words.shape[-1]} words cannot hold exactly {n} elements")
    bits = np.unpackbits(words.view(np.uint8), axis=-1, bitorder="little")[..., :n]
    return (bits.astype(dtype) * 2 - 1).astype(dtype)


def xnor_popcount_dot(a_words, b_words, n):
    """±1 dot product of two packed vectors of ``n`` valid bits."""
    a_words = np.asarray(a_words, dtype=np.uint64).reshape(1, -1)
    b_words = np.asarray(b_words, dtype=np.uint64).reshape(1, -1)
    if a_words.shape != b_words.shape:
        raise ShapeError(f"word counts differ: {a_words.shape[1]} vs {b_words.shape[1]}")
    if n_words(n) != a_words.shape[1]:
        raise ShapeError(f"n={n} needs {n_words(n)} words, got {a_words.shape[1]}")
    return int(kernels.xnor_gemm(a_words, b_words, n)[0, 0])


# ---------------------------------------------------------------------------
# BN -> sign folding


def fold_bn_sign(gamma, beta, mean, var, eps):
    """Per channel ``(tau, flip, foldable)`` with ``sign(BN(x)) == folded_sign(x, tau, flip)``.

    Channels with ``gamma == 0`` cannot be folded: ``foldable`` is False and
    ``tau`` is NaN, and such a layer must keep the explicit normalization.
    """
    gamma, beta, mean, var = (np.asarray(v, dtype=np.float64) for v in (gamma, beta, mean, var))
    ok = gamma != 0
    std = np.sqrt(var + eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(ok, mean - beta * std / np.where(ok, gamma, 1.0), np.nan)
    return tau, gamma < 0, ok


def folded_sign(x, tau, flip, axis=1):
    """+1 where ``x >= tau`` (``x <= tau`` for flipped channels), else -1."""
    shape = [1] * np.ndim(x)
    shape[axis] = -1
    tau = np.asarray(tau).reshape(shape)
    flip = np.asarray(flip).reshape(shape)
    pos = np.where(flip, x <= tau, x >= tau)
    return np.where(pos, 1.0, -1.0).astype(np.asarray(x).dtype if np.ndim(x) else np.float64)


def integer_thresholds(tau, flip, alpha):
    """Thresholds on the integer dot product ``p`` (BN input is ``alpha * p``, alpha > 0).

    Non-flipped channels output +1 iff ``p >= thr``; flipped iff ``p <= thr``.
    """
    tau = np.asarray(tau, dtype=np.float64)
    r = tau / np.asarray(alpha, dtype=np.float64)
    return np.where(flip, np.floor(r), np.ceil(r)).astype(np.int64)


def threshold_sign(counts, thr, flip):
    """Integer-domain :func:`folded_sign` over the last (channel) axis of ``counts``."""
    pos = np.where(flip, counts <= thr, counts >= thr)
    return np.where(pos, 1, -1).astype(np.int8)


# ---------------------------------------------------------------------------
# packed layers


@dataclass
class PackedActivations:
    words: np.ndarray  # [N*OH*OW, n_words]
    n: int
    shape: tuple  # (N, OH, OW)


@dataclass
class PackedLayer:
    words: np.ndarray  # [K, n_words]
    n: int
    alpha: np.ndarray
    kh: int
    kw: int
    stride: int
    pad: int
    downsample: bool
    skip: bool
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float
    slope: np.ndarray
    tau: np.ndarray = field(default=None)
    flip: np.ndarray = field(default=None)
    foldable: np.ndarray = field(default=None)

    @property
    def out_channels(self):
        return self.words.shape[0]

    @property
    def in_channels(self):
        return self.n // (self.kh * self.kw)


def pack_activations(x, layer: PackedLayer):
    """Zero-pad, binarize and pack every receptive field of ``x``."""
    if x.shape[1] * layer.kh * layer.kw != layer.n:
        raise ShapeError(f"input with {x.shape[1]} channels does not fit a layer with n={layer.n}")
    s = sign_forward(pad_spatial(x, layer.pad))
    cols = kernels.im2col(s, layer.kh, layer.kw, layer.stride, 0)
    words, n = pack(cols)
    _, _, h, w = s.shape
    oh = conv_output_size(h, layer.kh, layer.stride, 0)
    ow = conv_output_size(w, layer.kw, layer.stride, 0)
    return PackedActivations(words, n, (x.shape[0], oh, ow))


def packed_conv2d(layer: PackedLayer, act: PackedActivations, dtype=np.float32):
    """xnor/popcount convolution, then per-channel alpha. Returns NCHW floats."""
    if act.n != layer.n or act.words.shape[1] != layer.words.shape[1]:
        raise ShapeError(f"activation layout (n={act.n}) does not match layer (n={layer.n})")
    counts = kernels.xnor_gemm(act.words, layer.words, layer.n)
    n, oh, ow = act.shape
    z = np.ascontiguousarray(counts.astype(dtype).reshape(n, oh, ow, -1).transpose(0, 3, 1, 2))
    return z * layer.alpha.astype(dtype)[None, :, None, None]


def pack_layer(block, bn_stats="B"):
    """Packed form of a trained dual block's binary branch."""
    st = block.bn.stats(bn_stats)
    if not st.initialized:
        raise StateError("cannot export a block whose stats_B were never initialized")
    b, alpha = block.binary_kernel()
    k, c, kh, kw = b.shape
    words, n = pack(b.reshape(k, -1))
    tau, flip, ok = fold_bn_sign(block.bn.gamma, block.bn.beta, st.mean, st.var, block.bn.eps)
    return PackedLayer(
        words, n, np.array(alpha, dtype=np.float32), kh, kw, block.stride, block.pad, block.downsample, block.skip,
        block.bn.gamma.copy(), block.bn.beta.copy(), st.mean.copy(), st.var.copy(), float(block.bn.eps),
        block.prelu_slope.copy(), tau, flip, ok,
    )


# ---------------------------------------------------------------------------
# whole model


@dataclass
class PackedModel:
    input_shape: tuple
    stem_w: np.ndarray
    stem_gamma: np.ndarray
    stem_beta: np.ndarray
    stem_mean: np.ndarray
    stem_var: np.ndarray
    stem_eps: float
    stem_slope: np.ndarray
    layers: list
    classifier_w: np.ndarray
    classifier_b: np.ndarray

    _LAYER_ARRAYS = ("words", "alpha", "gamma", "beta", "mean", "var", "slope", "tau", "flip", "foldable")
    _LAYER_INTS = ("n", "kh", "kw", "stride", "pad", "downsample", "skip")

    def to_records(self):
        rec = OrderedDict()
        rec["input_shape"] = np.array(self.input_shape, dtype=np.int64)
        rec["num_layers"] = np.array(len(self.layers), dtype=np.int64)
        for name in ("stem_w", "stem_gamma", "stem_beta", "stem_mean", "stem_var", "stem_slope", "classifier_w", "classifier_b"):
            rec[name] = getattr(self, name)
        rec["stem_eps"] = np.array(self.stem_eps, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            for name in self._LAYER_ARRAYS:
                arr = getattr(layer, name)
                rec[f"layers.{i}.{name}"] = arr.astype(np.uint8) if arr.dtype == np.bool_ else arr
            rec[f"layers.{i}.ints"] = np.array([int(getattr(layer, a)) for a in self._LAYER_INTS], dtype=np.int64)
            rec[f"layers.{i}.eps"] = np.array(layer.eps, dtype=np.float64)
        return rec

    @classmethod
    def from_records(cls, rec):
        try:
            layers = []
            for i in range(int(rec["num_layers"])):
                arrays = {a: rec[f"layers.{i}.{a}"] for a in cls._LAYER_ARRAYS}
                arrays["flip"] = arrays["flip"].astype(bool)
                arrays["foldable"] = arrays["foldable"].astype(bool)
                ints = dict(zip(cls._LAYER_INTS, (int(v) for v in rec[f"layers.{i}.ints"])))
                ints["downsample"] = bool(ints["downsample"])
                ints["skip"] = bool(ints["skip"])
                layers.append(PackedLayer(eps=float(rec[f"layers.{i}.eps"]), **arrays, **ints))
            return cls(
                tuple(int(v) for v in rec["input_shape"]),
                rec["stem_w"], rec["stem_gamma"], rec["stem_beta"], rec["stem_mean"], rec["stem_var"],
                float(rec["stem_eps"]), rec["stem_slope"], layers, rec["classifier_w"], rec["classifier_b"],
            )
        except KeyError as exc:
            raise FormatError(f"packed model is missing record {exc}") from None

    def save(self, path):
        serialize.save(path, self.to_records(), serialize.PACKED_MAGIC)

    @classmethod
    def load(cls, path):
        return cls.from_records(serialize.load(path, serialize.PACKED_MAGIC))


def export_packed(model: Model) -> PackedModel:
    """Freeze the eval_B configuration of ``model`` into packed form."""
    st = model.stem_bn.stats
    if not st.initialized:
        raise StateError("cannot export an untrained model: stem statistics were never initialized")
    return PackedModel(
        tuple(model.spec.input_shape),
        model.stem_w.copy(), model.stem_bn.gamma.copy(), model.stem_bn.beta.copy(), st.mean.copy(), st.var.copy(),
        float(model.stem_bn.eps), model.stem_slope.copy(),
        [pack_layer(b) for b in model.blocks],
        model.classifier_w.copy(), model.classifier_b.copy(),
    )


def infer(pm: PackedModel, x, return_activations=False):
    """Logits for a batch. With ``return_activations`` also returns, per layer,
    the packed binary input activations and the float block output.
    """
    x = np.asarray(x, dtype=pm.stem_w.dtype)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(pm.input_shape):
        raise ShapeError(f"input batch {tuple(x.shape)} does not match packed model input {pm.input_shape}")
    acts = []
    if x.shape[0] == 0:
        logits = np.zeros((0, pm.classifier_w.shape[0]), dtype=x.dtype)
        return (logits, acts) if return_activations else logits
    z = conv2d(x, pm.stem_w, 1, 1)
    u = batchnorm_forward(z, pm.stem_gamma, pm.stem_beta, pm.stem_mean, pm.stem_var, pm.stem_eps)[0]
    y = prelu_forward(u, pm.stem_slope)
    for layer in pm.layers:
        x_in = maxpool2x2_forward(y)[0] if layer.downsample else y
        a = pack_activations(x_in, layer)
        z = packed_conv2d(layer, a, x.dtype)
        u = batchnorm_forward(z, layer.gamma, layer.beta, layer.mean, layer.var, layer.eps)[0]
        y = prelu_forward(u, layer.slope)
        if layer.skip:
            y = y + skip_forward(x_in, y.shape[1])
        if return_activations:
            acts.append((a, y))
    logits = linear_forward(global_avgpool(y), pm.classifier_w, pm.classifier_b)
    return (logits, acts) if return_activations else logits
