"""Dual-path network assembly.

Layout: real-valued conv stem -> stages of dual blocks (2x2 max pooling at
every stage boundary after the first) -> global average pooling -> shared
real-valued classifier and projection head. The binary and latent branches
fork after the stem and both feed the same classifier/projection weights.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .binarize import alpha_scale
from .errors import ShapeError, StateError
from .tensor import Rng, conv2d, conv2d_backward

ARCH_DEFAULTS = {
    "tiny_cnn": {"stage_widths": (16, 32, 64), "blocks_per_stage": 2},
    "compact_resnet": {"stage_widths": (16, 16, 32, 64), "blocks_per_stage": 4},
}

MODES = ("train", "eval_B", "eval_W", "eval_W_outdated", "eval_dual", "probe")


@dataclass
class ModelSpec:
    arch: str = "tiny_cnn"
    stage_widths: tuple | None = None
    blocks_per_stage: int | None = None
    num_classes: int = 10
    projection_dim: int = 32
    input_shape: tuple = (3, 32, 32)

    def __post_init__(self):
        if self.arch not in ARCH_DEFAULTS:
            raise ValueError(f"unknown arch {self.arch!r}; choose from {sorted(ARCH_DEFAULTS)}")
        defaults = ARCH_DEFAULTS[self.arch]
        if self.stage_widths is None:
            self.stage_widths = defaults["stage_widths"]
        if self.blocks_per_stage is None:
            self.blocks_per_stage = defaults["blocks_per_stage"]
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    def validate(self):
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ValueError(f"stage widths must be positive, got {self.stage_widths}")
        for a, b in zip(self.stage_widths, self.stage_widths[1:]):
            if b % a:
                raise ValueError(f"stage width {b} must be a multiple of the previous width {a}")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.num_classes < 2 or self.projection_dim < 1:
            raise ValueError("num_classes must be >= 2 and projection_dim >= 1")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        side = min(self.input_shape[1:])
        if side >> (len(self.stage_widths) - 1) < 1:
            raise ValueError(f"input {self.input_shape} too small for {len(self.stage_widths)} stages")

    def to_dict(self):
        return asdict(self)


@dataclass
class DualForwardResult:
    logits_b: np.ndarray | None = None
    logits_w: np.ndarray | None = None
    penult_b: np.ndarray | None = None
    penult_w: np.ndarray | None = None
    proj_b: np.ndarray | None = None
    proj_w: np.ndarray | None = None
    per_layer_pairs: list = field(default_factory=list)
    binary_layers: list = field(default_factory=list)
    cache: dict | None = None


def kaiming(rng, shape, fan_in, dtype):
    return rng.normal(shape, std=float(np.sqrt(2.0 / fan_in)), dtype=dtype)


def uniform_fan_in(rng, shape, fan_in, dtype):
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual dense-layer default."""
    bound = 1.0 / np.sqrt(fan_in)
    return (rng.random(shape) * (2 * bound) - bound).astype(dtype)


class Model:
    def __init__(self, spec: ModelSpec, rng: Rng, dtype=np.float32):
        self.spec = spec
        c_in = spec.input_shape[0]
        widths = spec.stage_widths
        c0 = widths[0]
        self.stem_w = kaiming(rng, (c0, c_in, 3, 3), c_in * 9, dtype)
        self.stem_bn = L.BatchNorm(c0, dtype)
        self.stem_slope = np.full(c0, L.PRELU_INIT, dtype=dtype)
        self.blocks = []
        prev = c0
        for s, width in enumerate(widths):
            for i in range(spec.blocks_per_stage):
                w = kaiming(rng, (width, prev, 3, 3), prev * 9, dtype)
                self.blocks.append(L.DualConvBlock(w, downsample=(s > 0 and i == 0), dtype=dtype))
                prev = width
        self.classifier_w = uniform_fan_in(rng, (spec.num_classes, prev), prev, dtype)
        self.classifier_b = np.zeros(spec.num_classes, dtype=dtype)
        self.proj = L.ProjectionHead(uniform_fan_in(rng, (spec.projection_dim, prev), prev, dtype))

    # -- parameters ---------------------------------------------------------

    @property
    def feature_dim(self):
        return self.classifier_w.shape[1]

    @property
    def dtype(self):
        return self.stem_w.dtype

    def named_parameters(self):
        p = OrderedDict()
        p["stem.w"] = self.stem_w
        p["stem.gamma"] = self.stem_bn.gamma
        p["stem.beta"] = self.stem_bn.beta
        p["stem.prelu_slope"] = self.stem_slope
        for i, blk in enumerate(self.blocks):
            if blk.w is not None:
                p[f"blocks.{i}.w"] = blk.w
            p[f"blocks.{i}.gamma"] = blk.bn.gamma
            p[f"blocks.{i}.beta"] = blk.bn.beta
            p[f"blocks.{i}.prelu_slope"] = blk.prelu_slope
        p["classifier.w"] = self.classifier_w
        p["classifier.b"] = self.classifier_b
        p["proj.w"] = self.proj.weight
        return p

    def named_stats(self):
        """All running-statistic sets, keyed by name."""
        s = OrderedDict()
        s["stem.stats"] = self.stem_bn.stats
        for i, blk in enumerate(self.blocks):
            s[f"blocks.{i}.stats_B"] = blk.bn.stats_B
            s[f"blocks.{i}.stats_W"] = blk.bn.stats_W
        return s

    def layer_kinds(self):
        """``[(name, 'real' | 'dual'), ...]`` for every weight-bearing layer."""
        kinds = [("stem", "real")]
        kinds += [(f"blocks.{i}", "dual") for i in range(len(self.blocks))]
        kinds += [("classifier", "real"), ("proj", "real")]
        return kinds

    def parameter_count(self):
        return int(sum(p.size for p in self.named_parameters().values()))

    @staticmethod
    def decays(name):
        """Weight decay applies to everything except PReLU slopes."""
        return not name.endswith("prelu_slope")

    def astype(self, dtype):
        """Cast parameters and running statistics in place; returns self."""
        self.stem_w = self.stem_w.astype(dtype)
        self.stem_slope = self.stem_slope.astype(dtype)
        self.classifier_w = self.classifier_w.astype(dtype)
        self.classifier_b = self.classifier_b.astype(dtype)
        self.proj.weight = self.proj.weight.astype(dtype)
        bns = [self.stem_bn] + [b.bn for b in self.blocks]
        for bn in bns:
            bn.gamma = bn.gamma.astype(dtype)
            bn.beta = bn.beta.astype(dtype)
        for st in self.named_stats().values():
            st.mean = st.mean.astype(dtype)
            st.var = st.var.astype(dtype)
        for blk in self.blocks:
            if blk.w is not None:
                blk.w = blk.w.astype(dtype)
            blk.prelu_slope = blk.prelu_slope.astype(dtype)
        return self

    def freeze_binary(self):
        """Derive ``(B, alpha)`` once and drop the latent weights.

        Afterwards only the binary evaluation path works; it reads nothing
        but B, alpha, stats_B, the shared affine parameters and the
        real-valued layers.
        """
        for blk in self.blocks:
            if blk.frozen is None:
                blk.frozen = blk.binary_kernel()
            blk.w = None

    def set_frozen_alpha(self, enabled=True):
        for blk in self.blocks:
            blk.frozen_alpha = alpha_scale(blk.w).copy() if enabled else None


def build(spec: ModelSpec, rng: Rng, dtype=np.float32) -> Model:
    return Model(spec, rng, dtype)


def _stem_forward(model, x, use_batch_stats, update):
    if x.ndim != 4 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise ShapeError(f"input batch {tuple(x.shape)} does not match model input {model.spec.input_shape}")
    z = conv2d(x, model.stem_w, 1, 1)
    u, bn_cache = model.stem_bn.forward(z, use_batch_stats, update)
    y = L.prelu_forward(u, model.stem_slope)
    return y, (x, bn_cache, u)


def _head(model, feat_map):
    penult = L.global_avgpool(feat_map)
    logits = L.linear_forward(penult, model.classifier_w, model.classifier_b)
    proj, proj_cache = model.proj.forward(penult)
    return penult, logits, proj, proj_cache


def forward_dual(model: Model, x, mode="train", latent=True, surrogate=False, track_stats=True):
    """Evaluate the network.

    Modes:
      ``train``            both branches (latent optional) with batch statistics,
                           each updating its own running set; caches kept for backward
      ``eval_B``           binary branch only, running stats_B (deployment path)
      ``eval_W``           latent branch only, stats_W and hard_tanh activations
      ``eval_W_outdated``  latent weights with stats_B and sign activations
      ``eval_dual``        both branches with their running statistics
      ``probe``            both branches with batch statistics, nothing updated
    """
    if mode not in MODES:
        raise ValueError(f"unknown forward mode {mode!r}; choose from {MODES}")
    res = DualForwardResult()
    batch_stats = mode in ("train", "probe")
    update = mode == "train" and track_stats
    y0, stem_cache = _stem_forward(model, x, batch_stats, update)

    run_binary = mode in ("train", "eval_B", "eval_dual", "probe")
    run_latent = mode in ("eval_W", "eval_W_outdated", "eval_dual", "probe") or (mode == "train" and latent)

    block_caches = []
    if run_binary:
        y = y0
        for blk in model.blocks:
            y, c = blk.binary_forward(y, batch_stats, update, surrogate=surrogate and mode == "train")
            if mode == "train":
                block_caches.append(c)
            res.binary_layers.append(y)
        feat_b = y
        res.penult_b, res.logits_b, res.proj_b, proj_cache = _head(model, feat_b)
        if mode == "train":
            res.cache = {"stem": stem_cache, "blocks": block_caches, "feat_shape": feat_b.shape, "proj": proj_cache}
    if run_latent:
        act = "sign" if mode == "eval_W_outdated" else "hard_tanh"
        which = "B" if mode == "eval_W_outdated" else "W"
        yt = y0
        latent_layers = []
        for blk in model.blocks:
            yt = blk.latent_forward(yt, batch_stats, update, activation=act, stats=which)
            latent_layers.append(yt)
        res.penult_w, res.logits_w, res.proj_w, _ = _head(model, yt)
        if run_binary:
            res.per_layer_pairs = list(zip(res.binary_layers, latent_layers))
    return res


def backward_dual(model: Model, res: DualForwardResult, grad_logits_b, grad_penult_b=None, grad_proj_b=None,
                  layer_grads=None):
    """Accumulate parameter gradients through the binary branch only.

    ``grad_penult_b``/``grad_proj_b`` carry representation-loss gradients;
    ``layer_grads`` optionally adds a gradient at each dual block output.
    Latent-branch features never contribute.
    """
    if res.cache is None:
        raise StateError("backward_dual needs the caches of a train-mode forward")
    cache = res.cache
    grads = OrderedDict()
    penult = res.penult_b
    g_penult, g_cw, g_cb = L.linear_backward(grad_logits_b, penult, model.classifier_w)
    if grad_penult_b is not None:
        g_penult = g_penult + grad_penult_b
    g_proj_w = np.zeros_like(model.proj.weight)
    if grad_proj_b is not None:
        gf, g_proj_w = model.proj.backward(grad_proj_b, cache["proj"])
        g_penult = g_penult + gf
    g = L.global_avgpool_backward(g_penult.astype(model.dtype), cache["feat_shape"])
    block_grads = [None] * len(model.blocks)
    for i in range(len(model.blocks) - 1, -1, -1):
        if layer_grads is not None and layer_grads[i] is not None:
            g = g + layer_grads[i]
        g, block_grads[i] = model.blocks[i].binary_backward(cache["blocks"][i], g)
    x, stem_bn_cache, u = cache["stem"]
    g_u, g_stem_slope = L.prelu_backward(g, u, model.stem_slope)
    g_z, g_sg, g_sb = L.batchnorm_backward(g_u, stem_bn_cache)
    _, g_stem_w = conv2d_backward(g_z, x, model.stem_w, 1, 1)
    grads["stem.w"] = g_stem_w
    grads["stem.gamma"] = g_sg
    grads["stem.beta"] = g_sb
    grads["stem.prelu_slope"] = g_stem_slope
    for i, bg in enumerate(block_grads):
        grads[f"blocks.{i}.w"] = bg["w"]
        grads[f"blocks.{i}.gamma"] = bg["gamma"]
        grads[f"blocks.{i}.beta"] = bg["beta"]
        grads[f"blocks.{i}.prelu_slope"] = bg["prelu_slope"]
    grads["classifier.w"] = g_cw
    grads["classifier.b"] = g_cb
    grads["proj.w"] = g_proj_w
    return grads
