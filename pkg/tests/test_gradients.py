"""Finite-difference checks of every backward pass, in float64."""

import numpy as np
import pytest

from latentbnn import layers as L
from latentbnn import losses as Ls
from latentbnn.binarize import hard_tanh, hard_tanh_backward
from latentbnn.models import ModelSpec, backward_dual, build, forward_dual
from latentbnn.tensor import Rng, conv2d, conv2d_backward

import gradcheck

OP_TOL = 1e-4
LOSS_TOL = 1e-6


def projected(out_fn, shape, seed):
    """Scalar loss <out, R> for a fixed random R."""
    r = np.random.default_rng(seed).standard_normal(shape)
    return lambda: float((out_fn() * r).sum()), r


def op_conv(seed):
    g = np.random.default_rng(seed)
    x, w = g.standard_normal((2, 3, 6, 5)), g.standard_normal((4, 3, 3, 3))
    loss, r = projected(lambda: conv2d(x, w, 2, 1), (2, 4, 3, 3), seed + 1)
    gx, gw = conv2d_backward(r, x, w, 2, 1)
    return loss, {"x": x, "w": w}, {"x": gx, "w": gw}


def op_batchnorm(seed):
    g = np.random.default_rng(seed)
    x = g.standard_normal((4, 3, 3, 3)) * 2 + 1
    gamma, beta = g.standard_normal(3), g.standard_normal(3)
    loss, r = projected(lambda: L.batchnorm_forward(x, gamma, beta)[0], x.shape, seed + 1)
    _, cache, _, _ = L.batchnorm_forward(x, gamma, beta)
    gx, gg, gb = L.batchnorm_backward(r, cache)
    return loss, {"x": x, "gamma": gamma, "beta": beta}, {"x": gx, "gamma": gg, "beta": gb}


def op_prelu(seed):
    g = np.random.default_rng(seed)
    x, a = g.standard_normal((3, 4, 2, 2)), g.random(4)
    loss, r = projected(lambda: L.prelu_forward(x, a), x.shape, seed + 1)
    gx, ga = L.prelu_backward(r, x, a)
    return loss, {"x": x, "slope": a}, {"x": gx, "slope": ga}


def op_maxpool(seed):
    g = np.random.default_rng(seed)
    x = g.standard_normal((2, 3, 4, 6))
    loss, r = projected(lambda: L.maxpool2x2_forward(x)[0], (2, 3, 2, 3), seed + 1)
    _, cache = L.maxpool2x2_forward(x)
    return loss, {"x": x}, {"x": L.maxpool2x2_backward(r, cache)}


def op_linear(seed):
    g = np.random.default_rng(seed)
    x, w, b = g.standard_normal((5, 4)), g.standard_normal((3, 4)), g.standard_normal(3)
    loss, r = projected(lambda: L.linear_forward(x, w, b), (5, 3), seed + 1)
    gx, gw, gb = L.linear_backward(r, x, w)
    return loss, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}


def op_projection(seed):
    g = np.random.default_rng(seed)
    head = L.ProjectionHead(g.standard_normal((4, 6)))
    f = g.standard_normal((5, 6))
    loss, r = projected(lambda: head.forward(f)[0], (5, 4), seed + 1)
    gf, gw = head.backward(r, head.forward(f)[1])
    return loss, {"f": f, "w": head.weight}, {"f": gf, "w": gw}


def op_hard_tanh(seed):
    g = np.random.default_rng(seed)
    x = g.standard_normal((40,)) * 1.5
    loss, r = projected(lambda: hard_tanh(x), x.shape, seed + 1)
    return loss, {"x": x}, {"x": hard_tanh_backward(r, x)}


def op_cross_entropy(seed):
    g = np.random.default_rng(seed)
    z, lab = g.standard_normal((6, 5)) * 2, g.integers(0, 5, 6)
    return (lambda: Ls.cross_entropy(z, lab)[0]), {"z": z}, {"z": Ls.cross_entropy(z, lab)[1]}


def op_label_aware(seed):
    g = np.random.default_rng(seed)
    y, yt, lab = g.standard_normal((10, 4)), g.standard_normal((10, 4)), g.integers(0, 3, 10)
    grad = Ls.rep_label_aware_backward(Ls.RepBatch(y, yt, lab))
    return (lambda: Ls.rep_label_aware(Ls.RepBatch(y, yt, lab))), {"y": y}, {"y": grad}


def op_fre_regularizer(seed):
    g = np.random.default_rng(seed)
    pairs = [(g.standard_normal((2, 3, 4, 4)), g.standard_normal((2, 3, 4, 4))) for _ in range(3)]
    coef = 0.7
    grads = Ls.fre_regularizer_backward(pairs, coef)
    params = {f"y{i}": y for i, (y, _) in enumerate(pairs)}
    return (lambda: coef * sum(Ls.fre(yt, y) for y, yt in pairs)), params, {f"y{i}": gr for i, gr in enumerate(grads)}


def op_full_model(seed):
    """The whole tiny network in its differentiable surrogate form.

    sign() is replaced by hard_tanh() on activations and weights and alpha is
    held fixed, so the analytic STE gradient is the exact derivative.
    """
    spec = ModelSpec(stage_widths=(4, 8), blocks_per_stage=1, input_shape=(2, 6, 6), projection_dim=3, num_classes=4)
    model = build(spec, Rng(seed), np.float64)
    model.set_frozen_alpha(True)
    g = np.random.default_rng(seed)
    x, lab = g.standard_normal((5, 2, 6, 6)), g.integers(0, 4, 5)
    yt = g.standard_normal((5, 3))
    lam = 0.5

    def run():
        res = forward_dual(model, x, "train", latent=False, surrogate=True, track_stats=False)
        ce, gl = Ls.cross_entropy(res.logits_b, lab)
        b = Ls.RepBatch(res.proj_b, yt, lab)
        return res, ce + lam * Ls.rep_label_aware(b), gl, lam * Ls.rep_label_aware_backward(b)

    res, _, gl, gp = run()
    grads = backward_dual(model, res, gl, grad_proj_b=gp)
    params = model.named_parameters()
    return (lambda: run()[1]), params, grads


OPS = {
    "conv": (op_conv, OP_TOL),
    "batchnorm": (op_batchnorm, OP_TOL),
    "prelu": (op_prelu, OP_TOL),
    "maxpool": (op_maxpool, OP_TOL),
    "linear": (op_linear, OP_TOL),
    "projection+normalize": (op_projection, OP_TOL),
    "hard_tanh": (op_hard_tanh, OP_TOL),
    "cross_entropy": (op_cross_entropy, LOSS_TOL),
    "label_aware_loss": (op_label_aware, LOSS_TOL),
    "fre_regularizer": (op_fre_regularizer, LOSS_TOL),
    "full_tiny_model": (op_full_model, OP_TOL),
}


def run_check(name, seed=0, points=20):
    make, tol = OPS[name]
    loss, params, grads = make(seed)
    worst, checked, redrawn = gradcheck.check(loss, params, grads, points=points, seed=seed, tol=tol)
    return worst, checked, redrawn, tol


@pytest.mark.parametrize("name", list(OPS))
def test_gradient(name):
    worst, checked, _, tol = run_check(name, seed=3)
    assert checked >= 20
    assert worst <= tol, f"{name}: max relative error {worst:.2e}"


def test_full_model_weight_gradient_is_masked_outside_window():
    spec = ModelSpec(stage_widths=(2,), blocks_per_stage=1, input_shape=(1, 4, 4), projection_dim=2, num_classes=2)
    model = build(spec, Rng(0), np.float64)
    model.blocks[0].w[0, 0, 0, 0] = 1.5
    x = np.random.default_rng(0).standard_normal((3, 1, 4, 4))
    res = forward_dual(model, x, "train", latent=False)
    grads = backward_dual(model, res, Ls.cross_entropy(res.logits_b, np.array([0, 1, 0]))[1])
    assert grads["blocks.0.w"][0, 0, 0, 0] == 0
