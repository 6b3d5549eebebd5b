"""Adam with L2-style weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .errors import NumericalError


def cosine_lr(step, total_steps, lr0):
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1 + math.cos(math.pi * step / total_steps)) / 2


class Adam:
    def __init__(self, params: "OrderedDict[str, np.ndarray]", lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, decays=None):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decays = decays or (lambda name: True)
        self.m = OrderedDict((k, np.zeros_like(p)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros_like(p)) for k, p in params.items())
        self.step_count = 0

    def step(self, params, grads, lr=None):
        """Update ``params`` in place from ``grads`` (same keys)."""
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
            if self.weight_decay and self.decays(name):
                g = g + self.weight_decay * p
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
