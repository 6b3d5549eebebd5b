"""Cross-entropy, representation-approximation losses and feature
reconstruction error.

``y`` always denotes binary-path features and ``ytil`` latent-path features.
``ytil`` is treated as a constant: no function here returns a gradient for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import check_same_shape


@dataclass
class RepBatch:
    y: np.ndarray
    ytil: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        check_same_shape(self.y, self.ytil, "RepBatch y/ytil")
        if self.y.ndim != 2:
            raise ShapeError(f"RepBatch features must be [N, D], got {tuple(self.y.shape)}")
        self.labels = np.asarray(self.labels)
        if self.labels.shape != (self.y.shape[0],):
            raise ShapeError(f"RepBatch labels {self.labels.shape} vs {self.y.shape[0]} rows")


@dataclass
class LossReport:
    ce: float
    rep: float
    fre_per_layer: list = field(default_factory=list)
    total: float = 0.0


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= n
    return float(loss), grad


def same_label_matrix(labels):
    """``M[i, j] = 1`` iff ``i != j`` and both rows share a label."""
    labels = np.asarray(labels)
    m = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(m, 0.0)
    return m


def label_weights(labels, dim):
    """``K_i = 1 / ((3 |I(i)| + 1) * D)`` per row."""
    counts = same_label_matrix(labels).sum(axis=1)
    return 1.0 / ((3 * counts + 1) * dim)


def _pairwise_sq(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


def rep_instance(batch: RepBatch):
    """Instance-level approximation: sum over rows of ``||ytil_i - y_i||^2``."""
    d = batch.ytil.astype(np.float64) - batch.y
    return float((d * d).sum(axis=1).sum())


def rep_instance_backward(batch: RepBatch):
    return 2 * (batch.y - batch.ytil)


def rep_label_aware(batch: RepBatch):
    """Label-aware approximation over same-label pairs within the batch.

    For every row ``i`` with same-label partners ``I(i)``::

        K_i * ( ||ytil_i - y_i||^2
                + sum_{j in I(i)} ||y_i - y_j||^2 + ||ytil_i - y_j||^2 + ||y_i - ytil_j||^2 )

    The latent-latent pair term is deliberately absent.
    """
    y = batch.y.astype(np.float64)
    yt = batch.ytil.astype(np.float64)
    m = same_label_matrix(batch.labels)
    deg = m.sum(axis=1)
    inst = ((yt - y) ** 2).sum(axis=1)
    cat = (m * (_pairwise_sq(y, y) + _pairwise_sq(yt, y) + _pairwise_sq(y, yt))).sum(axis=1)
    # K_i = 1 / ((3|I(i)| + 1) D), with D factored out of the sum
    return float(((inst + cat) / (3 * deg + 1)).sum() / y.shape[1])


def rep_label_aware_backward(batch: RepBatch):
    """Exact gradient of :func:`rep_label_aware` with respect to ``y``.

    Row ``k`` appears both in its own bracket and as the ``j`` element of its
    same-label partners' brackets; both contributions are included.
    """
    y = batch.y.astype(np.float64)
    yt = batch.ytil.astype(np.float64)
    m = same_label_matrix(batch.labels)
    k = label_weights(batch.labels, y.shape[1])
    deg = m.sum(axis=1)
    s = y + yt
    own = 2 * k[:, None] * ((y - yt) + 2 * deg[:, None] * y - m @ s)
    mk = m.T @ k
    partner = 2 * (2 * mk[:, None] * y - m.T @ (k[:, None] * s))
    return (own + partner).astype(batch.y.dtype)


def rep_label_aware_grad_printed(batch: RepBatch):
    """The closed-form row gradient as it is commonly printed::

        2 K_i [ (2|I(i)| + 1) y_i - sum_{j in I(i) + i} ytil_j - sum_{j in I(i)} y_j ]

    It counts each same-label pair once, so it differs from the exact
    derivative on the cross terms. Kept as a diagnostic only.
    """
    y = batch.y.astype(np.float64)
    yt = batch.ytil.astype(np.float64)
    m = same_label_matrix(batch.labels)
    k = label_weights(batch.labels, y.shape[1])
    deg = m.sum(axis=1)
    bracket = (2 * deg + 1)[:, None] * y - (yt + m @ yt) - m @ y
    return 2 * k[:, None] * bracket


def combine(ce, rep, lam):
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return ce + lam * rep


def fre(ytil_l, y_l):
    """Mean squared gap between latent-path and binary-path features of one layer."""
    check_same_shape(ytil_l, y_l, "fre")
    d = ytil_l.astype(np.float64) - y_l
    return float((d * d).sum() / d.size)


def fre_backward(ytil_l, y_l, coef=1.0):
    """Gradient of ``coef * fre`` with respect to ``y_l``."""
    check_same_shape(ytil_l, y_l, "fre_backward")
    scale = y_l.dtype.type(2.0 * coef / y_l.size)
    return (y_l - ytil_l) * scale


def fre_regularizer_backward(pairs, coef):
    """Per-layer gradient contributions of ``coef * sum_l fre(ytil_l, y_l)``."""
    return [fre_backward(ytil, y, coef) for y, ytil in pairs]
