import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latentbnn import losses as Ls
from latentbnn.errors import ShapeError

from oracles import cross_entropy_loop, rep_instance_loop, rep_label_aware_loop


def batch(rng, n=8, d=4, classes=3):
    return Ls.RepBatch(rng.standard_normal((n, d)), rng.standard_normal((n, d)), rng.integers(0, classes, n))


def test_cross_entropy_oracle(rng):
    logits = rng.standard_normal((6, 4)) * 3
    labels = rng.integers(0, 4, 6)
    loss, grad = Ls.cross_entropy(logits, labels)
    assert loss == pytest.approx(cross_entropy_loop(logits, labels), abs=1e-12)
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-12)


def test_cross_entropy_stable_for_large_logits():
    loss, grad = Ls.cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(0, abs=1e-12) and np.all(np.isfinite(grad))


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        Ls.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ShapeError):
        Ls.cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_same_label_matrix_excludes_self():
    m = Ls.same_label_matrix(np.array([0, 0, 1]))
    np.testing.assert_array_equal(m, [[0, 1, 0], [1, 0, 0], [0, 0, 0]])


@given(st.integers(0, 2**32))
def test_rep_losses_match_loop_oracles(seed):
    r = np.random.default_rng(seed)
    n, d, c = int(r.integers(1, 17)), int(r.integers(1, 9)), int(r.integers(2, 5))
    b = Ls.RepBatch(r.standard_normal((n, d)), r.standard_normal((n, d)), r.integers(0, c, n))
    assert Ls.rep_instance(b) == pytest.approx(rep_instance_loop(b.y, b.ytil), rel=1e-12, abs=1e-12)
    assert Ls.rep_label_aware(b) == pytest.approx(rep_label_aware_loop(b.y, b.ytil, b.labels), rel=1e-10, abs=1e-12)


def test_distinct_labels_reduce_to_instance_over_d(rng):
    b = Ls.RepBatch(rng.standard_normal((5, 6)), rng.standard_normal((5, 6)), np.arange(5))
    assert Ls.rep_label_aware(b) == Ls.rep_instance(b) / 6


def test_identical_features_give_zero_instance_loss(rng):
    y = rng.standard_normal((4, 3))
    b = Ls.RepBatch(y, y.copy(), np.array([0, 1, 0, 1]))
    assert Ls.rep_instance(b) == 0
    assert Ls.rep_label_aware(b) > 0  # same-label rows still differ


def test_label_aware_gradient_matches_finite_differences(rng):
    b = batch(rng, 9, 3, 2)
    g = Ls.rep_label_aware_backward(b)
    h = 1e-6
    for i in range(9):
        for k in range(3):
            y = b.y.copy()
            y[i, k] += h
            lp = Ls.rep_label_aware(Ls.RepBatch(y, b.ytil, b.labels))
            y[i, k] -= 2 * h
            lm = Ls.rep_label_aware(Ls.RepBatch(y, b.ytil, b.labels))
            assert g[i, k] == pytest.approx((lp - lm) / (2 * h), rel=1e-6, abs=1e-9)


def test_printed_row_gradient_differs_when_pairs_exist(rng):
    b = batch(rng, 6, 3, 2)
    assert not np.allclose(Ls.rep_label_aware_grad_printed(b), Ls.rep_label_aware_backward(b))


def test_printed_row_gradient_agrees_without_pairs(rng):
    b = Ls.RepBatch(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), np.arange(4))
    np.testing.assert_allclose(Ls.rep_label_aware_grad_printed(b), Ls.rep_label_aware_backward(b))


def test_instance_gradient(rng):
    b = batch(rng)
    np.testing.assert_allclose(Ls.rep_instance_backward(b), 2 * (b.y - b.ytil))


def test_combine():
    assert Ls.combine(1.0, 2.0, 0.5) == 2.0
    assert Ls.combine(1.0, 2.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        Ls.combine(1.0, 2.0, -1e-3)


def test_fre_and_gradient(rng):
    y, yt = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    assert Ls.fre(yt, y) == pytest.approx(((yt - y) ** 2).mean())
    assert Ls.fre(y, y) == 0
    np.testing.assert_allclose(Ls.fre_backward(yt, y, 3.0), 3.0 * 2 * (y - yt) / y.size)
    grads = Ls.fre_regularizer_backward([(y, yt), (y, y)], 1.0)
    np.testing.assert_array_equal(grads[1], 0)
    with pytest.raises(ShapeError):
        Ls.fre(y, y[:1])


def test_rep_batch_validates_shapes(rng):
    with pytest.raises(ShapeError):
        Ls.RepBatch(np.ones((3, 2)), np.ones((3, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        Ls.RepBatch(np.ones((3, 2)), np.ones((3, 2)), np.zeros(2))
