import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from latentbnn.binarize import (
    alpha_scale,
    binarize_weight,
    hard_tanh,
    hard_tanh_backward,
    quantization_error,
    sign_forward,
    ste_backward,
    window_mask,
)


def test_sign_of_zero_is_plus_one():
    np.testing.assert_array_equal(sign_forward(np.array([-2.0, -0.0, 0.0, 3.0])), [-1, 1, 1, 1])


def test_sign_preserves_dtype():
    assert sign_forward(np.zeros(3, np.float32)).dtype == np.float32


def test_alpha_is_mean_abs_per_channel():
    w = np.array([[[[1.0, -3.0]]], [[[0.5, 0.5]]]])
    np.testing.assert_allclose(alpha_scale(w), [2.0, 0.5])


def test_alpha_of_sign_tensor_is_one(rng):
    w = sign_forward(rng.standard_normal((4, 3, 3, 3)))
    np.testing.assert_array_equal(alpha_scale(w), 1.0)


@given(hnp.arrays(np.float64, (3, 7), elements=st.floats(-5, 5)))
def test_alpha_is_stationary_point(w):
    # d/da ||W - a B||^2 = 0 at the closed form
    a = alpha_scale(w)
    b = sign_forward(w)
    grad = (-2 * b * (w - a[:, None] * b)).sum(axis=1)
    np.testing.assert_allclose(grad, 0, atol=1e-9)


def test_quantization_error_minimal_near_alpha(rng):
    w = rng.standard_normal((5, 12))
    a = alpha_scale(w)
    e = quantization_error(w, a)
    for d in (1e-3, -1e-3):
        assert np.all(quantization_error(w, a + d) > e)


def test_binarize_weight_bundle(rng):
    w = rng.standard_normal((2, 3))
    r = binarize_weight(w)
    np.testing.assert_array_equal(r.b, sign_forward(w))
    np.testing.assert_array_equal(r.alpha, alpha_scale(w))


def test_ste_window_is_strict():
    w = np.array([-1.0, -0.999, 0.0, 0.999, 1.0, 2.0])
    np.testing.assert_array_equal(window_mask(w), [0, 1, 1, 1, 0, 0])
    np.testing.assert_array_equal(ste_backward(np.ones(6), w), [0, 1, 1, 1, 0, 0])


def test_hard_tanh_and_backward():
    x = np.array([-3.0, -1.0, -0.5, 0.5, 1.0, 3.0])
    np.testing.assert_array_equal(hard_tanh(x), [-1, -1, -0.5, 0.5, 1, 1])
    np.testing.assert_array_equal(hard_tanh_backward(np.full(6, 2.0), x), [0, 0, 2, 2, 0, 0])


@given(hnp.arrays(np.float64, (20,), elements=st.floats(-3, 3)))
def test_hard_tanh_bounded_and_sign_consistent(x):
    y = hard_tanh(x)
    assert np.all(np.abs(y) <= 1)
    np.testing.assert_array_equal(sign_forward(y), sign_forward(x))
