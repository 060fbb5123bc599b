import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attrobf import layers
from attrobf.exceptions import ShapeError
from attrobf.gradcheck import grad_check, numerical_grad, relative_error
from attrobf.rng import Rng


def conv_fwd(x, w, b):
    return layers.conv2d_forward(x, w, b)


def conv_bwd(r, x, w, b):
    _, cache = layers.conv2d_forward(x, w, b)
    gx, gw, gb = layers.conv2d_backward(r, cache)
    return {"x": gx, "w": gw, "b": gb}


def test_conv_scalar():
    y, _ = layers.conv2d_forward(np.full((1, 1, 1, 1), 2.0), np.array([[[[0, 0, 0], [0, 3.0, 0], [0, 0, 0]]]]),
                                 np.zeros(1))
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 6.0


def test_conv_identity_kernel_is_exact():
    x = Rng(3).normal((2, 4, 7, 6)).astype(np.float32)
    w = np.zeros((4, 4, 3, 3), np.float32)
    for c in range(4):
        w[c, c, 1, 1] = 1.0
    y, _ = layers.conv2d_forward(x, w, np.zeros(4, np.float32))
    assert np.array_equal(y, x)


def test_conv_matches_direct_loop():
    rng = Rng(5)
    x = rng.normal((2, 3, 5, 4))
    w = rng.normal((2, 3, 3, 3))
    b = rng.normal(2)
    y, _ = layers.conv2d_forward(x, w, b)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(2):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        layers.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((3, 5, 3, 3)), np.zeros(3))


def test_conv_gradient_finite_difference():
    rng = Rng(11)
    arrays_ = {"x": rng.normal((1, 2, 5, 5)), "w": rng.normal((3, 2, 3, 3)), "b": rng.normal(3)}
    report = grad_check(conv_fwd, conv_bwd, arrays_, tolerance=1e-6)
    assert report.passed, str(report)


def test_maxpool_window():
    y, _ = layers.maxpool2x2_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert y.item() == 4.0


def test_maxpool_tie_routes_to_lowest_index():
    x = np.full((1, 1, 2, 2), 7.0)
    y, cache = layers.maxpool2x2_forward(x)
    assert y.item() == 7.0
    g = layers.maxpool2x2_backward(np.ones((1, 1, 1, 1)), cache)
    assert g.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_maxpool_odd_rejected():
    with pytest.raises(ShapeError):
        layers.maxpool2x2_forward(np.zeros((1, 1, 3, 4)))


def test_maxpool_gradient_finite_difference():
    # a permutation of well-separated values keeps h=1e-5 away from ties
    x = (Rng(2).permutation(2 * 3 * 4 * 6).astype(np.float64) * 0.1).reshape(2, 3, 4, 6)
    report = grad_check(lambda x: layers.maxpool2x2_forward(x),
                        lambda r, x: {"x": layers.maxpool2x2_backward(r, layers.maxpool2x2_forward(x)[1])},
                        {"x": x}, tolerance=1e-6)
    assert report.passed, str(report)


def test_relu_values():
    y, mask = layers.relu_forward(np.array([-1.0, 2.0]))
    assert y.tolist() == [0.0, 2.0]
    y, mask = layers.relu_forward(-np.ones(5))
    assert not y.any()
    assert not layers.relu_backward(np.ones(5), mask).any()


def test_relu_zero_subgradient():
    _, mask = layers.relu_forward(np.zeros(3))
    assert layers.relu_backward(np.ones(3), mask).tolist() == [0.0, 0.0, 0.0]


def test_relu_gradient_finite_difference():
    x = Rng(4).normal(50)
    x = np.where(np.abs(x) < 0.01, 0.5, x)
    report = grad_check(lambda x: layers.relu_forward(x),
                        lambda r, x: {"x": layers.relu_backward(r, layers.relu_forward(x)[1])},
                        {"x": x}, tolerance=1e-6)
    assert report.passed


def test_dense_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0])
    y, _ = layers.dense_forward(x, np.eye(3), np.zeros(3))
    assert y.tolist() == x.tolist()
    y, _ = layers.dense_forward(np.zeros(3), np.ones((2, 3)), np.array([4.0, 5.0]))
    assert y.tolist() == [4.0, 5.0]


def test_dense_dimension_mismatch():
    with pytest.raises(ShapeError):
        layers.dense_forward(np.zeros(4), np.zeros((2, 3)), np.zeros(2))


def dense_fwd(x, w, b):
    return layers.dense_forward(x, w, b)


def dense_bwd(r, x, w, b):
    _, cache = layers.dense_forward(x, w, b)
    gx, gw, gb = layers.dense_backward(r, cache)
    return {"x": gx, "w": gw, "b": gb}


def test_dense_gradient_finite_difference():
    rng = Rng(8)
    report = grad_check(dense_fwd, dense_bwd,
                        {"x": rng.normal((3, 8)), "w": rng.normal((4, 8)), "b": rng.normal(4)}, tolerance=1e-6)
    assert report.passed, str(report)


def test_grad_check_catches_transposed_weight():
    def wrong(r, x, w, b):
        g = dense_bwd(r, x, w, b)
        g["x"] = r @ w.T  # should be r @ w
        return g

    rng = Rng(9)
    report = grad_check(dense_fwd, wrong,
                        {"x": rng.normal((2, 4)), "w": rng.normal((4, 4)), "b": rng.normal(4)}, tolerance=1e-4)
    assert not report.passed
    assert report.errors["x"] > 1e-2
    assert report.errors["w"] < 1e-4


def test_softmax_ce_uniform():
    loss, grad = layers.softmax_cross_entropy(np.zeros(5), 3)
    assert loss == math.log(5)
    assert abs(loss - 1.60944) < 1e-5
    loss, grad = layers.softmax_cross_entropy(np.zeros(2), 0)
    assert grad.tolist() == [-0.5, 0.5]


def test_softmax_ce_label_out_of_range():
    with pytest.raises(ValueError):
        layers.softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(ValueError):
        layers.softmax_cross_entropy(np.zeros(3), -1)


def test_softmax_ce_gradient_finite_difference():
    z = Rng(12).normal(5)
    _, g = layers.softmax_cross_entropy(z, 2)
    num = numerical_grad(lambda: layers.softmax_cross_entropy(z, 2)[0], z)
    assert relative_error(g, num) < 1e-6


def test_softmax_ce_batch_reductions():
    z = Rng(13).normal((4, 3))
    y = np.array([0, 2, 1, 1])
    per, gper = layers.softmax_cross_entropy(z, y, "none")
    mean, gmean = layers.softmax_cross_entropy(z, y, "mean")
    total, gsum = layers.softmax_cross_entropy(z, y, "sum")
    assert math.isclose(mean, per.mean()) and math.isclose(total, per.sum())
    np.testing.assert_allclose(gmean * 4, gsum)


finite_logits = arrays(np.float64, st.integers(2, 12),
                       elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False))


@given(finite_logits)
@settings(max_examples=200, deadline=None)
def test_softmax_properties(z):
    p = layers.softmax(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-6
    loss, _ = layers.softmax_cross_entropy(z, 0)
    assert loss >= 0


def test_he_normal_scale():
    w = layers.he_normal(Rng(1), (200, 50), fan_in=50, dtype=np.float64)
    assert abs(w.std() - math.sqrt(2 / 50)) < 0.01
    assert w.dtype == np.float64
