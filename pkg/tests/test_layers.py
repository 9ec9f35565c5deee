import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdlc import gradcheck
from hdlc.errors import ContractError, ShapeError
from hdlc.tensor_core import layers as L
from oracles import conv_loops, maxpool_loops


def test_output_extent_examples():
    assert L.output_extent(223, 3, 2, 0) == 111
    assert L.output_extent(7, 1, 1, 0) == 7
    assert L.output_extent(225, 7, 2, 1) == 111


# -- convolution --------------------------------------------------------------


def test_conv_identity_filter():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 5))
    out = L.conv_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_all_ones_on_twos():
    out = L.conv_forward(np.full((1, 1, 3, 3), 2.0), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 18.0


def test_conv_matches_loops_fixed_case():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(L.conv_forward(x, w, b), conv_loops(x, w, b), atol=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_conv_matches_loops_random_geometry(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((2, int(rng.integers(1, 3)), int(rng.integers(k, 7)), int(rng.integers(k, 7))))
    w = rng.standard_normal((int(rng.integers(1, 3)), x.shape[1], k, k))
    b = rng.standard_normal(w.shape[0])
    np.testing.assert_allclose(L.conv_forward(x, w, b, stride, pad), conv_loops(x, w, b, stride, pad), atol=1e-5)


def test_conv_keeps_float32():
    x = np.ones((1, 1, 4, 4), np.float32)
    assert L.conv_forward(x, np.ones((1, 1, 2, 2), np.float32), np.zeros(1, np.float32)).dtype == np.float32


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        L.conv_forward(np.ones((1, 2, 4, 4)), np.ones((1, 3, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeError):
        L.conv_forward(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1))


def test_conv_backward_zero_grad_and_bias_sum():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    gx, gw, gb = L.conv_backward(x, w, np.zeros((2, 3, 3, 3)))
    assert not gx.any() and not gw.any() and not gb.any()
    g = rng.standard_normal((2, 3, 3, 3))
    np.testing.assert_allclose(L.conv_backward(x, w, g)[2], g.sum(axis=(0, 2, 3)))


def test_conv_input_grad_is_adjoint():
    # <conv(x), g> == <x, conv^T(g)> for any x, g
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 2))
    out = L.conv_forward(x, w, np.zeros(3), 2, 1)
    g = rng.standard_normal(out.shape)
    lhs = (out * g).sum()
    rhs = (x * L.conv_input_grad(g, w, (7, 6), 2, 1)).sum()
    assert math.isclose(lhs, rhs, rel_tol=1e-10)


# -- ReLU ---------------------------------------------------------------------


def test_relu_definition_and_idempotence():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(L.relu_forward(x), [0, 0, 2])
    y = np.random.default_rng(0).standard_normal(50)
    np.testing.assert_array_equal(L.relu_forward(L.relu_forward(y)), L.relu_forward(y))


# -- pooling --------------------------------------------------------------------


def test_maxpool_quadrants():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, _ = L.maxpool_forward(x, 2, 2)
    np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])


def test_maxpool_constant_input_routes_to_first_element():
    x = np.full((1, 1, 4, 4), 3.0)
    out, idx = L.maxpool_forward(x, 2, 2)
    assert (out == 3).all() and (idx.flat == 0).all()
    g = L.maxpool_backward(idx, np.ones_like(out))
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(g[0, 0], expected)


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_overlapping_matches_loops(seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, 9, 8))
    np.testing.assert_array_equal(L.maxpool_forward(x, 3, 2)[0], maxpool_loops(x, 3, 2))


def test_maxpool_pad_uses_neg_inf():
    x = -np.ones((1, 1, 3, 3))
    out, _ = L.maxpool_forward(x, 3, 2, pad=1)
    assert out.shape == (1, 1, 2, 2) and (out == -1).all()


def test_stochpool_single_nonzero_is_always_chosen():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 1, 0] = 4.0
    rng = np.random.default_rng(0)
    for _ in range(50):
        out, idx = L.stochpool_forward(x, 2, 2, rng, L.TRAIN)
        assert out[0, 0, 0, 0] == 4.0 and idx.flat[0, 0, 0, 0] == 2


def test_stochpool_all_zero_region():
    x = np.zeros((1, 1, 2, 2))
    assert L.stochpool_forward(x, 2, 2, np.random.default_rng(0), L.TRAIN)[0][0, 0, 0, 0] == 0
    assert L.stochpool_forward(x, 2, 2, None, L.INFER)[0][0, 0, 0, 0] == 0


def test_stochpool_frequency_matches_multinomial():
    # region [1, 3] (the zero row has no mass); 10000 independent draws
    x = np.zeros((10000, 1, 2, 2))
    x[:, 0, 0] = [1.0, 3.0]
    out, _ = L.stochpool_forward(x, 2, 2, np.random.default_rng(5), L.TRAIN)
    freq = float((out == 3.0).mean())
    assert abs(freq - 0.75) <= 0.02


def test_stochpool_infer_is_probability_weighted_mean():
    x = np.array([[1.0, 3.0], [0.0, 4.0]]).reshape(1, 1, 2, 2)
    out, idx = L.stochpool_forward(x, 2, 2, None, L.INFER)
    assert idx is None
    assert math.isclose(out[0, 0, 0, 0], (1 + 9 + 16) / 8)


def test_stochpool_rejects_negative():
    with pytest.raises(ContractError):
        L.stochpool_forward(-np.ones((1, 1, 2, 2)), 2, 2, np.random.default_rng(0))


# -- dropout ------------------------------------------------------------------


def test_dropout_zero_p_is_identity():
    x = np.random.default_rng(0).standard_normal((4, 5))
    np.testing.assert_array_equal(L.dropout_forward(x, 0.0, np.random.default_rng(0), L.TRAIN)[0], x)
    np.testing.assert_array_equal(L.dropout_forward(x, 0.0, None, L.INFER)[0], x)


def test_dropout_infer_scales_exactly():
    x = np.random.default_rng(0).standard_normal((4, 5))
    np.testing.assert_array_equal(L.dropout_forward(x, 0.5, None, L.INFER)[0], 0.5 * x)


def test_dropout_zero_fraction():
    out, mask = L.dropout_forward(np.ones(100000), 0.5, np.random.default_rng(1), L.TRAIN)
    assert 0.49 <= float((out == 0).mean()) <= 0.51
    np.testing.assert_array_equal(L.dropout_backward(mask, np.ones(100000)), out)


def test_dropout_rejects_p_one():
    with pytest.raises(ContractError):
        L.dropout_forward(np.ones(3), 1.0, np.random.default_rng(0))


# -- fully connected ----------------------------------------------------------


def test_fc_identity():
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(L.fc_forward(x, np.eye(4), np.zeros(4)), x)


def test_fc_weight_grad_is_sum_of_outer_products():
    rng = np.random.default_rng(4)
    x, w, g = rng.standard_normal((2, 5)), rng.standard_normal((3, 5)), rng.standard_normal((2, 3))
    _, gw, _ = L.fc_backward(x, w, g)
    np.testing.assert_allclose(gw, np.outer(g[0], x[0]) + np.outer(g[1], x[1]))


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform():
    probs, loss, _ = L.softmax_xent(np.zeros(4), 2)
    np.testing.assert_allclose(probs, 0.25)
    assert math.isclose(loss, math.log(4))


def test_softmax_known_values():
    # exp(k) / (e + e^2 + e^3) evaluated in scalar arithmetic
    denom = math.exp(1) + math.exp(2) + math.exp(3)
    expected = [math.exp(k) / denom for k in (1, 2, 3)]
    probs = L.softmax(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(probs, expected, rtol=1e-12)
    np.testing.assert_allclose(probs, [0.09003, 0.24473, 0.66524], atol=5e-6)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.data())
@settings(max_examples=100, deadline=None)
def test_softmax_grad_sums_to_zero(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    probs, loss, grad = L.softmax_xent(np.array(logits), label)
    assert abs(grad.sum()) < 1e-9
    assert abs(probs.sum() - 1) < 1e-9
    assert np.isfinite(loss) and loss >= 0


def test_softmax_extreme_logits_stay_finite():
    _, loss, grad = L.softmax_xent(np.array([1000.0, -1000.0]), 1)
    assert np.isfinite(loss) and np.isfinite(grad).all()


# -- finite-difference checks -------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_layer_gradients_match_finite_differences(seed):
    for res in gradcheck.check_layers(seed):
        assert res.passed(gradcheck.LAYER_TOL), res.line(gradcheck.LAYER_TOL)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20))
@settings(max_examples=50, deadline=None)
def test_relu_backward_masks_gradient(xs):
    x = np.array(xs)
    g = np.ones_like(x)
    np.testing.assert_array_equal(L.relu_backward(x, g), (x > 0).astype(float))
