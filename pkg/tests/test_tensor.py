import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsv import tensor as T
from dsv.tensor import GradError, NonFiniteError, ShapeError, Tensor
from fdcheck import first_order_error, random_graph, second_order_error


def test_relu_definition():
    assert T.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_log_sum_exp_uniform():
    assert T.log_sum_exp(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-12)


def test_conv2d_center_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0   # corner sees a 2x2 patch


def test_grad_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert T.grad(T.sum(T.mul(x, x)), x).data.tolist() == [2.0, 4.0]


def test_second_derivative_of_cube():
    x = Tensor(2.0, requires_grad=True)
    g = T.grad(T.pow(x, 3.0), x, create_graph=True)
    assert T.grad(g, x).item() == pytest.approx(12.0)


def test_l1_subgradient_is_sign_and_zero_at_zero():
    x = Tensor([-3.0, 5.0, 0.0], requires_grad=True)
    assert T.grad(T.l1_norm(x), x).data.tolist() == [-1.0, 1.0, 0.0]


def test_nonfinite_rejected_at_creation():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_nonfinite_intermediate_names_the_op():
    with pytest.raises(NonFiniteError, match="exp"):
        T.exp(Tensor([1000.0]))


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_scalar_broadcast_is_allowed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    s = Tensor(3.0, requires_grad=True)
    gx, gs = T.grad(T.sum(T.mul(x, s)), [x, s])
    assert gx.data.tolist() == [3.0, 3.0]
    assert gs.item() == 3.0


def test_grad_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    other = Tensor([1.0], requires_grad=True)
    with pytest.raises(GradError, match="scalar"):
        T.grad(T.mul(x, 2.0), x)
    with pytest.raises(GradError, match="leaf not in graph"):
        T.grad(T.sum(x), other)


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad


def test_maxpool_ties_go_to_first_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    g = T.grad(T.sum(T.maxpool2x2(x)), x).data
    assert g[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_bilinear_resize_constant_and_adjoint():
    x = Tensor(np.full((1, 1, 4, 4), 0.7))
    assert np.allclose(T.bilinear_resize(x, 8, 8).data, 0.7)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 8, 8))
    leaf = Tensor(a, requires_grad=True)
    g = T.grad(T.sum(T.mul(T.bilinear_resize(leaf, 8, 8), b)), leaf).data
    # gradient of <R a, b> is R^T b, so <R a, b> == <a, R^T b>
    assert np.sum(T.bilinear_resize(Tensor(a), 8, 8).data * b) == pytest.approx(np.sum(a * g))


def test_signed_sqrt_values():
    assert T.signed_sqrt(Tensor([-4.0, 0.0, 9.0])).data.tolist() == [-2.0, 0.0, 3.0]


def test_softmax_rows_sum_to_one():
    z = T.softmax(Tensor([[1.0, 2.0, 3.0], [0.0, 0.0, -50.0]]), axis=1)
    assert np.allclose(z.data.sum(axis=1), 1.0)


@pytest.mark.parametrize("seed", range(10))
def test_random_graphs_match_finite_differences(seed):
    inputs, fn, desc = random_graph(100 + seed)
    assert first_order_error(inputs, fn) < 1e-6, desc
    assert second_order_error(inputs, fn, seed) < 1e-4, desc


def test_nested_depth_three():
    x = Tensor(1.5, requires_grad=True)
    g1 = T.grad(T.pow(x, 4.0), x, create_graph=True)
    g2 = T.grad(g1, x, create_graph=True)
    g3 = T.grad(g2, x)
    assert g3.item() == pytest.approx(24 * 1.5)


arrays = st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=8)


@settings(max_examples=40, deadline=None)
@given(arrays, st.floats(-2, 2), st.floats(-2, 2))
def test_grad_is_linear(values, a, b):
    x0 = np.array(values)
    x = Tensor(x0, requires_grad=True)
    f = lambda t: T.sum(T.exp(T.mul(t, 0.5)))            # noqa: E731
    g = lambda t: T.log_sum_exp(t)                        # noqa: E731
    combo = T.grad(T.add(T.mul(f(x), a), T.mul(g(x), b)), x).data
    separate = a * T.grad(f(x), x).data + b * T.grad(g(x), x).data
    assert np.allclose(combo, separate, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_relu_and_maxpool_subgradients_deterministic(seed):
    rng = np.random.default_rng(seed)
    data = rng.integers(-2, 3, size=(1, 2, 4, 4)).astype(float)   # many ties and zeros
    grads = []
    for _ in range(2):
        x = Tensor(data, requires_grad=True)
        grads.append(T.grad(T.sum(T.maxpool2x2(T.relu(x))), x).data)
    assert np.array_equal(grads[0], grads[1])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_element_count_matches_shape(shape):
    t = Tensor(np.zeros(shape))
    assert t.size == int(np.prod(shape))
    assert T.reshape(t, (-1,)).shape == (int(np.prod(shape)),)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gradient_has_leaf_shape(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, 4, size=rng.integers(1, 4)))
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    assert T.grad(T.l2_norm_sq(T.relu(x)), x).shape == shape
