import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hmp import tensor as T
from hmp.errors import (
    AxisOutOfRange,
    DomainError,
    NonFinite,
    NotScalar,
    ShapeMismatch,
    TapeConsumed,
)
from hmp.gradcheck import grad_check
from hmp.tensor import Tensor, tensor_new


def param(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


# --- construction ---------------------------------------------------------


def test_tensor_new_row_major():
    t = tensor_new([2, 2], [1, 2, 3, 4])
    assert t.data[1, 1] == 4
    assert t.data[0, 1] == 2


def test_tensor_new_length_mismatch():
    with pytest.raises(ShapeMismatch):
        tensor_new([3], [0, 0])


def test_tensor_new_rejects_nan():
    with pytest.raises(NonFinite):
        tensor_new([1], [float("nan")])


def test_grad_buffer_only_when_requested():
    assert tensor_new([2], [1, 2], requires_grad=True).grad.tolist() == [0.0, 0.0]
    assert tensor_new([2], [1, 2]).grad is None


# --- matmul ---------------------------------------------------------------


def test_matmul_identity():
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_hand_value():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    report = grad_check(lambda: T.tsum(T.matmul(a, b)), [a, b], step=1e-5, tol=1e-5)
    assert report.passed, report


def test_batched_matmul_gradient():
    rng = np.random.default_rng(3)
    a, b = param(rng, 2, 3, 4), param(rng, 2, 4, 2)
    w = Tensor(rng.uniform(-1, 1, size=(2, 3, 2)))
    assert grad_check(lambda: T.tsum(T.mul(T.matmul(a, b), w)), [a, b]).passed


# --- elementwise ----------------------------------------------------------


def test_sigmoid_at_zero_and_its_gradient():
    w = Tensor([0.0], requires_grad=True)
    y = T.sigmoid(w)
    assert y.data[0] == 0.5
    T.backward(T.tsum(y))
    assert w.grad[0] == 0.25


def test_relu_values():
    assert T.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_log_of_zero_is_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([0.0]))


def test_elementwise_dispatch():
    x = Tensor([1.0, 2.0])
    assert T.elementwise("scale", x, 3.0).data.tolist() == [3.0, 6.0]
    assert T.elementwise("add", x, x).data.tolist() == [2.0, 4.0]
    with pytest.raises(ShapeMismatch):
        T.elementwise("mul", x, Tensor([1.0, 2.0, 3.0]))


def test_leading_axis_broadcast_gradient():
    rng = np.random.default_rng(0)
    x, v = param(rng, 4, 3), param(rng, 3)
    assert grad_check(lambda: T.tsum(T.mul(T.add(x, v), T.add(x, v))), [x, v]).passed


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "exp", "softplus", "relu"])
def test_unary_gradients(kind):
    rng = np.random.default_rng(1)
    x = param(rng, 5)
    w = Tensor(rng.uniform(-1, 1, size=5))
    assert grad_check(lambda: T.tsum(T.mul(T.elementwise(kind, x), w)), [x]).passed


def test_log_and_sqrt_gradients():
    x = Tensor(np.array([0.3, 1.2, 2.5]), requires_grad=True)
    assert grad_check(lambda: T.tsum(T.add(T.log(x), T.sqrt(x))), [x]).passed


def test_div_gradient():
    rng = np.random.default_rng(2)
    a = param(rng, 3)
    b = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    assert grad_check(lambda: T.tsum(T.div(a, b)), [a, b]).passed


# --- softmax --------------------------------------------------------------


def test_softmax_uniform():
    assert np.allclose(T.softmax_last_axis(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_closed_form():
    assert np.allclose(T.softmax_last_axis(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    assert T.softmax_last_axis(Tensor([1000.0, 1000.0])).data.tolist() == [0.5, 0.5]


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
def test_softmax_is_a_distribution(x):
    y = T.softmax_last_axis(Tensor(x)).data
    assert np.all(y >= 0)
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.all(np.isfinite(y))


def test_softmax_gradient():
    rng = np.random.default_rng(4)
    x = param(rng, 3, 4)
    w = Tensor(rng.uniform(-1, 1, size=(3, 4)))
    assert grad_check(lambda: T.tsum(T.mul(T.softmax_last_axis(x), w)), [x]).passed


def test_masked_logsumexp_gradient_and_value():
    rng = np.random.default_rng(5)
    x = param(rng, 3, 3)
    mask = ~np.eye(3, dtype=bool)
    out = T.logsumexp_last_axis(x, mask).data
    expected = [math.log(sum(math.exp(x.data[i, j]) for j in range(3) if j != i)) for i in range(3)]
    assert np.allclose(out, expected, atol=1e-14)
    assert grad_check(lambda: T.tsum(T.logsumexp_last_axis(x, mask)), [x]).passed


# --- layer norm -----------------------------------------------------------


def test_layer_norm_constant_slice_is_zero():
    out = T.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, [0.0, 0.0, 0.0])


def test_layer_norm_two_values():
    out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
    assert np.allclose(out.data, [-1.0, 1.0], atol=1e-12)


def test_layer_norm_shape_check():
    with pytest.raises(ShapeMismatch):
        T.layer_norm(Tensor(np.ones(3)), Tensor(np.ones(2)), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    x, g, b = param(rng, 4), param(rng, 4), param(rng, 4)
    w = Tensor(rng.uniform(-1, 1, size=4))
    report = grad_check(lambda: T.tsum(T.mul(T.layer_norm(x, g, b), w)), [x, g, b], tol=1e-5)
    assert report.passed, report


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-100, 100)))
def test_layer_norm_standardizes(x):
    if np.any(x.var(axis=-1) < 1.0):
        return
    y = T.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    assert np.all(np.abs(y.mean(axis=-1)) <= 1e-10)
    assert np.all(np.abs(y.var(axis=-1) - 1.0) <= 1e-5 / 1.0)


# --- max pool -------------------------------------------------------------


def test_max_pool_axis0():
    assert T.max_pool_axis(Tensor([[1.0, 5.0], [3.0, 2.0]]), 0).data.tolist() == [3.0, 5.0]


def test_max_pool_single_slice_squeezes():
    x = Tensor([[4.0, -1.0, 2.0]])
    assert T.max_pool_axis(x, 0).data.tolist() == [4.0, -1.0, 2.0]


def test_max_pool_tie_routes_to_first():
    x = Tensor([[2.0, 2.0]], requires_grad=True)
    y = T.max_pool_axis(x, 1)
    assert y.data.tolist() == [2.0]
    T.backward(T.tsum(y))
    assert x.grad.tolist() == [[1.0, 0.0]]


def test_max_pool_bad_axis():
    with pytest.raises(AxisOutOfRange):
        T.max_pool_axis(Tensor(np.ones((2, 2))), 2)


# --- reductions -----------------------------------------------------------


def test_reductions_hand_values():
    x = Tensor([1.0, 2.0, 3.0])
    assert T.reduce("sse", x, x).item() == 0.0
    assert T.reduce("mean", x).item() == 2.0
    assert T.reduce("sse", Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).item() == 5.0
    with pytest.raises(ShapeMismatch):
        T.sse(Tensor([1.0]), Tensor([1.0, 2.0]))


# --- backward -------------------------------------------------------------


def test_backward_square_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_sigmoid_of_weight():
    w = Tensor([[0.0]], requires_grad=True)
    T.backward(T.tsum(T.sigmoid(T.matmul(w, Tensor([[1.0]])))))
    assert w.grad[0, 0] == 0.25


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NotScalar):
        T.backward(T.mul(x, x))


def test_double_backward_is_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(TapeConsumed):
        T.backward(loss)


def test_consumed_intermediate_cannot_feed_new_ops():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.tsum(y))
    with pytest.raises(TapeConsumed):
        T.add(y, x)


def test_tape_is_topologically_ordered():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.tanh(T.mul(x, x))
    z = T.tsum(T.add(y, x))
    tape = z._tape
    for node in tape.nodes:
        for p in node.parents:
            if p._node is not None:
                assert p._node.index < node.index


def test_gradient_linearity():
    rng = np.random.default_rng(9)
    w = param(rng, 3, 3)
    x = Tensor(rng.uniform(-1, 1, size=(2, 3)))

    def l1():
        return T.tsum(T.tanh(T.matmul(x, w)))

    def l2():
        return T.tsum(T.softmax_last_axis(T.matmul(x, w)) * Tensor([[1.0, 2.0, 3.0]]))

    T.backward(T.add(l1(), l2()))
    joint = w.grad.copy()
    w.zero_grad()
    T.backward(l1())
    T.backward(l2())
    assert np.max(np.abs(joint - w.grad)) <= 1e-12


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._tape is None


def test_overflow_is_reported():
    with pytest.raises(NonFinite):
        T.exp(Tensor([1000.0]))


# --- grad_check itself ----------------------------------------------------


def test_grad_check_linear_sse():
    rng = np.random.default_rng(0)
    W, b = param(rng, 3, 4), param(rng, 3)
    x = Tensor(rng.uniform(-1, 1, size=(5, 4)))
    target = Tensor(rng.uniform(-1, 1, size=(5, 3)))
    report = grad_check(lambda: T.sse(T.add(T.matmul(x, T.transpose(W)), b), target), [W, b], 1e-5, 1e-4)
    assert report.passed


def test_grad_check_detects_corrupted_gradient():
    rng = np.random.default_rng(0)
    W = param(rng, 3, 4)
    x = Tensor(rng.uniform(-1, 1, size=(5, 4)))

    def f():
        return T.tsum(T.tanh(T.matmul(x, T.transpose(W))))

    W.zero_grad()
    T.backward(f())
    bad = W.grad + 0.1
    report = grad_check(f, [W], analytic=[bad])
    assert not report.passed
