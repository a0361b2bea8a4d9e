import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from querymix import diffcore as dc
from querymix.diffcore import Tensor, backward, finite_diff_check


def param(shape, seed=0, low=-3.0, high=3.0):
    return Tensor(np.random.default_rng(seed).uniform(low, high, size=shape), requires_grad=True)


# -- forward examples --------------------------------------------------------


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)


def test_matmul_hand_example():
    out = dc.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="cannot multiply"):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_uniform_row():
    out = dc.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)


def test_softmax_large_logit_does_not_overflow():
    out = dc.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    assert abs(out[0, 0] - 1.0) <= 1e-12 and abs(out[0, 1]) <= 1e-12


def test_softmax_log_weights():
    out = dc.softmax_rows(Tensor([[math.log(1), math.log(2), math.log(3)]])).data
    np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = dc.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(dc.softmax_rows(Tensor(x + c)).data, p, atol=1e-9)


def test_relu_values():
    assert dc.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_relu_subgradient_zero_at_origin():
    x = Tensor([0.0, 1.0], requires_grad=True)
    backward(dc.sum_all(dc.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


def test_cosine_of_unit_vector_with_itself():
    v = Tensor([[0.6, 0.8]])
    assert dc.cosine_rows(v, v).data.item() == pytest.approx(1.0, abs=1e-15)


def test_upsample_single_cell_replicates():
    x = Tensor(np.arange(3.0).reshape(1, 1, 3))
    out = dc.nearest_upsample2x(x).data
    assert out.shape == (2, 2, 3)
    for i in range(2):
        for j in range(2):
            assert out[i, j].tolist() == [0.0, 1.0, 2.0]


def test_sigmoid_is_finite_at_extremes():
    out = dc.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    assert out.tolist() == [0.0, 0.5, 1.0]


def test_elementwise_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_rank_above_three_rejected():
    with pytest.raises(ValueError, match="rank"):
        Tensor(np.zeros((1, 1, 1, 1)))


# -- backward ------------------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = param((2, 3, 4))
    backward(dc.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_of_mean_over_four():
    x = param((2, 2))
    backward(dc.mean_all(x))
    assert np.array_equal(x.grad, np.full((2, 2), 0.25))


def test_backward_accumulates_without_reset():
    x = param((3,))
    backward(dc.sum_all(x))
    backward(dc.sum_all(x))
    assert np.array_equal(x.grad, np.full(3, 2.0))


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        backward(param((2,)) * 2.0)


def test_shared_subexpression_visited_once():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    backward(dc.sum_all(y + y))  # d/dx 2x^2 = 4x
    assert x.grad.tolist() == [8.0]


def test_tape_is_topologically_ordered():
    x = param((2,))
    y = dc.exp(x)
    z = dc.sum_all(y * x + y)
    order = dc.Tape.record(z).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            if id(parent) in pos:
                assert pos[id(parent)] < pos[id(node)]
    assert len(pos) == len(order)


def test_no_grad_builds_no_graph():
    x = param((2,))
    with dc.no_grad():
        y = dc.sum_all(x * x)
    assert not y.requires_grad


# -- finite-difference checker --------------------------------------------------


def test_checker_on_half_squared_norm():
    theta = param((5,))
    err = finite_diff_check(lambda: dc.scale(dc.sum_all(theta * theta), 0.5), theta, eps=1e-5)
    assert err < 1e-8


def test_checker_rejects_bad_eps():
    theta = param((2,))
    with pytest.raises(ValueError, match="eps"):
        finite_diff_check(lambda: dc.sum_all(theta), theta, eps=0.1)


def test_checker_rejects_nondeterministic_f():
    theta = param((2,))
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="deterministic"):
        finite_diff_check(lambda: dc.sum_all(theta) + float(rng.normal()), theta)


def test_checker_detects_wrong_gradient():
    theta = param((3,))

    def broken():
        # forward is x^2 but the recorded rule claims 3x
        return dc.sum_all(dc._result(theta.data ** 2, (theta,), lambda g: (g * 3.0 * theta.data,), "bad"))

    assert finite_diff_check(broken, theta) > 0.1


def test_checker_leaves_params_and_grads_intact():
    theta = param((4,))
    before = theta.data.copy()
    theta.grad = np.full(4, 7.0)
    finite_diff_check(lambda: dc.sum_all(dc.exp(theta)), theta)
    assert np.array_equal(theta.data, before)
    assert np.array_equal(theta.grad, np.full(4, 7.0))


# -- gradient check of every differentiable op ------------------------------------

TOL = 1e-4


def _away_from_zero(shape, seed):
    # keep |x| >= 0.1 so relu/abs/max kinks are never straddled by +-eps
    x = np.random.default_rng(seed).uniform(0.1, 3.0, size=shape)
    signs = np.where(np.random.default_rng(seed + 1).random(shape) < 0.5, -1.0, 1.0)
    return Tensor(x * signs, requires_grad=True)


def _weights(shape, seed=99):
    return np.random.default_rng(seed).normal(size=shape)


def _check(build, *params):
    assert finite_diff_check(build, list(params)) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_grad_matmul(seed):
    a, b = param((3, 4), seed), param((4, 2), seed + 10)
    w = _weights((3, 2))
    _check(lambda: dc.sum_all((a @ b) * w), a, b)


@pytest.mark.parametrize("name", ["add", "sub", "mul"])
def test_grad_binary(name):
    a, b = param((3, 4), 1), param((3, 4), 2)
    op = getattr(dc, name)
    w = _weights((3, 4))
    _check(lambda: dc.sum_all(op(a, b) * w), a, b)


def test_grad_broadcast_row_vector():
    a, b = param((3, 4), 1), param((4,), 2)
    w = _weights((3, 4))
    _check(lambda: dc.sum_all((a * b + b) * w), a, b)


def test_grad_div():
    a, b = param((3, 4), 1), param((3, 4), 2, low=0.5, high=3.0)
    _check(lambda: dc.sum_all(dc.div(a, b) * _weights((3, 4))), a, b)


@pytest.mark.parametrize("name", ["relu", "sigmoid", "abs", "exp", "neg"])
def test_grad_unary(name):
    x = _away_from_zero((3, 4), 5)
    op = getattr(dc, name)
    w = _weights((3, 4))
    _check(lambda: dc.sum_all(op(x) * w), x)


def test_grad_log_and_power():
    x = param((2, 3), 3, low=0.2, high=3.0)
    _check(lambda: dc.sum_all(dc.log(x) * _weights((2, 3)) + dc.power(x, 2.5)), x)


def test_grad_scale_mean_sum():
    x = param((2, 3, 2), 4)
    _check(lambda: dc.scale(dc.mean_all(x * x), 3.0) + dc.sum_all(x), x)


@pytest.mark.parametrize("axis", [0, 1])
def test_grad_axis_reductions(axis):
    x = param((3, 4), 6)
    w = _weights((3, 4)).sum(axis=axis)
    _check(lambda: dc.sum_all(dc.sum_axis(x, axis) * w) + dc.sum_all(dc.mean_axis(x, axis) * w), x)


def test_grad_maximum_minimum():
    a = _away_from_zero((3, 3), 7)
    b = Tensor(a.data + np.where(np.random.default_rng(8).random((3, 3)) < 0.5, 0.5, -0.5), requires_grad=True)
    w = _weights((3, 3))
    _check(lambda: dc.sum_all((dc.maximum(a, b) + dc.minimum(a, b) * 2.0) * w), a, b)


def test_grad_reshape_transpose_take_concat():
    x, y = param((2, 6), 9), param((3, 4), 10)
    w = _weights((7, 4))

    def f():
        r = dc.transpose(dc.reshape(x, (4, 3)))  # 3 x 4
        picked = x[np.array([1, 1, 0]), np.array([0, 5, 5])]  # repeated rows accumulate
        stacked = dc.concat([r, y, dc.reshape(picked, (1, 3)) @ y], axis=0)
        return dc.sum_all(stacked * w)

    _check(f, x, y)


def test_grad_softmax_rows():
    x = param((3, 5), 11)
    _check(lambda: dc.sum_all(dc.softmax_rows(x) * _weights((3, 5))), x)


def test_grad_logsumexp_rows_with_mask():
    x = param((3, 4), 12)
    mask = np.array([[1, 0, 1, 1], [1, 1, 1, 1], [0, 0, 1, 0]], dtype=bool)
    _check(lambda: dc.sum_all(dc.logsumexp_rows(x, mask=mask) * _weights((3,))), x)


def test_grad_normalize_and_cosine():
    a, b = param((3, 4), 13), param((3, 4), 14)
    _check(lambda: dc.sum_all(dc.l2_normalize_rows(a) * _weights((3, 4))) + dc.sum_all(dc.cosine_rows(a, b)), a, b)


def test_grad_layer_norm():
    x = param((3, 6), 15)
    _check(lambda: dc.sum_all(dc.layer_norm(x) * _weights((3, 6))), x)


def test_grad_upsample():
    x = param((2, 3, 2), 16)
    _check(lambda: dc.sum_all(dc.nearest_upsample2x(x) * _weights((4, 6, 2))), x)


def test_grad_dilated_stencil():
    x, taps = param((5, 6, 2), 17), param((9, 2), 18)
    _check(lambda: dc.sum_all(dc.dilated_stencil(x, taps, rate=2) * _weights((5, 6, 2))), x, taps)


def test_grad_composite_softmax_matmul():
    x, w = param((4, 3), 19), param((3, 5), 20)
    target = _weights((4, 5))
    assert finite_diff_check(lambda: dc.sum_all(dc.softmax_rows(x @ w) * target), [x, w]) < 1e-5


# -- invariants ----------------------------------------------------------------------


def test_forward_is_bit_deterministic():
    x, w = param((4, 3), 21), param((3, 5), 22)
    a = dc.softmax_rows(dc.layer_norm(x @ w)).data
    b = dc.softmax_rows(dc.layer_norm(x @ w)).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_forward_values_stay_finite(x):
    t = Tensor(x)
    outs = [dc.softmax_rows(t), dc.sigmoid(t), dc.exp(t), dc.layer_norm(t), dc.l2_normalize_rows(t),
            dc.logsumexp_rows(t)]
    for o in outs:
        assert np.all(np.isfinite(o.data))


def test_module_collects_nested_parameters():
    class Inner(dc.Module):
        def __init__(self):
            self.w = Tensor(np.ones((2, 2)), requires_grad=True)

    class Outer(dc.Module):
        def __init__(self):
            self.inner = [Inner(), Inner()]
            self.b = Tensor(np.zeros(3), requires_grad=True)
            self.const = Tensor(np.zeros(3))

    m = Outer()
    names = [n for n, _ in m.named_parameters()]
    assert sorted(names) == ["b", "inner.0.w", "inner.1.w"]
    assert m.parameter_count() == 11
