import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from spikenerf import diffcore as dc
from spikenerf.diffcore import (
    ArityError, ContractViolation, InconclusiveGradCheck, NumericError, ShapeError, backward, const,
    grad_check, leaf, register_custom_op,
)

from _graphs import random_graph

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


# --------------------------------------------------------------- values


def test_tanh_and_exp_at_zero_have_unit_local_grad():
    for op, value in ((dc.tanh, 0.0), (dc.exp, 1.0)):
        x = leaf(0.0)
        y = op(x)
        assert y.value == value
        assert backward(y)[x] == 1.0


def test_square_gradient_matches_central_difference():
    x = leaf(3.0)
    g = backward(dc.mul(x, x))[x]
    h = 1e-5
    fd = ((3 + h) ** 2 - (3 - h) ** 2) / (2 * h)
    assert g == 6.0
    assert abs(g - fd) < 1e-8


def test_product_rule():
    x, y = leaf(2.0), leaf(3.0)
    grads = backward(dc.mul(x, y))
    assert (grads[x], grads[y]) == (3.0, 2.0)


def test_constant_root_gives_zero_gradients():
    x = leaf(np.ones(3))
    grads = backward(dc.sum_(const(np.ones(3))), wrt=[x])
    np.testing.assert_array_equal(grads[x], 0.0)


def test_non_scalar_root_rejected():
    with pytest.raises(ContractViolation):
        backward(leaf(np.ones(2)))


def test_shape_mismatch_is_contract_violation():
    with pytest.raises(ShapeError):
        dc.add(leaf(np.ones(2)), leaf(np.ones(3)))
    with pytest.raises(ShapeError):
        dc.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_scalar_broadcast_allowed():
    x = leaf(np.arange(3.0))
    s = leaf(2.0)
    g = backward(dc.sum_(dc.mul(x, s)))
    np.testing.assert_array_equal(g[x], [2, 2, 2])
    assert g[s] == 3.0


def test_rank_three_rejected():
    with pytest.raises(ShapeError):
        leaf(np.ones((2, 2, 2)))


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_non_finite_forward_names_op():
    with pytest.raises(NumericError) as ei:
        dc.exp(leaf(1000.0))
    assert ei.value.op == "exp"
    with pytest.raises(NumericError) as ei:
        dc.mul(leaf(1e300), leaf(1e300))
    assert ei.value.op == "mul"


def test_zero_denominator_is_contract_violation():
    with pytest.raises(ContractViolation):
        dc.div(leaf(1.0), leaf(0.0))


def test_matvec_and_dot():
    a = leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
    v = leaf(np.array([1.0, -1.0]))
    out = dc.matmul(a, v)
    np.testing.assert_array_equal(out.value, [-1.0, -1.0])
    g = backward(dc.sum_(out))
    np.testing.assert_array_equal(g[a], [[1, -1], [1, -1]])
    np.testing.assert_array_equal(g[v], [4, 6])
    d = dc.dot(v, v)
    assert backward(d)[v].tolist() == [2.0, -2.0]


def test_exclusive_cumsum_value_and_grad():
    x = leaf(np.array([[1.0, 2.0, 3.0]]))
    out = dc.exclusive_cumsum(x)
    np.testing.assert_array_equal(out.value, [[0, 1, 3]])
    g = backward(dc.sum_(out))[x]
    np.testing.assert_array_equal(g, [[2, 1, 0]])


def test_slices_route_gradients():
    x = leaf(np.arange(12.0).reshape(4, 3))
    y = dc.add(dc.sum_(dc.cols(x, 1)), dc.mul(dc.sum_(dc.rows(x, 2, 4)), 2.0))
    g = backward(y)[x]
    expect = np.zeros((4, 3))
    expect[:, 1] += 1
    expect[2:] += 2
    np.testing.assert_array_equal(g, expect)


# ------------------------------------------------------------ custom ops


def test_custom_identity_matches_builtin_pass_through():
    ident = register_custom_op("test_identity", lambda v: (v.copy(), None), lambda ctx, g: (g,), arity=1)
    x1, x2 = leaf(np.array([0.3, -1.2])), leaf(np.array([0.3, -1.2]))
    g1 = backward(dc.sum_(dc.tanh(ident(x1))))[x1]
    g2 = backward(dc.sum_(dc.tanh(x2)))[x2]
    np.testing.assert_array_equal(g1, g2)


def test_custom_zero_backward_blocks_gradient():
    stop = register_custom_op("test_stop", lambda v: (v.copy(), None), lambda ctx, g: (np.zeros_like(g),), arity=1)
    x = leaf(np.array([1.0, 2.0]))
    g = backward(dc.sum_(dc.exp(stop(dc.mul(x, 3.0)))))[x]
    np.testing.assert_array_equal(g, 0.0)


def test_custom_op_arity_errors():
    op = register_custom_op("test_bad", lambda a, b: (a + b, None), lambda ctx, g: (g,), arity=2)
    with pytest.raises(ArityError):
        op(leaf(1.0))
    with pytest.raises(ArityError):
        backward(op(leaf(1.0), leaf(2.0)))


def test_custom_backward_called_once_per_node():
    op = register_custom_op("test_count", lambda v: (2 * v, None), lambda ctx, g: (2 * g,), arity=1)
    before = op.calls
    x = leaf(1.0)
    y = op(x)
    backward(dc.add(dc.mul(y, y), y))   # y has two consumers
    assert op.calls - before == 1


def test_get_custom_op():
    import spikenerf.neurons  # noqa: F401  registers the spiking ops

    assert dc.get_custom_op("bfif").name == "bfif"


# ------------------------------------------------------------- grad check


def test_grad_check_sum_of_squares():
    r = grad_check(lambda x: dc.sum_(dc.square(x)), np.array([1.0, 2.0, 3.0]), h=1e-5)
    assert r.passed and r.max_rel_err < 1e-7


def test_grad_check_constant_function():
    r = grad_check(lambda x: dc.sum_(const(np.ones(3))), np.ones(3))
    assert r.passed and r.max_abs_err == 0.0


def test_grad_check_excludes_firing_boundary():
    from spikenerf.neurons import NeuronParams, activate

    p = NeuronParams(v_th=0.5)

    def f(x):
        return dc.sum_(activate(x, const(0.5), const(1.0), const(100.0), p))

    u_at = 100 * math.atanh(0.5 / 100)   # drive whose u_pre is exactly V_th
    x = np.array([u_at, 2.0])

    def near_boundary(x, i, reach):
        u = 100 * np.tanh(x[i] / 100)
        return abs(u - 0.5) < 2 * reach

    r = grad_check(f, x, exclusion=near_boundary)
    assert r.excluded == (0,)
    assert r.passed
    with pytest.raises(InconclusiveGradCheck):
        grad_check(f, x[:1], exclusion=near_boundary)


def test_grad_check_detects_a_wrong_gradient():
    bad = register_custom_op("test_wrong", lambda v: (v * v, v), lambda v, g: (g * v,), arity=1)
    r = grad_check(lambda x: dc.sum_(bad(x)), np.array([1.0, 2.0]))
    assert not r.passed
    assert r.max_rel_err == pytest.approx(0.5)


def test_random_graphs_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(100):
        f, x = random_graph(rng)
        r = grad_check(f, x, h=1e-5, tol=1e-6)
        assert r.passed, r


# ------------------------------------------------------------- properties


@given(arrays(np.float64, 4, elements=finite), st.floats(-2, 2), st.floats(-2, 2))
def test_backward_is_linear(x, a, b):
    def grads_of(build):
        n = leaf(x)
        return backward(build(n), wrt=[n])[n]

    f = lambda n: dc.sum_(dc.tanh(n))
    g = lambda n: dc.sum_(dc.mul(dc.sin(n), dc.cos(n)))
    combo = grads_of(lambda n: dc.add(dc.mul(f(n), a), dc.mul(g(n), b)))
    np.testing.assert_allclose(combo, a * grads_of(f) + b * grads_of(g), rtol=0, atol=1e-12)


@given(arrays(np.float64, (3, 2), elements=finite))
def test_two_backward_passes_are_bit_identical(x):
    n = leaf(x)
    w = const(np.array([[0.5, -1.0], [2.0, 0.25]]))
    y = dc.sum_(dc.sigmoid(dc.matmul(dc.tanh(n), w)))
    g1 = backward(y)[n].copy()
    g2 = backward(y)[n]
    assert g1.tobytes() == g2.tobytes()


@given(st.integers(0, 10_000))
def test_parents_created_before_children(seed):
    f, x = random_graph(np.random.default_rng(seed))
    root = f(leaf(x))
    stack, seen = [root], set()
    while stack:
        n = stack.pop()
        for p in n.parents:
            assert p.index < n.index
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
