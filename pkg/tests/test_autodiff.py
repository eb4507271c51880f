"""Tensor core: forward values, backward gradients, error taxonomy."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadgen import autodiff as ad
from roadgen.autodiff import Tensor
from roadgen.errors import ContractError, MathDomainError, NumericError, ShapeError

from helpers import check_grads, numeric_grad, rel_err


def rng(seed=0):
    return np.random.default_rng(seed)


# -- forward values -------------------------------------------------------

def test_identity_matmul():
    a = rng().standard_normal((3, 3))
    out = ad.matmul(Tensor(a), Tensor(np.eye(3)))
    np.testing.assert_array_equal(out.data, a)


def test_scalar_item_and_shape():
    t = Tensor([[2.0]])
    assert t.item() == 2.0
    assert t.shape == (1, 1)
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


def test_broadcast_add_bias():
    x = rng(1).standard_normal((4, 3))
    b = rng(2).standard_normal((3,))
    out = Tensor(x) + Tensor(b)
    np.testing.assert_allclose(out.data, x + b)


def test_float64_everywhere():
    t = Tensor(np.arange(4, dtype=np.float32))
    assert t.data.dtype == np.float64
    out = ad.relu(t * 2)
    assert out.data.dtype == np.float64


# -- backward: pinned analytic cases -------------------------------------

def test_sum_of_squares_gradient():
    x = np.array([1.0, -2.0, 3.0])
    t = Tensor(x, requires_grad=True)
    ad.tsum(t * t).backward()
    np.testing.assert_allclose(t.grad, 2.0 * x, atol=1e-15)


def test_mean_gradient_is_one_over_n():
    t = Tensor(rng(3).standard_normal(7), requires_grad=True)
    ad.tmean(t).backward()
    np.testing.assert_allclose(t.grad, np.full(7, 1.0 / 7.0), atol=1e-15)


def test_softplus_gradient_matches_sigmoid():
    x = rng(4).standard_normal(11)
    t = Tensor(x, requires_grad=True)
    ad.tsum(ad.log(1.0 + ad.exp(t))).backward()
    sigmoid = 1.0 / (1.0 + np.exp(-x))
    assert rel_err(t.grad, sigmoid) < 1e-10


def test_relu_subgradient_zero_at_zero():
    t = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    ad.tsum(ad.relu(t)).backward()
    np.testing.assert_array_equal(t.grad, [0.0, 0.0, 1.0])


def test_sqrt_subgradient_zero_at_zero():
    t = Tensor(np.array([0.0, 4.0]), requires_grad=True)
    ad.tsum(ad.sqrt(t)).backward()
    np.testing.assert_allclose(t.grad, [0.0, 0.25], atol=1e-15)


def test_shared_node_accumulates():
    # y = x*x via two references to the same node
    t = Tensor(np.array([3.0]), requires_grad=True)
    ad.tsum(t * t + t).backward()
    np.testing.assert_allclose(t.grad, [7.0])


def test_backward_rejects_nonscalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (t * t).backward()


def test_backward_requires_grad_root():
    with pytest.raises(ContractError):
        Tensor(np.array(1.0)).backward()


def test_no_graph_without_requires_grad():
    out = Tensor(np.ones((2, 2))) @ Tensor(np.ones((2, 2)))
    assert out.requires_grad is False
    assert out._parents == ()


# -- backward: finite-difference checks ----------------------------------

def test_grad_elementwise_chain():
    x = rng(5).standard_normal((3, 4))
    y = rng(6).standard_normal((3, 4))
    check_grads(lambda a, b: ad.tsum(a * b + ad.relu(a - b) / 2.0), [x, y])


def test_grad_matmul_chain():
    a = rng(7).standard_normal((3, 5))
    b = rng(8).standard_normal((5, 2))
    check_grads(lambda x, y: ad.tsum(ad.relu(x @ y)), [a, b])


def test_grad_broadcast_bias():
    x = rng(9).standard_normal((6, 3))
    b = rng(10).standard_normal((3,))
    check_grads(lambda a, c: ad.tsum((a + c) * (a + c)), [x, b])


def test_grad_div():
    x = rng(11).standard_normal((4,))
    y = rng(12).standard_normal((4,)) + 3.0
    check_grads(lambda a, b: ad.tsum(a / b), [x, y])


def test_grad_exp_log_sqrt():
    x = np.abs(rng(13).standard_normal((5,))) + 0.5
    check_grads(lambda a: ad.tsum(ad.log(ad.sqrt(a)) + ad.exp(-a)), [x])


def test_grad_transpose_reshape():
    x = rng(14).standard_normal((3, 4))
    check_grads(lambda a: ad.tsum(ad.reshape(a.T, (2, 6)) * 1.5), [x])


def test_grad_axis_reductions():
    x = rng(15).standard_normal((4, 3))
    check_grads(lambda a: ad.tsum(ad.tmean(a, axis=1) * ad.tmean(a, axis=1)), [x])
    check_grads(lambda a: ad.tsum(ad.tsum(a, axis=0) * 2.0), [x])
    check_grads(lambda a: ad.tsum(ad.tsum(a, axis=1, keepdims=True) * a), [x])


def test_grad_logsumexp_plain():
    x = rng(16).standard_normal((5, 4))
    check_grads(lambda a: ad.tsum(ad.logsumexp(a)), [x])


def test_grad_logsumexp_masked():
    x = rng(17).standard_normal((4, 6))
    mask = rng(18).random((4, 6)) > 0.4
    mask[:, 0] = True  # keep every row non-empty
    check_grads(lambda a: ad.tsum(ad.logsumexp(a, mask=mask)), [x])


def test_logsumexp_matches_naive_on_large_values():
    x = rng(19).standard_normal((3, 4)) * 400.0  # naive exp would overflow
    out = ad.logsumexp(Tensor(x))
    ref = x.max(axis=1) + np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1))
    np.testing.assert_allclose(out.data, ref, rtol=1e-12)


def test_grad_take_rows_and_take():
    x = rng(20).standard_normal((5, 3))
    idx = np.array([0, 2, 2, 4])
    check_grads(lambda a: ad.tsum(ad.take_rows(a, idx) * 2.0), [x])
    rows = np.array([0, 1, 3])
    cols = np.array([2, 0, 1])
    check_grads(lambda a: ad.tsum(ad.take(a, rows, cols)), [x])


def test_take_rows_scatter_adds_duplicates():
    t = Tensor(np.ones((3, 2)), requires_grad=True)
    ad.tsum(ad.take_rows(t, [1, 1, 1])).backward()
    np.testing.assert_array_equal(t.grad, [[0, 0], [3, 3], [0, 0]])


# -- error taxonomy -------------------------------------------------------

def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_matmul_rejects_non_2d():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_log_domain_error():
    with pytest.raises(MathDomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(MathDomainError):
        ad.log(Tensor([-1.0]))


def test_sqrt_domain_error():
    with pytest.raises(MathDomainError):
        ad.sqrt(Tensor([-1e-12]))


def test_div_by_zero_raises():
    with pytest.raises(MathDomainError):
        Tensor([1.0]) / Tensor([0.0])


def test_exp_overflow_raises():
    with pytest.raises(NumericError):
        ad.exp(Tensor([1000.0]))


def test_reduction_axis_out_of_range():
    with pytest.raises(ShapeError):
        ad.tsum(Tensor(np.ones((2, 3))), axis=2)


def test_reshape_count_mismatch():
    with pytest.raises(ShapeError):
        ad.reshape(Tensor(np.ones(6)), (4, 2))


def test_logsumexp_empty_row_rejected():
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(ContractError):
        ad.logsumexp(Tensor(np.ones((2, 2))), mask=mask)


def test_take_rows_out_of_range():
    with pytest.raises(ContractError):
        ad.take_rows(Tensor(np.ones((2, 2))), [0, 2])


# -- determinism and structure -------------------------------------------

def test_backward_is_deterministic():
    x = rng(21).standard_normal((6, 4))
    grads = []
    for _ in range(2):
        t = Tensor(x, requires_grad=True)
        ad.tsum(ad.relu(t @ t.T) * 0.5).backward()
        grads.append(t.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_graph_is_rebuilt_per_forward():
    t = Tensor(np.array([2.0]), requires_grad=True)
    ad.tsum(t * 3.0).backward()
    first = t.grad.copy()
    ad.tsum(t * 3.0).backward()
    # second pass accumulates into .grad; caller resets between steps
    np.testing.assert_allclose(t.grad, 2.0 * first)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10_000))
def test_backward_linearity(seed):
    # grad of (f + g) equals grad f + grad g on the same point
    x = np.random.default_rng(seed).standard_normal((3, 3))

    def run(build):
        t = Tensor(x, requires_grad=True)
        build(t).backward()
        return t.grad.copy()

    f = lambda t: ad.tsum(ad.relu(t) * 2.0)
    g = lambda t: ad.tmean(t * t)
    both = run(lambda t: f(t) + g(t))
    np.testing.assert_allclose(both, run(f) + run(g), rtol=1e-12, atol=1e-12)


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 5))
def test_unbroadcast_sums_match_fd(seed, n, m):
    r = np.random.default_rng(seed)
    a = r.standard_normal((n, m))
    b = r.standard_normal((1, m))
    check_grads(lambda x, y: ad.tsum((x + y) * (x - y)), [a, b], tol=1e-3)
