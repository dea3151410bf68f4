import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hanrock import autodiff as ad

F64 = np.float64
finite = st.floats(-3, 3, allow_nan=False, width=64)


def leaf(x, name="x"):
    return ad.Tensor(np.asarray(x, dtype=F64), name=name, requires_grad=True, dtype=F64)


def grad_of(fn, **params):
    _, g = ad.value_and_grad(fn, params)
    return g


def test_product_rule():
    a, b = leaf([1.0, 2.0], "a"), leaf([3.0, -1.0], "b")
    g = grad_of(lambda: ad.sum(ad.mul(a, b)), a=a, b=b)
    np.testing.assert_array_equal(g["a"], [3.0, -1.0])
    np.testing.assert_array_equal(g["b"], [1.0, 2.0])


def test_broadcast_gradient_is_summed():
    a = leaf(np.ones((3, 2)), "a")
    b = leaf([0.5, 2.0], "b")
    g = grad_of(lambda: ad.sum(ad.mul(a, b)), a=a, b=b)
    np.testing.assert_array_equal(g["b"], [3.0, 3.0])
    np.testing.assert_array_equal(g["a"], np.tile([0.5, 2.0], (3, 1)))


def test_matmul_gradient_matches_closed_form():
    rng = np.random.default_rng(0)
    A, B = leaf(rng.normal(size=(3, 4)), "A"), leaf(rng.normal(size=(4, 2)), "B")
    R = rng.normal(size=(3, 2))
    g = grad_of(lambda: ad.sum(ad.mul(ad.matmul(A, B), R)), A=A, B=B)
    np.testing.assert_allclose(g["A"], R @ B.data.T)
    np.testing.assert_allclose(g["B"], A.data.T @ R)


def test_shape_error_on_bad_broadcast():
    with pytest.raises(ad.ShapeError):
        ad.add(leaf(np.ones(3)), leaf(np.ones(4)))


def test_non_finite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(leaf([0.0]))


def test_gradient_map_has_zeros_for_unused_parameters():
    a, b = leaf([1.0], "a"), leaf([2.0], "b")
    g = grad_of(lambda: ad.sum(ad.mul(a, a)), a=a, b=b)
    np.testing.assert_array_equal(g["b"], [0.0])
    np.testing.assert_array_equal(g["a"], [2.0])


def test_masked_softmax_ignores_masked_entries():
    x = leaf([[1.0, 5.0, 2.0]])
    mask = np.array([[True, False, True]])
    p = ad.masked_softmax(x, mask).data
    assert p[0, 1] == 0.0
    np.testing.assert_allclose(p[0, [0, 2]], np.exp([1, 2]) / np.exp([1, 2]).sum())


@settings(max_examples=40, deadline=None)
@given(arrays(F64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(leaf(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


@settings(max_examples=30, deadline=None)
@given(arrays(F64, st.tuples(st.integers(1, 3), st.integers(2, 5)), elements=finite),
       st.integers(0, 2 ** 16))
def test_log_softmax_gradient_matches_finite_differences(x, seed):
    r = np.random.default_rng(seed).normal(size=x.shape)
    t = leaf(x)
    err = ad.finite_difference_check(lambda: ad.sum(ad.mul(ad.log_softmax(t), r)), {"x": t}, epsilon=1e-4)
    assert err < 1e-5


@pytest.mark.parametrize("op", [ad.sigmoid, ad.tanh, ad.exp])
def test_elementwise_gradients(op):
    t = leaf(np.linspace(-2, 2, 7))
    assert ad.finite_difference_check(lambda: ad.sum(op(t)), {"x": t}, epsilon=1e-5) < 1e-7


def test_relu_kinks_are_skipped():
    t = leaf([-1.0, 1e-5, 2.0])
    stats = {}
    err = ad.finite_difference_check(lambda: ad.sum(ad.relu(t)), {"x": t}, epsilon=1e-3, skip_kinks=True,
                                     stats=stats)
    assert stats == {"checked": 2, "skipped": 1}
    assert err < 1e-9


def test_fourth_order_stencil_beats_second_order():
    t = leaf([0.7, -1.3])
    fn = lambda: ad.sum(ad.exp(ad.mul(t, t)))   # noqa: E731
    e2 = ad.finite_difference_check(fn, {"x": t}, epsilon=1e-2, order=2)
    e4 = ad.finite_difference_check(fn, {"x": t}, epsilon=1e-2, order=4)
    assert e4 < e2 / 100


def test_take_rows_accumulates_repeated_ids():
    m = leaf(np.zeros((4, 2)), "m")
    g = grad_of(lambda: ad.sum(ad.take_rows(m, np.array([1, 1, 3]))), m=m)
    np.testing.assert_array_equal(g["m"], [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_no_tape_records_nothing():
    a = leaf([1.0])
    out = ad.mul(a, a)
    assert out._parents == ()
