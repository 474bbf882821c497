import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from molmae import tensor as T
from molmae.gradsuite import check_ops


def test_softmax_symmetric():
    out = T.softmax(T.constant([[0.0, 0.0]]), axis=1)
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_identity_matmul():
    m = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.matmul(T.constant(np.eye(2)), T.constant(m)).data, m)


def test_scatter_add_hand_sum():
    out = T.scatter_add(T.constant([1.0, 2.0, 3.0]), [0, 0, 1], 2)
    assert out.data.tolist() == [3.0, 3.0]


def test_backward_sum_and_square():
    x = T.parameter([0.0, 0.0, 0.0])
    with T.recording() as tape:
        T.backward(T.sum(x), tape)
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x = T.parameter([1.0, 2.0])
    with T.recording() as tape:
        T.backward(T.sum(T.mul(x, x)), tape)
    assert x.grad.tolist() == [2.0, 4.0]


def test_unreached_leaf_gets_zero_grad():
    x, y = T.parameter([1.0, 2.0]), T.parameter([3.0])
    with T.recording() as tape:
        T.backward(T.sum(x), tape, leaves=[y])
    assert y.grad.tolist() == [0.0]


def test_non_scalar_loss():
    x = T.parameter([1.0, 2.0])
    with T.recording() as tape:
        with pytest.raises(T.NonScalarLoss):
            T.backward(T.mul(x, x), tape)


def test_shape_errors_name_the_op():
    with pytest.raises(T.ShapeMismatch, match="matmul"):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))
    with pytest.raises(T.ShapeMismatch, match="add"):
        T.add(T.constant(np.ones((2, 3))), T.constant(np.ones((2,))))
    with pytest.raises(T.IndexOutOfRange, match="scatter_add"):
        T.scatter_add(T.constant([1.0, 2.0]), [0, 2], 2)
    with pytest.raises(T.IndexOutOfRange, match="gather_rows"):
        T.gather_rows(T.constant(np.ones((2, 2))), [-1])


def test_fan_out_accumulates():
    x = T.parameter([3.0])
    with T.recording() as tape:
        y = T.add(T.mul(x, x), T.scale(x, 2.0))
        T.backward(T.sum(y), tape)
    assert x.grad.tolist() == [8.0]


def test_no_grad_records_nothing():
    x = T.parameter([1.0])
    with T.recording() as tape:
        with T.no_grad():
            T.mul(x, x)
    assert tape.records == []


def test_constants_are_not_recorded():
    with T.recording() as tape:
        T.mul(T.constant([1.0]), T.constant([2.0]))
    assert tape.records == []


# -- invariants ------------------------------------------------------------


finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 7)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(T.constant(x, np.float64), axis=1).data
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)
    assert (out >= 0).all()


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 9)),
              elements=st.floats(-10, 10, width=64)))
def test_layer_norm_moments(x):
    # rows that are nearly constant are governed by the 1e-5 epsilon
    x = x + np.arange(x.shape[1]) * 0.5
    out = T.layer_norm(T.constant(x, np.float64)).data
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-6)
    var = x.var(axis=1)
    expected = var / (var + 1e-5)
    assert np.allclose(out.var(axis=1), expected, atol=1e-10)


def test_layer_norm_variance_near_one_for_spread_rows(rng):
    x = rng.normal(size=(20, 16)) * 3
    out = T.layer_norm(T.constant(x, np.float64)).data
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-4


def test_scatter_add_adjointness(rng):
    """<scatter(v), g> == <v, gather(g)> and backward(scatter) == gather."""
    for _ in range(50):
        n_rows, n_groups, f = (int(rng.integers(1, 12)), int(rng.integers(1, 6)), int(rng.integers(1, 4)))
        groups = rng.integers(0, n_groups, size=n_rows)
        v = rng.normal(size=(n_rows, f))
        g = rng.normal(size=(n_groups, f))
        with T.precision(64):
            vt = T.parameter(v)
            with T.recording() as tape:
                out = T.scatter_add(vt, groups, n_groups)
                T.backward(T.sum(T.mul(out, T.constant(g))), tape)
        assert np.array_equal(vt.grad, g[groups])
        assert np.isclose((out.data * g).sum(), (v * g[groups]).sum())


def test_scatter_add_is_deterministic(rng):
    v = rng.normal(size=(1000, 4)).astype(np.float32)
    groups = rng.integers(0, 7, size=1000)
    a = T.scatter_add(T.constant(v), groups, 7).data
    b = T.scatter_add(T.constant(v), groups, 7).data
    assert a.tobytes() == b.tobytes()


# -- gradient checker ------------------------------------------------------


def test_grad_check_sum_of_squares(rng):
    with T.precision(64):
        x = T.parameter(rng.normal(size=(4, 3)))
        rep = T.grad_check(lambda a: T.sum(T.mul(a, a)), x, eps=1e-6)
    assert rep.max_rel_error <= 1e-8


def test_grad_check_layer_norm(rng):
    with T.precision(64):
        x = T.parameter(rng.normal(size=(3, 5)))
        w = T.constant(rng.normal(size=(3, 5)))
        rep = T.grad_check(lambda a: T.sum(T.mul(T.layer_norm(a), w)), x, tol=1e-6)
    assert rep.passed


def test_grad_check_constant_function(rng):
    with T.precision(64):
        x = T.parameter(rng.normal(size=(3,)))
        rep = T.grad_check(lambda a: T.sum(T.constant(np.ones(2))), x)
    assert np.allclose(rep.analytic, 0) and np.allclose(rep.numeric, 0)


def test_grad_check_cross_entropy_chain(rng):
    y = np.eye(4)[[0, 3, 1]]
    with T.precision(64):
        z = T.parameter(rng.normal(size=(3, 4)))
        rep = T.grad_check(lambda a: T.scale(T.sum(T.mul(T.log_softmax(a, axis=1), T.constant(y))), -1.0), z)
    assert rep.passed


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        T.grad_check(lambda a: T.sum(a), T.parameter(np.ones(2, dtype=np.float32)))


def test_every_op_passes_on_five_points():
    results = check_ops(n_points=5, seed=3)
    failed = [(r.name, r.report.max_rel_error) for r in results if not r.passed]
    assert not failed
    assert all(r.report.rel_error.size > 0 for r in results)


def test_dropout_keeps_expectation_and_dtype(rng):
    x = T.constant(np.ones((200, 50)), np.float32)
    y = T.dropout(x, 0.5, rng)
    assert y.data.dtype == np.float32
    assert abs(y.data.mean() - 1.0) < 0.05
    assert T.dropout(x, 0.5, None) is x
