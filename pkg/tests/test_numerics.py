from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cgdl import numerics as nx
from cgdl.errors import ContractError, DimensionError, NonFiniteError


def fd_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn(x)
        x[i] = old - h
        down = fn(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_unary(op, x, **kw):
    t = nx.parameter(x.copy())
    nx.backward(nx.sum_(op(t)))
    num = fd_grad(lambda a: float(np.sum(op(nx.Tensor(a)).data)), x.copy(), **kw)
    np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-7)


rng = np.random.default_rng(0)
W34 = nx.Tensor(rng.normal(size=(3, 4)))


@pytest.mark.parametrize(
    "op, x",
    [
        (nx.exp, rng.normal(size=(3, 4))),
        (nx.log, rng.uniform(0.5, 2.0, size=(3, 4))),
        (nx.sqrt, rng.uniform(0.5, 2.0, size=(5,))),
        (nx.square, rng.normal(size=(2, 3))),
        (nx.abs_, rng.uniform(0.2, 1.0, size=(4,)) * np.array([1, -1, 1, -1])),
        (nx.reciprocal, rng.uniform(0.5, 2.0, size=(4,))),
        (nx.softplus, rng.normal(scale=3, size=(3, 3))),
        (nx.sigmoid, rng.normal(scale=3, size=(3, 3))),
        (nx.erf, rng.normal(size=(6,))),
        (nx.neg, rng.normal(size=(2, 2))),
        (lambda t: nx.scale(t, 2.5), rng.normal(size=(3,))),
        (lambda t: nx.softmax(t, axis=-1), rng.normal(size=(3, 4))),
        (lambda t: nx.log_softmax(t, axis=-1) * W34, rng.normal(size=(3, 4))),
        (lambda t: nx.logsumexp(t, axis=0), rng.normal(size=(3, 4))),
        (lambda t: nx.mean(t, axis=1), rng.normal(size=(3, 4))),
        (lambda t: nx.flatten(t), rng.normal(size=(2, 3, 2))),
        (lambda t: nx.getitem(t, (np.array([0, 0, 1]), np.array([1, 1, 2]))), rng.normal(size=(2, 3))),
        (lambda t: nx.prelu(t, 0.2), rng.uniform(0.1, 1.0, size=(6,)) * np.array([1, -1] * 3)),
    ],
)
def test_unary_gradients_match_finite_differences(op, x):
    check_unary(op, x)


@pytest.mark.parametrize("op", [nx.add, nx.sub, nx.mul, nx.div])
def test_binary_broadcast_gradients(op):
    a = rng.uniform(0.5, 1.5, size=(3, 4))
    b = rng.uniform(0.5, 1.5, size=(4,))
    ta, tb = nx.parameter(a.copy()), nx.parameter(b.copy())
    nx.backward(nx.sum_(op(ta, tb)))
    ga = fd_grad(lambda v: float(np.sum(op(nx.Tensor(v), nx.Tensor(b)).data)), a.copy())
    gb = fd_grad(lambda v: float(np.sum(op(nx.Tensor(a), nx.Tensor(v)).data)), b.copy())
    np.testing.assert_allclose(ta.grad, ga, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(tb.grad, gb, rtol=1e-6, atol=1e-7)


def test_linear_and_concat_gradients():
    x, W, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=(2,))
    tx, tW, tb = nx.parameter(x), nx.parameter(W), nx.parameter(b)
    w_out = rng.normal(size=(5, 4))
    out = nx.concat([nx.linear(tx, tW, tb), nx.square(nx.linear(tx, tW))], axis=1)
    nx.backward(nx.sum_(nx.mul(out, w_out)))

    def f(Wv):
        y = x @ Wv
        return float(np.sum(np.concatenate([y + b, y**2], axis=1) * w_out))

    np.testing.assert_allclose(tW.grad, fd_grad(f, W.copy()), rtol=1e-6)


def test_prelu_slope_gradient_sums_negative_inputs():
    x = np.array([-2.0, 1.0, -0.5, 3.0])
    slope = nx.parameter(np.array(0.25))
    nx.backward(nx.sum_(nx.prelu(nx.Tensor(x), slope)))
    assert slope.grad == pytest.approx(-2.5)


def test_gradient_accumulates_over_reuse():
    a = nx.parameter(np.array([1.5, -2.0]))
    nx.backward(nx.sum_(nx.add(nx.mul(a, a), a)))
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)


def test_backward_requires_scalar_loss():
    a = nx.parameter(np.ones(3))
    with pytest.raises(ContractError):
        nx.backward(nx.mul(a, 2.0))


def test_no_grad_builds_no_tape():
    a = nx.parameter(np.ones(3))
    with nx.no_grad():
        out = nx.sum_(nx.exp(a))
    assert not out.requires_grad
    with pytest.raises(ContractError):
        nx.backward(out)


def test_contract_violations():
    with pytest.raises(ContractError):
        nx.log(nx.Tensor(np.array([1.0, 0.0])))
    with pytest.raises(ContractError):
        nx.div(nx.Tensor(np.ones(2)), nx.Tensor(np.array([1.0, 0.0])))
    with pytest.raises(DimensionError):
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 3))))
    with pytest.raises(NonFiniteError):
        nx.exp(nx.Tensor(np.array([1000.0])))


def test_softplus_is_stable_and_positive():
    x = np.array([-800.0, -40.0, 0.0, 40.0, 800.0])
    y = nx.softplus(nx.Tensor(x)).data
    assert np.all(y > 0)
    np.testing.assert_allclose(y[2:], [np.log(2.0), 40.0, 800.0], rtol=1e-12)


def test_make_rng_streams_are_reproducible_and_distinct():
    a = nx.make_rng(7, "eps").standard_normal(5)
    b = nx.make_rng(7, "eps").standard_normal(5)
    c = nx.make_rng(7, "shuffle").standard_normal(5)
    d = nx.make_rng(8, "eps").standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert not np.allclose(a, d)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = nx.softmax(nx.Tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(nx.log_softmax(nx.Tensor(x), axis=-1).data, np.log(p), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4,), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_broadcast_add_gradient_is_summed(b, a):
    tb = nx.parameter(b)
    nx.backward(nx.sum_(nx.add(nx.Tensor(a), tb)))
    np.testing.assert_array_equal(tb.grad, np.full(4, 3.0))
