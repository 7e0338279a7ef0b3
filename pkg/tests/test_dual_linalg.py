import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bifinfer import dual, linalg


def _d1(f, x):
    tag = dual.new_tag()
    (xd,) = dual.seed([np.asarray(x, float)], tag, np.ones((1, 1)))
    return dual.partial(f(xd), tag, 1)[0]


@pytest.mark.parametrize(
    "f, df",
    [
        (dual.sin, np.cos),
        (dual.cos, lambda x: -np.sin(x)),
        (dual.exp, np.exp),
        (dual.tanh, lambda x: 1 - np.tanh(x) ** 2),
        (lambda x: dual.log(x * x + 1), lambda x: 2 * x / (x * x + 1)),
        (lambda x: dual.sqrt(x * x + 2), lambda x: x / np.sqrt(x * x + 2)),
        (lambda x: x**3 / (1 + x * x), lambda x: (3 * x**2 * (1 + x * x) - 2 * x**4) / (1 + x * x) ** 2),
        (lambda x: 10.0**x, lambda x: 10.0**x * np.log(10.0)),
    ],
)
def test_first_derivatives(f, df):
    x = np.linspace(-1.3, 1.7, 7)
    np.testing.assert_allclose(_d1(f, x), df(x), rtol=1e-12, atol=1e-14)


def test_nested_second_and_third_derivative():
    x0 = np.array([0.3, -0.8])
    t1, t2, t3 = dual.new_tag(), dual.new_tag(), dual.new_tag()
    (x,) = dual.seed([x0], t1, np.ones((1, 1)))
    (x,) = dual.seed([x], t2, np.ones((1, 1)))
    (x,) = dual.seed([x], t3, np.ones((1, 1)))
    y = dual.sin(x) * x
    d3 = dual.partial(dual.partial(dual.partial(y, t3, 1)[0], t2, 1)[0], t1, 1)[0]
    # (x sin x)''' = -3 sin x - x cos x
    np.testing.assert_allclose(d3, -3 * np.sin(x0) - x0 * np.cos(x0), rtol=1e-12)
    d2 = dual.primal(dual.partial(dual.partial(y, t3, 1)[0], t2, 1)[0])
    np.testing.assert_allclose(d2, 2 * np.cos(x0) - x0 * np.sin(x0), rtol=1e-12)


def test_mixed_partials_two_variables():
    a0, b0 = np.array(1.2), np.array(-0.4)
    t1, t2 = dual.new_tag(), dual.new_tag()
    a, b = dual.seed([a0, b0], t1, np.eye(2))
    a, b = dual.seed([a, b], t2, np.eye(2))
    y = a * a * b + dual.exp(a * b)
    dab = dual.primal(dual.partial(dual.partial(y, t2, 2)[1], t1, 2)[0])
    expect = 2 * a0 + np.exp(a0 * b0) * (1 + a0 * b0)
    assert dab == pytest.approx(expect, rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_det_lu_plain_matches_numpy(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    assert linalg.det_lu(a) == pytest.approx(np.linalg.det(a), rel=1e-10, abs=1e-12)


def test_det_lu_dual_derivative_is_jacobi_formula(rng):
    n = 4
    a0 = rng.normal(size=(n, n))
    e = rng.normal(size=(n, n))
    tag = dual.new_tag()
    ad = dual.Dual(a0, e[None], tag)
    d = linalg.det_lu(ad)
    expect = np.linalg.det(a0) * np.trace(np.linalg.solve(a0, e))
    assert dual.partial(d, tag, 1)[0] == pytest.approx(expect, rel=1e-10)


def test_det_lu_batched_dual():
    s = 6
    a0 = np.random.default_rng(1).normal(size=(3, 3, s))
    tag = dual.new_tag()
    e = np.zeros((3, 3, s))
    e[0, 0] = 1.0
    d = linalg.det_lu(dual.Dual(a0, e[None], tag))
    cof = np.array([np.linalg.det(a0[1:, 1:, k]) for k in range(s)])
    np.testing.assert_allclose(dual.partial(d, tag, 1)[0], cof, rtol=1e-10)
    np.testing.assert_allclose(dual.primal(d), np.linalg.det(np.moveaxis(a0, -1, 0)), rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_minors_tangent_is_null_and_oriented(n, seed):
    j = np.random.default_rng(seed).normal(size=(n, n + 1))
    t = linalg.minors_tangent(j)
    assert np.max(np.abs(j @ t)) < 1e-10 * (1 + np.abs(t).max())
    assert np.linalg.det(np.vstack([t, j])) > 0
    tq, rdiag = linalg.nullspace_qr(j[None])
    cos = tq[0] @ t / np.linalg.norm(t)
    assert cos == pytest.approx(1.0, abs=1e-9)
    assert rdiag.shape == (1, n)
