from __future__ import annotations

import math

import numpy as np
import pytest

from mcfd.expectation import gauss_hermite_rule, gh_expectation, gh_moments
from mcfd.testbeds import constant_spec


def test_rule_normalization():
    for d in (1, 2, 3):
        rule = gauss_hermite_rule(d, 5)
        assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.all(rule.weights > 0)
        assert rule.dim == d


@pytest.mark.parametrize("order", [4, 6, 8])
def test_rule_monomials(order):
    rule = gauss_hermite_rule(1, order)
    x = rule.nodes[:, 0]
    for deg in range(0, 7):
        exact = 0.0 if deg % 2 else float(np.prod(np.arange(deg - 1, 0, -2))) if deg else 1.0
        assert rule.weights @ x**deg == pytest.approx(exact, abs=1e-12)


def test_rule_validation():
    with pytest.raises(ValueError):
        gauss_hermite_rule(4)
    with pytest.raises(ValueError):
        gauss_hermite_rule(1, 1)


def test_constant_normalization():
    spec = constant_spec(2, 1.0)
    assert gh_expectation(lambda t, y: np.ones(len(y)), "none", spec, 0.0, [0.3, 0.1], 0.1) == pytest.approx(1.0)


def test_martingale_mean():
    spec = constant_spec(1, 1.5)
    assert gh_expectation(lambda t, y: y[:, 0], "none", spec, 0.0, [0.7], 0.2) == pytest.approx(0.7)


@pytest.mark.parametrize("x,h", [(0.0, 0.1), (1.3, 0.01), (-2.0, 0.5)])
def test_hessian_of_square(x, h):
    spec = constant_spec(1, 1.0)
    out = gh_expectation(lambda t, y: y[:, 0] ** 2, "hess", spec, 0.0, [x], h, gauss_hermite_rule(1, 3))
    assert out[0, 0] == pytest.approx(2.0, abs=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_gradient_exactness_polynomial(seed):
    rng = np.random.default_rng(seed)
    sig = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    mu = rng.normal(size=2)
    spec = constant_spec(2, sig, mu=mu)
    c = rng.normal(size=4)
    h = 0.08
    x = rng.normal(size=2)

    def psi(t, y):
        return c[0] * y[:, 0] ** 4 + c[1] * y[:, 0] * y[:, 1] ** 2 + c[2] * y[:, 1] ** 3 + c[3] * y[:, 0]

    def grad(y):
        return np.column_stack([4 * c[0] * y[:, 0] ** 3 + c[1] * y[:, 1] ** 2 + c[3],
                                2 * c[1] * y[:, 0] * y[:, 1] + 3 * c[2] * y[:, 1] ** 2])

    rule = gauss_hermite_rule(2, 8)
    lhs = gh_expectation(psi, "grad", spec, 0.0, x, h, rule)
    mom = gh_moments(grad, spec, 0.0, x[None], h, rule, need=(0,))[0][0]
    np.testing.assert_allclose(lhs, mom, atol=1e-12 * max(1.0, np.max(np.abs(lhs))))


def test_order_monotonicity():
    spec = constant_spec(1, 1.0, mu=0.3)

    def psi(t, y):
        return y[:, 0] ** 5 - 2 * y[:, 0] ** 3 + y[:, 0]

    vals = [gh_expectation(psi, "hess", spec, 0.0, [0.4], 0.1, gauss_hermite_rule(1, o))[0, 0]
            for o in (4, 6, 8, 10)]
    assert max(abs(v - vals[-1]) for v in vals) < 1e-10


def test_vector_valued_moments_shapes():
    spec = constant_spec(2, 1.0)
    x = np.zeros((3, 2))
    out = gh_moments(lambda y: np.column_stack([y[:, 0], y[:, 1], y[:, 0] * y[:, 1]]), spec, 0.0, x, 0.1,
                     gauss_hermite_rule(2, 4))
    assert out[0].shape == (3, 3)
    assert out[1].shape == (3, 2, 3)
    assert out[2].shape == (3, 2, 2, 3)
    # the Hessian of y0 y1 is [[0, 1], [1, 0]]
    np.testing.assert_allclose(out[2][:, :, :, 2], np.tile([[0, 1], [1, 0]], (3, 1, 1)), atol=1e-10)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        gh_moments(lambda y: y[:, 0], constant_spec(2, 1.0), 0.0, np.zeros((1, 2)), 0.1, gauss_hermite_rule(1))


def test_one_step_heat_value():
    spec = constant_spec(1, 1.0)
    h = 0.3
    out = gh_expectation(lambda t, y: np.cos(y[:, 0]), "none", spec, 0.0, [0.5], h, gauss_hermite_rule(1, 20))
    assert out == pytest.approx(math.cos(0.5) * math.exp(-h / 2), abs=1e-12)
