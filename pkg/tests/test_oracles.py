from __future__ import annotations

import math

import numpy as np
import pytest

from mcfd.oracles import deterministic_variance_integral, linear_exact, sphere_radius, zariphopoulou_value
from mcfd.testbeds import cos_taper

HESTON = dict(mu=0.15, c=0.2, k=0.1, m=0.3, rho=0.0)


def test_linear_terminal_identity():
    assert linear_exact(np.cos, 0.25, 1.0, 0.3, 1.0) == pytest.approx(math.cos(0.3))


@pytest.mark.parametrize("c", [0.0, 0.25, 1.0])
def test_linear_cosine_closed_form(c):
    x = np.linspace(-3, 3, 13)
    for t in (0.0, 0.5, 0.9):
        expected = np.cos(x) * math.exp(-(1 + 2 * c) * (1 - t) / 2)
        np.testing.assert_allclose(linear_exact(np.cos, c, t, x, 1.0), expected, atol=1e-10)


def test_linear_heat_reduction():
    def g(y):
        return np.exp(-y * y)

    # Gaussian convolution of exp(-y^2) with N(0, s^2): exp(-x^2 / (1 + 2 s^2)) / sqrt(1 + 2 s^2)
    s2 = 0.7
    x = np.array([-1.0, 0.0, 0.5])
    expected = np.exp(-x * x / (1 + 2 * s2)) / math.sqrt(1 + 2 * s2)
    np.testing.assert_allclose(linear_exact(g, 0.0, 0.3, x, 1.0), expected, atol=1e-10)


def test_linear_pde_residual():
    c, T, e = 0.25, 1.0, 1e-3
    for t in (0.2, 0.5, 0.8):
        x = np.linspace(-4, 4, 17)

        def v(tt, xx):
            return linear_exact(cos_taper, c, tt, xx, T)

        vt = (v(t + e, x) - v(t - e, x)) / (2 * e)
        vxx = (v(t, x + e) - 2 * v(t, x) + v(t, x - e)) / e**2
        assert np.max(np.abs(vt + 0.5 * (1 + 2 * c) * vxx)) <= 1e-4


def test_linear_validation():
    with pytest.raises(ValueError):
        linear_exact(np.cos, -0.1, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        linear_exact(np.cos, 0.1, 2.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        linear_exact(np.cos, 0.1, 0.0, 0.0, 1.0, order=10)


def test_sphere_radius_examples():
    assert sphere_radius(0.0, 0.5) == pytest.approx(1.0)
    assert sphere_radius(0.15, 0.5) == pytest.approx(0.6325, abs=1e-4)
    assert sphere_radius(0.25 - 1e-12, 0.5) < 1e-5
    with pytest.raises(ValueError):
        sphere_radius(0.25, 0.5)


def test_zero_drift_gives_the_utility():
    out = zariphopoulou_value(**{**HESTON, "mu": 0.0}, eta=1.0, x=1.0, y=0.3)
    assert out.value == pytest.approx(-math.exp(-1.0))
    assert out.stderr == 0.0


def test_deterministic_variance_matches_ode():
    for y0 in (0.3, 0.5, 0.1):
        mc = zariphopoulou_value(**{**HESTON, "c": 0.0}, eta=1.0, x=1.0, y=y0, n_mc=10, n_steps=400)
        exact = -math.exp(-1.0) * math.exp(-0.5 * deterministic_variance_integral(0.15, 0.1, 0.3, y0, 1.0))
        assert mc.value == pytest.approx(exact, abs=1e-3)


def test_deterministic_integral_stationary_case():
    assert deterministic_variance_integral(0.15, 0.1, 0.3, 0.3, 2.0) == pytest.approx(0.15**2 * 2.0 / 0.3)


def test_reference_value():
    out = zariphopoulou_value(**HESTON, eta=1.0, x=1.0, y=0.3, n_mc=100_000, seed=0)
    assert abs(out.value - (-0.3534)) < max(5 * out.stderr, 5e-4)
    assert out.guarded == 0


def test_value_increases_with_wealth_and_risk_aversion():
    # v = -exp(-eta x) K with K in (0, 1] independent of x and eta
    xs = [0.0, 0.5, 1.0, 2.0]
    by_x = [zariphopoulou_value(**HESTON, eta=1.0, x=x, y=0.3, n_mc=2000).value for x in xs]
    assert np.all(np.diff(by_x) > 0)
    etas = [0.5, 1.0, 2.0, 4.0]
    by_eta = [zariphopoulou_value(**HESTON, eta=e, x=1.0, y=0.3, n_mc=2000).value for e in etas]
    assert np.all(np.diff(by_eta) > 0)


def test_correlated_case_uses_the_norm():
    base = zariphopoulou_value(**HESTON, eta=1.0, x=1.0, y=0.3, n_mc=5000)
    corr = zariphopoulou_value(**{**HESTON, "rho": -0.5}, eta=1.0, x=1.0, y=0.3, n_mc=5000)
    assert math.isfinite(corr.value) and corr.value < 0
    assert corr.value != base.value


def test_oracle_validation():
    with pytest.raises(ValueError):
        zariphopoulou_value(**{**HESTON, "rho": 1.0}, eta=1.0, x=1.0, y=0.3)
    with pytest.raises(ValueError):
        zariphopoulou_value(**HESTON, eta=-1.0, x=1.0, y=0.3)
