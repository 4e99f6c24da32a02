from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcfd.sde import (
    CIRMilsteinRule,
    DiffusionSpec,
    cev_log_step,
    cir_implicit_milstein_step,
    euler_step,
    gaussian_increments,
    load_cloud,
    ou_exact_step,
    propagate,
    save_cloud,
    simulate_cloud,
)
from mcfd.testbeds import constant_spec, heston_spec, hjb5d_spec


def test_euler_identity_when_increment_vanishes():
    spec = constant_spec(2, 1.0)
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(euler_step(spec, 0.0, x, np.zeros(2), 0.1), x)


def test_euler_scalar_substitution():
    spec = constant_spec(1, 2.0, mu=1.0)
    assert euler_step(spec, 0.0, np.array([0.0]), np.array([0.3]), 0.1)[0] == pytest.approx(0.7)


def test_euler_diagonal_case():
    spec = constant_spec(2, np.diag([1.0, 2.0]))
    out = euler_step(spec, 0.0, np.array([1.0, 2.0]), np.array([0.4, -0.5]), 0.1)
    np.testing.assert_allclose(out, [1.4, 1.0])


def test_euler_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        euler_step(constant_spec(1, 1.0), 0.0, np.zeros(1), np.zeros(1), 0.0)


def test_cir_substitution():
    out = cir_implicit_milstein_step(0.1, 0.3, 0.2, 0.3, 0.0, 0.05)
    assert out == pytest.approx((0.3 + 0.0015 - 0.0005) / 1.005, rel=1e-14)


def test_cir_zero_noise_is_implicit_euler():
    y, h = 0.7, 0.2
    out = cir_implicit_milstein_step(0.5, 0.3, 0.0, y, 1.3, h)
    assert out == pytest.approx((y + 0.5 * 0.3 * h) / (1 + 0.5 * h))


def test_cir_minimum_over_draws_is_nonnegative():
    # the numerator is (sqrt y + c sqrt(h) xi / 2)^2 + (km - c^2/4) h
    k, m, c, h = 0.1, 0.3, 0.2, 0.05
    xi = np.linspace(-10, 10, 200_001)
    for y in (0.0, 1e-6, 0.01, 0.3, 2.0):
        assert np.min(cir_implicit_milstein_step(k, m, c, y, xi, h)) >= 0.0
    y = 0.01
    xi_star = -2.0 * math.sqrt(y) / (c * math.sqrt(h))
    floor = (k * m - c * c / 4) * h / (1 + k * h)
    assert cir_implicit_milstein_step(k, m, c, y, xi_star, h) == pytest.approx(floor, rel=1e-9)


def test_cir_rule_rejects_non_preserving_parameters():
    with pytest.raises(ValueError, match="positivity"):
        CIRMilsteinRule(0.1, 0.01, 0.5)
    CIRMilsteinRule(0.1, 0.01, 0.5, clamp=True)


def test_cir_clamp_mode_returns_zero_floor():
    k, m, c, y, h = 0.1, 0.01, 0.5, 0.01, 0.5
    xi_star = -2.0 * math.sqrt(y) / (c * math.sqrt(h))
    assert cir_implicit_milstein_step(k, m, c, y, xi_star, h) < 0
    assert cir_implicit_milstein_step(k, m, c, y, xi_star, h, clamp=True) == 0.0


@settings(max_examples=200, deadline=None)
@given(
    y=st.floats(0.0, 5.0),
    xi=st.floats(-50.0, 50.0),
    h=st.floats(1e-6, 2.0),
    k=st.floats(0.01, 5.0),
    m=st.floats(0.01, 2.0),
)
def test_cir_positivity_property(y, xi, h, k, m):
    c = math.sqrt(4 * k * m)  # boundary of the preserving regime
    assert cir_implicit_milstein_step(k, m, c, y, xi, h) >= -1e-15


def test_ou_stationary_mean():
    assert ou_exact_step(0.1, 0.07, 0.3, 0.07, 0.0, 0.05) == pytest.approx(0.07)


def test_ou_small_rate_limit():
    r, zeta, h = 0.2, 0.3, 0.01
    out = ou_exact_step(1e-12, 0.07, zeta, r, 1.0, h)
    assert out == pytest.approx(r + zeta * math.sqrt(h), rel=1e-9)


def test_ou_variance_matches_closed_form():
    kappa, zeta, h = 0.7, 0.3, 0.5
    out = ou_exact_step(kappa, 0.0, zeta, 0.0, 1.0, h)
    assert out == pytest.approx(zeta * math.sqrt((1 - math.exp(-2 * kappa * h)) / (2 * kappa)))


def test_cev_zero_variance():
    assert cev_log_step(0.1, 0.3, 0.5, 2.0, 0.0, 0.7, 0.05) == pytest.approx(2.0 * math.exp(0.005))


def test_cev_lognormal_reduction():
    s, y, dw, h = 1.5, 0.4, 0.2, 0.05
    vol = 0.3 * math.sqrt(y)
    expected = s * math.exp((0.1 - 0.5 * vol**2) * h + vol * dw)
    assert cev_log_step(0.1, 0.3, 1.0, s, y, dw, h) == pytest.approx(expected)


def test_cev_substitution():
    assert cev_log_step(0.10, 0.3, 0.5, 1.0, 1.0, 0.0, 0.05) == pytest.approx(math.exp(0.00275))


def test_cev_rejects_nonpositive_price():
    with pytest.raises(ValueError):
        cev_log_step(0.1, 0.3, 0.5, 0.0, 1.0, 0.0, 0.05)


def test_degenerate_single_particle_stays_at_start():
    spec = DiffusionSpec(2, lambda t, x: np.zeros_like(x), lambda t, x: np.zeros((len(x), 2, 2)))
    cloud = simulate_cloud(spec, [0.5, -0.5], 4, 0.1, 1, seed=3)
    np.testing.assert_array_equal(cloud.states[0], np.tile([0.5, -0.5], (5, 1)))


def test_cloud_is_deterministic_and_replayable():
    spec = heston_spec(1.0, 0.1, 0.3, 0.2)
    a = simulate_cloud(spec, [1.0, 0.3], 5, 0.05, 5000, seed=11)
    b = simulate_cloud(spec, [1.0, 0.3], 5, 0.05, 5000, seed=11)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.increments, b.increments)
    np.testing.assert_array_equal(propagate(spec, [1.0, 0.3], a.increments, 0.05), a.states)
    assert np.min(a.states[:, :, 1]) >= 0.0


def test_increments_do_not_depend_on_particle_count():
    small = gaussian_increments(5, 100, 3, 2, 0.1)
    large = gaussian_increments(5, 10_000, 3, 2, 0.1)
    np.testing.assert_array_equal(small, large[:100])


def test_increment_statistics():
    h = 0.04
    dw = gaussian_increments(1, 100_000, 1, 2, h)[:, 0]
    n = len(dw)
    assert np.all(np.abs(dw.mean(axis=0)) < 4 * math.sqrt(h / n))
    cov = np.cov(dw.T)
    np.testing.assert_allclose(cov, h * np.eye(2), atol=4 * h * math.sqrt(2 / n))


def test_euler_moments():
    mu = np.array([0.5, -1.0])
    sig = np.array([[1.0, 0.0], [0.5, 2.0]])
    spec = constant_spec(2, sig, mu=mu)
    h, n = 0.1, 100_000
    x0 = np.array([1.0, 2.0])
    cloud = simulate_cloud(spec, x0, 1, h, n, seed=2)
    x1 = cloud.states[:, 1]
    a = sig @ sig.T
    sd = np.sqrt(np.diag(a) * h)
    assert np.all(np.abs(x1.mean(axis=0) - (x0 + mu * h)) < 4 * sd / math.sqrt(n))
    np.testing.assert_allclose(np.cov(x1.T), a * h, rtol=4 / math.sqrt(n) * 3, atol=1e-3)


def test_hjb5d_components_stay_in_domain():
    spec = hjb5d_spec(1.0, 0.1, 0.07, 0.3, 0.1, 0.3, 0.5, 0.1, 1.0, 0.1, 0.1, 0.3, 0.2)
    cloud = simulate_cloud(spec, [1.0, 0.07, 1.0, 1.0, 0.3], 10, 0.1, 4000, seed=0)
    assert np.all(cloud.states[:, :, 2] > 0)
    assert np.all(cloud.states[:, :, 3] >= 0)
    assert np.all(cloud.states[:, :, 4] >= 0)


def test_coefficient_bound_is_enforced():
    spec = DiffusionSpec(1, lambda t, x: np.zeros_like(x), lambda t, x: np.full((len(x), 1, 1), 5.0),
                         coef_bound=1.0)
    with pytest.raises(ValueError, match="bound"):
        simulate_cloud(spec, [0.0], 2, 0.1, 10, seed=0)


@pytest.mark.parametrize("suffix", [".csv", ".npz"])
def test_cloud_roundtrip(tmp_path, suffix):
    cloud = simulate_cloud(constant_spec(2, 1.0), [0.0, 1.0], 3, 0.25, 7, seed=4)
    path = tmp_path / f"cloud{suffix}"
    save_cloud(cloud, path)
    back = load_cloud(path)
    np.testing.assert_array_equal(back.states, cloud.states)
    np.testing.assert_array_equal(back.increments, cloud.increments)
    np.testing.assert_array_equal(back.times, cloud.times)
