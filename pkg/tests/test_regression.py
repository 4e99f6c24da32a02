from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcfd.regression import (
    LocalBasisConfig,
    fit_local_basis,
    fit_many,
    localization_eta,
    malliavin_estimate,
    sample_size,
    truncate_estimate,
)
from mcfd.solver import estimate_rate


def _sine_sample(n, noise, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=n)
    return X, np.sin(X) + noise * rng.normal(size=n)


def test_constant_recovery():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(2000, 2))
    est = fit_local_basis(X, np.full(2000, 3.5), LocalBasisConfig((4, 4)))
    np.testing.assert_allclose(est(rng.normal(size=(50, 2)) * 3), 3.5, atol=1e-12)


def test_affine_data_one_cell():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(500, 1))
    est = fit_local_basis(X, 3 * X[:, 0], LocalBasisConfig((1,)))
    q = np.linspace(X.min(), X.max(), 11)[:, None]
    np.testing.assert_allclose(est(q), 3 * q[:, 0], atol=1e-10)


def test_sine_example():
    X, Y = _sine_sample(100_000, 0.1, 2)
    est = fit_local_basis(X[:, None], Y, LocalBasisConfig((40,), tail_splits=1))
    q = np.linspace(-2, 2, 401)[:, None]
    assert np.max(np.abs(est(q) - np.sin(q[:, 0]))) < 0.02


def test_queries_outside_the_sample_are_clamped():
    X, Y = _sine_sample(5000, 0.1, 3)
    est = fit_local_basis(X[:, None], Y, LocalBasisConfig((10,)))
    assert est(np.array([[100.0]]))[0] == pytest.approx(est(np.array([[X.max()]]))[0])
    assert est(np.array([[-100.0]]))[0] == pytest.approx(est(np.array([[X.min()]]))[0])


def test_every_cell_keeps_enough_samples():
    rng = np.random.default_rng(4)
    X = np.column_stack([rng.normal(size=300), rng.exponential(size=300)])
    est = fit_local_basis(X, rng.normal(size=300), LocalBasisConfig((12, 12)))
    assert np.all(est.counts >= X.shape[1] + 2)
    assert est.counts.sum() == 300


def test_degenerate_axis_falls_back_without_failing():
    X = np.zeros((100, 2))
    X[:, 0] = np.linspace(-1, 1, 100)
    est = fit_local_basis(X, 2 * X[:, 0] + 1, LocalBasisConfig((2, 3)))
    np.testing.assert_allclose(est(X), 2 * X[:, 0] + 1, atol=1e-10)
    single = fit_local_basis(np.zeros((50, 1)), np.arange(50.0), LocalBasisConfig((4,)))
    assert single(np.array([[0.0]]))[0] == pytest.approx(24.5)
    assert np.all(single.fallback)


def test_mean_identity_on_training_inputs():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(20_000, 2))
    Y = np.sin(X[:, 0]) * X[:, 1] + rng.normal(size=20_000)
    est = fit_local_basis(X, Y, LocalBasisConfig((7, 5)))
    assert est(X).mean() == pytest.approx(Y.mean(), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_local_basis_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(3000, 2))
    Y1, Y2 = rng.normal(size=(2, 3000))
    cfg = LocalBasisConfig((5, 4))
    q = rng.normal(size=(40, 2))
    lhs = fit_local_basis(X, a * Y1 + b * Y2, cfg)(q)
    rhs = a * fit_local_basis(X, Y1, cfg)(q) + b * fit_local_basis(X, Y2, cfg)(q)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(k=st.floats(-100, 100), seed=st.integers(0, 1000))
def test_local_basis_shift_equivariance(k, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2000, 1))
    Y = rng.normal(size=2000)
    cfg = LocalBasisConfig((6,))
    q = rng.normal(size=(30, 1))
    np.testing.assert_allclose(fit_local_basis(X, Y + k, cfg)(q), fit_local_basis(X, Y, cfg)(q) + k, atol=1e-9)


def test_multiple_responses_share_one_fit():
    X, Y = _sine_sample(4000, 0.1, 6)
    cfg = LocalBasisConfig((8,))
    both = fit_many(X[:, None], [Y, 2 * Y], cfg)
    q = np.linspace(-1, 1, 5)[:, None]
    np.testing.assert_allclose(both(q)[:, 1], 2 * both(q)[:, 0], atol=1e-12)
    np.testing.assert_allclose(both(q)[:, 0], fit_local_basis(X[:, None], Y, cfg)(q), atol=1e-12)


def test_l2_error_rate_in_sample_size():
    cfg = LocalBasisConfig((20,))
    sizes = (1_000, 10_000, 100_000)
    errs = []
    for n in sizes:
        reps = []
        for s in range(5):
            rng = np.random.default_rng(100 * s + 7)
            X = rng.normal(size=n)
            Y = np.sin(X) + 2.0 * rng.normal(size=n)
            est = fit_local_basis(X[:, None], Y, cfg)
            xt = rng.normal(size=20_000)
            reps.append(math.sqrt(np.mean((est(xt[:, None]) - np.sin(xt)) ** 2)))
        errs.append(np.mean(reps))
    slope = -estimate_rate(sizes, errs)
    assert 0.35 <= slope <= 0.65


def test_diagnostics_csv(tmp_path):
    X, Y = _sine_sample(1000, 0.1, 8)
    est = fit_local_basis(X[:, None], Y, LocalBasisConfig((5,)))
    path = tmp_path / "cells.csv"
    est.write_diagnostics(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "group,count,cond,fallback_mean,rms_residual"
    assert len(lines) == 1 + len(est.counts)


def test_config_validation():
    with pytest.raises(ValueError):
        LocalBasisConfig(())
    with pytest.raises(ValueError):
        LocalBasisConfig((0,))
    with pytest.raises(ValueError):
        LocalBasisConfig((4,), tail_splits=-1)
    with pytest.raises(ValueError):
        fit_local_basis(np.zeros((10, 2)), np.zeros(10), LocalBasisConfig((3,)))


# -- Malliavin ----------------------------------------------------------------------


def _next_step_sample(n, h, seed):
    """X_s = W_s at s = 1 and Y = e^{h/2} sin(X_s + dW), so E[Y | X_s] = sin(X_s)."""
    rng = np.random.default_rng(seed)
    Ws = rng.normal(size=n)
    dW = math.sqrt(h) * rng.normal(size=n)
    return Ws, dW, math.exp(h / 2) * np.sin(Ws + dW)


def test_localization_default():
    assert localization_eta(0.05) == pytest.approx(22.3607, abs=1e-4)
    est = malliavin_estimate(np.zeros(10) + np.arange(10), np.ones(10), 1.0, 0.0, 0.0, 1.0, h=0.05)
    assert est.eta[0] == pytest.approx(5 / math.sqrt(0.05))


@pytest.mark.parametrize("d", [1, 2])
def test_malliavin_constant_recovery(d):
    rng = np.random.default_rng(d)
    W = rng.normal(size=(4000, d))
    est = malliavin_estimate(W if d > 1 else W[:, 0], np.full(4000, -1.25), 1.0, np.zeros(d), np.zeros(d),
                             np.eye(d), eta=2.0)
    q = rng.normal(scale=0.5, size=(7, d))
    np.testing.assert_allclose(est(q if d > 1 else q[:, 0]), -1.25, atol=1e-12)


def test_malliavin_sine_within_twice_the_local_basis_tolerance():
    h = 0.05
    Ws, dW, Y = _next_step_sample(100_000, h, 0)
    est = malliavin_estimate(Ws, Y, 1.0, 0.0, 0.0, 1.0, increments=dW, h=h)
    q = np.linspace(-2, 2, 81)
    assert np.max(np.abs(est(q) - np.sin(q))) <= 0.04


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_malliavin_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(1500, 2))
    Y1, Y2 = rng.normal(size=(2, 1500))
    args = (1.0, np.zeros(2), np.zeros(2), np.eye(2), 3.0)
    q = rng.normal(scale=0.5, size=(10, 2))
    lhs = malliavin_estimate(W, a * Y1 + b * Y2, *args)(q)
    rhs = a * malliavin_estimate(W, Y1, *args)(q) + b * malliavin_estimate(W, Y2, *args)(q)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_malliavin_flags_empty_regions():
    W = np.linspace(-1, 1, 200)
    Y = W.copy()
    est = malliavin_estimate(W, Y, 1.0, 0.0, 0.0, 1.0, eta=1.0)
    out = est(np.array([5.0]))
    assert est.n_unreliable == 1
    assert out[0] == pytest.approx(Y.mean())


def test_malliavin_requires_h_with_increments():
    with pytest.raises(ValueError):
        malliavin_estimate(np.zeros(3), np.zeros(3), 1.0, 0.0, 0.0, 1.0, eta=1.0, increments=np.zeros(3))
    with pytest.raises(ValueError):
        malliavin_estimate(np.zeros(3), np.zeros(3), 1.0, 0.0, 0.0, 1.0)


# -- truncation and schedules ---------------------------------------------------------------


def test_truncate_estimate_examples():
    assert truncate_estimate(5.0, 2.0) == 2.0
    assert truncate_estimate(-5.0, 2.0) == -2.0
    assert truncate_estimate(1.5, 2.0) == 1.5
    with pytest.raises(ValueError):
        truncate_estimate(1.0, -1.0)


def test_sample_size_schedule():
    assert sample_size(0.1, 2.0) == 100
    assert sample_size(0.05, 1.5) == math.ceil(0.05 ** -1.5)
