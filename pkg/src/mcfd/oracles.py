"""Reference solutions for the acceptance problems."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .sde import cir_implicit_milstein_step, gaussian_increments

LINEAR_ORDER = 60


def linear_exact(g: Callable, c: float, t: float, x, T: float, order: int = LINEAR_ORDER):
    """v(t, x) = E[g(x + sqrt(1 + 2c) W_{T-t})] for the one-dimensional linear
    problem with F = c gamma, by Gauss-Hermite quadrature."""
    if c < 0:
        raise ValueError("c must be nonnegative")
    if t > T:
        raise ValueError("t must not exceed T")
    if order < 40:
        raise ValueError("use at least 40 quadrature nodes")
    x = np.asarray(x, dtype=float)
    if t == T:
        return np.asarray(g(x), dtype=float) if x.ndim else float(np.asarray(g(x[None]))[0])
    nodes, wts = hermegauss(order)
    wts = wts / wts.sum()
    scale = math.sqrt((1.0 + 2.0 * c) * (T - t))
    flat = np.atleast_1d(x)
    y = flat[:, None] + scale * nodes[None, :]
    vals = np.asarray(g(y.ravel()), dtype=float).reshape(y.shape)
    out = vals @ wts
    return out if x.ndim else float(out[0])


def sphere_radius(t: float, R: float) -> float:
    """Radius 2 sqrt(R^2 - t) of the shrinking sphere."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t >= R * R:
        raise ValueError(f"the surface is extinct at t={t:g} >= R^2={R * R:g}")
    return 2.0 * math.sqrt(R * R - t)


@dataclass(frozen=True)
class OracleValue:
    value: float
    stderr: float
    guarded: int  # number of integrand evaluations hitting the variance floor


def zariphopoulou_value(mu: float, c: float, k: float, m: float, rho: float, eta: float, x: float, y: float,
                        t: float = 0.0, T: float = 1.0, n_steps: int = 200, n_mc: int = 100_000,
                        seed: int = 0, floor: float = 1e-8) -> OracleValue:
    """Quasi-explicit value of the Heston exponential-utility problem

        v = -exp(-eta x) || exp(-1/2 int_t^T mu^2 / Y~ ds) ||_{L^{1 - rho^2}},

    where Y~ follows the square-root process with drift k(m - Y) - mu c rho.
    The time integral uses the trapezoid rule on the simulation grid.
    """
    if rho * rho >= 1:
        raise ValueError("need rho^2 < 1")
    if min(c, k, m, eta) < 0 or y < 0:
        raise ValueError("parameters must be nonnegative")
    tau = T - t
    if tau < 0:
        raise ValueError("t must not exceed T")
    base = -math.exp(-eta * x)
    if mu == 0 or tau == 0:
        return OracleValue(base, 0.0, 0)
    h = tau / n_steps
    p = 1.0 - rho * rho
    m_shift = m - mu * c * rho / k if k > 0 else m
    clamp = 4.0 * k * m_shift < c * c
    xi = gaussian_increments(seed, n_mc, n_steps, 1, 1.0)[:, :, 0]
    Y = np.full(n_mc, float(y))
    guarded = 0

    def integrand(yv):
        nonlocal guarded
        bad = yv < floor
        guarded += int(np.count_nonzero(bad))
        return mu * mu / np.maximum(yv, floor)

    prev = integrand(Y)
    integral = np.zeros(n_mc)
    for j in range(n_steps):
        Y = cir_implicit_milstein_step(k, m_shift, c, Y, xi[:, j], h, clamp=clamp)
        cur = integrand(Y)
        integral += 0.5 * h * (prev + cur)
        prev = cur
    sample = np.exp(-0.5 * p * integral)
    mean = float(sample.mean())
    se = float(sample.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else 0.0
    value = base * mean ** (1.0 / p)
    # delta method for the 1/p power
    stderr = abs(base) * (mean ** (1.0 / p - 1.0)) * se / p
    return OracleValue(value, stderr, guarded)


def deterministic_variance_integral(mu: float, k: float, m: float, y0: float, tau: float) -> float:
    """int_0^tau mu^2 / Y(s) ds for Y(s) = m + (y0 - m) e^{-ks} (c = 0)."""
    a = y0 - m
    if k == 0 or a == 0:
        return mu * mu * tau / y0
    # int ds / (m + a e^{-ks}) = (1/m)[s + (1/k) ln((m + a e^{-ks}) / (m + a))]
    return mu * mu / m * (tau + math.log((m + a * math.exp(-k * tau)) / (m + a)) / k)
