"""Diffusions, terminal conditions and nonlinearities of the reference problems.

* linear: d = 1, sigma = 1, F = c gamma, g = cos tapered to zero beyond |x| = 10
* mcf: level-set mean curvature flow in R^d for a sphere or two joined disks
* heston: exponential-utility portfolio with Heston variance (wealth, variance)
* hjb5d: wealth, OU rate, CEV price with CIR variance, second CIR variance
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nonlinearity import NonlinearOperator, heston_f, hjb5d_f, linear_f, mcf_f
from .sde import CEVLogRule, CIRMilsteinRule, DiffusionSpec, EulerRule, OUExactRule

TAPER_START = 10.0
TAPER_END = 12.0


def _smooth_step(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1."""
    u = np.clip(u, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


def cos_taper(x):
    """cos(x) on |x| <= 10, smoothly damped to 0 by |x| = 12."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, 0]
    u = (np.abs(x) - TAPER_START) / (TAPER_END - TAPER_START)
    return np.cos(x) * (1.0 - _smooth_step(u))


def constant_spec(dim: int, sigma, mu=0.0, name: str = "") -> DiffusionSpec:
    """Constant drift and diffusion; ``sigma`` is a scalar or a d x d matrix."""
    sig = np.asarray(sigma, dtype=float)
    sig = sig * np.eye(dim) if sig.ndim == 0 else sig
    drift = np.broadcast_to(np.asarray(mu, dtype=float), (dim,)).copy()
    return DiffusionSpec(
        dim=dim,
        drift=lambda t, x: np.broadcast_to(drift, x.shape),
        diffusion=lambda t, x: sig,
        name=name or "constant",
    )


@dataclass(frozen=True)
class Testbed:
    spec: DiffusionSpec
    F: NonlinearOperator
    g: object
    grad_g: object
    x0: np.ndarray
    T: float


def linear_testbed(c: float = 0.25, sigma: float = 1.0, T: float = 1.0) -> Testbed:
    return Testbed(constant_spec(1, sigma, name="linear"), linear_f(c), cos_taper, None, np.zeros(1), T)


# -- mean curvature flow -------------------------------------------------------


def sphere_g(R: float):
    """Signed profile 4R^2 - |x|^2, zero on the sphere of radius 2R."""
    def g(x):
        return 4.0 * R * R - np.sum(np.atleast_2d(x) ** 2, axis=1)

    def grad(x):
        return -2.0 * np.atleast_2d(x)

    return g, grad


def mcf_testbed(dim: int = 3, sigma: float = 1.0, R: float = 0.5, cap: float = 200.0) -> Testbed:
    g, grad = sphere_g(R)
    return Testbed(constant_spec(dim, sigma, name="mcf"), mcf_f(sigma, cap=cap), g, grad, np.zeros(dim), R * R)


# -- portfolio problems -------------------------------------------------------


def utility(eta: float):
    def g(x):
        return -np.exp(-eta * np.atleast_2d(x)[:, 0])

    def grad(x):
        x = np.atleast_2d(x)
        out = np.zeros_like(x)
        out[:, 0] = eta * np.exp(-eta * x[:, 0])
        return out

    return g, grad


def heston_spec(sigma: float, k: float, m: float, c: float) -> DiffusionSpec:
    """Wealth dX = sigma dW0 and variance dY = k(m - Y)dt + c sqrt(Y) dW1."""
    def drift(t, x):
        out = np.zeros_like(x)
        out[:, 1] = k * (m - x[:, 1])
        return out

    def diffusion(t, x):
        out = np.zeros((len(x), 2, 2))
        out[:, 0, 0] = sigma
        out[:, 1, 1] = c * np.sqrt(np.maximum(x[:, 1], 0.0))
        return out

    return DiffusionSpec(2, drift, diffusion, rules=(EulerRule(), CIRMilsteinRule(k, m, c)), name="heston")


def heston_testbed(sigma: float = 1.0, mu: float = 0.15, c: float = 0.2, k: float = 0.1, m: float = 0.3,
                   rho: float = 0.0, eta: float = 1.0, x0: float = 1.0, y0: float | None = None,
                   T: float = 1.0, eps: float = 1e-4, M: float = 40.0, dominate: bool = False) -> Testbed:
    g, grad = utility(eta)
    y0 = m if y0 is None else y0
    return Testbed(heston_spec(sigma, k, m, c), heston_f(eps, M, sigma, mu, rho, c, dominate), g, grad,
                   np.array([x0, y0]), T)


def hjb5d_spec(sigma: float, kappa: float, b: float, zeta: float, mu1: float, sigma1: float, beta1: float,
               k1: float, m1: float, c1: float, k2: float, m2: float, c2: float) -> DiffusionSpec:
    """State (wealth, rate, price 1, variance 1, variance 2) with independent drivers."""
    def drift(t, x):
        return np.column_stack([
            np.zeros(len(x)), kappa * (b - x[:, 1]), mu1 * x[:, 2], k1 * (m1 - x[:, 3]), k2 * (m2 - x[:, 4]),
        ])

    def diffusion(t, x):
        out = np.zeros((len(x), 5, 5))
        y1 = np.maximum(x[:, 3], 0.0)
        out[:, 0, 0] = sigma
        out[:, 1, 1] = zeta
        out[:, 2, 2] = sigma1 * np.sqrt(y1) * np.maximum(x[:, 2], 0.0) ** beta1
        out[:, 3, 3] = c1 * np.sqrt(y1)
        out[:, 4, 4] = c2 * np.sqrt(np.maximum(x[:, 4], 0.0))
        return out

    rules = (EulerRule(), OUExactRule(kappa, b, zeta), CEVLogRule(mu1, sigma1, beta1, var_index=3),
             CIRMilsteinRule(k1, m1, c1), CIRMilsteinRule(k2, m2, c2))
    return DiffusionSpec(5, drift, diffusion, rules=rules, name="hjb5d")


def hjb5d_testbed(kappa: float, sigma: float = 1.0, b: float = 0.07, zeta: float = 0.3, mu1: float = 0.10,
                  sigma1: float = 0.3, beta1: float = 0.5, k1: float = 0.1, m1: float = 1.0, c1: float = 0.1,
                  mu2: float = 0.15, sigma2: float = 1.0, k2: float = 0.1, m2: float = 0.3, c2: float = 0.2,
                  eta: float = 1.0, T: float = 1.0, eps: float = 1e-4, M: float = 40.0,
                  dominate: bool = False) -> Testbed:
    g, grad = utility(eta)
    spec = hjb5d_spec(sigma, kappa, b, zeta, mu1, sigma1, beta1, k1, m1, c1, k2, m2, c2)
    F = hjb5d_f(eps, M, sigma, mu1, mu2, sigma1, sigma2, beta1, dominate)
    return Testbed(spec, F, g, grad, np.array([1.0, b, 1.0, m1, m2]), T)


def sigma_scale(spec: DiffusionSpec, x0) -> np.ndarray:
    """Per-axis diffusion magnitude at x0, used to size grids."""
    s = spec.sigma(0.0, np.atleast_2d(np.asarray(x0, dtype=float)))[0]
    return np.sqrt(np.sum(s * s, axis=1))



# -- domination probes ---------------------------------------------------------
#
# For v = -exp(-eta x) phi(.) the optimal control only sees the ratio
# z1 / gamma11 = -1/eta, so probes use phi = 1: z1 = eta, gamma11 = -eta^2.


def heston_probes(eta: float = 1.0, x: float = 1.0, ys=(0.05, 0.1, 0.2, 0.3, 0.5, 1.0)) -> list[tuple]:
    gam = np.array([[-eta * eta, 0.0], [0.0, 0.0]])
    return [(0.0, np.array([x, float(y)]), 0.0, np.array([eta, 0.0]), gam) for y in ys]


def hjb5d_probes(eta: float = 1.0, x: float = 1.0, r: float = 0.07, ss=(0.5, 1.0, 2.0),
                 y1s=(0.5, 1.0, 1.5), y2s=(0.05, 0.3, 1.0)) -> list[tuple]:
    gam = np.zeros((5, 5))
    gam[0, 0] = -eta * eta
    p = np.zeros(5)
    p[0] = eta
    return [(0.0, np.array([x, r, float(s), float(y1), float(y2)]), 0.0, p, gam)
            for s in ss for y1 in y1s for y2 in y2s]
