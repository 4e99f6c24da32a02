"""Remainder nonlinearities F(t, x, r, p, gamma) and their diagnostics.

Sign convention: the solved PDE is

    -L v - F(t, x, v, Dv, D^2 v) = 0,   v(T, .) = g,

with L the generator of the simulated diffusion, so one backward step is
E[psi] + h F(..).  Builtins are all written in this convention.  Geometric and
portfolio equations are often printed as -v_t - L v + F = 0; their F enters
here with the opposite sign.

Every operator is vectorized: ``x`` (N, d), ``r`` (N,), ``p`` (N, d),
``gamma`` (N, d, d) -> (N,).  Calling with a single point returns a float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .sde import DiffusionSpec

Array = np.ndarray
RawFn = Callable[[float, Array, Array, Array, Array], Array]

#: angles sampled on each boundary circle before Newton refinement
_CIRCLE_GRID = 64


@dataclass(frozen=True)
class NonlinearOperator:
    """F with optional analytic partials and declared sup-norm bounds.

    ``sup_f0`` bounds |F(t, x, 0, 0, 0)|, ``sup_fr`` bounds |F_r| and
    ``sup_quad`` bounds F_p^T F_gamma^- F_p.  ``cap`` clamps the output to
    [-cap, cap].
    """

    func: RawFn
    name: str = "F"
    dim: int | None = None
    partial_r: RawFn | None = None
    partial_p: RawFn | None = None
    partial_gamma: RawFn | None = None
    sup_f0: float = math.inf
    sup_fr: float = math.inf
    sup_quad: float = math.inf
    lipschitz: float = math.inf
    cap: float | None = None
    params: dict = field(default_factory=dict)

    def evaluate(self, t: float, x: Array, r: Array, p: Array, gamma: Array) -> Array:
        out = np.asarray(self.func(t, x, r, p, gamma), dtype=float)
        if self.cap is not None:
            out = np.clip(out, -self.cap, self.cap)
        return out

    def __call__(self, t, x, r, p, gamma):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            d = x.shape[0]
            out = self.evaluate(
                t, x[None], np.atleast_1d(np.asarray(r, dtype=float)),
                np.asarray(p, dtype=float).reshape(1, d), np.asarray(gamma, dtype=float).reshape(1, d, d))
            return float(out[0])
        return self.evaluate(t, x, np.asarray(r, dtype=float), np.asarray(p, dtype=float),
                             np.asarray(gamma, dtype=float))

    def truncation_constants(self) -> tuple[float, float]:
        """(C1, C2) for the truncation bound ||psi||(1 + C1 h) + C2 h.

        A capped F gives |E psi + h F| <= ||psi|| + cap h directly, which is
        used when the derivative-based C1 is not finite.
        """
        c1 = 0.25 * self.sup_quad + self.sup_fr
        c2 = self.sup_f0
        if self.cap is not None and not (math.isfinite(c1) and math.isfinite(c2)):
            return 0.0, float(self.cap)
        return c1, c2


def _trace(gamma: Array) -> Array:
    return np.trace(gamma, axis1=-2, axis2=-1)


# -- builtins ----------------------------------------------------------------


def linear_f(c: float, dim: int = 1) -> NonlinearOperator:
    """F = c Tr[gamma]; in one dimension F(gamma) = c gamma."""
    if c < 0:
        raise ValueError("c must be nonnegative")

    def func(t, x, r, p, g):
        return c * _trace(g)

    def fr(t, x, r, p, g):
        return np.zeros(len(x))

    def fp(t, x, r, p, g):
        return np.zeros_like(p)

    def fg(t, x, r, p, g):
        return c * np.broadcast_to(np.eye(g.shape[-1]), g.shape).copy()

    return NonlinearOperator(func, name="linear", dim=dim, partial_r=fr, partial_p=fp, partial_gamma=fg,
                             sup_f0=0.0, sup_fr=0.0, sup_quad=0.0, lipschitz=c * dim, params={"c": c})


def mcf_f(sigma: float, cap: float = 200.0) -> NonlinearOperator:
    """Level-set mean curvature flow remainder for the diffusion sigma I:

        F = (1 - sigma^2/2) Tr[gamma] - z.gamma z / |z|^2,

    with the curvature quotient set to 0 at z = 0 and F clipped to [-cap, cap].
    ``-v_t - (sigma^2/2) Lap v - F = 0`` is then the time-reversed flow
    -v_t - Lap v + z.gamma z/|z|^2 = 0.
    """
    if sigma <= 0 or cap <= 0:
        raise ValueError("sigma and cap must be positive")
    lap_coef = 1.0 - 0.5 * sigma**2

    def quotient(p, g):
        nrm2 = np.einsum("ni,ni->n", p, p)
        num = np.einsum("ni,nij,nj->n", p, g, p)
        safe = np.where(nrm2 > 0, nrm2, 1.0)
        return np.where(nrm2 > 0, num / safe, 0.0), nrm2

    def func(t, x, r, p, g):
        q, _ = quotient(p, g)
        return lap_coef * _trace(g) - q

    def fr(t, x, r, p, g):
        return np.zeros(len(x))

    def fp(t, x, r, p, g):
        q, nrm2 = quotient(p, g)
        safe = np.where(nrm2 > 0, nrm2, 1.0)[:, None]
        gp = np.einsum("nij,nj->ni", g, p)
        out = -(2.0 * gp - 2.0 * q[:, None] * p) / safe
        return np.where(nrm2[:, None] > 0, out, 0.0)

    def fg(t, x, r, p, g):
        d = g.shape[-1]
        nrm2 = np.einsum("ni,ni->n", p, p)
        safe = np.where(nrm2 > 0, nrm2, 1.0)[:, None, None]
        proj = np.einsum("ni,nj->nij", p, p) / safe
        proj = np.where(nrm2[:, None, None] > 0, proj, 0.0)
        return lap_coef * np.eye(d)[None] - proj

    return NonlinearOperator(func, name="mcf", partial_r=fr, partial_p=fp, partial_gamma=fg, sup_f0=0.0,
                             sup_fr=0.0, cap=cap, params={"sigma": sigma, "cap": cap})


# control bounds under ``dominate``: th^T A th <= DOMINATION_RATIO sigma^2, where A
# is the wealth variance per unit control; 2 keeps a - F_gamma positive
# semidefinite including the cross terms
DOMINATION_RATIO = 2.0


def sup_quadratic_interval(a: Array, b: Array, lo, hi) -> tuple[Array, Array]:
    """max over lo <= theta <= hi of a theta^2 / 2 + b theta, elementwise.

    Returns (value, argmax).  Candidates are both endpoints and, where
    a < 0, the clipped stationary point -b/a.  ``lo`` and ``hi`` may be
    scalars or arrays matching ``a``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), a.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), a.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(a < 0, -b / np.where(a < 0, a, -1.0), lo)
    stat = np.clip(stat, lo, hi)
    cands = np.stack([lo, hi, stat])
    vals = 0.5 * a * cands**2 + b * cands
    k = np.argmax(vals, axis=0)[None]
    return np.take_along_axis(vals, k, 0)[0], np.take_along_axis(cands, k, 0)[0]


def heston_f(eps: float, M: float, sigma: float, mu: float, rho: float, c: float,
             dominate: bool = False) -> NonlinearOperator:
    """Exponential-utility portfolio HJB remainder, state (wealth, variance):

        F = -sigma^2/2 gamma11
            + sup_{eps <= th <= M} ( th^2 Y gamma11 / 2 + th (mu z1 + rho c Y gamma12) ),

    Y = max(y, eps).  Equivalently the printed remainder
    ``sigma^2/2 gamma11 - sup(...)`` of the form -v_t - L v + F = 0, negated.

    With ``dominate`` the upper control bound becomes min(M, sqrt(2 sigma^2 / Y)),
    so that dF/dgamma stays below sigma sigma^T for any |rho| <= 1 (the control
    bounds are chosen jointly with sigma).
    """
    if not (0 < eps <= M):
        raise ValueError("need 0 < eps <= M")

    def upper(y):
        if not dominate:
            return M
        return np.maximum(np.minimum(M, np.sqrt(DOMINATION_RATIO * sigma**2 / y)), eps)

    def parts(x, p, g):
        y = np.maximum(x[:, 1], eps)
        a = y * g[:, 0, 0]
        b = mu * p[:, 0] + rho * c * y * g[:, 0, 1]
        val, th = sup_quadratic_interval(a, b, eps, upper(y))
        return y, val, th

    def func(t, x, r, p, g):
        _, val, _ = parts(x, p, g)
        return -0.5 * sigma**2 * g[:, 0, 0] + val

    def fr(t, x, r, p, g):
        return np.zeros(len(x))

    def fp(t, x, r, p, g):
        _, _, th = parts(x, p, g)
        out = np.zeros_like(p)
        out[:, 0] = mu * th
        return out

    def fg(t, x, r, p, g):
        y, _, th = parts(x, p, g)
        out = np.zeros_like(g)
        out[:, 0, 0] = -0.5 * sigma**2 + 0.5 * th**2 * y
        out[:, 0, 1] = out[:, 1, 0] = 0.5 * th * rho * c * y
        return out

    return NonlinearOperator(func, name="heston", dim=2, partial_r=fr, partial_p=fp, partial_gamma=fg,
                             sup_f0=0.0, sup_fr=0.0,
                             params=dict(eps=eps, M=M, sigma=sigma, mu=mu, rho=rho, c=c, dominate=dominate))


def _circle_max(a1, a2, b1, b2, radius):
    """max over |theta| = radius of (a1 th1^2 + a2 th2^2)/2 + b1 th1 + b2 th2.

    Dense angle grid, then safeguarded Newton on the angle.
    """
    phis = np.linspace(0.0, 2 * np.pi, _CIRCLE_GRID, endpoint=False)
    r = radius

    def f(phi):
        cs, sn = np.cos(phi), np.sin(phi)
        return 0.5 * r * r * (a1 * cs * cs + a2 * sn * sn) + r * (b1 * cs + b2 * sn)

    grid_vals = f(phis[:, None])
    k = np.argmax(grid_vals, axis=0)
    phi = phis[k]
    best = grid_vals[k, np.arange(len(k))]
    for _ in range(12):
        cs, sn = np.cos(phi), np.sin(phi)
        d1 = 0.5 * r * r * (a2 - a1) * 2 * sn * cs + r * (-b1 * sn + b2 * cs)
        d2 = 0.5 * r * r * (a2 - a1) * 2 * (cs * cs - sn * sn) - r * (b1 * cs + b2 * sn)
        step = np.where(d2 < 0, -d1 / np.where(d2 < 0, d2, -1.0), 0.0)
        step = np.clip(step, -np.pi / _CIRCLE_GRID, np.pi / _CIRCLE_GRID)
        trial = phi + step
        tv = f(trial)
        better = tv >= best
        phi = np.where(better, trial, phi)
        best = np.where(better, tv, best)
    return best, r * np.cos(phi), r * np.sin(phi)


def sup_quadratic_annulus(a1, a2, b1, b2, lo: float, hi: float):
    """max over lo <= |theta| <= hi (Euclidean) of a separable quadratic
    (a1 th1^2 + a2 th2^2)/2 + b1 th1 + b2 th2.  Returns (value, th1, th2)."""
    a1, a2, b1, b2 = (np.asarray(v, dtype=float) for v in np.broadcast_arrays(a1, a2, b1, b2))
    v_lo, t1_lo, t2_lo = _circle_max(a1, a2, b1, b2, lo)
    v_hi, t1_hi, t2_hi = _circle_max(a1, a2, b1, b2, hi)
    use_hi = v_hi > v_lo
    val = np.where(use_hi, v_hi, v_lo)
    th1 = np.where(use_hi, t1_hi, t1_lo)
    th2 = np.where(use_hi, t2_hi, t2_lo)
    concave = (a1 < 0) & (a2 < 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = np.where(concave, -b1 / np.where(concave, a1, -1.0), 0.0)
        s2 = np.where(concave, -b2 / np.where(concave, a2, -1.0), 0.0)
    rad = np.hypot(s1, s2)
    inside = concave & (rad >= lo) & (rad <= hi)
    s_val = 0.5 * (a1 * s1**2 + a2 * s2**2) + b1 * s1 + b2 * s2
    take = inside & (s_val >= val)
    return np.where(take, s_val, val), np.where(take, s1, th1), np.where(take, s2, th2)


def hjb5d_f(eps: float, M: float, sigma: float, mu1: float, mu2: float, sigma1: float, sigma2: float,
            beta1: float, dominate: bool = False) -> NonlinearOperator:
    """Two-asset portfolio HJB remainder on the state
    (wealth, rate, price of asset 1, variance 1, variance 2):

        F = -sigma^2/2 g11 + x1 x2 z1
            + sup_{eps <= |th| <= M} { th.(mu - x2) z1 + th1 sigma1^2 Y1 S^(2 beta1 - 1) g13
                                       + (th1^2 sigma1^2 Y1 S^(2 beta1 - 2) + th2^2 sigma2^2 Y2) g11 / 2 }

    with S = max(x3, eps), Y1 = max(x4, eps), Y2 = max(x5, eps).  With
    ``dominate`` the controls are further restricted to
    th1^2 A1 + th2^2 A2 <= 2 sigma^2 (A_k the g11 coefficients above), solved as
    an annulus sup in the scaled controls sqrt(A_k) th_k; a rare optimizer with
    |th| > M is scaled back onto |th| = M.
    """
    if not (0 < eps <= M):
        raise ValueError("need 0 < eps <= M")

    def parts(x, p, g):
        s1 = np.maximum(x[:, 2], eps)
        y1 = np.maximum(x[:, 3], eps)
        y2 = np.maximum(x[:, 4], eps)
        a1 = sigma1**2 * y1 * s1 ** (2 * beta1 - 2) * g[:, 0, 0]
        a2 = sigma2**2 * y2 * g[:, 0, 0]
        cross = sigma1**2 * y1 * s1 ** (2 * beta1 - 1)
        b1 = (mu1 - x[:, 1]) * p[:, 0] + cross * g[:, 0, 2]
        b2 = (mu2 - x[:, 1]) * p[:, 0]
        if dominate:
            r1 = np.sqrt(sigma1**2 * y1 * s1 ** (2 * beta1 - 2))
            r2 = np.sqrt(sigma2**2 * y2)
            lo = eps * np.minimum(r1, r2)
            _, f1, f2 = sup_quadratic_annulus(a1 / r1**2, a2 / r2**2, b1 / r1, b2 / r2, lo,
                                              math.sqrt(DOMINATION_RATIO) * sigma)
            th1, th2 = f1 / r1, f2 / r2
            shrink = np.minimum(1.0, M / np.maximum(np.hypot(th1, th2), 1e-300))
            th1, th2 = th1 * shrink, th2 * shrink
            val = 0.5 * (a1 * th1**2 + a2 * th2**2) + b1 * th1 + b2 * th2
        else:
            val, th1, th2 = sup_quadratic_annulus(a1, a2, b1, b2, eps, M)
        return val, th1, th2, s1, y1, y2, cross

    def func(t, x, r, p, g):
        val = parts(x, p, g)[0]
        return -0.5 * sigma**2 * g[:, 0, 0] + x[:, 0] * x[:, 1] * p[:, 0] + val

    def fr(t, x, r, p, g):
        return np.zeros(len(x))

    def fp(t, x, r, p, g):
        _, th1, th2, *_ = parts(x, p, g)
        out = np.zeros_like(p)
        out[:, 0] = x[:, 0] * x[:, 1] + th1 * (mu1 - x[:, 1]) + th2 * (mu2 - x[:, 1])
        return out

    def fg(t, x, r, p, g):
        _, th1, th2, s1, y1, y2, cross = parts(x, p, g)
        out = np.zeros_like(g)
        out[:, 0, 0] = -0.5 * sigma**2 + 0.5 * (th1**2 * sigma1**2 * y1 * s1 ** (2 * beta1 - 2)
                                                 + th2**2 * sigma2**2 * y2)
        out[:, 0, 2] = out[:, 2, 0] = 0.5 * th1 * cross
        return out

    return NonlinearOperator(func, name="hjb5d", dim=5, partial_r=fr, partial_p=fp, partial_gamma=fg,
                             sup_fr=0.0,
                             params=dict(eps=eps, M=M, sigma=sigma, mu1=mu1, mu2=mu2, sigma1=sigma1,
                                         sigma2=sigma2, beta1=beta1, dominate=dominate))


def monotonicity_transform(F: NonlinearOperator, theta: float, T: float) -> NonlinearOperator:
    """Nonlinearity solved by u = e^{theta (T - t)} v:

        Fbar(t, x, r, p, g) = e^{theta(T-t)} F(t, x, e^{-theta(T-t)} (r, p, g)) + theta r.
    """
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    if theta == 0:
        return F

    def scale(t):
        return math.exp(-theta * (T - t))

    def func(t, x, r, p, g):
        s = scale(t)
        return F.evaluate(t, x, s * r, s * p, s * g) / s + theta * r

    def fr(t, x, r, p, g):
        s = scale(t)
        return F.partial_r(t, x, s * r, s * p, s * g) + theta

    def fp(t, x, r, p, g):
        s = scale(t)
        return F.partial_p(t, x, s * r, s * p, s * g)

    def fg(t, x, r, p, g):
        s = scale(t)
        return F.partial_gamma(t, x, s * r, s * p, s * g)

    have = F.partial_r is not None and F.partial_p is not None and F.partial_gamma is not None
    return replace(
        F, func=func, name=f"{F.name}+theta", cap=None,
        partial_r=fr if have else None, partial_p=fp if have else None, partial_gamma=fg if have else None,
        sup_f0=F.sup_f0 * math.exp(theta * T), sup_fr=F.sup_fr + theta, lipschitz=F.lipschitz + theta,
        params={**F.params, "theta": theta, "T": T},
    )


# -- diagnostics -------------------------------------------------------------


def _fd_partials(F: NonlinearOperator, t, x, r, p, g, rel=1e-5):
    """Central-difference (F_r, F_p, F_gamma) at one point; F_gamma is the
    symmetric matrix with F(g + dg) ~ F(g) + sum_ij F_gamma[i,j] dg[i,j]."""
    d = x.shape[0]
    scale = max(1.0, abs(r), float(np.max(np.abs(p), initial=0.0)), float(np.max(np.abs(g), initial=0.0)))
    e = rel * scale

    def f(rr, pp, gg):
        return F(t, x, rr, pp, gg)

    fr = (f(r + e, p, g) - f(r - e, p, g)) / (2 * e)
    fp = np.empty(d)
    for i in range(d):
        dp = np.zeros(d)
        dp[i] = e
        fp[i] = (f(r, p + dp, g) - f(r, p - dp, g)) / (2 * e)
    fg = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            dg = np.zeros((d, d))
            dg[i, j] = dg[j, i] = e
            deriv = (f(r, p, g + dg) - f(r, p, g - dg)) / (2 * e)
            fg[i, j] = fg[j, i] = deriv if i == j else 0.5 * deriv
    return fr, fp, fg


@dataclass
class ProbeResult:
    t: float
    x: np.ndarray
    f_gamma: np.ndarray
    domination_margin: float  # lambda_max(F_gamma - a); <= 0 means dominated
    ellipticity_margin: float  # lambda_min(F_gamma); >= 0 means elliptic
    trace_ratio: float  # Tr[a^{-1} F_gamma]
    m_f: float  # min_w F_p.w + w^T F_gamma w over the w-grid


@dataclass
class DominationReport:
    probes: list[ProbeResult]
    tol: float

    @property
    def dominated(self) -> bool:
        """F_gamma <= a at every probe (matrix order)."""
        return all(pr.domination_margin <= self.tol for pr in self.probes)

    @property
    def elliptic(self) -> bool:
        return all(pr.ellipticity_margin >= -self.tol for pr in self.probes)

    @property
    def passed(self) -> bool:
        return self.dominated

    @property
    def worst_violation(self) -> float:
        return max(max(pr.domination_margin for pr in self.probes), 0.0)

    @property
    def m_f_minus(self) -> float:
        return max(max(-pr.m_f for pr in self.probes), 0.0)

    def summary(self) -> dict:
        return {
            "dominated": self.dominated,
            "elliptic": self.elliptic,
            "worst_domination_violation": self.worst_violation,
            "worst_ellipticity_violation": max(max(-pr.ellipticity_margin for pr in self.probes), 0.0),
            "max_trace_ratio": max(pr.trace_ratio for pr in self.probes),
            "m_f_minus": self.m_f_minus,
            "n_probes": len(self.probes),
        }


def _w_grid(d: int, half_width: float, n: int) -> np.ndarray:
    if d <= 3:
        axis = np.linspace(-half_width, half_width, n)
        return np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    rng = np.random.default_rng(0)
    return rng.uniform(-half_width, half_width, size=(n**3, d))


def check_domination(
    F: NonlinearOperator,
    spec: DiffusionSpec,
    probes: Sequence[tuple],
    tol: float = 1e-8,
    w_half_width: float = 10.0,
    w_points: int = 41,
) -> DominationReport:
    """Probe ellipticity/domination of F against a = sigma sigma^T.

    Each probe is (t, x, r, p, gamma).  F_gamma is estimated by central
    differences with a step 1e-5 relative to the probe magnitude.
    """
    if not probes:
        raise ValueError("need at least one probe")
    results = []
    for t, x, r, p, g in probes:
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        g = np.asarray(g, dtype=float)
        _, fp, fg = _fd_partials(F, t, x, float(r), p, g)
        sig = spec.sigma(t, x[None])[0]
        a = sig @ sig.T
        dom = float(np.max(np.linalg.eigvalsh(fg - a)))
        ell = float(np.min(np.linalg.eigvalsh(fg)))
        tr = float(np.trace(np.linalg.solve(a, fg)))
        w = _w_grid(len(x), w_half_width, w_points)
        m_f = float(np.min(w @ fp + np.einsum("ni,ij,nj->n", w, fg, w)))
        results.append(ProbeResult(t, x, fg, dom, ell, tr, m_f))
    return DominationReport(results, tol)
