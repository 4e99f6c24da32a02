"""Backward recursion v(T) = g, v(t_i) = T_h[v](t_i) with

    T_h[psi](t, x) = E[psi(t+h, X_h^{t,x})] + h F(t, x, D0, D1, D2)

in two realizations:

* grid: nodal values on a tensor grid, expectations by Gauss-Hermite
  quadrature, off-node values by interpolation (d <= 2 in practice);
* particles: a forward Monte Carlo cloud, expectations by regression on the
  states at t_i, optional truncation at the iterated bound K_h.

Scheme 1 estimates the Hessian with the second-order weight; scheme 2
regresses the previously fitted gradient against the first-order weight.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .expectation import QuadratureRule, gauss_hermite_rule, gh_moments
from .nonlinearity import NonlinearOperator, monotonicity_transform
from .regression import LocalBasisConfig, MalliavinEstimator, fit_local_basis
from .sde import DiffusionSpec, ParticleCloud, simulate_cloud
from .weights import batch_weights, inverse_transpose

log = logging.getLogger(__name__)

Array = np.ndarray


@dataclass(frozen=True)
class TruncationConfig:
    C1: float
    C2: float
    g_sup: float | None = None  # None: max |g| over the terminal samples

    def __post_init__(self):
        if self.C1 < 0 or self.C2 < 0:
            raise ValueError("truncation constants must be nonnegative")


@dataclass(frozen=True)
class GridConfig:
    nodes: tuple[int, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    interp_order: int = 3  # 1: multilinear, 3: cubic spline
    quad_order: int = 8

    def __post_init__(self):
        if not (len(self.nodes) == len(self.lower) == len(self.upper)):
            raise ValueError("grid nodes/lower/upper must have one entry per axis")
        if any(n < 2 for n in self.nodes) or any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("grid needs at least 2 nodes per axis and lower < upper")
        if self.interp_order not in (1, 3):
            raise ValueError("interp_order must be 1 or 3")

    @property
    def dim(self) -> int:
        return len(self.nodes)

    def axes(self) -> list[Array]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.nodes)]

    def points(self) -> Array:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def default_grid(x0: Sequence[float], sigma_scale: Sequence[float], T: float, nodes: Sequence[int],
                 width: float = 5.0, interp_order: int = 3) -> GridConfig:
    """Box x0 +- width * sigma_scale * sqrt(T) per axis."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    half = width * np.broadcast_to(np.asarray(sigma_scale, dtype=float), x0.shape) * math.sqrt(T)
    return GridConfig(tuple(int(n) for n in np.broadcast_to(nodes, x0.shape)),
                      tuple(x0 - half), tuple(x0 + half), interp_order=interp_order)


@dataclass(frozen=True)
class SolverConfig:
    h: float
    T: float
    scheme: int = 1
    backend: str = "grid"  # "grid" | "particles"
    truncation: TruncationConfig | None = None
    theta: float = 0.0
    n_particles: int = 10_000
    grid: GridConfig | None = None
    seed: int = 0
    regression: str = "local_basis"  # "local_basis" | "malliavin"
    eta_factor: float = 5.0
    control_variate: bool = True

    def __post_init__(self):
        if self.h <= 0 or self.T <= 0:
            raise ValueError("h and T must be positive")
        n = self.T / self.h
        if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
            raise ValueError(f"T/h = {n:g} must be a positive integer")
        if self.scheme not in (1, 2):
            raise ValueError(f"scheme must be 1 or 2, got {self.scheme!r}")
        if self.backend not in ("grid", "particles"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.regression not in ("local_basis", "malliavin"):
            raise ValueError(f"unknown regression {self.regression!r}")
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.h))

    def digest(self) -> str:
        return hashlib.sha256(repr(asdict(self)).encode()).hexdigest()[:16]


def truncation_bound(psi_sup, C1, C2, h):
    """K_h = psi_sup (1 + C1 h) + C2 h."""
    if min(psi_sup, C1, C2, h) < 0:
        raise ValueError("truncation_bound inputs must be nonnegative")
    return psi_sup * (1.0 + C1 * h) + C2 * h


def iterated_bounds(g_sup: float, C1: float, C2: float, h: float, n: int) -> Array:
    """K[i] for i = 0..n with K[n] = g_sup and K[i] = K_h applied to K[i+1]."""
    K = np.empty(n + 1)
    K[n] = g_sup
    for i in range(n - 1, -1, -1):
        K[i] = truncation_bound(K[i + 1], C1, C2, h)
    return K


def estimate_rate(h_list, err_list) -> float:
    """Least-squares slope of log(err) against log(h)."""
    h = np.asarray(h_list, dtype=float)
    e = np.asarray(err_list, dtype=float)
    if h.shape != e.shape:
        raise ValueError("h_list and err_list differ in length")
    keep = e > 0
    if not np.all(keep):
        warnings.warn(f"excluding {int(np.sum(~keep))} nonpositive errors from the rate fit", stacklevel=2)
    h, e = h[keep], e[keep]
    if len(h) < 3 or np.any(h <= 0):
        raise ValueError("need at least 3 points with positive h and error")
    slope, _ = np.polyfit(np.log(h), np.log(e), 1)
    return float(slope)


def _check_finite(values: Array, t: float, x: Array, what: str = "F") -> None:
    bad = ~np.isfinite(values)
    if np.any(bad):
        j = int(np.flatnonzero(bad.reshape(len(x), -1).any(axis=1))[0])
        raise FloatingPointError(f"non-finite {what} at t={t:g}, x={np.asarray(x)[j].tolist()}")


def _sym(m: Array) -> Array:
    return 0.5 * (m + np.swapaxes(m, 1, 2))


# -- interpolation on the grid ------------------------------------------------


class GridField:
    """Nodal values (optionally several components) with clamped interpolation."""

    def __init__(self, grid: GridConfig, values: Array):
        self.grid = grid
        self.values = values  # (*nodes) or (*nodes, m)
        self.n_clamped = 0
        lo = np.asarray(grid.lower)
        hi = np.asarray(grid.upper)
        self._lo, self._hi = lo, hi
        self._step = (hi - lo) / (np.asarray(grid.nodes) - 1)
        comps = values if values.ndim > grid.dim else values[..., None]
        if grid.interp_order > 1:
            self._coef = [ndimage.spline_filter(comps[..., k], order=grid.interp_order, mode="nearest")
                          for k in range(comps.shape[-1])]
        else:
            self._coef = [comps[..., k] for k in range(comps.shape[-1])]
        self._multi = values.ndim > grid.dim

    def __call__(self, y: Array) -> Array:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out_of = (y < self._lo - 1e-12) | (y > self._hi + 1e-12)
        self.n_clamped += int(np.count_nonzero(out_of.any(axis=1)))
        yc = np.clip(y, self._lo, self._hi)
        coords = ((yc - self._lo) / self._step).T
        res = [ndimage.map_coordinates(c, coords, order=self.grid.interp_order, mode="nearest", prefilter=False)
               for c in self._coef]
        return np.stack(res, axis=1) if self._multi else res[0]


# -- value estimates ----------------------------------------------------------


@dataclass
class _ParticleLayer:
    estimator: Callable[[Array], Array] | None  # stacked (D0, D1, D2-source) responses
    bound: float
    n_outputs: tuple[int, int]  # (d, number of Hessian responses)


@dataclass
class ValueEstimate:
    """Per-time-step value layers of a backward solve.

    grid backend: ``layers[i]`` holds nodal values at t_i, ``gradients[i]``
    the D1 estimate (nodal, shape (*nodes, d)); particle backend: ``layers[i]``
    holds per-particle values Y_i and ``gradients[i]`` the fitted Z_i.  The
    terminal layer is g (and grad g).
    """

    times: Array
    backend: str
    layers: list[Array]
    gradients: list[Array | None]
    points: list[Array] = field(repr=False, default_factory=list)  # evaluation sites per layer
    grid: GridConfig | None = None
    warnings: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    # particle backend: callables evaluating the solution and its gradient anywhere
    _value_fns: list = field(repr=False, default_factory=list)
    _grad_fns: list = field(repr=False, default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def value(self, i: int, x: Array) -> Array:
        """v_hat(t_i, x) at points x (K, d)."""
        return self._value_fns[i](np.atleast_2d(np.asarray(x, dtype=float)))

    def gradient(self, i: int, x: Array) -> Array:
        return self._grad_fns[i](np.atleast_2d(np.asarray(x, dtype=float)))

    def at(self, t: float, x: Array) -> Array:
        """Linear interpolation in time between the two bracketing layers."""
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise ValueError(f"t={t:g} outside [{self.times[0]:g}, {self.times[-1]:g}]")
        j = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.n_steps - 1))
        lam = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        if lam <= 1e-12:
            return self.value(j, x)
        if lam >= 1 - 1e-12:
            return self.value(j + 1, x)
        return (1 - lam) * self.value(j, x) + lam * self.value(j + 1, x)

    def write_csv(self, path: str | Path, steps: Sequence[int] | None = None) -> None:
        steps = range(self.n_steps + 1) if steps is None else steps
        d = self.points[0].shape[1]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_index", "t"] + [f"x{k}" for k in range(d)] + ["value"])
            for i in steps:
                vals = np.ravel(self.layers[i])
                for p, v in zip(self.points[i], vals):
                    w.writerow([i, repr(float(self.times[i]))] + [repr(float(c)) for c in p] + [repr(float(v))])

    def write_metadata(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for k, v in sorted({**self.metadata, **{f"warning.{k}": v for k, v in self.warnings.items()}}.items()):
                fh.write(f"{k} = {v}\n")


# -- one step -----------------------------------------------------------------


def apply_one_step(
    psi: Callable[[Array], Array],
    F: NonlinearOperator,
    spec: DiffusionSpec,
    t: float,
    x: Array,
    h: float,
    rule: QuadratureRule | None = None,
    scheme: int = 1,
    grad_psi: Callable[[Array], Array] | None = None,
    bound: float | None = None,
) -> tuple[Array, Array]:
    """T_h[psi](t, x) at points x (N, d) with quadrature expectations.

    Scheme 2 needs ``grad_psi`` (the gradient field at t + h) and uses
    D2 = sym E[grad_psi(X_h) H1^T].  Returns (values, D1).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    rule = rule or gauss_hermite_rule(d)
    if scheme == 1:
        mom = gh_moments(psi, spec, t, x, h, rule, need=(0, 1, 2))
        d0, d1, d2 = mom[0], mom[1], mom[2]
    else:
        if grad_psi is None:
            raise ValueError("scheme 2 requires the gradient of psi")

        def both(y):
            return np.column_stack([psi(y), np.asarray(grad_psi(y)).reshape(len(y), d)])

        mom = gh_moments(both, spec, t, x, h, rule, need=(0, 1))
        d0 = mom[0][:, 0]
        d1 = mom[1][:, :, 0]
        # mom[1][n, k, 1 + j] = E[Z_j H1_k]
        d2 = _sym(np.swapaxes(mom[1][:, :, 1:], 1, 2))
    fv = F.evaluate(t, x, d0, d1, d2)
    _check_finite(fv, t, x)
    out = d0 + h * fv
    if bound is not None:
        out = np.clip(out, -bound, bound)
    return out, d1


# -- grid backend -------------------------------------------------------------


def backward_solve_grid(
    cfg: SolverConfig,
    F: NonlinearOperator,
    spec: DiffusionSpec,
    g: Callable[[Array], Array],
    grad_g: Callable[[Array], Array] | None = None,
) -> ValueEstimate:
    """n backward sweeps on the grid nodes; layers[0] is v_hat(0, .)."""
    grid = cfg.grid
    if grid is None:
        raise ValueError("grid backend requires cfg.grid")
    if grid.dim != spec.dim:
        raise ValueError("grid dimension does not match the diffusion")
    n, h = cfg.n_steps, cfg.h
    Fs = monotonicity_transform(F, cfg.theta, cfg.T) if cfg.theta > 0 else F
    rule = gauss_hermite_rule(spec.dim, grid.quad_order)
    X = grid.points()
    shape = tuple(grid.nodes)
    times = h * np.arange(n + 1)
    v = np.asarray(g(X), dtype=float)
    z = None
    if cfg.scheme == 2:
        z = _terminal_gradient(g, grad_g, X)
    K = None
    if cfg.truncation is not None:
        gs = cfg.truncation.g_sup if cfg.truncation.g_sup is not None else float(np.max(np.abs(v)))
        K = iterated_bounds(gs, cfg.truncation.C1, cfg.truncation.C2, h, n)
    layers: list = [None] * (n + 1)
    grads: list = [None] * (n + 1)
    layers[n] = v.reshape(shape)
    grads[n] = None if z is None else z.reshape(shape + (spec.dim,))
    clamped = 0
    for i in range(n - 1, -1, -1):
        fv = GridField(grid, layers[i + 1])
        fz = GridField(grid, grads[i + 1]) if cfg.scheme == 2 else None
        out, d1 = apply_one_step(fv, Fs, spec, times[i], X, h, rule, scheme=cfg.scheme, grad_psi=fz,
                                 bound=None if K is None else K[i])
        clamped += fv.n_clamped + (fz.n_clamped if fz is not None else 0)
        layers[i] = out.reshape(shape)
        grads[i] = d1.reshape(shape + (spec.dim,))
    if cfg.theta > 0:
        # undo v_bar = e^{theta (T - t)} v
        for i in range(n + 1):
            s = math.exp(-cfg.theta * (cfg.T - times[i]))
            layers[i] = layers[i] * s
            grads[i] = None if grads[i] is None else grads[i] * s
    if clamped:
        log.warning("grid solve: %d quadrature nodes fell outside the grid and were clamped", clamped)
    fields = [GridField(grid, L) for L in layers]
    est = ValueEstimate(
        times=times, backend="grid", layers=layers, gradients=grads, points=[X] * (n + 1), grid=grid,
        warnings={"clamped_queries": clamped},
        metadata={"backend": "grid", "scheme": cfg.scheme, "h": h, "T": cfg.T, "theta": cfg.theta,
                  "config_hash": cfg.digest()},
    )
    est._value_fns = fields
    est._grad_fns = [GridField(grid, G) if G is not None else _fd_grad(f) for G, f in zip(grads, fields)]
    return est


def _fd_grad(f: Callable[[Array], Array], step: float = 1e-5):
    def grad(x):
        x = np.atleast_2d(x)
        out = np.empty_like(x)
        for k in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[k] = step
            out[:, k] = (f(x + e) - f(x - e)) / (2 * step)
        return out

    return grad


def _terminal_gradient(g, grad_g, X: Array) -> Array:
    if grad_g is not None:
        return np.asarray(grad_g(X), dtype=float).reshape(X.shape)
    return _fd_grad(lambda y: np.asarray(g(y), dtype=float), 1e-6)(X)


# -- particle backend ---------------------------------------------------------


@dataclass
class ParticleSolveResult:
    value: float
    estimate: ValueEstimate
    diagnostics: list[dict]
    cloud: ParticleCloud


def _constant_coefficients(spec: DiffusionSpec, t: float, X: Array):
    mu = spec.mu(t, X)
    sig = spec.sigma(t, X)
    if not (np.allclose(mu, mu[0]) and np.allclose(sig, sig[0])):
        raise ValueError("the Malliavin estimator requires constant drift and diffusion")
    if any(r.kind != "euler" for r in spec.component_rules()):
        raise ValueError("the Malliavin estimator requires Euler dynamics")
    return mu[0], np.broadcast_to(sig, (1,) + sig.shape[1:])[0]


def backward_solve_particles(
    cfg: SolverConfig,
    F: NonlinearOperator,
    spec: DiffusionSpec,
    g: Callable[[Array], Array],
    reg_cfg: LocalBasisConfig | None,
    x0: Sequence[float] | Array,
    grad_g: Callable[[Array], Array] | None = None,
    cloud: ParticleCloud | None = None,
) -> ParticleSolveResult:
    """Regression-based backward pass along a forward cloud.

    At each t_i the responses (Y, Y H1, Y H2) for scheme 1 or
    (Y, Y H1, Z H1^T) for scheme 2 are regressed on X_i with one shared
    partition; Y_i = D0 + h F(t_i, X_i, D0, D1, D2), truncated at the
    iterated bound when truncation is configured.  The root value is the
    mean of Y_0 (all particles start at x0).
    """
    n, h = cfg.n_steps, cfg.h
    d = spec.dim
    if cloud is None:
        cloud = simulate_cloud(spec, x0, n, h, cfg.n_particles, cfg.seed)
    elif cloud.n_steps != n or abs(cloud.h - h) > 1e-12:
        raise ValueError("cloud time grid does not match the solver configuration")
    if cfg.regression == "local_basis" and reg_cfg is None:
        raise ValueError("local-basis regression requires a LocalBasisConfig")
    Fs = monotonicity_transform(F, cfg.theta, cfg.T) if cfg.theta > 0 else F
    times = cloud.times
    Xn = cloud.states[:, n]
    Y = np.asarray(g(Xn), dtype=float)
    _check_finite(Y, times[n], Xn, "g")
    Z = _terminal_gradient(g, grad_g, Xn) if cfg.scheme == 2 else None
    if cfg.truncation is not None:
        gs = cfg.truncation.g_sup if cfg.truncation.g_sup is not None else float(np.max(np.abs(Y)))
        K = iterated_bounds(gs, cfg.truncation.C1, cfg.truncation.C2, h, n)
    else:
        K = np.full(n + 1, np.inf)
    if np.any(np.abs(Y) > K[n] + 1e-12):
        raise ValueError("terminal values exceed the configured g_sup")

    layers: list = [None] * (n + 1)
    grads: list = [None] * (n + 1)
    value_fns: list = [None] * (n + 1)
    grad_fns: list = [None] * (n + 1)
    layers[n], grads[n] = Y, Z
    value_fns[n] = lambda x: np.asarray(g(x), dtype=float)
    grad_fns[n] = (lambda x: _terminal_gradient(g, grad_g, x))
    diags = []
    iu = np.triu_indices(d)
    for i in range(n - 1, -1, -1):
        t = float(times[i])
        Xi = cloud.states[:, i]
        dW = cloud.increments[:, i]
        if cfg.regression == "local_basis":
            sit = inverse_transpose(spec.sigma(t, Xi), where=f"t={t:g}")
            if sit.shape[0] == 1:
                sit = sit[0]
            h1, h2 = batch_weights(sit, dW, h)
            Yc, Zc = Y, Z
            if cfg.control_variate:
                # E[H1 | X_i] = E[H2 | X_i] = 0: centering the responses leaves the
                # targets unchanged and removes the O(1/sqrt(h)) part of their noise
                base = Y[:, None] if Z is None else np.column_stack([Y, Z])
                centre = fit_local_basis(Xi, base, reg_cfg)(Xi)
                Yc = Y - centre[:, 0]
                if Z is not None:
                    Zc = Z - centre[:, 1:]
            if cfg.scheme == 1:
                resp = np.column_stack([Y, Yc[:, None] * h1, Yc[:, None] * h2[:, iu[0], iu[1]]])
            else:
                resp = np.column_stack([Y, Yc[:, None] * h1, (Zc[:, :, None] * h1[:, None, :]).reshape(len(Y), -1)])
            est = fit_local_basis(Xi, resp, reg_cfg)
            info = {"groups": len(est.counts), "fallback_cells": int(np.sum(est.fallback))}
        else:
            est = _malliavin_step(cfg, spec, cloud, i, Y, Z)
            info = {"groups": 0, "fallback_cells": 0}
        fitted = est(Xi)
        d0, d1, d2 = _unpack(fitted, d, cfg.scheme)
        fv = Fs.evaluate(t, Xi, d0, d1, d2)
        _check_finite(fv, t, Xi)
        raw = d0 + h * fv
        Yi = np.clip(raw, -K[i], K[i])
        if np.any(np.abs(Yi) > K[i] * (1 + 1e-12)):
            raise AssertionError(f"stored values exceed the iterated truncation bound at step {i}")
        n_trunc = int(np.count_nonzero(raw != Yi))
        layers[i] = Yi
        grads[i] = d1
        Y, Z = Yi, d1
        value_fns[i] = _layer_value_fn(est, Fs, t, h, d, cfg.scheme, K[i])
        grad_fns[i] = _layer_grad_fn(est, d)
        diags.append({"step": i, "t": t, **info, "truncated": n_trunc, "bound": float(K[i]),
                      "max_abs_value": float(np.max(np.abs(Yi))),
                      "unreliable": int(getattr(est, "n_unreliable", 0))})
    diags.reverse()
    if cfg.theta > 0:
        for i in range(n + 1):
            s = math.exp(-cfg.theta * (cfg.T - times[i]))
            layers[i] = layers[i] * s
            if grads[i] is not None:
                grads[i] = grads[i] * s
            value_fns[i] = _scaled(value_fns[i], s)
            grad_fns[i] = _scaled(grad_fns[i], s)
    root = float(np.mean(layers[0]))
    est = ValueEstimate(
        times=times, backend="particles", layers=layers, gradients=grads,
        points=[cloud.states[:, i] for i in range(n + 1)],
        warnings={"unreliable_queries": sum(r["unreliable"] for r in diags),
                  "truncated_values": sum(r["truncated"] for r in diags)},
        metadata={"backend": "particles", "scheme": cfg.scheme, "h": h, "T": cfg.T, "theta": cfg.theta,
                  "n_particles": cloud.n_particles, "seed": cfg.seed, "config_hash": cfg.digest()},
    )
    est._value_fns = value_fns
    est._grad_fns = grad_fns
    return ParticleSolveResult(root, est, diags, cloud)


def _scaled(fn, s):
    return lambda x: s * fn(x)


def _unpack(fitted: Array, d: int, scheme: int):
    d0 = fitted[:, 0]
    d1 = fitted[:, 1:1 + d]
    rest = fitted[:, 1 + d:]
    if scheme == 1:
        iu = np.triu_indices(d)
        d2 = np.zeros((len(fitted), d, d))
        d2[:, iu[0], iu[1]] = rest
        d2[:, iu[1], iu[0]] = rest
    else:
        d2 = _sym(rest.reshape(len(fitted), d, d))
    return d0, d1, d2


def _layer_value_fn(est, F, t, h, d, scheme, bound):
    def value(x):
        d0, d1, d2 = _unpack(np.atleast_2d(est(x)), d, scheme)
        return np.clip(d0 + h * F.evaluate(t, x, d0, d1, d2), -bound, bound)

    return value


def _layer_grad_fn(est, d):
    def grad(x):
        return np.atleast_2d(est(x))[:, 1:1 + d]

    return grad


class _MalliavinStep:
    """Conditional moments with weights applied at the query point.

    E[Y H1 | X_i = x] = sigma^{-T} (E[Y X_{i+1} | x] - (x + mu h) E[Y | x]) / h,
    and likewise for H2, so every response is a function of X_{i+1} only.
    """

    def __init__(self, base: MalliavinEstimator, mu, sigma, h, d, scheme):
        self.base = base
        self.mu = mu
        self.sit = np.linalg.inv(sigma).T
        self.h = h
        self.d = d
        self.scheme = scheme
        self.n_unreliable = 0

    def __call__(self, x):
        x = np.atleast_2d(x)
        raw = np.atleast_2d(self.base(x))
        self.n_unreliable = self.base.n_unreliable
        d, h = self.d, self.h
        m = x + self.mu * h
        ey = raw[:, 0]
        eyx = raw[:, 1:1 + d]
        d1 = ((eyx - m * ey[:, None]) @ self.sit.T) / h
        rest = raw[:, 1 + d:]
        if self.scheme == 1:
            exx = rest.reshape(len(x), d, d)
            # E[Y (X-m)(X-m)^T]
            c2 = exx - np.einsum("ni,nj->nij", eyx, m) - np.einsum("ni,nj->nij", m, eyx) \
                + np.einsum("ni,nj->nij", m, m) * ey[:, None, None]
            a_inv = self.sit @ self.sit.T
            d2 = (self.sit @ c2 @ self.sit.T - h * a_inv * ey[:, None, None]) / h**2
            iu = np.triu_indices(d)
            d2flat = d2[:, iu[0], iu[1]]
        else:
            ezx = rest[:, : d * d].reshape(len(x), d, d)  # E[Z_j X_k]
            ez = rest[:, d * d:]
            cz = ezx - ez[:, :, None] * m[:, None, :]
            d2flat = (cz @ self.sit.T / h).reshape(len(x), -1)
        return np.column_stack([ey, d1, d2flat])


def _malliavin_step(cfg, spec, cloud, i, Y, Z):
    d = spec.dim
    t = float(cloud.times[i])
    Xi = cloud.states[:, i]
    Xn = cloud.states[:, i + 1]
    mu, sigma = _constant_coefficients(spec, t, Xi)
    if cfg.scheme == 1:
        outer = (Y[:, None, None] * Xn[:, :, None] * Xn[:, None, :]).reshape(len(Y), -1)
        resp = np.column_stack([Y, Y[:, None] * Xn, outer])
    else:
        resp = np.column_stack([Y, Y[:, None] * Xn, (Z[:, :, None] * Xn[:, None, :]).reshape(len(Y), -1), Z])
    if i == 0:
        base = _MeanEstimator(resp)
    else:
        x0 = cloud.states[0, 0]
        eta = cfg.eta_factor / math.sqrt(cfg.h)
        base = MalliavinEstimator(Xi, resp, t - cloud.times[0], x0, mu, sigma, eta,
                                  increments=cloud.increments[:, i], h=cfg.h)
    return _MalliavinStep(base, mu, sigma, cfg.h, d, cfg.scheme)


class _MeanEstimator:
    def __init__(self, resp):
        self.mean = resp.mean(axis=0)
        self.n_unreliable = 0

    def __call__(self, x):
        return np.broadcast_to(self.mean, (len(np.atleast_2d(x)), len(self.mean))).copy()
