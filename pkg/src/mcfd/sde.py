"""Forward dynamics: diffusion specifications, one-step discretizations and
particle clouds.

Coefficient functions are vectorized over particles: ``drift(t, x)`` takes an
``(N, d)`` array and returns ``(N, d)``; ``diffusion(t, x)`` returns
``(N, d, d)``.  Each state component is advanced by its own rule (generic
Euler, exact Ornstein-Uhlenbeck, implicit Milstein for a square-root process,
or a log-Euler step for a CEV price), all driven by the same Brownian
increments so the backward pass can reuse them in its weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

Array = np.ndarray
CoefFn = Callable[[float, Array], Array]

#: particles per RNG stream; fixed so draws do not depend on how work is split
RNG_BLOCK = 4096

#: below this value of kappa*h the OU variance uses its Taylor expansion
OU_SMALL_KH = 1e-8


@dataclass(frozen=True)
class EulerRule:
    """x + mu h + sigma dW using the full diffusion row."""

    kind: str = field(default="euler", init=False)


@dataclass(frozen=True)
class OUExactRule:
    kappa: float
    b: float
    zeta: float
    kind: str = field(default="ou_exact", init=False)


@dataclass(frozen=True)
class CIRMilsteinRule:
    k: float
    m: float
    c: float
    clamp: bool = False
    kind: str = field(default="cir_implicit_milstein", init=False)

    def __post_init__(self):
        if self.k < 0 or self.m < 0 or self.c < 0:
            raise ValueError("CIR parameters k, m, c must be nonnegative")
        if 4.0 * self.k * self.m < self.c**2 and not self.clamp:
            raise ValueError(
                f"implicit Milstein step is not positivity preserving: 4km={4 * self.k * self.m:g} "
                f"< c^2={self.c**2:g}; pass clamp=True to clamp at zero instead"
            )


@dataclass(frozen=True)
class CEVLogRule:
    """Log-Euler step for dS = mu S dt + sigma sqrt(Y) S^beta dW.

    ``var_index`` is the state component holding the variance Y.
    """

    mu: float
    sigma: float
    beta: float
    var_index: int
    kind: str = field(default="cev_log", init=False)


StepRule = Union[EulerRule, OUExactRule, CIRMilsteinRule, CEVLogRule]


@dataclass(frozen=True)
class DiffusionSpec:
    """Drift/diffusion pair of the linear operator plus per-component steppers.

    ``rules`` may be empty, meaning Euler for every component.
    ``coef_bound`` (optional) is checked against |mu| and |sigma| on every
    simulated step.
    """

    dim: int
    drift: CoefFn
    diffusion: CoefFn
    rules: tuple[StepRule, ...] = ()
    coef_bound: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if self.rules and len(self.rules) != self.dim:
            raise ValueError(f"expected {self.dim} step rules, got {len(self.rules)}")

    def component_rules(self) -> tuple[StepRule, ...]:
        return self.rules or tuple(EulerRule() for _ in range(self.dim))

    def mu(self, t: float, x: Array) -> Array:
        return np.asarray(self.drift(t, np.atleast_2d(x)), dtype=float)

    def sigma(self, t: float, x: Array) -> Array:
        s = np.asarray(self.diffusion(t, np.atleast_2d(x)), dtype=float)
        if s.ndim == 2:
            s = s[None]
        return s

    def step(self, t: float, x: Array, dW: Array, h: float) -> Array:
        """Advance a batch of states (N, d) by one step of length h."""
        if h <= 0:
            raise ValueError("step h must be positive")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        dW = np.atleast_2d(np.asarray(dW, dtype=float))
        out = np.empty_like(x)
        rules = self.component_rules()
        euler_idx = [i for i, r in enumerate(rules) if r.kind == "euler"]
        if euler_idx:
            full = euler_step(self, t, x, dW, h)
            out[:, euler_idx] = full[:, euler_idx]
        sqrt_h = math.sqrt(h)
        for i, rule in enumerate(rules):
            if rule.kind == "euler":
                continue
            if rule.kind == "ou_exact":
                out[:, i] = ou_exact_step(rule.kappa, rule.b, rule.zeta, x[:, i], dW[:, i] / sqrt_h, h)
            elif rule.kind == "cir_implicit_milstein":
                out[:, i] = cir_implicit_milstein_step(
                    rule.k, rule.m, rule.c, x[:, i], dW[:, i] / sqrt_h, h, clamp=rule.clamp
                )
            elif rule.kind == "cev_log":
                out[:, i] = cev_log_step(
                    rule.mu, rule.sigma, rule.beta, x[:, i], x[:, rule.var_index], dW[:, i], h
                )
            else:  # pragma: no cover - guarded by the StepRule union
                raise ValueError(f"unknown step rule {rule.kind!r}")
        return out


def euler_step(spec: DiffusionSpec, t: float, x: Array, dW: Array, h: float) -> Array:
    """One Euler step x + mu(t,x) h + sigma(t,x) dW.

    Accepts a single d-vector or a batch (N, d); returns the same shape.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    dWb = np.atleast_2d(np.asarray(dW, dtype=float))
    out = xb + spec.mu(t, xb) * h + np.einsum("nij,nj->ni", spec.sigma(t, xb), dWb)
    return out[0] if single else out


def cir_implicit_milstein_step(k, m, c, y, xi, h, clamp=False):
    """Drift-implicit Milstein step for dY = k(m - Y)dt + c sqrt(Y) dW.

    The numerator equals (sqrt(y) + c sqrt(h) xi / 2)^2 + (km - c^2/4) h, so
    the result is nonnegative for every xi whenever 4km >= c^2.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    y = np.asarray(y, dtype=float)
    if np.any(y < -1e-12):
        raise ValueError("CIR state must be nonnegative")
    xi = np.asarray(xi, dtype=float)
    root = np.sqrt(np.maximum(y, 0.0))
    # completed square: exact nonnegativity survives rounding when 4km >= c^2
    num = (root + 0.5 * c * math.sqrt(h) * xi) ** 2 + (k * m - 0.25 * c * c) * h
    out = num / (1.0 + k * h)
    if clamp:
        out = np.maximum(out, 0.0)
    return out


def ou_exact_step(kappa, b, zeta, r, xi, h):
    """Exact transition of dr = kappa(b - r)dt + zeta dW over a step h."""
    if h <= 0:
        raise ValueError("step h must be positive")
    decay = math.exp(-kappa * h)
    kh = kappa * h
    if abs(kh) < OU_SMALL_KH:
        # (1 - e^{-2kh}) / (2k) = h (1 - kh + 2(kh)^2/3 - ...)
        var = h * (1.0 - kh + 2.0 * kh * kh / 3.0)
    else:
        var = -math.expm1(-2.0 * kh) / (2.0 * kappa)
    return b + decay * (np.asarray(r, dtype=float) - b) + zeta * math.sqrt(var) * np.asarray(xi, dtype=float)


def cev_log_step(mu1, sigma1, beta1, s, y, dW, h):
    """Log-Euler step for a CEV price with stochastic variance y; stays positive."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("CEV price must be positive")
    y = np.maximum(np.asarray(y, dtype=float), 0.0)
    scale = s ** (beta1 - 1.0)
    log_s = np.log(s) + (mu1 - 0.5 * sigma1**2 * scale**2 * y) * h + sigma1 * scale * np.sqrt(y) * dW
    return np.exp(log_s)


@dataclass(frozen=True)
class ParticleCloud:
    """Forward-simulated states with the increments that produced them.

    ``states`` has shape (N, n+1, d) and ``increments`` (N, n, d).
    """

    times: Array
    states: Array
    increments: Array
    seed: int | None

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])


def gaussian_increments(seed: int, n_particles: int, n_steps: int, dim: int, h: float) -> Array:
    """Brownian increments (N, n, d) with covariance h I.

    Each block of RNG_BLOCK particles has its own Philox stream keyed by
    (seed, block), so particle i always sees the same draws.
    """
    out = np.empty((n_particles, n_steps, dim))
    root = np.random.SeedSequence(seed)
    for blk, start in enumerate(range(0, n_particles, RNG_BLOCK)):
        stop = min(start + RNG_BLOCK, n_particles)
        child = np.random.SeedSequence(root.entropy, spawn_key=(blk,))
        rng = np.random.Generator(np.random.Philox(child))
        out[start:stop] = rng.standard_normal((stop - start, n_steps, dim))
    out *= math.sqrt(h)
    return out


def _check_bounds(spec: DiffusionSpec, t: float, x: Array) -> None:
    if spec.coef_bound is None:
        return
    mu_max = float(np.max(np.abs(spec.mu(t, x))))
    sig_max = float(np.max(np.abs(spec.sigma(t, x))))
    if max(mu_max, sig_max) > spec.coef_bound:
        raise ValueError(
            f"coefficients exceed configured bound {spec.coef_bound:g} at t={t:g} "
            f"(|mu|max={mu_max:g}, |sigma|max={sig_max:g})"
        )


def propagate(spec: DiffusionSpec, x0: Array, increments: Array, h: float, t0: float = 0.0) -> Array:
    """Replay stored increments (N, n, d) from initial states; returns (N, n+1, d)."""
    n_particles, n_steps, dim = increments.shape
    x0 = np.asarray(x0, dtype=float)
    states = np.empty((n_particles, n_steps + 1, dim))
    states[:, 0] = np.broadcast_to(x0, (n_particles, dim))
    for j in range(n_steps):
        t = t0 + j * h
        _check_bounds(spec, t, states[:, j])
        states[:, j + 1] = spec.step(t, states[:, j], increments[:, j], h)
    return states


def simulate_cloud(
    spec: DiffusionSpec,
    x0: Sequence[float] | Array,
    n_steps: int,
    h: float,
    n_particles: int,
    seed: int,
    t0: float = 0.0,
) -> ParticleCloud:
    """Simulate N particles over n_steps from x0 (a d-vector or an (N, d) array)."""
    if n_particles < 1 or n_steps < 1:
        raise ValueError("need n_particles >= 1 and n_steps >= 1")
    if h <= 0:
        raise ValueError("step h must be positive")
    dW = gaussian_increments(seed, n_particles, n_steps, spec.dim, h)
    states = propagate(spec, x0, dW, h, t0)
    times = t0 + h * np.arange(n_steps + 1)
    return ParticleCloud(times=times, states=states, increments=dW, seed=seed)


# -- export / import ---------------------------------------------------------
#
# CSV layout: header ``particle,step,t,x0..x{d-1},dw0..dw{d-1}``; one row per
# (particle, step) with step = 0..n.  The increment columns on a row hold
# W_{t_{step+1}} - W_{t_step} and are empty on the final step.  ``.npz``
# archives hold the arrays ``times``, ``states``, ``increments``, ``seed``.


def save_cloud(cloud: ParticleCloud, path: str | Path) -> None:
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, times=cloud.times, states=cloud.states, increments=cloud.increments,
                 seed=np.int64(-1 if cloud.seed is None else cloud.seed))
        return
    d = cloud.dim
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle", "step", "t"] + [f"x{k}" for k in range(d)] + [f"dw{k}" for k in range(d)])
        for p in range(cloud.n_particles):
            for j in range(cloud.n_steps + 1):
                inc = [repr(float(v)) for v in cloud.increments[p, j]] if j < cloud.n_steps else [""] * d
                w.writerow([p, j, repr(float(cloud.times[j]))]
                           + [repr(float(v)) for v in cloud.states[p, j]] + inc)


def load_cloud(path: str | Path) -> ParticleCloud:
    path = Path(path)
    if path.suffix == ".npz":
        z = np.load(path)
        seed = int(z["seed"])
        return ParticleCloud(z["times"], z["states"], z["increments"], None if seed < 0 else seed)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for c in header if c.startswith("x"))
    n_particles = 1 + max(int(r[0]) for r in body)
    n_steps = max(int(r[1]) for r in body)
    states = np.empty((n_particles, n_steps + 1, d))
    incs = np.empty((n_particles, n_steps, d))
    times = np.empty(n_steps + 1)
    for r in body:
        p, j = int(r[0]), int(r[1])
        times[j] = float(r[2])
        states[p, j] = [float(v) for v in r[3:3 + d]]
        if j < n_steps:
            incs[p, j] = [float(v) for v in r[3 + d:3 + 2 * d]]
    return ParticleCloud(times, states, incs, None)
