"""Shared fixtures for the unit and acceptance suites."""

from __future__ import annotations

import numpy as np

from mcfd.nonlinearity import NonlinearOperator


def upper_gamma(k: float, beta: float = 0.0) -> NonlinearOperator:
    """F = -beta r + sup_{a in [0, k]} a gamma in one dimension (HJB type)."""
    def func(t, x, r, p, g):
        return -beta * r + k * np.maximum(g[:, 0, 0], 0.0)

    def fr(t, x, r, p, g):
        return np.full(len(x), -beta)

    def fp(t, x, r, p, g):
        return np.zeros_like(p)

    def fg(t, x, r, p, g):
        return k * (g > 0).astype(float)

    return NonlinearOperator(func, name="upper_gamma", dim=1, partial_r=fr, partial_p=fp, partial_gamma=fg,
                             sup_f0=0.0, sup_fr=beta, sup_quad=0.0)


def random_layer(rng: np.random.Generator, n: int, half_width: float = 6.0) -> np.ndarray:
    """Bounded piecewise-smooth node values: random cosines plus one jump."""
    x = np.linspace(-half_width, half_width, n)
    k = rng.uniform(0.2, 3.0, size=3)
    a = rng.normal(size=3)
    jump = rng.normal() * (x > rng.uniform(-3, 3))
    return np.sum(a[:, None] * np.cos(k[:, None] * x[None, :] + rng.uniform(0, 6, size=(3, 1))), axis=0) + jump


SMALL_CONFIGS = {
    "linear_rate": """
[run]
preset = linear_rate
[solver]
steps = 10, 20, 40
[grid]
nodes = 101
""",
    "mcf_sphere": """
[run]
preset = mcf_sphere
seed = 7
seeds = 2
[model]
dim = 2
[solver]
particles = 3000
[regression]
cells = 5, 5
[front]
times = 0.1
rays = 16
""",
    "mcf_two_disks": """
[run]
preset = mcf_two_disks
[solver]
particles = 3000
steps = 10
[regression]
cells = 5, 5
[front]
times = 0.05
points = 32
""",
    "heston2d": """
[run]
preset = heston2d
seeds = 2
[model]
eta = 1.0
[solver]
particles = 3000
steps = 5
[regression]
cells = 6, 4
[reference]
n_mc = 2000
n_steps = 50
""",
    "hjb5d": """
[run]
preset = hjb5d
seeds = 2
[model]
eta = 1.0
kappa = 0.1
[solver]
particles = 3000
steps = 4
[regression]
cells = 2, 1, 1, 1, 1
""",
}
