"""Zero-level set extraction from a solved value field.

Each seed walks along -sign(v) grad v / |grad v| with a fixed step until v
changes sign, then the bracketing segment is halved until it is shorter than
the tolerance and its midpoint is emitted.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ValueGrad = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class LevelSetResult:
    points: np.ndarray  # (K, d) resolved surface points
    seed_index: np.ndarray  # (K,) which seed produced each point
    unresolved: list[int] = field(default_factory=list)

    def radii(self, center=None) -> np.ndarray:
        c = np.zeros(self.points.shape[1]) if center is None else np.asarray(center, dtype=float)
        return np.linalg.norm(self.points - c, axis=1)


def extract_zero_level(value_eval: ValueGrad, seeds, tol: float = 0.01, max_iter: int = 200,
                       step: float | None = None) -> LevelSetResult:
    """Locate {v = 0} from each seed; all seeds advance together.

    ``value_eval`` maps points (K, d) to (values (K,), gradients (K, d)).
    ``step`` is the descent step (default 10 tol).  Seeds that find no sign
    change within ``max_iter`` evaluations, or meet a vanishing gradient, are
    reported in ``unresolved``.
    """
    x = np.atleast_2d(np.asarray(seeds, dtype=float)).copy()
    n, d = x.shape
    step = 10.0 * tol if step is None else step
    v, g = value_eval(x)
    v = np.asarray(v, dtype=float).copy()
    g = np.asarray(g, dtype=float).reshape(n, d)
    active = np.ones(n, bool)
    failed = np.zeros(n, bool)
    lo = x.copy()
    hi = x.copy()
    v_lo = v.copy()
    found = v == 0
    hi[found] = x[found]
    active &= ~found
    # descent phase: fixed steps until a sign change
    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        norm = np.linalg.norm(g[idx], axis=1)
        flat = ~(norm > 0) | ~np.isfinite(norm)
        failed[idx[flat]] = True
        active[idx[flat]] = False
        idx = idx[~flat]
        if idx.size == 0:
            break
        direction = -np.sign(v_lo[idx])[:, None] * g[idx] / norm[~flat][:, None]
        trial = lo[idx] + step * direction
        vt, gt = value_eval(trial)
        vt = np.asarray(vt, dtype=float)
        gt = np.asarray(gt, dtype=float).reshape(len(idx), d)
        crossed = np.sign(vt) != np.sign(v_lo[idx])
        done = idx[crossed]
        hi[done] = trial[crossed]
        active[done] = False
        moving = idx[~crossed]
        lo[moving] = trial[~crossed]
        v_lo[moving] = vt[~crossed]
        g[moving] = gt[~crossed]
    failed |= active
    # dichotomy on the bracket [lo, hi]
    ok = np.flatnonzero(~failed)
    a, b, va = lo[ok], hi[ok], v_lo[ok]
    width = np.linalg.norm(b - a, axis=1)
    for _ in range(max_iter):
        busy = width >= tol
        if not np.any(busy):
            break
        mid = 0.5 * (a[busy] + b[busy])
        vm, _ = value_eval(mid)
        vm = np.asarray(vm, dtype=float)
        same = np.sign(vm) == np.sign(va[busy])
        ia = np.flatnonzero(busy)
        a[ia[same]] = mid[same]
        va[ia[same]] = vm[same]
        b[ia[~same]] = mid[~same]
        width = np.linalg.norm(b - a, axis=1)
    still = width >= tol
    if np.any(still):
        failed[ok[still]] = True
    keep = ~still
    return LevelSetResult(points=0.5 * (a[keep] + b[keep]), seed_index=ok[keep],
                          unresolved=[int(i) for i in np.flatnonzero(failed)])


def ray_directions(dim: int, count: int) -> np.ndarray:
    """Uniform angles on the circle (d = 2) or a Fibonacci sphere (d = 3)."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])[: max(count, 1)]
    if dim == 2:
        ang = 2.0 * math.pi * np.arange(count) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    if dim == 3:
        i = np.arange(count) + 0.5
        z = 1.0 - 2.0 * i / count
        r = np.sqrt(1.0 - z * z)
        phi = math.pi * (1.0 + math.sqrt(5.0)) * i
        return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    raise ValueError("ray seeding supports d <= 3")


def ray_seeds(center: Sequence[float], radius: float, count: int) -> np.ndarray:
    c = np.asarray(center, dtype=float)
    return c + radius * ray_directions(len(c), count)


def finite_difference_value_grad(value: Callable[[np.ndarray], np.ndarray], step: float = 1e-4) -> ValueGrad:
    """Wrap a value-only field with central-difference gradients."""
    def evaluate(x):
        x = np.atleast_2d(x)
        v = value(x)
        g = np.empty_like(x)
        for k in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[k] = step
            g[:, k] = (value(x + e) - value(x - e)) / (2 * step)
        return v, g

    return evaluate


def two_disks_initial(radius: float = 1.0, centers: float = 1.5, stripe_width: float = 1.0):
    """Lipschitz profile, positive inside two disks joined by a stripe.

    The disks are centred at (+-centers, 0); the stripe is |y| <= width/2 for
    |x| <= centers.  The profile is the max of the three signed component
    profiles.  Accepts (N, 2) arrays or a single point.
    """
    half = 0.5 * stripe_width

    def g(x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        p = np.atleast_2d(x)
        d1 = radius - np.hypot(p[:, 0] - centers, p[:, 1])
        d2 = radius - np.hypot(p[:, 0] + centers, p[:, 1])
        stripe = np.minimum(half - np.abs(p[:, 1]), centers - np.abs(p[:, 0]))
        out = np.maximum(np.maximum(d1, d2), stripe)
        return float(out[0]) if single else out

    return g


def write_surface(path: str | Path, t: float, points: np.ndarray) -> None:
    """CSV with columns t, x0..x{d-1}."""
    d = points.shape[1] if points.size else 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{k}" for k in range(d)])
        for p in points:
            w.writerow([repr(float(t))] + [repr(float(c)) for c in p])
