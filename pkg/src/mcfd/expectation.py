"""Tensor Gauss-Hermite evaluation of one-step expectations

    E[psi(t + h, x + mu h + sigma W_h) w(W_h)],   w in {1, h1, h2},

exact up to quadrature order.  Used as the deterministic backend (d <= 3):
it isolates the time-discretization error from any regression error.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .sde import DiffusionSpec
from .weights import batch_weights, inverse_transpose

DEFAULT_ORDER = 8
MAX_DIM = 3


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes for a standard d-dimensional Gaussian; weights sum to one."""

    nodes: np.ndarray  # (M, d)
    weights: np.ndarray  # (M,)
    order: int

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]


def gauss_hermite_rule(dim: int = 1, order: int = DEFAULT_ORDER) -> QuadratureRule:
    """Tensor rule with ``order`` nodes per axis; exact for Gaussian
    polynomial moments of degree <= 2 order - 1 in each variable."""
    if dim < 1 or dim > MAX_DIM:
        raise ValueError(f"tensor quadrature supports 1 <= dim <= {MAX_DIM}, got {dim}")
    if order < 2:
        raise ValueError("order must be at least 2")
    x, w = hermegauss(order)
    w = w / w.sum()
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    wts = np.array([np.prod(c) for c in itertools.product(w, repeat=dim)])
    return QuadratureRule(nodes, wts, order)


def gh_moments(
    values: Callable[[np.ndarray], np.ndarray],
    spec: DiffusionSpec,
    t: float,
    x: np.ndarray,
    h: float,
    rule: QuadratureRule,
    need: tuple[int, ...] = (0, 1, 2),
):
    """Vectorized one-step moments at many points x (N, d).

    ``values`` maps next-step states (K, d) to (K,) or (K, m).  Returns a
    dict k -> array with shapes (N, ...), (N, d, ...), (N, d, d, ...) for
    k = 0, 1, 2 respectively.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    if rule.dim != d:
        raise ValueError(f"rule dimension {rule.dim} does not match state dimension {d}")
    sig = spec.sigma(t, x)
    sig = np.broadcast_to(sig, (n, d, d))
    sit = inverse_transpose(sig, where=f"t={t:g}")
    dW = np.sqrt(h) * rule.nodes  # (M, d)
    drift = x + spec.mu(t, x) * h  # (N, d)
    xn = drift[:, None, :] + np.einsum("nij,mj->nmi", sig, dW)  # (N, M, d)
    vals = np.asarray(values(xn.reshape(-1, d)), dtype=float)
    vals = vals.reshape((n, len(rule.weights)) + vals.shape[1:])
    w = rule.weights
    out = {}
    if 0 in need:
        out[0] = np.einsum("m,nm...->n...", w, vals)
    if 1 in need or 2 in need:
        u = np.einsum("nij,mj->nmi", sit, dW)  # sigma^{-T} W
        if 1 in need:
            out[1] = np.einsum("m,nmi,nm...->ni...", w, u, vals) / h
        if 2 in need:
            a_inv = sit @ np.swapaxes(sit, -1, -2)
            uu = np.einsum("nmi,nmj->nmij", u, u)
            second = np.einsum("m,nmij,nm...->nij...", w, uu, vals)
            zeroth = out[0] if 0 in need else np.einsum("m,nm...->n...", w, vals)
            extra = (slice(None), slice(None), slice(None)) + (None,) * (vals.ndim - 2)
            out[2] = (second - h * a_inv[extra] * zeroth[:, None, None]) / h**2
    return out


def gh_expectation(
    psi: Callable[[float, np.ndarray], np.ndarray],
    weight: str,
    spec: DiffusionSpec,
    t: float,
    x: np.ndarray,
    h: float,
    rule: QuadratureRule | None = None,
):
    """E[psi(t+h, X_h^{t,x}) H_k] for weight 'none' (k=0), 'grad' (k=1) or
    'hess' (k=2) at a single point x.  ``psi(s, y)`` is vectorized over
    rows of y."""
    k = {"none": 0, "grad": 1, "hess": 2}[weight]
    x = np.atleast_1d(np.asarray(x, dtype=float))
    rule = rule or gauss_hermite_rule(x.shape[0])
    out = gh_moments(lambda y: psi(t + h, y), spec, t, x[None], h, rule, need=(k,))[k][0]
    return float(out) if k == 0 else out
