"""Integration-by-parts weights turning expectations of a function into
expectations of its gradient and Hessian under one Euler step.

With W the Brownian increment over a step h and sigma the (invertible)
diffusion matrix,

    h0 = 1
    h1 = sigma^{-T} W / h
    h2 = sigma^{-T} (W W^T - h I) sigma^{-1} / h^2

so that E[phi(X) h1] = E[grad phi(X)] and E[phi(X) h2] = E[hess phi(X)]
for X = x + mu h + sigma W (Gaussian integration by parts).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: reject diffusion matrices with a larger 2-norm condition number
MAX_COND = 1e12


class SingularDiffusionError(ValueError):
    """Raised when sigma(t, x) is singular or too ill-conditioned to invert."""


@dataclass(frozen=True)
class WeightTriple:
    h0: float
    h1: np.ndarray
    h2: np.ndarray


def inverse_transpose(sigma: np.ndarray, where: str = "") -> np.ndarray:
    """Batched (sigma^T)^{-1} for sigma of shape (d, d) or (N, d, d).

    Raises SingularDiffusionError naming the offending point if any matrix
    has condition number above MAX_COND.
    """
    sigma = np.asarray(sigma, dtype=float)
    batch = sigma if sigma.ndim == 3 else sigma[None]
    if batch.shape[-1] == 1:
        s = batch[:, 0, 0]
        bad = ~(np.abs(s) > 0)
        if np.any(bad):
            raise SingularDiffusionError(_singular_message(bad, where))
        inv = (1.0 / s)[:, None, None]
    else:
        cond = np.linalg.cond(batch)
        bad = ~(cond <= MAX_COND)
        if np.any(bad):
            raise SingularDiffusionError(_singular_message(bad, where))
        inv = np.linalg.inv(np.swapaxes(batch, -1, -2))
    return inv if sigma.ndim == 3 else inv[0]


def _singular_message(bad: np.ndarray, where: str) -> str:
    idx = int(np.flatnonzero(bad)[0])
    loc = f" at {where}" if where else ""
    return f"diffusion matrix is singular or ill-conditioned (cond > {MAX_COND:g}){loc}, sample index {idx}"


def weights(sigma: np.ndarray, dW: np.ndarray, h: float, where: str = "") -> WeightTriple:
    """Weight triple for one increment dW (d-vector) and diffusion sigma (d x d)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    sit = inverse_transpose(sigma, where)
    d = dW.shape[0]
    h1 = sit @ dW / h
    h2 = sit @ (np.outer(dW, dW) - h * np.eye(d)) @ sit.T / h**2
    return WeightTriple(1.0, h1, 0.5 * (h2 + h2.T))


def batch_weights(sigma_inv_t: np.ndarray, dW: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized h1 (N, d) and h2 (N, d, d) from precomputed (sigma^T)^{-1}.

    ``sigma_inv_t`` may be (d, d) or (N, d, d).
    """
    if sigma_inv_t.ndim == 2:
        u = dW @ sigma_inv_t.T
    else:
        u = np.einsum("nij,nj->ni", sigma_inv_t, dW)
    h1 = u / h
    # sigma^{-T} (W W^T - h I) sigma^{-1} = u u^T - h sigma^{-T} sigma^{-1}
    a_inv = sigma_inv_t @ np.swapaxes(sigma_inv_t, -1, -2)
    h2 = (np.einsum("ni,nj->nij", u, u) - h * a_inv) / h**2
    return h1, h2


def scheme2_hessian_weight(sigma: np.ndarray, dW_first: np.ndarray, h: float, where: str = "") -> np.ndarray:
    """Weight multiplying the next-step gradient estimate in the chained
    Hessian estimator: sigma^{-T} dW / h (same as h1)."""
    return weights(sigma, dW_first, h, where).h1
