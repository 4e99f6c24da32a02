"""Empirical conditional expectations x -> E[Y | X = x] from paired samples.

Two estimators:

* ``fit_local_basis``: piecewise-affine least squares on a product partition
  whose cuts are per-axis empirical quantiles (equal-count cells).  Cells with
  too few samples are merged into an adjacent cell.
* ``MalliavinEstimator``: ratio of weighted sums with exponential
  localization, for clouds driven by constant-coefficient Gaussian dynamics.

Both are linear in Y and accept several responses at once (Y of shape (N, m)),
so the value and all weighted responses of one backward step share one fit.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

#: cells whose affine block has a larger condition number fall back to the mean
MAX_CELL_COND = 1e10


@dataclass(frozen=True)
class LocalBasisConfig:
    cells_per_axis: tuple[int, ...]
    min_per_cell: int | None = None  # default d + 2
    tail_splits: int = 0  # extra median splits of each outermost interval per axis

    def __post_init__(self):
        if not self.cells_per_axis or any(int(c) < 1 for c in self.cells_per_axis):
            raise ValueError("cells_per_axis must be positive integers")
        if self.tail_splits < 0:
            raise ValueError("tail_splits must be nonnegative")


@dataclass
class LocalBasisEstimator:
    cuts: list[np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    cell_group: np.ndarray  # flat cell id -> group id
    center: np.ndarray  # (G, d)
    scale: np.ndarray  # (G, d); 0 marks a dropped linear term
    coef: np.ndarray  # (G, d+1, m)
    counts: np.ndarray  # (G,)
    cond: np.ndarray  # (G,)
    fallback: np.ndarray  # (G,) bool: linear terms dropped entirely
    residual: np.ndarray  # (G,) root mean squared residual over responses
    n_outputs: int | None  # None for a 1-D response
    train_group: np.ndarray = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return len(self.cuts)

    def _cells(self, x: np.ndarray) -> np.ndarray:
        idx = [np.searchsorted(c, x[:, k], side="right") for k, c in enumerate(self.cuts)]
        shape = tuple(len(c) + 1 for c in self.cuts)
        return np.ravel_multi_index(idx, shape)

    def _basis(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        s = self.scale[g]
        z = np.where(s > 0, (x - self.center[g]) / np.where(s > 0, s, 1.0), 0.0)
        return np.concatenate([np.ones((len(x), 1)), z], axis=1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.clip(np.atleast_2d(x), self.lower, self.upper)
        g = self.cell_group[self._cells(x)]
        out = np.einsum("nk,nkm->nm", self._basis(x, g), self.coef[g])
        if self.n_outputs is None:
            out = out[:, 0]
        return out[0] if single else out

    def diagnostics_rows(self) -> list[dict]:
        return [
            {"group": i, "count": int(self.counts[i]), "cond": float(self.cond[i]),
             "fallback_mean": bool(self.fallback[i]), "rms_residual": float(self.residual[i])}
            for i in range(len(self.counts))
        ]

    def write_diagnostics(self, path: str | Path) -> None:
        rows = self.diagnostics_rows()
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def _quantile_cuts(col: np.ndarray, n_cells: int, tail_splits: int = 0) -> np.ndarray:
    """Equal-count cuts; each tail split halves the outermost probability
    mass on both sides, which narrows the wide tail cells."""
    if n_cells <= 1:
        return np.empty(0)
    levels = np.arange(1, n_cells) / n_cells
    edge = 1.0 / n_cells
    extra = [edge * 0.5 ** (j + 1) for j in range(tail_splits)]
    levels = np.concatenate([extra, levels, [1.0 - e for e in extra]])
    return np.unique(np.quantile(col, np.sort(levels)))


def _merge_cells(counts: np.ndarray, shape: tuple[int, ...], min_count: int) -> np.ndarray:
    """Merge undersized cells into adjacent groups; returns cell -> root cell."""
    ncell = counts.size
    parent = np.arange(ncell)
    members = {c: [c] for c in range(ncell)}
    size = counts.astype(np.int64).copy()
    heap = [(int(size[c]), c) for c in range(ncell) if size[c] < min_count]
    heapq.heapify(heap)
    n_roots = ncell
    while heap and n_roots > 1:
        cnt, r = heapq.heappop(heap)
        if parent[r] != r or size[r] != cnt or cnt >= min_count:
            continue
        neighbours = set()
        for c in members[r]:
            idx = np.unravel_index(c, shape)
            for ax in range(len(shape)):
                for step in (-1, 1):
                    j = idx[ax] + step
                    if 0 <= j < shape[ax]:
                        nb = list(idx)
                        nb[ax] = j
                        root = int(parent[np.ravel_multi_index(nb, shape)])
                        if root != r:
                            neighbours.add(root)
        if not neighbours:
            break
        target = max(neighbours, key=lambda q: (size[q], -q))
        for c in members.pop(r):
            parent[c] = target
            members[target].append(c)
        size[target] += size[r]
        size[r] = 0
        n_roots -= 1
        if size[target] < min_count:
            heapq.heappush(heap, (int(size[target]), target))
    return parent


def fit_local_basis(X: np.ndarray, Y: np.ndarray, cfg: LocalBasisConfig) -> LocalBasisEstimator:
    """Per-cell ordinary least squares of Y on (1, x_1, ..., x_d)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 1 and X.shape[1] != len(cfg.cells_per_axis):
        X = X.T
    Y = np.asarray(Y, dtype=float)
    n_outputs = None if Y.ndim == 1 else Y.shape[1]
    Y2 = Y.reshape(len(Y), -1)
    n, d = X.shape
    if len(cfg.cells_per_axis) != d:
        raise ValueError(f"cells_per_axis has {len(cfg.cells_per_axis)} entries for {d}-dimensional samples")
    if len(Y2) != n:
        raise ValueError("X and Y have different sample counts")
    min_count = cfg.min_per_cell if cfg.min_per_cell is not None else d + 2

    cuts = [_quantile_cuts(X[:, k], int(cfg.cells_per_axis[k]), cfg.tail_splits) for k in range(d)]
    shape = tuple(len(c) + 1 for c in cuts)
    idx = [np.searchsorted(c, X[:, k], side="right") for k, c in enumerate(cuts)]
    cell = np.ravel_multi_index(idx, shape)
    counts = np.bincount(cell, minlength=int(np.prod(shape)))
    parent = _merge_cells(counts, shape, min_count)
    roots, cell_group = np.unique(parent, return_inverse=True)
    G = roots.size
    gid = cell_group[cell]
    gcount = np.bincount(gid, minlength=G).astype(float)
    if n < min_count * max(1, int(np.count_nonzero(gcount))):
        raise ValueError(f"need at least {min_count} samples per cell, got {n} samples for "
                         f"{int(np.count_nonzero(gcount))} cells")
    safe_n = np.maximum(gcount, 1.0)

    center = np.stack([np.bincount(gid, X[:, k], G) for k in range(d)], axis=1) / safe_n[:, None]
    dev = X - center[gid]
    var = np.stack([np.bincount(gid, dev[:, k] ** 2, G) for k in range(d)], axis=1) / safe_n[:, None]
    std = np.sqrt(var)
    spread = X.max(axis=0) - X.min(axis=0)
    # spreads at rounding level of the coordinates count as degenerate
    floor = 1e-10 * np.maximum(spread, 1e-300) + 1e-12 * np.abs(center)
    scale = np.where(std > floor, std, 0.0)

    z = np.where(scale[gid] > 0, dev / np.where(scale[gid] > 0, scale[gid], 1.0), 0.0)
    phi = np.concatenate([np.ones((n, 1)), z], axis=1)
    p = d + 1
    m = Y2.shape[1]
    A = np.empty((G, p, p))
    for i in range(p):
        for j in range(i, p):
            A[:, i, j] = A[:, j, i] = np.bincount(gid, phi[:, i] * phi[:, j], G)
    B = np.empty((G, p, m))
    for i in range(p):
        for k in range(m):
            B[:, i, k] = np.bincount(gid, phi[:, i] * Y2[:, k], G)

    # dropped axes become identity rows so the batched solve stays regular
    dropped = np.concatenate([np.zeros((G, 1), bool), scale == 0], axis=1)
    for i in range(1, p):
        sel = dropped[:, i]
        A[sel, i, :] = 0.0
        A[sel, :, i] = 0.0
        A[sel, i, i] = 1.0
        B[sel, i, :] = 0.0
    empty = gcount == 0
    A[empty] = np.eye(p)
    B[empty] = 0.0
    cond = np.linalg.cond(A / safe_n[:, None, None])
    fallback = ~(cond <= MAX_CELL_COND) | np.all(dropped[:, 1:], axis=1)
    coef = np.zeros((G, p, m))
    ok = ~fallback
    if np.any(ok):
        coef[ok] = np.linalg.solve(A[ok], B[ok])
    coef[fallback, 0, :] = B[fallback, 0, :] / safe_n[fallback, None]
    scale[fallback] = 0.0

    fitted = np.einsum("nk,nkm->nm", phi * np.concatenate([np.ones((G, 1)), scale > 0], 1)[gid], coef[gid])
    res2 = np.bincount(gid, np.sum((Y2 - fitted) ** 2, axis=1), G) / (safe_n * m)

    return LocalBasisEstimator(
        cuts=cuts, lower=X.min(axis=0), upper=X.max(axis=0), cell_group=cell_group, center=center,
        scale=scale, coef=coef, counts=gcount.astype(int), cond=cond, fallback=fallback,
        residual=np.sqrt(res2), n_outputs=n_outputs, train_group=gid,
    )


def localization_eta(h: float, factor: float = 5.0) -> float:
    """Localization parameter factor / sqrt(h) (per axis)."""
    return factor / math.sqrt(h)


class MalliavinEstimator:
    """Ratio-of-sums conditional expectation for X_s = x0 + mu s + sigma W_s.

    For a query x with Brownian coordinates w = sigma^{-1}(x - x0 - mu s):

        E[Y | X_s = x] ~ sum_j Y_j pi_j(w) / sum_j pi_j(w),
        pi_j(w) = prod_k 1{W_jk > w_k} exp(-eta_k (W_jk - w_k)) (q_jk + eta_k),

    with q = W_s / s - dW / h when the next-step increments dW are given
    (responses depending on the next state) and q = W_s / s otherwise.
    The identity is exact in expectation for any eta; eta only trades
    variance.  Queries whose denominator is below 1e-12 N fall back to the
    global mean and are counted in ``n_unreliable``.
    """

    def __init__(self, states, Y, s, x0, mu, sigma, eta, increments=None, h=None, chunk=2048):
        X = np.atleast_2d(np.asarray(states, dtype=float))
        if X.shape[0] == 1 and np.ndim(states) == 1:
            X = X.T
        n, d = X.shape
        if s <= 0:
            raise ValueError("conditioning time s must be positive")
        self.d = d
        self.sigma_inv = np.linalg.inv(np.atleast_2d(np.asarray(sigma, dtype=float)))
        self.shift = np.asarray(x0, dtype=float) + np.asarray(mu, dtype=float) * s
        self.W = (X - self.shift) @ self.sigma_inv.T
        q = self.W / s
        if increments is not None:
            if h is None:
                raise ValueError("h is required with increments")
            q = q - np.atleast_2d(np.asarray(increments, dtype=float)).reshape(n, d) / h
        self.eta = np.broadcast_to(np.asarray(eta, dtype=float), (d,)).copy()
        self.q_eta = q + self.eta
        Y = np.asarray(Y, dtype=float)
        self.n_outputs = None if Y.ndim == 1 else Y.shape[1]
        self.Y = Y.reshape(n, -1)
        self.mean = self.Y.mean(axis=0)
        self.n = n
        self.chunk = chunk
        self.n_unreliable = 0
        if d == 1:
            order = np.argsort(self.W[:, 0])
            self._w_sorted = self.W[order, 0]
            self._ref = float(np.median(self._w_sorted))
            base = np.exp(-self.eta[0] * (self._w_sorted - self._ref)) * self.q_eta[order, 0]
            # suffix sums over W_j > w
            self._den_suffix = np.concatenate([np.cumsum(base[::-1])[::-1], [0.0]])
            num = base[:, None] * self.Y[order]
            self._num_suffix = np.concatenate([np.cumsum(num[::-1], axis=0)[::-1], np.zeros((1, num.shape[1]))])

    def _ratio(self, num, den):
        bad = ~(np.abs(den) > 1e-12 * self.n)
        self.n_unreliable += int(np.count_nonzero(bad))
        out = num / np.where(bad, 1.0, den)[:, None]
        out[bad] = self.mean
        return out

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1 and self.d > 1 or x.ndim == 0
        xq = np.atleast_2d(x) if self.d > 1 else x.reshape(-1, 1)
        w = (xq - self.shift) @ self.sigma_inv.T
        if self.d == 1:
            pos = np.searchsorted(self._w_sorted, w[:, 0], side="right")
            factor = np.exp(self.eta[0] * (w[:, 0] - self._ref))
            den = self._den_suffix[pos] * factor
            num = self._num_suffix[pos] * factor[:, None]
            out = self._ratio(num, den)
        else:
            out = np.empty((len(w), self.Y.shape[1]))
            for start in range(0, len(w), self.chunk):
                wq = w[start:start + self.chunk]
                diff = self.W[None, :, :] - wq[:, None, :]  # (K, N, d)
                kern = np.where(diff > 0, np.exp(-self.eta * np.maximum(diff, 0.0)) * self.q_eta[None], 0.0)
                pi = np.prod(kern, axis=2)
                out[start:start + self.chunk] = self._ratio(pi @ self.Y, pi.sum(axis=1))
        if self.n_outputs is None:
            out = out[:, 0]
        return out[0] if single else out


def malliavin_estimate(states, Y, s, x0, mu, sigma, eta=None, increments=None, h=None) -> MalliavinEstimator:
    """Build a MalliavinEstimator; eta defaults to 5 / sqrt(h)."""
    if eta is None:
        if h is None:
            raise ValueError("either eta or h must be given")
        eta = localization_eta(h)
    return MalliavinEstimator(states, Y, s, x0, mu, sigma, eta, increments=increments, h=h)


def truncate_estimate(value, K):
    """Clip to [-K, K]."""
    if np.any(np.asarray(K) < 0):
        raise ValueError("truncation level must be nonnegative")
    return np.clip(value, -K, K)


def sample_size(h: float, alpha: float) -> int:
    """Particle schedule N_h = ceil(h^-alpha)."""
    return int(math.ceil(h ** (-alpha)))


def fit_many(X: np.ndarray, responses: Sequence[np.ndarray], cfg: LocalBasisConfig):
    """Fit several responses with one partition; returns the estimator of
    the stacked (N, m) response."""
    return fit_local_basis(X, np.column_stack([np.asarray(r).reshape(len(X), -1) for r in responses]), cfg)
