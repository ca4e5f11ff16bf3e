"""Nearest-neighbour Gaussian process scaffolding.

A NNGP replaces the dense GP density of an n-vector by a product of
univariate conditionals, each point conditioned on at most ``m`` earlier
points of a fixed ordering::

    beta*_i | beta*_N(i)  ~  N(B_i beta*_N(i), tau2 * F_i)

with ``B_i = C(i, N) C(N, N)^-1`` and ``F_i = 1 - B_i C(N, i)`` for the
correlation function ``C(d) = exp(-d / psi)``.

Neighbour sets are stored padded: ``neighbors[i, k]`` is the original index
of the k-th neighbour of point ``i`` (``-1`` past ``counts[i]``). The reverse
relation is kept in CSR form so the Gibbs update of ``beta_i`` can find every
point that conditions on ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

JITTER = 1e-10  # added to the kernel diagonal only if the plain solve fails


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class NeighborGraph:
    ordering: np.ndarray  # ordering[p] = original index at position p
    neighbors: np.ndarray  # n x m, original indices, -1 padded
    counts: np.ndarray  # n
    m: int
    rev_ptr: np.ndarray  # n + 1
    rev_point: np.ndarray  # t such that i in N(t)
    rev_slot: np.ndarray  # k such that neighbors[t, k] == i
    dist_self: np.ndarray  # n x m, ||x_i - x_N(i)_k||
    dist_nn: np.ndarray  # n x m x m, pairwise distances within N(i)

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    def reverse(self, i: int) -> np.ndarray:
        return self.rev_point[self.rev_ptr[i]:self.rev_ptr[i + 1]]


@dataclass
class ConditionalTerms:
    B: np.ndarray  # n x m, aligned with graph.neighbors
    F: np.ndarray  # n
    psi: float


def kernel_corr(distance, psi):
    """Exponential correlation ``exp(-distance / psi)``."""
    return np.exp(-np.asarray(distance, dtype=float) / psi)


def pc1_ordering(x: np.ndarray) -> np.ndarray:
    """Order points by first principal component score; ties by index."""
    xc = x - x.mean(axis=0)
    if not np.any(xc):
        return np.arange(x.shape[0])
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    v = vt[0]
    v = v * np.sign(v[np.argmax(np.abs(v))])
    score = xc @ v
    return np.lexsort((np.arange(x.shape[0]), score))


@numba.njit(cache=True)
def _nearest_earlier(x, ordering, m):
    n = x.shape[0]
    nbr = -np.ones((n, m), dtype=np.int64)
    cnt = np.zeros(n, dtype=np.int64)
    dist = np.empty(n)
    for p in range(1, n):
        i = ordering[p]
        for r in range(p):
            j = ordering[r]
            s = 0.0
            for c in range(x.shape[1]):
                d = x[i, c] - x[j, c]
                s += d * d
            dist[r] = s
        k = min(m, p)
        # stable selection: smaller distance first, then earlier position
        idx = np.argsort(dist[:p], kind="mergesort")[:k]
        for a in range(k):
            nbr[i, a] = ordering[idx[a]]
        cnt[i] = k
    return nbr, cnt


@numba.njit(cache=True)
def _distances(x, nbr, cnt):
    n, m = nbr.shape
    d_self = np.zeros((n, m))
    d_nn = np.zeros((n, m, m))
    for i in range(n):
        for a in range(cnt[i]):
            s = 0.0
            for c in range(x.shape[1]):
                d = x[i, c] - x[nbr[i, a], c]
                s += d * d
            d_self[i, a] = np.sqrt(s)
            for b in range(a + 1, cnt[i]):
                s = 0.0
                for c in range(x.shape[1]):
                    d = x[nbr[i, a], c] - x[nbr[i, b], c]
                    s += d * d
                d_nn[i, a, b] = np.sqrt(s)
                d_nn[i, b, a] = d_nn[i, a, b]
    return d_self, d_nn


def build_graph(x, m: int) -> NeighborGraph:
    """Neighbour graph on the rows of ``x`` (standardized covariates)."""
    x = np.ascontiguousarray(getattr(x, "values", x), dtype=float)
    n = x.shape[0]
    if m < 1 or n < 2:
        raise ValueError("need m >= 1 and at least two points")
    m = min(int(m), n - 1)
    ordering = pc1_ordering(x)
    nbr, cnt = _nearest_earlier(x, ordering, m)
    d_self, d_nn = _distances(x, nbr, cnt)

    t_idx, k_idx = np.nonzero(nbr >= 0)
    targets = nbr[t_idx, k_idx]
    order = np.lexsort((k_idx, t_idx, targets))
    rev_point, rev_slot = t_idx[order], k_idx[order]
    rev_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(rev_ptr, targets + 1, 1)
    rev_ptr = np.cumsum(rev_ptr)
    return NeighborGraph(ordering, nbr, cnt, m, rev_ptr, rev_point.astype(np.int64),
                         rev_slot.astype(np.int64), d_self, d_nn)


@numba.njit(cache=True)
def _cholesky_inplace(L, k):
    """Lower Cholesky factor of the leading k x k block, in place."""
    for a in range(k):
        s = L[a, a]
        for b in range(a):
            s -= L[a, b] * L[a, b]
        if not s > 0.0:
            return False
        L[a, a] = math.sqrt(s)
        for r in range(a + 1, k):
            t = L[r, a]
            for b in range(a):
                t -= L[r, b] * L[a, b]
            L[r, a] = t / L[a, a]
    return True


@numba.njit(cache=True)
def _conditional_terms(d_self, d_nn, cnt, psi):
    n, m = d_self.shape
    B = np.zeros((n, m))
    F = np.ones(n)
    inv_psi = 1.0 / psi
    # scratch buffers shared across points; only the leading k entries are used
    L = np.zeros((m, m))
    c_in = np.empty(m)
    w = np.empty(m)
    sol = np.empty(m)
    for i in range(n):
        k = cnt[i]
        if k == 0:
            continue
        # plain solve first; the diagonal jitter is only a fallback
        ok = False
        for attempt in range(2):
            jitter = 0.0 if attempt == 0 else JITTER
            for a in range(k):
                c_in[a] = math.exp(-d_self[i, a] * inv_psi)
                L[a, a] = 1.0 + jitter
                for b in range(a):
                    L[a, b] = math.exp(-d_nn[i, a, b] * inv_psi)
            ok = _cholesky_inplace(L, k)
            if ok:
                break
        if not ok:
            return B, F, i
        for a in range(k):
            t = c_in[a]
            for b in range(a):
                t -= L[a, b] * w[b]
            w[a] = t / L[a, a]
        for a in range(k - 1, -1, -1):
            t = w[a]
            for b in range(a + 1, k):
                t -= L[b, a] * sol[b]
            sol[a] = t / L[a, a]
        fi = 1.0
        for a in range(k):
            B[i, a] = sol[a]
            fi -= sol[a] * c_in[a]
        F[i] = fi
    return B, F, -1


def conditional_terms(graph: NeighborGraph, psi: float) -> ConditionalTerms:
    """Per-point regression weights ``B`` and variance fractions ``F``."""
    if not psi > 0:
        raise ValueError("psi must be positive")
    B, F, bad = _conditional_terms(graph.dist_self, graph.dist_nn, graph.counts, float(psi))
    if bad >= 0:
        raise NumericalError(f"kernel system of point {bad} is not positive definite")
    if F.min() < -1e-12:
        raise NumericalError(f"negative conditional variance {F.min():.3g}")
    # floor keeps a tiny positive variance when a neighbour nearly coincides
    np.clip(F, 1e-12, 1.0, out=F)
    return ConditionalTerms(B, F, float(psi))


@numba.njit(cache=True)
def _residuals(beta_star, nbr, cnt, B):
    n = beta_star.shape[0]
    out = np.empty(n)
    for i in range(n):
        s = beta_star[i]
        for a in range(cnt[i]):
            s -= B[i, a] * beta_star[nbr[i, a]]
        out[i] = s
    return out


def conditional_residuals(beta, mean, terms: ConditionalTerms, graph: NeighborGraph):
    """``beta*_i - B_i beta*_N(i)`` for every point."""
    beta_star = np.asarray(beta, dtype=float) - mean
    return _residuals(beta_star, graph.neighbors, graph.counts, terms.B)


def nngp_logdensity(beta, mean, tau2, terms: ConditionalTerms, graph: NeighborGraph) -> float:
    r = conditional_residuals(beta, mean, terms, graph)
    var = tau2 * terms.F
    return float(-0.5 * np.sum(np.log(2 * np.pi * var) + r * r / var))


def sample_nngp(graph: NeighborGraph, terms: ConditionalTerms, tau2: float, mean: float,
                rng: np.random.Generator) -> np.ndarray:
    """Exact draw from the NNGP prior by sequential conditioning."""
    z = rng.standard_normal(graph.n)
    return mean + _sequential(graph.ordering, graph.neighbors, graph.counts, terms.B,
                              np.sqrt(tau2 * terms.F) * z)


@numba.njit(cache=True)
def _sequential(ordering, nbr, cnt, B, noise):
    out = np.zeros(ordering.shape[0])
    for p in range(ordering.shape[0]):
        i = ordering[p]
        s = noise[i]
        for a in range(cnt[i]):
            s += B[i, a] * out[nbr[i, a]]
        out[i] = s
    return out


def psi_bounds(x, max_points: int = 500, lower: float = 0.05, upper: float = 2.0):
    """Support of the uniform prior on ``psi`` tied to the data scale.

    Mean pairwise distance ``d`` over an evenly spaced subsample of at most
    ``max_points`` rows; bounds are ``(lower * d, upper * d)``.
    """
    x = np.asarray(getattr(x, "values", x), dtype=float)
    idx = np.unique(np.linspace(0, x.shape[0] - 1, min(max_points, x.shape[0])).astype(int))
    sub = x[idx]
    diff = sub[:, None, :] - sub[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    k = len(idx)
    mean_d = d.sum() / (k * (k - 1)) if k > 1 else 1.0
    if not mean_d > 0:
        mean_d = 1.0
    return lower * mean_d, upper * mean_d
