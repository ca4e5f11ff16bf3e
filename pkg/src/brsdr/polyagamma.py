"""Exact PG(1, c) sampler.

Devroye-style accept/reject on the Jacobi representation: propose from a
mixture of a truncated inverse Gaussian (left of ``TRUNC``) and an
exponential tail (right of it), then accept with the alternating series of
the target density's coefficients. The sampler draws J*(1, c/2) and returns
``J / 4``.

Uses numba's internal generator; seed it with :func:`seed`.
"""

import math

import numba
import numpy as np

TRUNC = 0.64
MAX_PROPOSALS = 1000


@numba.njit(cache=True)
def seed(value):
    np.random.seed(value)


@numba.njit(cache=True)
def _norm_logcdf(x):
    if x < -5.0:
        # asymptotic tail, avoids log(0)
        return -0.5 * x * x - math.log(-x) - 0.5 * math.log(2.0 * math.pi) + math.log1p(-1.0 / (x * x))
    return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))


@numba.njit(cache=True)
def _exponential_mass(z):
    # probability of the right-hand (exponential) proposal component
    t = TRUNC
    fz = 0.125 * math.pi * math.pi + 0.5 * z * z
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = math.log(fz) + fz * t
    xb = x0 - z + _norm_logcdf(b)
    xa = x0 + z + _norm_logcdf(a)
    qdivp = 4.0 / math.pi * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


@numba.njit(cache=True)
def _series_coef(n, x):
    t = TRUNC
    k = n + 0.5
    if x > t:
        return math.pi * k * math.exp(-0.5 * k * k * math.pi * math.pi * x)
    return math.pi * k * math.pow(2.0 / (math.pi * x), 1.5) * math.exp(-2.0 * k * k / x)


@numba.njit(cache=True)
def _truncated_inverse_gaussian(z):
    t = TRUNC
    if z < 1.0 / t:
        # mean beyond the truncation point: sample 1/chi^2 restricted to (0, t)
        while True:
            while True:
                e1 = np.random.exponential(1.0)
                e2 = np.random.exponential(1.0)
                if e1 * e1 <= 2.0 * e2 / t:
                    break
            x = 1.0 + e1 * t
            x = t / (x * x)
            if np.random.random() <= math.exp(-0.5 * z * z * x):
                return x
    mu = 1.0 / z
    while True:
        y = np.random.standard_normal()
        y = y * y
        half_mu = 0.5 * mu
        mu_y = mu * y
        x = mu + half_mu * mu_y - half_mu * math.sqrt(4.0 * mu_y + mu_y * mu_y)
        if np.random.random() > mu / (mu + x):
            x = mu * mu / x
        if x <= t:
            return x


@numba.njit(cache=True)
def pg1(c):
    """One draw from PG(1, c). Returns -1.0 if the proposal cap is hit."""
    z = 0.5 * abs(c)
    t = TRUNC
    fz = 0.125 * math.pi * math.pi + 0.5 * z * z
    p_exp = _exponential_mass(z)
    for _ in range(MAX_PROPOSALS):
        if np.random.random() < p_exp:
            x = t + np.random.exponential(1.0) / fz
        else:
            x = _truncated_inverse_gaussian(z)
        s = _series_coef(0, x)
        y = np.random.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _series_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _series_coef(n, x)
                if y > s:
                    break
    return -1.0


@numba.njit(cache=True)
def pg1_vec(c, out):
    bad = 0
    for i in range(c.shape[0]):
        out[i] = pg1(c[i])
        if out[i] < 0.0:
            bad += 1
    return bad


def sample_polya_gamma(c, random_seed=None) -> np.ndarray:
    """Vector of independent PG(1, c_i) draws."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if random_seed is not None:
        seed(int(random_seed))
    out = np.empty_like(c)
    if pg1_vec(c, out):
        raise ArithmeticError("Polya-Gamma sampler exceeded its proposal cap")
    return out


def pg1_mean(c) -> np.ndarray:
    """E[PG(1, c)] = tanh(c/2) / (2c), with the c -> 0 limit 1/4."""
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-6
    safe = np.where(small, 1.0, c)
    return np.where(small, 0.25 - c**2 / 48, np.tanh(safe / 2) / (2 * safe))


def pg1_var(c) -> np.ndarray:
    """Var[PG(1, c)] = (sinh(c) - c) / (4 c^3 cosh^2(c/2)); limit 1/24."""
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-3
    safe = np.where(small, 1.0, c)
    v = (np.sinh(safe) - safe) / (4 * safe**3 * np.cosh(safe / 2) ** 2)
    return np.where(small, 1 / 24, v)
