import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from brsdr import polyagamma as pg

N = 100_000


def _series_moments(c, terms=200_000):
    # PG(1, c) = sum_k g_k / (2 pi^2 ((k - 1/2)^2 + c^2 / (4 pi^2))), g_k ~ Exp(1)
    k = np.arange(1, terms + 1)
    d = 2 * math.pi**2 * ((k - 0.5) ** 2 + c**2 / (4 * math.pi**2))
    return float(np.sum(1 / d)), float(np.sum(1 / d**2))


@pytest.mark.parametrize("c", [0.0, 0.5, 2.0, 7.0])
def test_closed_form_moments_match_series(c):
    mean, var = _series_moments(c)
    assert pg.pg1_mean(c) == pytest.approx(mean, rel=1e-5)
    assert pg.pg1_var(c) == pytest.approx(var, rel=1e-5)


def test_mean_at_zero():
    x = pg.sample_polya_gamma(np.zeros(N), random_seed=1)
    assert abs(x.mean() - 0.25) < 3 * math.sqrt(pg.pg1_var(0.0) / N)


def test_mean_at_two():
    x = pg.sample_polya_gamma(np.full(N, 2.0), random_seed=2)
    assert float(pg.pg1_mean(2.0)) == pytest.approx(math.tanh(1) / 4, abs=1e-12)
    assert abs(x.mean() - math.tanh(1) / 4) < 3 * math.sqrt(pg.pg1_var(2.0) / N)


def test_variance_at_five():
    x = pg.sample_polya_gamma(np.full(N, 5.0), random_seed=3)
    v = float(pg.pg1_var(5.0))
    # sd of the sample variance, from the fourth cumulant bounded by 6 v^2
    assert abs(x.var() - v) < 4 * v * math.sqrt(8 / N)


def test_sign_symmetry():
    a = pg.sample_polya_gamma(np.full(10_000, 2.0), random_seed=4)
    b = pg.sample_polya_gamma(np.full(10_000, -2.0), random_seed=5)
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_large_argument_and_positivity():
    x = pg.sample_polya_gamma(np.array([0.0, 1e-9, 40.0, -60.0, 300.0]), random_seed=6)
    assert np.all(x > 0) and np.all(np.isfinite(x))


@given(st.integers(0, 2**31 - 1))
def test_seeding_is_reproducible(seed):
    c = np.linspace(-3, 3, 7)
    np.testing.assert_array_equal(pg.sample_polya_gamma(c, random_seed=seed),
                                  pg.sample_polya_gamma(c, random_seed=seed))
