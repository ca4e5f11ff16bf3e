import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.spatial.distance import cdist

from brsdr import nngp


def _line(n=3):
    return np.c_[np.arange(float(n)), np.zeros(n)]


def test_kernel_values():
    assert nngp.kernel_corr(0.0, 2.0) == 1.0
    assert nngp.kernel_corr(2.0, 2.0) == pytest.approx(math.exp(-1))
    assert nngp.kernel_corr(2.0, 2.0) == pytest.approx(0.3679, abs=1e-4)


@given(st.floats(0, 50), st.floats(0, 50), st.floats(0.01, 10))
def test_kernel_monotone(d1, d2, psi):
    lo, hi = sorted((d1, d2))
    assert nngp.kernel_corr(lo, psi) >= nngp.kernel_corr(hi, psi)


def test_line_neighbours_and_reverse_index():
    g = nngp.build_graph(_line(), 1)
    np.testing.assert_array_equal(g.ordering, [0, 1, 2])
    assert g.counts.tolist() == [0, 1, 1]
    assert g.neighbors[1, 0] == 0 and g.neighbors[2, 0] == 1
    np.testing.assert_array_equal(g.reverse(0), [1])
    np.testing.assert_array_equal(g.reverse(1), [2])
    assert g.reverse(2).size == 0


def test_saturated_graph_uses_all_earlier(rng):
    x = rng.normal(size=(8, 3))
    g = nngp.build_graph(x, 20)
    pos = np.empty(8, int)
    pos[g.ordering] = np.arange(8)
    for i in range(8):
        assert set(g.neighbors[i, :g.counts[i]]) == set(g.ordering[:pos[i]])


def test_reverse_index_is_transpose(rng):
    g = nngp.build_graph(rng.normal(size=(60, 2)), 5)
    pairs = {(int(g.neighbors[t, k]), t, k) for t in range(60) for k in range(g.counts[t])}
    rev = {(i, int(t), int(k)) for i in range(60)
           for t, k in zip(g.rev_point[g.rev_ptr[i]:g.rev_ptr[i + 1]],
                           g.rev_slot[g.rev_ptr[i]:g.rev_ptr[i + 1]])}
    assert pairs == rev


def test_graph_deterministic_with_ties():
    x = np.r_[_line(4), _line(4)]
    a = nngp.build_graph(x, 3)
    b = nngp.build_graph(x.copy(), 3)
    np.testing.assert_array_equal(a.ordering, b.ordering)
    np.testing.assert_array_equal(a.neighbors, b.neighbors)
    # tie on the PC1 score is broken by original index
    assert list(a.ordering[:2]) == [0, 4]


def test_graph_input_validation():
    with pytest.raises(ValueError):
        nngp.build_graph(np.zeros((1, 2)), 1)
    with pytest.raises(ValueError):
        nngp.build_graph(np.zeros((4, 2)), 0)


@given(st.floats(0.01, 5.0), st.floats(0.05, 5.0))
def test_single_neighbour_closed_form(d, psi):
    g = nngp.build_graph(np.array([[0.0], [d]]), 1)
    t = nngp.conditional_terms(g, psi)
    first, second = g.ordering
    assert t.F[first] == 1.0 and g.counts[first] == 0
    assert abs(t.B[second, 0] - math.exp(-d / psi)) < 1e-12
    assert abs(t.F[second] - (1 - math.exp(-2 * d / psi))) < 1e-12


def test_terms_match_direct_solve(rng):
    x = rng.normal(size=(40, 2))
    g = nngp.build_graph(x, 6)
    t = nngp.conditional_terms(g, 0.8)
    for i in range(40):
        k = g.counts[i]
        if k == 0:
            assert t.F[i] == 1.0
            continue
        nb = g.neighbors[i, :k]
        c_nn = np.exp(-cdist(x[nb], x[nb]) / 0.8)
        c_in = np.exp(-np.linalg.norm(x[nb] - x[i], axis=1) / 0.8)
        b = np.linalg.solve(c_nn, c_in)
        np.testing.assert_allclose(t.B[i, :k], b, atol=1e-10)
        assert t.F[i] == pytest.approx(1 - b @ c_in, abs=1e-10)
    assert np.all((t.F > 0) & (t.F <= 1))


@settings(max_examples=10)
@given(st.sampled_from([5, 20, 50]), st.integers(0, 10_000))
def test_full_neighbour_density_equals_dense(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    g = nngp.build_graph(x, n - 1)
    tau2, psi, mean = rng.uniform(0.2, 3), rng.uniform(0.1, 3), rng.normal()
    beta = mean + rng.standard_normal(n)
    t = nngp.conditional_terms(g, psi)
    dense = stats.multivariate_normal(np.full(n, mean), tau2 * np.exp(-cdist(x, x) / psi))
    assert nngp.nngp_logdensity(beta, mean, tau2, t, g) == pytest.approx(dense.logpdf(beta),
                                                                         abs=1e-8)


def test_logdensity_centered_case(rng):
    g = nngp.build_graph(rng.normal(size=(10, 2)), 3)
    t = nngp.conditional_terms(g, 1.0)
    expected = float(np.sum(stats.norm.logpdf(0.0, 0.0, np.sqrt(2.0 * t.F))))
    assert nngp.nngp_logdensity(np.full(10, 0.7), 0.7, 2.0, t, g) == pytest.approx(expected)


def test_prior_sampler_covariance(rng):
    x = rng.normal(size=(6, 2))
    g = nngp.build_graph(x, 5)
    t = nngp.conditional_terms(g, 1.2)
    draws = np.array([nngp.sample_nngp(g, t, 2.0, 1.0, rng) for _ in range(20_000)])
    cov = 2.0 * np.exp(-cdist(x, x) / 1.2)
    np.testing.assert_allclose(draws.mean(0), 1.0, atol=0.06)
    np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.1)


def test_coincident_points_keep_positive_variance():
    x = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    t = nngp.conditional_terms(nngp.build_graph(x, 2), 1.0)
    assert np.all(t.F > 0) and np.all(np.isfinite(t.B))


def test_psi_bounds_scale_with_data(rng):
    x = rng.normal(size=(100, 2))
    lo, hi = nngp.psi_bounds(x)
    lo2, hi2 = nngp.psi_bounds(3 * x)
    assert hi / lo == pytest.approx(40)
    assert lo2 == pytest.approx(3 * lo) and hi2 == pytest.approx(3 * hi)


def test_bad_psi():
    g = nngp.build_graph(_line(), 1)
    with pytest.raises(ValueError):
        nngp.conditional_terms(g, 0.0)
