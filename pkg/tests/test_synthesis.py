import dataclasses
import math

import numpy as np
import pytest
from scipy import stats
from scipy.spatial.distance import cdist
from scipy.special import expit

from brsdr import synthesis
from brsdr.datamodel import AgentPredictive, ConfigError, Target
from brsdr.nngp import build_graph, conditional_terms, sample_nngp
from brsdr.synthesis import SynthesisConfig, init_state


class _RecordingRng:
    """Stand-in generator: gamma() returns 1 so an IG draw equals its scale."""

    def __init__(self):
        self.shapes = []

    def gamma(self, shape):
        self.shapes.append(shape)
        return 1.0


def _agent(a, b, target=Target.OUTCOME_TREATED):
    a = np.asarray(a, float)
    return AgentPredictive(target, a, np.broadcast_to(b, a.shape).copy(),
                           tuple(f"a{j}" for j in range(a.shape[1])))


def _isolated_graph_arrays(n, J):
    nbr = -np.ones((n, 1), np.int64)
    cnt = np.zeros(n, np.int64)
    B = np.zeros((J + 1, n, 1))
    F = np.ones((J + 1, n))
    rev_ptr = np.zeros(n + 1, np.int64)
    empty = np.zeros(0, np.int64)
    return nbr, cnt, B, F, rev_ptr, empty, empty


# ---------------------------------------------------------------- beta


def test_beta_conjugate_update_on_isolated_units():
    n, tau2, bbar = 1000, 2.0, 0.3
    rng = np.random.default_rng(0)
    wt = rng.uniform(0.1, 3.0, n)
    lin = rng.normal(size=n)
    beta = np.zeros((1, n))
    nbr, cnt, B, F, ptr, rp, rs = _isolated_graph_arrays(n, 0)
    synthesis._seed(11)
    synthesis._sweep_beta(beta, np.zeros((0, n)), np.array([bbar]), np.array([tau2]),
                          nbr, cnt, B, F, ptr, rp, rs, wt, lin)
    prec = wt + 1 / tau2
    mean = bbar + (lin - wt * bbar) / prec
    np.random.seed(11)
    expected = mean + np.random.standard_normal(n) / np.sqrt(prec)
    np.testing.assert_allclose(beta[0], expected, atol=1e-10)


def _dense_conditional(x, psi, tau2, bbar_j, beta_j, i):
    q = np.linalg.inv(tau2 * np.exp(-cdist(x, x) / psi))
    others = np.delete(np.arange(len(x)), i)
    var = 1 / q[i, i]
    mean = bbar_j - var * q[i, others] @ (beta_j[others] - bbar_j)
    return mean, var


@pytest.mark.parametrize("case", ["no_likelihood", "zero_factor"])
def test_beta_conditional_matches_dense_prior_conditional(case):
    """With no likelihood information (sigma2 -> infinity, or f = 0 for the
    slope), the first-updated unit's beta_j follows the Gaussian prior
    conditional, here computed from the dense precision (m = n - 1)."""
    rng = np.random.default_rng(5)
    n = 7
    x = rng.normal(size=(n, 2))
    g = build_graph(x, n - 1)
    tau2, psi, bbar = np.array([1.5, 0.7]), 0.9, np.array([0.0, 1.0])
    terms = [conditional_terms(g, psi) for _ in range(2)]
    B = np.stack([t.B for t in terms])
    F = np.stack([t.F for t in terms])
    beta0 = np.stack([sample_nngp(g, terms[j], tau2[j], bbar[j], rng) for j in range(2)])
    if case == "no_likelihood":
        f = rng.normal(size=(1, n))
        wt = np.full(n, 1e-14)
    else:
        f = np.zeros((1, n))
        wt = np.ones(n)
    lin = wt * rng.normal(size=n)
    synthesis._seed(3)
    draws = np.empty(10_000)
    for k in range(draws.size):
        beta = beta0.copy()
        synthesis._sweep_beta(beta, f, bbar, tau2, g.neighbors, g.counts, B, F,
                              g.rev_ptr, g.rev_point, g.rev_slot, wt, lin)
        draws[k] = beta[1, 0]
    mean, var = _dense_conditional(x, psi, tau2[1], bbar[1], beta0[1], 0)
    assert stats.kstest(draws, "norm", args=(mean, math.sqrt(var))).pvalue > 0.01


# ---------------------------------------------------------------- f


def _f_draws(beta1, a, b, wt, lin, rest=0.0, draws=100_000, seed=7):
    beta = np.vstack([np.full(draws, rest), np.full(draws, beta1)])
    f = np.zeros((1, draws))
    synthesis._seed(seed)
    synthesis._sweep_f(beta, f, np.full((1, draws), a), np.full((1, draws), b),
                       np.full(draws, wt), np.full(draws, lin))
    return f[0]


def test_f_hand_case():
    # beta=1, sigma2=1, b=1, a=0, residual 2: N(1, 1/2)
    f = _f_draws(1.0, 0.0, 1.0, 1.0, 2.0)
    n = f.size
    assert abs(f.mean() - 1) < 3 * math.sqrt(0.5 / n)
    assert abs(f.var(ddof=1) - 0.5) < 3 * 0.5 * math.sqrt(2 / (n - 1))


def test_f_zero_weight_is_agent_prior():
    f = _f_draws(0.0, 0.3, 0.2, 1.0, 5.0, draws=20_000)
    assert stats.kstest(f, "norm", args=(0.3, math.sqrt(0.2))).pvalue > 0.01


def test_f_pinned_by_tiny_agent_variance():
    f = _f_draws(1.0, 0.42, 1e-14, 1.0, 100.0, draws=100)
    np.testing.assert_allclose(f, 0.42, atol=1e-6)


def test_f_binary_closed_form():
    # omega = 2, kappa = 1/2, beta = 1.5, intercept 0.4, a = 0.3, b = 0.1
    n = 50
    f = _f_draws(1.5, 0.3, 0.1, 2.0, 0.5, rest=0.4, draws=n, seed=9)
    prec = 2.0 * 1.5**2 + 1 / 0.1
    mean = (1.5 * (0.5 - 2.0 * 0.4) + 0.3 / 0.1) / prec
    np.random.seed(9)
    np.testing.assert_allclose(f, mean + np.random.standard_normal(n) / math.sqrt(prec),
                               atol=1e-10)


# ---------------------------------------------------------------- variances


def _small_state(n=2, J=1, binary=False, **cfg):
    x = np.c_[np.arange(float(n)), np.zeros(n)]
    target = Target.PROPENSITY if binary else Target.OUTCOME_TREATED
    agent = _agent(np.full((n, J), 0.5), 0.1, target)
    y = np.tile([0.0, 1.0], n)[:n]
    config = SynthesisConfig(m=1, n_iter=2, burn_in=1, **cfg)
    return init_state(y, agent, x, config, binary=binary)


def test_tau2_at_prior_mean():
    s = _small_state(n=5)
    s.beta[:] = s.bbar[:, None]
    s.rng = _RecordingRng()
    synthesis.update_tau2(s)
    assert s.rng.shapes == [(2 + 5) / 2] * 2
    np.testing.assert_allclose(s.tau2, 1.0)


def test_tau2_two_point_substitution():
    s = _small_state(n=2)
    t = s.terms[1]
    first, second = s.graph.ordering
    s.beta[:] = s.bbar[:, None]
    s.beta[1, first] += 1.0
    s.beta[1, second] += t.B[second, 0] * 1.0 + math.sqrt(t.F[second])
    s.rng = _RecordingRng()
    synthesis.update_tau2(s)
    assert s.rng.shapes[1] == 2.0
    assert s.tau2[1] == pytest.approx(2.0)


def test_inverse_gamma_mean():
    rng = np.random.default_rng(2)
    x = np.array([synthesis._inv_gamma(rng, 2.0, 2.0) for _ in range(100_000)])
    assert abs(x.mean() - 2.0) < 3 * x.std(ddof=1) / math.sqrt(x.size)


def test_sigma2_substitution():
    s = _small_state(n=2)
    s.response = s.eta() + np.array([1.0, -1.0])
    s.rng = _RecordingRng()
    synthesis.update_sigma2(s)
    assert s.rng.shapes == [2.0]
    assert s.sigma2 == pytest.approx(2.0)
    np.testing.assert_allclose(s.wt, 0.5)


def test_sigma2_zero_residual():
    s = _small_state(n=4)
    s.response = s.eta().copy()
    s.rng = _RecordingRng()
    synthesis.update_sigma2(s)
    assert s.rng.shapes == [3.0] and s.sigma2 == pytest.approx(1.0)


def test_sigma2_counts_observed_units_only():
    s = _small_state(n=4)
    s.observed = np.array([True, False, True, False])
    s.response = s.eta() + np.array([1.0, 50.0, -1.0, 50.0])
    s.rng = _RecordingRng()
    synthesis.update_sigma2(s)
    assert s.rng.shapes == [2.0] and s.sigma2 == pytest.approx(2.0)
    np.testing.assert_array_equal(s.wt, [0.5, 0.0, 0.5, 0.0])


def test_sigma2_degenerate_limit():
    rng = np.random.default_rng(4)
    n = 200
    a = rng.normal(size=(n, 1))
    y = a[:, 0] + rng.normal(0, 1.3, n)
    x = rng.normal(size=(n, 2))
    s = init_state(y, _agent(a, 1e-12), x, SynthesisConfig(n_iter=2, burn_in=1), binary=False)
    out = []
    for it in range(400):
        s.tau2[:] = 1e-10
        synthesis.update_beta(s)
        synthesis.update_f(s)
        synthesis.update_sigma2(s)
        if it >= 100:
            out.append(s.sigma2)
    target = np.mean((y - a[:, 0]) ** 2)
    assert abs(np.mean(out) / target - 1) < 0.1


# ---------------------------------------------------------------- psi


def test_psi_out_of_bounds_always_rejected():
    s = _small_state(n=6, psi_bounds=(0.5, 0.50001), mh_step=5.0)
    s.psi[:] = 0.5
    for _ in range(200):
        synthesis.update_psi_mh(s)
    assert np.all(s.psi == 0.5) and s.accepted.sum() == 0
    assert np.all(s.proposed == 200)


def test_psi_flat_target_acceptance():
    # far-apart points make F ~ 1 for every psi in range; huge tau2 flattens the rest
    n = 30
    x = np.c_[1e5 * np.arange(n), np.zeros(n)]
    agent = _agent(np.zeros((n, 1)), 1.0)
    cfg = SynthesisConfig(m=3, n_iter=2, burn_in=1, psi_bounds=(1e-3, 1e3), mh_step=0.1)
    s = init_state(np.zeros(n), agent, x, cfg, binary=False)
    s.tau2[:] = 1e12
    s.psi[:] = 1.0
    s.terms = [conditional_terms(s.graph, 1.0) for _ in s.terms]
    s.beta[:] = s.bbar[:, None]
    for _ in range(500):
        synthesis.update_psi_mh(s)
    rates = s.accepted / s.proposed
    assert np.all(rates > 0.9)


# ---------------------------------------------------------------- full runs


def _synthetic_continuous(n, J, seed, noise_sd=0.5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    g = build_graph(x, 10)
    t = conditional_terms(g, 1.0)
    bbar = np.r_[0.0, np.full(J, 1 / J)]
    beta = np.stack([sample_nngp(g, t, 0.3, bbar[j], rng) for j in range(J + 1)])
    a = rng.normal(0, 2, (n, J))
    b = np.full((n, J), 0.05)
    f = a + np.sqrt(b) * rng.normal(size=(n, J))
    y = beta[0] + np.sum(beta[1:] * f.T, axis=0) + rng.normal(0, noise_sd, n)
    return x, y, a, b, beta, g


def test_continuous_draw_counts_and_fitted_identity():
    x, y, a, b, _, g = _synthetic_continuous(40, 2, 1)
    draws = synthesis.run_continuous_gibbs(y, _agent(a, b), x, SynthesisConfig(), graph=g)
    assert draws.n_draws == 1500 and draws.beta.shape == (1500, 3, 40)
    recomputed = draws.beta[:, 0] + np.sum(draws.beta[:, 1:] * draws.f, axis=1)
    np.testing.assert_allclose(draws.fitted, recomputed, rtol=0, atol=1e-12)
    assert np.all(draws.sigma2 > 0) and np.all(draws.tau2 > 0)
    lo, hi = synthesis.psi_bounds(x)
    assert np.all((draws.psi >= lo) & (draws.psi <= hi))
    assert draws.acceptance_rates.shape == (3,)


def test_continuous_recovers_coefficient_surfaces():
    x, y, a, b, beta, g = _synthetic_continuous(200, 2, 2)
    draws = synthesis.run_continuous_gibbs(y, _agent(a, b), x, SynthesisConfig(seed=3), graph=g)
    mean, sd = draws.beta.mean(0), draws.beta.std(0)
    inside = np.abs(mean - beta) <= 3 * sd
    assert inside.mean() >= 0.9


def test_sigma2_consistency_large_n():
    x, y, a, b, _, g = _synthetic_continuous(2000, 1, 8, noise_sd=0.8)
    cfg = SynthesisConfig(n_iter=800, burn_in=300, store_latent=False, seed=1)
    draws = synthesis.run_continuous_gibbs(y, _agent(a, b), x, cfg, graph=g)
    assert abs(draws.sigma2.mean() / 0.64 - 1) < 0.1


def test_sampler_is_seed_deterministic():
    x, y, a, b, _, g = _synthetic_continuous(30, 2, 3)
    cfg = SynthesisConfig(n_iter=60, burn_in=20, seed=5)
    d1 = synthesis.run_continuous_gibbs(y, _agent(a, b), x, cfg, graph=g)
    d2 = synthesis.run_continuous_gibbs(y, _agent(a, b), x, cfg, graph=g)
    np.testing.assert_array_equal(d1.fitted, d2.fitted)


def test_binary_symmetric_data():
    # alternating treatment along a line is balanced in every neighbourhood
    n = 500
    x = np.c_[np.linspace(-2, 2, n), np.zeros(n)]
    z = (np.arange(n) % 2).astype(float)
    agent = _agent(np.full((n, 2), 0.5), 1e-8, Target.PROPENSITY)
    cfg = SynthesisConfig(n_iter=4000, burn_in=1000, store_latent=False, seed=2)
    draws = synthesis.run_binary_gibbs(z, agent, x, cfg)
    assert draws.n_draws == 3000 and draws.sigma2 is None
    pi = expit(draws.fitted).mean(0)
    assert np.all(np.abs(pi - 0.5) < 0.1)


def _synthetic_binary(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    g = build_graph(x, 10)
    t = conditional_terms(g, 1.0)
    beta = np.stack([sample_nngp(g, t, 0.5, m, rng) for m in (0.0, 0.5, 0.5)])
    a = rng.uniform(0.1, 0.9, (n, 2))
    f = a + 0.1 * rng.normal(size=(n, 2))
    eta = beta[0] + np.sum(beta[1:] * f.T, axis=0)
    z = (rng.random(n) < expit(eta)).astype(float)
    return x, z, a, eta, g


def test_binary_credible_interval_coverage():
    x, z, a, eta, g = _synthetic_binary(500, 4)
    agent = _agent(a, 0.01, Target.PROPENSITY)
    cfg = SynthesisConfig(n_iter=2000, burn_in=500, store_latent=False, seed=4)
    draws = synthesis.run_binary_gibbs(z, agent, x, cfg, graph=g)
    lo, hi = np.quantile(draws.fitted, [0.05, 0.95], axis=0)
    cover = np.mean((eta >= lo) & (eta <= hi))
    assert 0.8 <= cover <= 0.98


def test_binary_synthesis_beats_worst_agent():
    rng = np.random.default_rng(12)
    n = 400
    x = rng.normal(size=(n, 2))
    truth = expit(x[:, 0] - 0.5 * x[:, 1])
    z = (rng.random(n) < truth).astype(float)
    noisy = np.clip(truth + rng.normal(0, 0.25, n), 0.01, 0.99)
    agent = _agent(np.c_[truth, noisy], 1e-4, Target.PROPENSITY)
    cfg = SynthesisConfig(n_iter=1200, burn_in=400, store_latent=False, seed=12,
                          tau_shape=2.0, tau_scale=0.02)
    draws = synthesis.run_binary_gibbs(z, agent, x, cfg)
    pi = draws.mean_function().mean(0)
    worst = max(np.sqrt(np.mean((truth - agent.means[:, j]) ** 2)) for j in range(2))
    assert np.sqrt(np.mean((pi - truth) ** 2)) < worst


def test_target_checks():
    x = np.random.default_rng(0).normal(size=(10, 2))
    prop = _agent(np.full((10, 1), 0.5), 0.1, Target.PROPENSITY)
    out = _agent(np.zeros((10, 1)), 0.1)
    with pytest.raises(ConfigError):
        synthesis.run_continuous_gibbs(np.zeros(10), prop, x, SynthesisConfig(n_iter=3, burn_in=1))
    with pytest.raises(ConfigError):
        synthesis.run_binary_gibbs(np.zeros(10), prop, x, SynthesisConfig(n_iter=3, burn_in=1))
    with pytest.raises(ConfigError):
        synthesis.run_binary_gibbs(np.arange(10) % 2, out, x, SynthesisConfig())


@pytest.mark.parametrize("kw", [dict(burn_in=2000), dict(tau_shape=0.0), dict(m=0),
                                dict(psi_bounds=(1.0, 0.5)), dict(beta_bar=(0.1, 0.9))])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SynthesisConfig(**kw)


def test_prior_means_default():
    np.testing.assert_allclose(SynthesisConfig().prior_means(3), [0, 1 / 3, 1 / 3, 1 / 3])
    with pytest.raises(ConfigError):
        SynthesisConfig(beta_bar=(0.0, 1.0)).prior_means(2)


def test_nonfinite_state_aborts():
    x, y, a, b, _, g = _synthetic_continuous(20, 1, 0)
    bad = y.copy()
    bad[3] = 1e200
    with np.errstate(all="ignore"), pytest.raises(synthesis.SamplerError) as info:
        synthesis.run_continuous_gibbs(bad, _agent(a, b), x,
                                       SynthesisConfig(n_iter=5, burn_in=1), graph=g)
    assert info.value.iteration >= 0


def test_dump_draws(tmp_path):
    x, y, a, b, _, g = _synthetic_continuous(20, 1, 0)
    d = synthesis.run_continuous_gibbs(y, _agent(a, b), x, SynthesisConfig(n_iter=12, burn_in=2),
                                       graph=g)
    path = tmp_path / "draws.tsv"
    synthesis.dump_draws(d, path, probe_units=(0, 5))
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration\tparameter\tvalue"
    # sigma2, 2 x (tau2, psi), 2 probes per iteration
    assert len(lines) == 1 + 10 * 7
    it, name, value = lines[1].split("\t")
    assert (it, name, float(value)) == ("0", "sigma2", d.sigma2[0])
