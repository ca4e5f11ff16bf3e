"""Invariant and oracle checks behind ``brsdr validate``.

Each check returns a :class:`Check`; none of them raises on a failed
comparison, so a report always covers the whole suite.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

from . import drposterior, geweke, nngp, polyagamma, synthesis
from .datamodel import Dataset
from .rng import substream


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def nngp_dense_agreement(seed: int = 0, sizes=(5, 20, 50), triples: int = 20) -> Check:
    """With m = n - 1 the NNGP density is the dense Gaussian density."""
    rng = substream(seed, "validate/nngp")
    worst = 0.0
    for n in sizes:
        x = rng.standard_normal((n, 2))
        graph = nngp.build_graph(x, n - 1)
        dist = cdist(x, x)
        for _ in range(triples):
            tau2, psi, mean = rng.uniform(0.2, 3.0), rng.uniform(0.1, 3.0), rng.normal()
            beta = mean + rng.standard_normal(n)
            terms = nngp.conditional_terms(graph, psi)
            approx = nngp.nngp_logdensity(beta, mean, tau2, terms, graph)
            dense = stats.multivariate_normal(np.full(n, mean), tau2 * np.exp(-dist / psi)).logpdf(beta)
            worst = max(worst, abs(approx - dense))
    return Check("nngp_dense_agreement", worst < 1e-8, f"max |diff| = {worst:.3g} (tol 1e-8)")


def conditional_term_closed_forms(seed: int = 0) -> Check:
    rng = substream(seed, "validate/terms")
    worst = 0.0
    for _ in range(20):
        d, psi = rng.uniform(0.01, 5.0), rng.uniform(0.05, 5.0)
        graph = nngp.build_graph(np.array([[0.0], [d]]), 1)
        terms = nngp.conditional_terms(graph, psi)
        first, second = graph.ordering
        worst = max(worst, abs(terms.F[first] - 1.0), abs(terms.B[first]).max(),
                    abs(terms.B[second, 0] - math.exp(-d / psi)),
                    abs(terms.F[second] - (1 - math.exp(-2 * d / psi))))
    return Check("conditional_term_closed_forms", worst < 1e-12,
                 f"max |diff| = {worst:.3g} (tol 1e-12)")


def polya_gamma_moments(seed: int = 0, draws: int = 100_000) -> Check:
    worst, notes = 0.0, []
    for k, c in enumerate((0.0, 0.1, 1.0, 2.0, 5.0)):
        x = polyagamma.sample_polya_gamma(np.full(draws, c), random_seed=seed * 101 + k)
        z = (x.mean() - polyagamma.pg1_mean(c)) / math.sqrt(polyagamma.pg1_var(c) / draws)
        worst = max(worst, abs(float(z)))
        notes.append(f"c={c:g}: z={float(z):+.2f}")
    a = polyagamma.sample_polya_gamma(np.full(10_000, 2.0), random_seed=seed * 101 + 50)
    b = polyagamma.sample_polya_gamma(np.full(10_000, -2.0), random_seed=seed * 101 + 51)
    p = stats.ks_2samp(a, b).pvalue
    notes.append(f"KS(c=2 vs c=-2) p={p:.3f}")
    return Check("polya_gamma_moments", worst < 4 and p > 0.01, "; ".join(notes))


def bootstrap_mean_identity(seed: int = 0, n: int = 40, draws: int = 100_000) -> Check:
    """With fixed nuisances the Dirichlet-weighted mean recovers the plain DR estimate."""
    rng = substream(seed, "validate/bootstrap")
    z = (rng.random(n) < 0.5).astype(int)
    z[:2] = (0, 1)
    y = rng.normal(size=n) + z
    data = Dataset(y, z, rng.normal(size=(n, 1)))
    mu1, mu0 = rng.normal(size=n), rng.normal(size=n)
    pi = rng.uniform(0.1, 0.9, n)
    post = drposterior.bootstrap_dr_posterior(np.tile(mu1, (draws, 1)), np.tile(mu0, (draws, 1)),
                                              np.tile(pi, (draws, 1)), data, seed=seed)
    plain = drposterior.dr_point(drposterior.DrInputs.build(mu1, mu0, pi, data))
    se = post.draws.std(ddof=1) / math.sqrt(draws)
    z_score = (post.point - plain) / se
    return Check("bootstrap_mean_identity", abs(z_score) < 3,
                 f"mean {post.point:.5f} vs {plain:.5f}, z={z_score:+.2f}")


def latent_factor_conditional(seed: int = 0, draws: int = 100_000) -> Check:
    """beta=1, sigma2=1, b=1, a=0, residual 2: f | rest ~ N(1, 1/2)."""
    synthesis._seed(seed + 7)
    beta = np.vstack([np.zeros(draws), np.ones(draws)])
    f = np.zeros((1, draws))
    synthesis._sweep_f(beta, f, np.zeros((1, draws)), np.ones((1, draws)),
                       np.ones(draws), np.full(draws, 2.0))
    zm = (f.mean() - 1.0) / math.sqrt(0.5 / draws)
    zv = (f.var(ddof=1) - 0.5) / (0.5 * math.sqrt(2 / (draws - 1)))
    return Check("latent_factor_conditional", abs(zm) < 3 and abs(zv) < 3,
                 f"mean z={zm:+.2f}, variance z={zv:+.2f}")


def ensemble_weight_example() -> Check:
    w = drposterior.ensemble_weights("SIC", [10.0, 12.0, 14.0]).w
    target = np.array([0.6652, 0.2447, 0.0900])
    err = float(np.abs(w - target).max())
    return Check("ensemble_weight_example", err < 5e-5, f"weights {np.round(w, 4)}")


def geweke_check(binary: bool, seed: int = 0, sweeps: int = 10_000) -> Check:
    scores = geweke.geweke_scores(geweke.default_problem(binary, seed), sweeps=sweeps,
                                  forward_draws=sweeps)
    worst_key = max(scores, key=lambda k: abs(scores[k]))
    name = "geweke_binary" if binary else "geweke_continuous"
    return Check(name, all(abs(v) < 3 for v in scores.values()),
                 f"{len(scores)} statistics, max |z| = {abs(scores[worst_key]):.2f} ({worst_key})")


SUITE: List[Callable[[], Check]] = [
    nngp_dense_agreement,
    conditional_term_closed_forms,
    polya_gamma_moments,
    bootstrap_mean_identity,
    latent_factor_conditional,
    ensemble_weight_example,
    lambda: geweke_check(False),
    lambda: geweke_check(True),
]


def run_validation(quick: bool = False) -> List[Check]:
    """Run the suite; ``quick`` skips the two Geweke runs."""
    suite = SUITE[:-2] if quick else SUITE
    out = []
    for fn in suite:
        t0 = time.perf_counter()
        chk = fn()
        out.append(Check(chk.name, bool(chk.passed), chk.detail, time.perf_counter() - t0))
    return out
