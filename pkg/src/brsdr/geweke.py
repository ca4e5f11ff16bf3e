"""Joint-distribution ("getting it right") checks for the synthesis samplers.

Two ways of drawing from the joint of parameters and data are compared:

* marginal-conditional: parameters from the prior, then data given them;
* successive-conditional: alternate one Gibbs sweep (parameters given data)
  with a fresh draw of data given parameters.

If every conditional update is right, both chains have the same stationary
distribution, so the means of any test function agree up to Monte Carlo
error. Batch means give the standard error of the correlated chain.

The priors must be proper with finite fourth moments for the variance
tests to be meaningful, so the default problem uses IG(6, 6) priors and a
fixed Metropolis step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, Tuple

import numpy as np
from scipy.special import expit

from .datamodel import AgentPredictive, Target
from .nngp import build_graph, conditional_terms, psi_bounds, sample_nngp
from .rng import substream
from .synthesis import SamplerState, SynthesisConfig, gibbs_sweep, init_state, set_response


@dataclass(frozen=True)
class GewekeProblem:
    n: int = 20
    J: int = 2
    m: int = 5
    binary: bool = False
    probes: Tuple[int, int, int] = (0, 7, 15)
    shape: float = 12.0
    scale: float = 12.0
    mh_step: float = 0.5
    seed: int = 0

    def config(self) -> SynthesisConfig:
        return SynthesisConfig(m=self.m, n_iter=2, burn_in=1, tau_shape=self.shape,
                               tau_scale=self.scale, sigma_shape=self.shape,
                               sigma_scale=self.scale, mh_step=self.mh_step, adapt=False,
                               store_latent=False, seed=self.seed)

    def fixed_inputs(self):
        """Covariates and agent moments, held fixed in both simulations."""
        rng = substream(self.seed, "geweke/design")
        x = rng.standard_normal((self.n, 2))
        if self.binary:
            a = rng.uniform(0.2, 0.8, (self.n, self.J))
            b = rng.uniform(0.01, 0.05, (self.n, self.J))
            target = Target.PROPENSITY
        else:
            a = rng.normal(0.0, 1.0, (self.n, self.J))
            b = rng.uniform(0.1, 0.5, (self.n, self.J))
            target = Target.OUTCOME_TREATED
        labels = tuple(f"agent{j}" for j in range(self.J))
        return x, AgentPredictive(target, a, b, labels)


def _new_state(problem: GewekeProblem) -> SamplerState:
    x, agent = problem.fixed_inputs()
    graph = build_graph(x, problem.m)
    dummy = np.tile([0.0, 1.0], problem.n // 2 + 1)[: problem.n]
    return init_state(dummy, agent, x, problem.config(), binary=problem.binary, graph=graph)


def draw_prior(state: SamplerState, rng: np.random.Generator) -> None:
    """Overwrite every parameter of ``state`` with a draw from its prior."""
    c = state.config
    lo, hi = state.bounds
    for j in range(state.J + 1):
        state.tau2[j] = c.tau_scale / 2 / rng.gamma(c.tau_shape / 2)
        state.psi[j] = rng.uniform(lo, hi)
        state.terms[j] = conditional_terms(state.graph, state.psi[j])
        state.beta[j] = sample_nngp(state.graph, state.terms[j], state.tau2[j],
                                    state.bbar[j], rng)
    state.f[:] = state.a + np.sqrt(state.b) * rng.standard_normal(state.a.shape)
    if not state.binary:
        state.sigma2 = c.sigma_scale / 2 / rng.gamma(c.sigma_shape / 2)


def draw_data(state: SamplerState, rng: np.random.Generator) -> np.ndarray:
    eta = state.eta()
    if state.binary:
        return (rng.random(state.n) < expit(eta)).astype(float)
    return eta + math.sqrt(state.sigma2) * rng.standard_normal(state.n)


def test_functions(state: SamplerState, probes) -> Dict[str, float]:
    out = {}
    if not state.binary:
        out["sigma2"] = state.sigma2
    for j in range(state.J + 1):
        out[f"tau2[{j}]"] = float(state.tau2[j])
    for i in probes:
        out[f"beta[1,{i}]"] = float(state.beta[1, i])
    out["psi[0]"] = float(state.psi[0])
    # second moments turn mean agreement into variance agreement
    for k in list(out):
        out[f"{k}^2"] = out[k] ** 2
    return out


def marginal_conditional(problem: GewekeProblem, draws: int) -> Dict[str, np.ndarray]:
    state = _new_state(problem)
    rng = substream(problem.seed, "geweke/forward")
    rows = []
    for _ in range(draws):
        draw_prior(state, rng)
        rows.append(test_functions(state, problem.probes))
    return {k: np.array([r[k] for r in rows]) for k in rows[0]}


def successive_conditional(problem: GewekeProblem, sweeps: int) -> Dict[str, np.ndarray]:
    state = _new_state(problem)
    rng = substream(problem.seed, "geweke/successive")
    draw_prior(state, rng)
    if state.binary:
        state.omega[:] = 0.25
    rows = []
    for _ in range(sweeps):
        set_response(state, draw_data(state, rng))
        gibbs_sweep(state)
        rows.append(test_functions(state, problem.probes))
    return {k: np.array([r[k] for r in rows]) for k in rows[0]}


def batch_means_se(x: np.ndarray, n_batches: int = 50) -> float:
    size = len(x) // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))


def geweke_scores(problem: GewekeProblem, sweeps: int = 10_000,
                  forward_draws: int = 10_000) -> Dict[str, float]:
    """z-score of the mean difference for every test function."""
    fwd = marginal_conditional(problem, forward_draws)
    suc = successive_conditional(problem, sweeps)
    scores = {}
    for k in fwd:
        se_f = fwd[k].std(ddof=1) / math.sqrt(len(fwd[k]))
        se_s = batch_means_se(suc[k])
        scores[k] = float((fwd[k].mean() - suc[k].mean()) / math.hypot(se_f, se_s))
    return scores


def default_problem(binary: bool, seed: int = 0) -> GewekeProblem:
    return replace(GewekeProblem(), binary=binary, seed=seed)
