"""Bayesian regression synthesis samplers.

Both samplers target the varying-coefficient synthesis model

    eta_i = beta_0(X_i) + sum_j beta_j(X_i) f_ji,    f_ji ~ N(a_ji, b_ji)

with independent NNGP priors on each coefficient surface beta_j. The
continuous sampler has a Gaussian likelihood ``Y_i ~ N(eta_i, sigma2)``; the
binary sampler a logistic one, made conditionally Gaussian by Polya-Gamma
augmentation. Inside a sweep the two differ only in how the unit-level
likelihood enters: ``exp(lin_i * eta_i - wt_i * eta_i**2 / 2)`` with
``(wt, lin) = (1/sigma2, y/sigma2)`` or ``(omega, z - 1/2)``. Units outside
the observed arm of an outcome regression get ``wt = lin = 0`` and are
carried by the prior alone.

Coefficient vectors are updated unit by unit, jointly over j. Because
single-site updates of a strongly correlated surface move its overall level
slowly, each sweep also redraws a common shift ``beta_j + c`` of every
surface from its exact one-dimensional conditional (a translation move,
which leaves the posterior invariant).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numba
import numpy as np
from scipy.special import expit

from . import polyagamma
from .datamodel import AgentPredictive, CLIP_EPS, ConfigError, Target
from .nngp import (ConditionalTerms, NeighborGraph, build_graph, conditional_residuals,
                   conditional_terms, nngp_logdensity, psi_bounds)
from .rng import int32_seed, substream

log = logging.getLogger(__name__)

ADAPT_WINDOW = 50


class SamplerError(RuntimeError):
    def __init__(self, iteration: int, block: str):
        super().__init__(f"non-finite state in block {block!r} at iteration {iteration}")
        self.iteration = iteration
        self.block = block


@dataclass(frozen=True)
class SynthesisConfig:
    m: int = 10
    n_iter: int = 2000
    burn_in: int = 500
    tau_shape: float = 2.0  # delta_j
    tau_scale: float = 2.0  # xi_j
    sigma_shape: float = 2.0  # delta_sigma
    sigma_scale: float = 2.0  # xi_sigma
    beta_bar: Optional[Tuple[float, ...]] = None
    psi_bounds: Optional[Tuple[float, float]] = None
    mh_step: float = 0.3
    adapt: bool = True
    store_latent: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.burn_in < self.n_iter):
            raise ConfigError("need 0 <= burn_in < n_iter")
        if min(self.tau_shape, self.tau_scale, self.sigma_shape, self.sigma_scale) <= 0:
            raise ConfigError("inverse-gamma shapes and scales must be positive")
        if self.m < 1 or self.mh_step <= 0:
            raise ConfigError("m and mh_step must be positive")
        if self.psi_bounds is not None:
            lo, hi = self.psi_bounds
            if not 0 < lo < hi:
                raise ConfigError("psi_bounds must satisfy 0 < lower < upper")
        if self.beta_bar is not None:
            bb = np.asarray(self.beta_bar, dtype=float)
            if bb[0] != 0 or abs(bb[1:].sum() - 1) > 1e-12:
                raise ConfigError("beta_bar needs intercept 0 and weights summing to 1")

    def prior_means(self, J: int) -> np.ndarray:
        if self.beta_bar is None:
            return np.r_[0.0, np.full(J, 1.0 / J)]
        bb = np.asarray(self.beta_bar, dtype=float)
        if bb.shape != (J + 1,):
            raise ConfigError(f"beta_bar must have length J + 1 = {J + 1}")
        return bb

    @property
    def n_keep(self) -> int:
        return self.n_iter - self.burn_in


@dataclass
class SynthesisDraws:
    fitted: np.ndarray  # draws x n
    tau2: np.ndarray  # draws x (J+1)
    psi: np.ndarray  # draws x (J+1)
    sigma2: Optional[np.ndarray]  # draws (continuous only)
    beta: Optional[np.ndarray]  # draws x (J+1) x n
    f: Optional[np.ndarray]  # draws x J x n
    acceptance_rates: np.ndarray  # J+1
    binary: bool = False

    @property
    def n_draws(self) -> int:
        return self.fitted.shape[0]

    def mean_function(self) -> np.ndarray:
        """Synthesized regression mean (continuous) or clipped probability."""
        if self.binary:
            return np.clip(expit(self.fitted), CLIP_EPS, 1 - CLIP_EPS)
        return self.fitted


@dataclass
class SamplerState:
    graph: NeighborGraph
    a: np.ndarray  # J x n agent means
    b: np.ndarray  # J x n agent variances
    bbar: np.ndarray
    beta: np.ndarray  # (J+1) x n
    f: np.ndarray  # J x n
    tau2: np.ndarray
    psi: np.ndarray
    terms: List[ConditionalTerms]
    wt: np.ndarray
    lin: np.ndarray
    response: np.ndarray
    observed: np.ndarray  # bool mask of units entering the likelihood
    binary: bool
    config: SynthesisConfig
    bounds: Tuple[float, float]
    rng: np.random.Generator
    sigma2: float = 1.0
    omega: Optional[np.ndarray] = None
    step: np.ndarray = None
    accepted: np.ndarray = None
    proposed: np.ndarray = None

    @property
    def J(self) -> int:
        return self.a.shape[0]

    @property
    def n(self) -> int:
        return self.a.shape[1]

    def eta(self) -> np.ndarray:
        return self.beta[0] + np.sum(self.beta[1:] * self.f, axis=0)

    def B_all(self) -> np.ndarray:
        return np.stack([t.B for t in self.terms])

    def F_all(self) -> np.ndarray:
        return np.stack([t.F for t in self.terms])


# ---------------------------------------------------------------- kernels


@numba.njit(cache=True)
def _sweep_beta(beta, f, bbar, tau2, nbr, cnt, B, F, rev_ptr, rev_point, rev_slot, wt, lin):
    Jp1, n = beta.shape
    x = np.empty(Jp1)
    P = np.empty((Jp1, Jp1))
    h = np.empty(Jp1)
    L = np.empty((Jp1, Jp1))
    w = np.empty(Jp1)
    for i in range(n):
        x[0] = 1.0
        for j in range(1, Jp1):
            x[j] = f[j - 1, i]
        xbar = 0.0
        for j in range(Jp1):
            xbar += x[j] * bbar[j]
        for r in range(Jp1):
            h[r] = x[r] * (lin[i] - wt[i] * xbar)
            for c in range(Jp1):
                P[r, c] = wt[i] * x[r] * x[c]
        for j in range(Jp1):
            tf = tau2[j] * F[j, i]
            gam = 1.0 / tf
            own = 0.0
            for a in range(cnt[i]):
                own += B[j, i, a] * (beta[j, nbr[i, a]] - bbar[j])
            mj = own / tf
            for r in range(rev_ptr[i], rev_ptr[i + 1]):
                t = rev_point[r]
                k = rev_slot[r]
                btk = B[j, t, k]
                tft = tau2[j] * F[j, t]
                gam += btk * btk / tft
                res = beta[j, t] - bbar[j]
                for a in range(cnt[t]):
                    if a != k:
                        res -= B[j, t, a] * (beta[j, nbr[t, a]] - bbar[j])
                mj += btk * res / tft
            P[j, j] += gam
            h[j] += mj
        # Cholesky P = L L'
        for r in range(Jp1):
            s = P[r, r]
            for c in range(r):
                s -= L[r, c] * L[r, c]
            if not s > 0.0:
                return i
            L[r, r] = math.sqrt(s)
            for c2 in range(r + 1, Jp1):
                t2 = P[c2, r]
                for c in range(r):
                    t2 -= L[c2, c] * L[r, c]
                L[c2, r] = t2 / L[r, r]
        # w = L^-1 h, then mean + noise = L'^-1 (w + z)
        for r in range(Jp1):
            s = h[r]
            for c in range(r):
                s -= L[r, c] * w[c]
            w[r] = s / L[r, r]
        for r in range(Jp1):
            w[r] += np.random.standard_normal()
        for r in range(Jp1 - 1, -1, -1):
            s = w[r]
            for c in range(r + 1, Jp1):
                s -= L[c, r] * x[c]
            x[r] = s / L[r, r]
        for j in range(Jp1):
            beta[j, i] = bbar[j] + x[j]
    return -1


@numba.njit(cache=True)
def _sweep_f(beta, f, a, b, wt, lin):
    J, n = f.shape
    for i in range(n):
        eta = beta[0, i]
        for j in range(J):
            eta += beta[j + 1, i] * f[j, i]
        for j in range(J):
            bj = beta[j + 1, i]
            rest = eta - bj * f[j, i]
            prec = wt[i] * bj * bj + 1.0 / b[j, i]
            hh = bj * (lin[i] - wt[i] * rest) + a[j, i] / b[j, i]
            new = hh / prec + np.random.standard_normal() / math.sqrt(prec)
            eta = rest + bj * new
            f[j, i] = new


@numba.njit(cache=True)
def _draw_omega(eta, out):
    bad = 0
    for i in range(eta.shape[0]):
        out[i] = polyagamma.pg1(eta[i])
        if out[i] < 0.0:
            bad += 1
    return bad


@numba.njit(cache=True)
def _seed(value):
    np.random.seed(value)


# ---------------------------------------------------------------- updates


def _inv_gamma(rng: np.random.Generator, shape: float, scale: float) -> float:
    return scale / rng.gamma(shape)


def update_beta(state: SamplerState) -> SamplerState:
    g = state.graph
    bad = _sweep_beta(state.beta, state.f, state.bbar, state.tau2, g.neighbors, g.counts,
                      state.B_all(), state.F_all(), g.rev_ptr, g.rev_point, g.rev_slot,
                      state.wt, state.lin)
    if bad >= 0:
        raise ArithmeticError(f"coefficient precision not positive definite at unit {bad}")
    return state


def update_level(state: SamplerState) -> SamplerState:
    """Draw a common shift ``c`` for each surface, ``beta_j <- beta_j + c``.

    Both the NNGP prior and the unit likelihood are Gaussian in ``c``, so the
    conditional along the constant direction is normal.
    """
    g = state.graph
    for j in range(state.J + 1):
        x = np.ones(state.n) if j == 0 else state.f[j - 1]
        eta = state.eta()
        prec = float(np.sum(state.wt * x * x))
        lin = float(np.sum(x * (state.lin - state.wt * eta)))
        terms = state.terms[j]
        r = conditional_residuals(state.beta[j], state.bbar[j], terms, g)
        B = np.where(g.neighbors >= 0, terms.B, 0.0)
        u = 1.0 - B.sum(axis=1)
        scale = 1.0 / (state.tau2[j] * terms.F)
        prec += float(np.sum(u * u * scale))
        lin -= float(np.sum(r * u * scale))
        if not prec > 0:
            raise ArithmeticError("level shift precision is not positive")
        state.beta[j] += lin / prec + state.rng.standard_normal() / math.sqrt(prec)
    return state


def update_f(state: SamplerState) -> SamplerState:
    _sweep_f(state.beta, state.f, state.a, state.b, state.wt, state.lin)
    return state


def update_tau2(state: SamplerState) -> SamplerState:
    c = state.config
    for j in range(state.J + 1):
        r = conditional_residuals(state.beta[j], state.bbar[j], state.terms[j], state.graph)
        ss = float(np.sum(r * r / state.terms[j].F))
        state.tau2[j] = _inv_gamma(state.rng, (c.tau_shape + state.n) / 2,
                                   c.tau_scale / 2 + ss / 2)
    return state


def update_psi_mh(state: SamplerState, adapt: bool = False) -> SamplerState:
    """Log-scale random-walk Metropolis step for each range parameter."""
    lo, hi = state.bounds
    for j in range(state.J + 1):
        state.proposed[j] += 1
        prop = state.psi[j] * math.exp(state.step[j] * state.rng.standard_normal())
        u = math.log(state.rng.random())
        if not lo <= prop <= hi:
            continue
        new_terms = conditional_terms(state.graph, prop)
        cur = nngp_logdensity(state.beta[j], state.bbar[j], state.tau2[j], state.terms[j],
                              state.graph)
        new = nngp_logdensity(state.beta[j], state.bbar[j], state.tau2[j], new_terms,
                              state.graph)
        # uniform prior on psi, proposal on log psi: Jacobian psi'/psi
        if u < new - cur + math.log(prop) - math.log(state.psi[j]):
            state.psi[j] = prop
            state.terms[j] = new_terms
            state.accepted[j] += 1
    return state


def update_sigma2(state: SamplerState) -> SamplerState:
    c = state.config
    obs = state.observed
    resid = (state.response - state.eta())[obs]
    state.sigma2 = _inv_gamma(state.rng, (c.sigma_shape + obs.sum()) / 2,
                              c.sigma_scale / 2 + float(resid @ resid) / 2)
    _refresh_gaussian_weights(state)
    return state


def update_omega(state: SamplerState) -> SamplerState:
    if _draw_omega(state.eta(), state.omega):
        raise ArithmeticError("Polya-Gamma sampler exceeded its proposal cap")
    state.wt = state.omega
    return state


def _refresh_gaussian_weights(state: SamplerState) -> None:
    obs = state.observed.astype(float)
    state.wt = obs / state.sigma2
    state.lin = obs * state.response / state.sigma2


# The unit-level likelihood is abstracted into (wt, lin), so a single kernel
# serves both responses; the names below match the block structure.
update_beta_cont = update_beta_bin = update_beta
update_f_cont = update_f_bin = update_f


def set_response(state: SamplerState, response) -> SamplerState:
    """Swap in a new response vector (used by the Geweke test)."""
    state.response = np.asarray(response, dtype=float)
    if state.binary:
        state.lin = np.where(state.observed, state.response - 0.5, 0.0)
    else:
        _refresh_gaussian_weights(state)
    return state


def gibbs_sweep(state: SamplerState) -> SamplerState:
    """One full scan in the fixed block order of the sampler."""
    if state.binary:
        update_beta(state)
        update_level(state)
        update_omega(state)
        update_f(state)
        update_tau2(state)
        update_psi_mh(state)
    else:
        update_beta(state)
        update_level(state)
        update_f(state)
        update_tau2(state)
        update_psi_mh(state)
        update_sigma2(state)
    return state


# ---------------------------------------------------------------- setup


def init_state(response, agent: AgentPredictive, x, config: SynthesisConfig,
               binary: bool, observed=None, graph: NeighborGraph = None) -> SamplerState:
    x = np.asarray(getattr(x, "values", x), dtype=float)
    n, J = agent.n, agent.J
    if x.shape[0] != n or len(response) != n:
        raise ConfigError("response, agent predictions and covariates must share n")
    graph = build_graph(x, config.m) if graph is None else graph
    bounds = tuple(config.psi_bounds) if config.psi_bounds else psi_bounds(x)
    psi0 = math.sqrt(bounds[0] * bounds[1])
    terms = [conditional_terms(graph, psi0) for _ in range(J + 1)]
    observed = np.ones(n, bool) if observed is None else np.asarray(observed, bool)
    bbar = config.prior_means(J)
    a = np.ascontiguousarray(agent.means.T)
    b = np.ascontiguousarray(agent.variances.T)
    state = SamplerState(
        graph=graph, a=a, b=b, bbar=bbar,
        beta=np.repeat(bbar[:, None], n, axis=1).astype(float),
        f=a.copy(), tau2=np.ones(J + 1), psi=np.full(J + 1, psi0), terms=terms,
        wt=np.zeros(n), lin=np.zeros(n), response=np.asarray(response, dtype=float),
        observed=observed, binary=binary, config=config, bounds=bounds,
        rng=substream(config.seed, "synthesis/python"),
        step=np.full(J + 1, config.mh_step), accepted=np.zeros(J + 1, int),
        proposed=np.zeros(J + 1, int),
    )
    _seed(int32_seed(config.seed, "synthesis/kernel"))
    if binary:
        state.omega = np.full(n, 0.25)
        state.wt = state.omega
        state.lin = np.where(observed, state.response - 0.5, 0.0)
    else:
        resid = (state.response - state.eta())[observed]
        state.sigma2 = float(np.var(resid)) if resid.size > 1 else 1.0
        state.sigma2 = max(state.sigma2, 1e-8)
        _refresh_gaussian_weights(state)
    return state


def _run(state: SamplerState) -> SynthesisDraws:
    c = state.config
    J, n, keep = state.J, state.n, c.n_keep
    fitted = np.empty((keep, n))
    tau2 = np.empty((keep, J + 1))
    psi = np.empty((keep, J + 1))
    sigma2 = None if state.binary else np.empty(keep)
    beta = np.empty((keep, J + 1, n)) if c.store_latent else None
    f = np.empty((keep, J, n)) if c.store_latent else None
    win_acc = np.zeros(J + 1, int)
    win_prop = np.zeros(J + 1, int)
    for it in range(c.n_iter):
        try:
            gibbs_sweep(state)
        except ArithmeticError as exc:
            raise SamplerError(it, str(exc)) from exc
        eta = state.eta()
        if not (np.all(np.isfinite(eta)) and np.all(np.isfinite(state.tau2))
                and math.isfinite(state.sigma2)):
            raise SamplerError(it, "state")
        if it < c.burn_in:
            if c.adapt and (it + 1) % ADAPT_WINDOW == 0:
                rate = (state.accepted - win_acc) / np.maximum(state.proposed - win_prop, 1)
                state.step = np.where(rate < 0.25, state.step * 0.7,
                                      np.where(rate > 0.45, state.step * 1.4, state.step))
                win_acc, win_prop = state.accepted.copy(), state.proposed.copy()
            if it == c.burn_in - 1:
                state.accepted[:] = 0
                state.proposed[:] = 0
            continue
        k = it - c.burn_in
        fitted[k] = eta
        tau2[k] = state.tau2
        psi[k] = state.psi
        if sigma2 is not None:
            sigma2[k] = state.sigma2
        if beta is not None:
            beta[k] = state.beta
            f[k] = state.f
    rates = state.accepted / np.maximum(state.proposed, 1)
    return SynthesisDraws(fitted, tau2, psi, sigma2, beta, f, rates, binary=state.binary)


def run_continuous_gibbs(y, agent: AgentPredictive, x, config: SynthesisConfig,
                         observed=None, graph: NeighborGraph = None) -> SynthesisDraws:
    """Posterior draws of the synthesized regression mean.

    ``observed`` marks the units whose outcome enters the likelihood (the
    treated units for the treated-arm regression, say); coefficient and
    latent-factor draws are produced for all units.
    """
    if agent.target is Target.PROPENSITY:
        raise ConfigError("continuous synthesis needs an outcome agent")
    y = np.asarray(y, dtype=float)
    if observed is not None:
        y = np.where(observed, y, 0.0)
    state = init_state(y, agent, x, config, binary=False, observed=observed, graph=graph)
    return _run(state)


def run_binary_gibbs(z, agent: AgentPredictive, x, config: SynthesisConfig,
                     graph: NeighborGraph = None) -> SynthesisDraws:
    """Posterior draws of the synthesized linear predictor of a binary response."""
    if agent.target is not Target.PROPENSITY:
        raise ConfigError("binary synthesis needs a propensity agent")
    z = np.asarray(z, dtype=float)
    if z.min() == z.max():
        raise ConfigError("both classes must be present")
    state = init_state(z, agent, x, config, binary=True, graph=graph)
    return _run(state)


def dump_draws(draws: SynthesisDraws, path, probe_units=(0,)) -> None:
    """Write scalar draws and ``fitted`` at probe units as
    ``iteration<TAB>parameter<TAB>value`` lines."""
    with open(path, "w") as fh:
        fh.write("iteration\tparameter\tvalue\n")
        for it in range(draws.n_draws):
            if draws.sigma2 is not None:
                fh.write(f"{it}\tsigma2\t{float(draws.sigma2[it])!r}\n")
            for j in range(draws.tau2.shape[1]):
                fh.write(f"{it}\ttau2[{j}]\t{float(draws.tau2[it, j])!r}\n")
                fh.write(f"{it}\tpsi[{j}]\t{float(draws.psi[it, j])!r}\n")
            for i in probe_units:
                fh.write(f"{it}\tfitted[{i}]\t{float(draws.fitted[it, i])!r}\n")
