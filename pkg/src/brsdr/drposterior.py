"""Doubly robust (AIPW) estimation and its Bayesian-bootstrap posterior."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .datamodel import CLIP_EPS, AgentPredictive, ConfigError, Dataset, clip_probability
from .rng import substream

Z_95 = 1.959963984540054


class Method(enum.Enum):
    SA = "SA"
    SIC = "SIC"
    BMA = "BMA"


@dataclass(frozen=True)
class DrInputs:
    mu1: np.ndarray
    mu0: np.ndarray
    pi: np.ndarray
    y: np.ndarray
    z: np.ndarray

    @classmethod
    def build(cls, mu1, mu0, pi, data: Dataset) -> "DrInputs":
        return cls(np.asarray(mu1, float), np.asarray(mu0, float),
                   clip_probability(pi), data.outcomes, data.treatments.astype(float))


@dataclass(frozen=True)
class DrPosterior:
    draws: np.ndarray
    point: float
    interval: Tuple[float, float]
    plain_dr: float
    influence_var: float

    @property
    def se(self) -> float:
        return float(np.std(self.draws, ddof=1)) if self.draws.size > 1 else 0.0


@dataclass(frozen=True)
class EnsembleWeights:
    method: Method
    w: np.ndarray


def unit_contributions(mu1, mu0, pi, y, z) -> np.ndarray:
    """Per-unit AIPW terms; their weighted sum is the estimate.

    Broadcasts, so ``mu1``/``mu0``/``pi`` may carry a leading draw axis.
    """
    pi = np.asarray(pi, dtype=float)
    if np.any(pi < CLIP_EPS - 1e-15) or np.any(pi > 1 - CLIP_EPS + 1e-15):
        raise ValueError("propensities must be clipped into [0.01, 0.99] before use")
    treated = z * y / pi - (z - pi) / pi * mu1
    control = (1 - z) * y / (1 - pi) + (z - pi) / (1 - pi) * mu0
    return treated - control


def dr_point(inputs: DrInputs, unit_weights=None) -> float:
    zeta = unit_contributions(inputs.mu1, inputs.mu0, inputs.pi, inputs.y, inputs.z)
    if unit_weights is None:
        return float(zeta.mean())
    w = np.asarray(unit_weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1) > 1e-10:
        raise ValueError("unit weights must be nonnegative and sum to one")
    return float(w @ zeta)


def influence_variance(inputs: DrInputs) -> float:
    """Centered second moment of the per-unit terms (n times Var of the estimate)."""
    zeta = unit_contributions(inputs.mu1, inputs.mu0, inputs.pi, inputs.y, inputs.z)
    return float(np.mean((zeta - zeta.mean()) ** 2))


def wald_interval(inputs: DrInputs):
    """Point estimate, standard error and 95% interval from the influence variance."""
    point = dr_point(inputs)
    se = float(np.sqrt(influence_variance(inputs) / len(inputs.y)))
    return point, se, (point - Z_95 * se, point + Z_95 * se)


def dirichlet_weights(rng: np.random.Generator, n_draws: int, n: int) -> np.ndarray:
    e = rng.standard_exponential((n_draws, n))
    return e / e.sum(axis=1, keepdims=True)


def bootstrap_dr_posterior(mu1_draws, mu0_draws, pi_draws, data: Dataset,
                           seed: int = 0, chunk: int = 256) -> DrPosterior:
    """Bayesian-bootstrap posterior of the ATE.

    Draw ``b`` pairs the b-th synthesized ``(mu1, mu0, pi)`` with fresh
    Dirichlet(1, ..., 1) unit weights.
    """
    mu1 = np.atleast_2d(mu1_draws)
    mu0 = np.atleast_2d(mu0_draws)
    pi = clip_probability(np.atleast_2d(pi_draws))
    if not (mu1.shape == mu0.shape == pi.shape):
        raise ConfigError(f"draw arrays disagree: {mu1.shape}, {mu0.shape}, {pi.shape}")
    n_draws, n = mu1.shape
    if n != data.n:
        raise ConfigError("draws do not match the number of units")
    y, z = data.outcomes, data.treatments.astype(float)
    rng = substream(seed, "bootstrap/dirichlet")
    draws = np.empty(n_draws)
    for start in range(0, n_draws, chunk):
        sl = slice(start, min(start + chunk, n_draws))
        w = dirichlet_weights(rng, sl.stop - sl.start, n)
        zeta = unit_contributions(mu1[sl], mu0[sl], pi[sl], y, z)
        draws[sl] = np.sum(w * zeta, axis=1)
    plug = DrInputs(mu1.mean(0), mu0.mean(0), clip_probability(pi.mean(0)), y, z)
    lo, hi = np.quantile(draws, [0.025, 0.975])
    return DrPosterior(draws, float(draws.mean()), (float(lo), float(hi)),
                       dr_point(plug), influence_variance(plug))


def ensemble_weights(method, aics: Sequence[float] = None,
                     bics: Sequence[float] = None, J: Optional[int] = None) -> EnsembleWeights:
    method = Method(method)
    if method is Method.SA:
        J = J if J is not None else len(aics if aics is not None else bics)
        return EnsembleWeights(method, np.full(J, 1.0 / J))
    crit = np.asarray(aics if method is Method.SIC else bics, dtype=float)
    if crit.size == 0 or not np.all(np.isfinite(crit)):
        raise ValueError(f"{method.value} weights need finite criteria, got {crit}")
    w = np.exp(-(crit - crit.min()) / 2)
    return EnsembleWeights(method, w / w.sum())


def combined_dr_estimate(predictions: Tuple[AgentPredictive, AgentPredictive, AgentPredictive],
                         w_mu1, w_mu0, w_pi, data: Dataset):
    """DR estimate with weighted-average nuisances; returns (point, se, ci)."""
    mu1, mu0, pi = predictions
    inputs = DrInputs.build(mu1.means @ np.asarray(w_mu1), mu0.means @ np.asarray(w_mu0),
                            pi.means @ np.asarray(w_pi), data)
    return wald_interval(inputs)
