"""Simulation data-generating processes.

Each generator is a pure function of its arguments: the same inputs give
bit-identical outputs. Randomness is split into named substreams (covariates,
treatment, noise, ...) so the treatment and outcome draws of Sim2 do not
depend on whether X3 is later hidden.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from .datamodel import ConfigError, Dataset
from .rng import substream

SIM4_TRUE_ATE = 1.5


@dataclass(frozen=True)
class FeatureSet:
    """Covariate terms of one candidate model, as ``(op, column)`` pairs.

    ``op`` is one of ``id``, ``sq``, ``cube``, ``exp``, ``halfnorm``; the last
    rebuilds the hidden confounder |X|/sqrt(1 - 2/pi) from its source column.
    """

    propensity: Tuple[Tuple[str, int], ...]
    outcome: Tuple[Tuple[str, int], ...]


@dataclass(frozen=True)
class GeneratedData:
    data: Dataset
    true_ate: float
    hidden: Optional[np.ndarray] = None
    features: Dict[str, FeatureSet] = field(default_factory=dict)


def _check_n(n: int, minimum: int = 10) -> None:
    if int(n) != n or n < minimum:
        raise ConfigError(f"sample size must be an integer >= {minimum}, got {n}")


def _bernoulli(rng: np.random.Generator, p: np.ndarray) -> np.ndarray:
    return (rng.random(p.shape[0]) < p).astype(np.int64)


def kang_schafer_covariates(u: np.ndarray) -> np.ndarray:
    """Observed covariates as nonlinear transforms of the latent normals."""
    u = np.atleast_2d(u)
    u1, u2, u3, u4 = u.T
    return np.column_stack(
        [
            np.exp(u1 / 2),
            u2 / (1 + np.exp(u1)) + 10,
            (u1 * u3 / 25 + 0.6) ** 3,
            (u2 + u4 + 20) ** 2,
        ]
    )


def kang_schafer_outcome_mean(u: np.ndarray) -> np.ndarray:
    u = np.atleast_2d(u)
    return 210 + u @ np.array([27.4, 13.7, 13.7, 13.7])


def kang_schafer_logit(u: np.ndarray) -> np.ndarray:
    u = np.atleast_2d(u)
    return u @ np.array([-1.0, 0.5, -0.25, -0.1])


def gen_sim1(n: int, seed: int) -> GeneratedData:
    """Kang-Schafer design: zero effect, outcome and propensity driven by
    latent normals that are only seen through nonlinear transforms."""
    _check_n(n)
    u = substream(seed, "sim1/latent").standard_normal((n, 4))
    eps = substream(seed, "sim1/noise").standard_normal(n)
    z = _bernoulli(substream(seed, "sim1/treatment"), expit(kang_schafer_logit(u)))
    y = kang_schafer_outcome_mean(u) + eps
    data = Dataset(y, z, kang_schafer_covariates(u), true_ate=0.0,
                   column_names=("X1", "X2", "X3", "X4"))
    return GeneratedData(data=data, true_ate=0.0, hidden=u)


def sim2_outcome_mean(x: np.ndarray, z) -> np.ndarray:
    x1, x2, x3, x4 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    return (z + 2 * z * x1 + x1 + x2 + x3 + x4
            + 0.25 * x1**2 + 0.75 * x2 * x4 + 0.75 * x3 * x4)


def gen_sim2(n: int, q: int, omit_x3: bool, seed: int) -> GeneratedData:
    """Heterogeneous effect 1 + 2*X1 (ATE 3); optionally hide X3."""
    _check_n(n)
    if q < 4:
        raise ConfigError(f"Sim2 needs q >= 4, got {q}")
    rng = substream(seed, "sim2/covariates")
    means = np.r_[1.0, 1.0, -1.0, -1.0, np.zeros(q - 4)]
    x = means + rng.standard_normal((n, q))
    eta = x[:, :4] @ np.array([0.3, 0.9, -1.25, 1.5])
    z = _bernoulli(substream(seed, "sim2/treatment"), expit(eta))
    y = sim2_outcome_mean(x, z) + substream(seed, "sim2/noise").standard_normal(n)
    names = tuple(f"X{k + 1}" for k in range(q))
    hidden = None
    if omit_x3:
        keep = [k for k in range(q) if k != 2]
        hidden = x[:, [2]]
        x = x[:, keep]
        names = tuple(names[k] for k in keep)
    data = Dataset(y, z, x, true_ate=3.0, column_names=names)
    return GeneratedData(data=data, true_ate=3.0, hidden=hidden)


HALF_NORMAL_SCALE = np.sqrt(1 - 2 / np.pi)


def sim3_features(scenario: int) -> Dict[str, FeatureSet]:
    """Covariate sets of the three candidate models M1, M2, M3."""
    x2, x3, x4 = ("id", 1), ("id", 2), ("id", 3)
    x1, u1 = ("id", 0), ("halfnorm", 0)
    m1 = (("exp", 0), x2, x3, x4)
    m2 = (("cube", 0), x2, x3, x4)
    m3 = {
        1: FeatureSet((u1, x2, x3, x4), (u1, x2, x3, x4)),
        2: FeatureSet((u1, x2, x3), (x1, x2, x4)),
        3: FeatureSet((x1, x2, x3), (u1, x2, x4)),
        4: FeatureSet((x1, x2, x3, x4), (x1, x2, x3, x4)),
    }
    if scenario not in m3:
        raise ConfigError(f"Sim3 scenario must be 1..4, got {scenario}")
    return {"M1": FeatureSet(m1, m1), "M2": FeatureSet(m2, m2), "M3": m3[scenario]}


def gen_sim3(n: int, scenario: int, seed: int) -> GeneratedData:
    """Constant effect 1 with a half-normal hidden confounder U1 = |X1|/c."""
    _check_n(n)
    features = sim3_features(scenario)
    x = substream(seed, "sim3/covariates").standard_normal((n, 4))
    u1 = np.abs(x[:, 0]) / HALF_NORMAL_SCALE
    eta = 0.4 * u1 + 0.4 * x[:, 1] + 0.8 * x[:, 2]
    z = _bernoulli(substream(seed, "sim3/treatment"), expit(eta))
    y = z - u1 - x[:, 1] - x[:, 3] + substream(seed, "sim3/noise").standard_normal(n)
    data = Dataset(y, z, x, true_ate=1.0, column_names=("X1", "X2", "X3", "X4"))
    return GeneratedData(data=data, true_ate=1.0, hidden=u1[:, None],
                         features=features)


def sim4_propensity_logit(x: np.ndarray) -> np.ndarray:
    x1, x2, x3, x4, x5 = x[:, 0], x[:, 1], x[:, 2], x[:, 3], x[:, 4]
    shared = -0.5 + 0.5 * x2 * x4
    return np.select(
        [x5 == 1, x5 == 2, x5 == 3],
        [shared + 0.3 * x1 + 0.6 * x3,
         shared + 0.3 * x1**2 + 0.6 * x3**2,
         shared + 0.3 * np.exp(x1) + 0.6 * np.abs(x3)],
    )


def sim4_baseline(x: np.ndarray) -> np.ndarray:
    x3, x5 = x[:, 2], x[:, 4]
    return np.select(
        [x5 == 1, x5 == 2, x5 == 3],
        [-7 + 6 * x3, 2 + 2 * x3**2, 2 + 2 * np.sin(3 * x3)],
    )


def sim4_effect(x: np.ndarray) -> np.ndarray:
    return 1 + 2 * x[:, 1] * x[:, 4] + x[:, 2] ** 2 / 2


def _sim4_covariates(n: int, q: int, rng: np.random.Generator) -> np.ndarray:
    p4 = rng.random()
    p5 = rng.random(3)
    p5 = p5 / p5.sum()
    cont = rng.standard_normal((n, q - 2))
    x4 = (rng.random(n) < p4).astype(float)
    x5 = 1.0 + rng.choice(3, size=n, p=p5)
    return np.column_stack([cont[:, :3], x4, x5, cont[:, 3:]])


def gen_sim4(n: int, q: int, seed: int) -> GeneratedData:
    """Subgroup-dependent propensity and baseline, switching on ternary X5."""
    _check_n(n)
    if q < 5:
        raise ConfigError(f"Sim4 needs q >= 5, got {q}")
    sim4_ate_selfcheck()
    x = _sim4_covariates(n, q, substream(seed, "sim4/covariates"))
    z = _bernoulli(substream(seed, "sim4/treatment"), expit(sim4_propensity_logit(x)))
    y = (sim4_baseline(x) + z * sim4_effect(x)
         + substream(seed, "sim4/noise").standard_normal(n))
    names = tuple(f"X{k + 1}" for k in range(q))
    data = Dataset(y, z, x, true_ate=SIM4_TRUE_ATE, column_names=names)
    return GeneratedData(data=data, true_ate=SIM4_TRUE_ATE)


def sim4_effect_mc(draws: int = 10**6, seed: int = 20240101) -> float:
    """Monte Carlo average of the Sim4 unit effect, redrawing the X4/X5
    proportions per block so the average is over the full hierarchy."""
    rng = substream(seed, "sim4/ate-check")
    total, blocks = 0.0, 100
    for _ in range(blocks):
        x = _sim4_covariates(draws // blocks, 5, rng)
        total += sim4_effect(x).sum()
    return total / (blocks * (draws // blocks))


@functools.lru_cache(maxsize=None)
def sim4_ate_selfcheck() -> float:
    value = sim4_effect_mc()
    if abs(value - SIM4_TRUE_ATE) >= 0.01:
        raise RuntimeError(f"Sim4 effect Monte Carlo check failed: {value:.4f}")
    return value


def generate(study: str, n: int, seed: int, q: int = 4, omit_x3: bool = False,
             scenario: int = 1) -> GeneratedData:
    """Dispatch to the generator of ``study``; unused arguments are ignored."""
    if study == "Sim1":
        return gen_sim1(n, seed)
    if study == "Sim2":
        return gen_sim2(n, q, omit_x3, seed)
    if study == "Sim3":
        return gen_sim3(n, scenario, seed)
    if study == "Sim4":
        return gen_sim4(n, q, seed)
    raise ConfigError(f"unknown simulation study {study!r}")
