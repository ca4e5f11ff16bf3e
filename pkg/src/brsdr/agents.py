"""Candidate outcome and propensity models ("agents").

Every agent exports, for each unit, a normal predictive distribution for its
fitted mean: ``a = x'b`` and ``b = x' V x`` on the response scale for the
outcome models, and the delta-method moments on the probability scale for
the propensity models.
"""

from __future__ import annotations

import dataclasses
import enum
import warnings
from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .additive import AdditiveBasis, fit_penalized
from .datamodel import AgentPredictive, CLIP_EPS, ConfigError, Dataset, Target
from .dgp import HALF_NORMAL_SCALE, FeatureSet, sim3_features

VARIANCE_FLOOR = 1e-8
SEPARATION_BOUND = 30.0


class FitError(RuntimeError):
    pass


class Kind(enum.Enum):
    LINEAR_GAUSSIAN = "gaussian"
    LOGISTIC_BINOMIAL = "binomial"


_OPS = {
    "id": lambda v: v,
    "sq": lambda v: v**2,
    "cube": lambda v: v**3,
    "exp": np.exp,
    "halfnorm": lambda v: np.abs(v) / HALF_NORMAL_SCALE,
}


@dataclass(frozen=True)
class ParametricFeatures:
    """Intercept plus ``(op, column)`` transforms of the raw covariates."""

    n_inputs: int
    terms: Tuple[Tuple[str, int], ...]

    @classmethod
    def raw(cls, q: int) -> "ParametricFeatures":
        return cls(q, tuple(("id", k) for k in range(q)))

    @classmethod
    def with_squares(cls, q: int) -> "ParametricFeatures":
        return cls(q, tuple(("id", k) for k in range(q)) + tuple(("sq", k) for k in range(q)))

    @property
    def width(self) -> int:
        return 1 + len(self.terms)

    def transform(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} covariate columns, got {x.shape[1]}")
        cols = [np.ones(x.shape[0])] + [_OPS[op](x[:, k]) for op, k in self.terms]
        return np.column_stack(cols)


@dataclass(frozen=True)
class DesignColumns:
    """Pass-through map for fits made directly on a design matrix."""

    n_inputs: int

    @property
    def width(self) -> int:
        return self.n_inputs

    def transform(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} design columns, got {x.shape[1]}")
        return x


FeatureMap = Union[ParametricFeatures, AdditiveBasis, DesignColumns]


@dataclass(frozen=True)
class FittedRegression:
    kind: Kind
    feature_map: FeatureMap
    coefficients: np.ndarray
    coef_covariance: np.ndarray
    dispersion: float
    loglik: float
    aic: float
    bic: float
    n_fit: int
    edf: float
    ridge_used: bool = False
    separated: bool = False
    converged: bool = True

    def linear_moments(self, x: np.ndarray):
        """Mean and variance of the linear predictor at raw covariates ``x``."""
        design = self.feature_map.transform(x)
        mean = design @ self.coefficients
        var = np.einsum("ij,jk,ik->i", design, self.coef_covariance, design)
        return mean, np.maximum(var, 0.0)


def _ridge_jitter(xtx: np.ndarray) -> float:
    return 1e-8 * float(np.trace(xtx)) / xtx.shape[0]


def fit_linear_gaussian(y, features) -> FittedRegression:
    """Ordinary least squares on a design matrix that already holds any
    intercept column. Rank-deficient designs get a tiny ridge and
    ``ridge_used=True``."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if n <= p:
        raise FitError(f"need more rows ({n}) than columns ({p})")
    xtx = x.T @ x
    rank = np.linalg.matrix_rank(x)
    ridge = rank < p
    if ridge:
        warnings.warn("rank-deficient design; using ridge fallback", RuntimeWarning)
        a = xtx + _ridge_jitter(xtx) * np.eye(p)
        a_inv = np.linalg.inv(a)
        beta = a_inv @ (x.T @ y)
        unscaled = a_inv @ xtx @ a_inv
    else:
        beta = np.linalg.solve(xtx, x.T @ y)
        unscaled = np.linalg.inv(xtx)
    rss = float(np.sum((y - x @ beta) ** 2))
    dispersion = rss / (n - rank)
    sigma2_ml = max(rss / n, 1e-300)
    loglik = -0.5 * n * (np.log(2 * np.pi * sigma2_ml) + 1)
    k = rank + 1
    cov = dispersion * unscaled
    return FittedRegression(
        Kind.LINEAR_GAUSSIAN, DesignColumns(p), beta, 0.5 * (cov + cov.T),
        dispersion, loglik, -2 * loglik + 2 * k, -2 * loglik + k * np.log(n),
        n, float(rank), ridge_used=ridge,
    )


def _bernoulli_loglik(z, eta) -> float:
    # log p = -log(1 + exp(-eta)); stable in both tails
    return float(np.sum(z * eta - np.logaddexp(0.0, eta)))


def fit_logistic_irls(z, features, max_iter: int = 100) -> FittedRegression:
    """Newton-Raphson maximum likelihood for logistic regression."""
    x = np.asarray(features, dtype=float)
    z = np.asarray(z, dtype=float)
    n, p = x.shape
    if z.min() == z.max():
        raise FitError("both classes must be present")
    beta = np.zeros(p)
    ll = _bernoulli_loglik(z, x @ beta)
    converged, ridge = False, False
    for _ in range(max_iter):
        eta = x @ beta
        prob = expit(eta)
        score = x.T @ (z - prob)
        if np.max(np.abs(score)) < 1e-8:
            converged = True
            break
        info = (x.T * (prob * (1 - prob))) @ x
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            ridge = True
            step = np.linalg.solve(info + _ridge_jitter(info) * np.eye(p) + 1e-12 * np.eye(p), score)
        t = 1.0
        for _ in range(30):
            ll_new = _bernoulli_loglik(z, x @ (beta + t * step))
            if ll_new >= ll - 1e-12:
                break
            t /= 2
        beta = beta + t * step
        rel = abs(ll_new - ll) / (abs(ll) + 1e-300)
        ll = ll_new
        if rel < 1e-10:
            converged = True
            break
        if np.max(np.abs(beta)) > 10 * SEPARATION_BOUND:
            break
    eta = x @ beta
    prob = expit(eta)
    info = (x.T * (prob * (1 - prob))) @ x
    try:
        cov = np.linalg.inv(info)
        if not np.all(np.isfinite(cov)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        ridge = True
        cov = np.linalg.pinv(info + _ridge_jitter(info) * np.eye(p), hermitian=True)
    score_ok = np.max(np.abs(x.T @ (z - prob))) < 1e-6
    separated = bool(np.max(np.abs(beta)) > SEPARATION_BOUND
                     and (not score_ok or np.max(np.abs(eta)) > SEPARATION_BOUND))
    ll = _bernoulli_loglik(z, eta)
    return FittedRegression(
        Kind.LOGISTIC_BINOMIAL, DesignColumns(p), beta, 0.5 * (cov + cov.T),
        1.0, ll, -2 * ll + 2 * p, -2 * ll + p * np.log(n), n, float(p),
        ridge_used=ridge, separated=separated, converged=converged and not separated,
    )


def fit_parametric(response, x, feature_map: ParametricFeatures, kind: Kind) -> FittedRegression:
    design = feature_map.transform(x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if kind is Kind.LINEAR_GAUSSIAN:
            fit = fit_linear_gaussian(response, design)
        else:
            fit = fit_logistic_irls(response, design)
    return dataclasses.replace(fit, feature_map=feature_map)


def fit_additive(response, x, kind: Kind, basis: AdditiveBasis = None) -> FittedRegression:
    """Additive model with one penalized spline per continuous covariate.

    ``basis`` fixes the spline knots; by default they come from ``x``, the
    fitting sample.  Outside its range each smooth is held at its boundary
    value.  A basis built on a larger sample than the one fitted leaves the
    coefficients of unsupported basis functions fixed only by the penalty,
    and predictions there can be arbitrarily far off.
    """
    x = np.asarray(x, dtype=float)
    response = np.asarray(response, dtype=float)
    if x.shape[1] > 20:
        raise FitError("additive agent supports at most 20 covariates")
    basis = AdditiveBasis.from_data(x) if basis is None else basis
    family = "gaussian" if kind is Kind.LINEAR_GAUSSIAN else "binomial"
    fit = fit_penalized(basis, x, response, family)
    n = len(response)
    k = fit.edf + (1 if kind is Kind.LINEAR_GAUSSIAN else 0)
    cov = 0.5 * (fit.covariance + fit.covariance.T)
    return FittedRegression(
        kind, basis, fit.coefficients, cov, fit.dispersion, fit.loglik,
        -2 * fit.loglik + 2 * k, -2 * fit.loglik + k * np.log(n), n, fit.edf,
        converged=fit.converged,
    )


@dataclass(frozen=True)
class AgentSet:
    outcome_treated: Tuple[FittedRegression, ...]
    outcome_control: Tuple[FittedRegression, ...]
    propensity: Tuple[FittedRegression, ...]
    labels: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        J = len(self.labels)
        if not (len(self.outcome_treated) == len(self.outcome_control) == len(self.propensity) == J):
            raise ConfigError("agent lists and labels must share length J")

    @property
    def J(self) -> int:
        return len(self.labels)

    def criteria(self, which: str, criterion: str = "aic") -> np.ndarray:
        models = {"mu1": self.outcome_treated, "mu0": self.outcome_control,
                  "pi": self.propensity}[which]
        return np.array([getattr(m, criterion) for m in models])


def predict_agents(agents: AgentSet, x: np.ndarray):
    """Return ``(mu1, mu0, pi)`` AgentPredictive objects at covariates ``x``."""
    x = np.asarray(x, dtype=float)
    out = []
    for target, models in ((Target.OUTCOME_TREATED, agents.outcome_treated),
                           (Target.OUTCOME_CONTROL, agents.outcome_control)):
        moments = [m.linear_moments(x) for m in models]
        means = np.column_stack([mu for mu, _ in moments])
        var = np.column_stack([np.maximum(v, VARIANCE_FLOOR) for _, v in moments])
        out.append(AgentPredictive(target, means, var, agents.labels))
    means, var = [], []
    for m in agents.propensity:
        eta, v = m.linear_moments(x)
        p = expit(eta)
        means.append(np.clip(p, CLIP_EPS, 1 - CLIP_EPS))
        var.append(np.maximum((p * (1 - p)) ** 2 * v, VARIANCE_FLOOR))
    out.append(AgentPredictive(Target.PROPENSITY, np.column_stack(means),
                               np.column_stack(var), agents.labels))
    return tuple(out)


def _fit_arm_models(data: Dataset, fit_one, label: str):
    z = data.treatments == 1
    fits = []
    for arm, mask in (("treated", z), ("control", ~z)):
        try:
            fits.append(fit_one(data.outcomes[mask], data.covariates[mask], Kind.LINEAR_GAUSSIAN))
        except (FitError, np.linalg.LinAlgError) as exc:
            raise FitError(f"{label} outcome model ({arm} arm): {exc}") from exc
    try:
        prop = fit_one(data.treatments.astype(float), data.covariates, Kind.LOGISTIC_BINOMIAL)
    except (FitError, np.linalg.LinAlgError) as exc:
        raise FitError(f"{label} propensity model: {exc}") from exc
    return fits[0], fits[1], prop


def _check_arm_sizes(data: Dataset, width: int, label: str):
    n1 = int(data.treatments.sum())
    n0 = data.n - n1
    if min(n1, n0) < width + 2:
        raise FitError(f"{label}: arm of size {min(n1, n0)} is too small for {width} parameters")


def build_standard_agents(data: Dataset, design="GLM_GQM_GAM") -> AgentSet:
    """Fit the J = 3 candidate models of a study design.

    ``design`` is ``"GLM_GQM_GAM"`` or ``("Sim3", scenario)``. Outcome models
    are fit separately on each treatment arm; propensity models on all units.
    """
    q = data.q
    if design == "GLM_GQM_GAM":
        glm_map = ParametricFeatures.raw(q)
        gqm_map = ParametricFeatures.with_squares(q)
        # each GAM builds its knots from the units it is fitted on
        gam_width = AdditiveBasis.from_data(data.covariates).width
        specs = [
            ("GLM", glm_map.width, lambda r, x, k: fit_parametric(r, x, glm_map, k)),
            ("GQM", gqm_map.width, lambda r, x, k: fit_parametric(r, x, gqm_map, k)),
            ("GAM", gam_width, lambda r, x, k: fit_additive(r, x, k)),
        ]
        return _assemble(data, specs)
    if isinstance(design, (tuple, list)) and design[0] == "Sim3":
        if q != 4:
            raise ConfigError("Sim3 agents expect the four observed Sim3 covariates")
        feats = sim3_features(int(design[1]))
        return _assemble(data, [_sim3_spec(name, fs) for name, fs in feats.items()])
    raise ConfigError(f"unknown agent design {design!r}")


def _sim3_spec(name: str, fs: FeatureSet):
    prop_map = ParametricFeatures(4, fs.propensity)
    out_map = ParametricFeatures(4, fs.outcome)

    def fit_one(r, x, kind):
        fmap = out_map if kind is Kind.LINEAR_GAUSSIAN else prop_map
        return fit_parametric(r, x, fmap, kind)

    return name, max(prop_map.width, out_map.width), fit_one


def _assemble(data: Dataset, specs: Sequence) -> AgentSet:
    mu1, mu0, pi, labels = [], [], [], []
    for label, width, fit_one in specs:
        _check_arm_sizes(data, width, label)
        a, b, c = _fit_arm_models(data, fit_one, label)
        mu1.append(a)
        mu0.append(b)
        pi.append(c)
        labels.append(label)
    return AgentSet(tuple(mu1), tuple(mu0), tuple(pi), tuple(labels))
