"""Data containers shared by every stage of the pipeline.

All containers are frozen dataclasses holding numpy arrays that are marked
read-only on construction, so they can be handed to worker processes and
samplers without defensive copies.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

CLIP_EPS = 0.01


class DataError(ValueError):
    """Raised when input data violates a container invariant."""


class SchemaError(DataError):
    """Raised when a tabular file does not match the requested schema."""


class ParseError(DataError):
    """Raised when a cell of a tabular file cannot be parsed as a number."""


class ConfigError(ValueError):
    """Raised for invalid run or model configuration."""


class Target(enum.Enum):
    OUTCOME_TREATED = "mu1"
    OUTCOME_CONTROL = "mu0"
    PROPENSITY = "pi"


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Observed (Y, X, Z) triples with an optional known ATE."""

    outcomes: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    true_ate: Optional[float] = None
    column_names: tuple = ()

    def __post_init__(self):
        y = _frozen(self.outcomes)
        x = _frozen(self.covariates)
        if x.ndim == 1:
            x = _frozen(x.reshape(-1, 1))
        z_raw = np.asarray(self.treatments, dtype=float)
        if y.ndim != 1:
            raise DataError("outcomes must be one-dimensional")
        n = y.shape[0]
        if z_raw.shape != (n,) or x.ndim != 2 or x.shape[0] != n:
            raise DataError(
                f"length mismatch: outcomes {y.shape}, treatments {z_raw.shape}, "
                f"covariates {x.shape}"
            )
        if n < 2:
            raise DataError("need at least two units")
        if not np.all(np.isfinite(y)):
            raise DataError("non-finite value in outcomes")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite value in covariates")
        bad = ~((z_raw == 0) | (z_raw == 1))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"treatment value {z_raw[i]!r} at row {i} is not 0 or 1")
        z = _frozen(z_raw, dtype=np.int64)
        if z.sum() == 0 or z.sum() == n:
            raise DataError("both treatment arms must be non-empty")
        names = tuple(self.column_names) or tuple(f"X{k + 1}" for k in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError("column_names length does not match covariate columns")
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treatments", z)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "column_names", names)
        if self.true_ate is not None:
            object.__setattr__(self, "true_ate", float(self.true_ate))

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def q(self) -> int:
        return self.covariates.shape[1]

    def naive_difference(self) -> float:
        z = self.treatments == 1
        return float(self.outcomes[z].mean() - self.outcomes[~z].mean())


@dataclass(frozen=True)
class StandardizedCovariates:
    values: np.ndarray
    centers: np.ndarray
    scales: np.ndarray

    def destandardize(self) -> np.ndarray:
        return self.values * self.scales + self.centers


def standardize(data: Dataset) -> StandardizedCovariates:
    """Column-wise z-scores using the sample (n - 1) standard deviation.

    Constant columns get scale 1 and become all zeros.
    """
    x = data.covariates
    centers = x.mean(axis=0)
    dev = x - centers
    # rescale before squaring so tiny-magnitude columns do not underflow
    mag = np.abs(dev).max(axis=0)
    safe = np.where(mag > 0, mag, 1.0)
    scales = safe * (dev / safe).std(axis=0, ddof=1)
    constant = ~(scales > 0) | np.all(x == x[0], axis=0)
    scales = np.where(constant, 1.0, scales)
    values = dev / scales
    values[:, constant] = 0.0
    return StandardizedCovariates(_frozen(values), _frozen(centers), _frozen(scales))


@dataclass(frozen=True)
class AgentPredictive:
    """Per-unit predictive means and variances of J candidate models.

    ``means[i, j]`` and ``variances[i, j]`` are the normal moments the j-th
    model reports for unit i.
    """

    target: Target
    means: np.ndarray
    variances: np.ndarray
    model_labels: tuple = field(default=())

    def __post_init__(self):
        a = _frozen(self.means)
        b = _frozen(self.variances)
        if a.ndim != 2 or a.shape != b.shape:
            raise DataError(f"means {a.shape} and variances {b.shape} must be equal n x J")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise DataError("non-finite agent moment")
        if np.any(b <= 0):
            raise DataError("agent variances must be strictly positive")
        if self.target is Target.PROPENSITY and (
            np.any(a < CLIP_EPS) or np.any(a > 1 - CLIP_EPS)
        ):
            raise DataError(f"propensity means must lie in [{CLIP_EPS}, {1 - CLIP_EPS}]")
        labels = tuple(self.model_labels) or tuple(f"M{j + 1}" for j in range(a.shape[1]))
        if len(labels) != a.shape[1]:
            raise DataError("model_labels length does not match J")
        object.__setattr__(self, "means", a)
        object.__setattr__(self, "variances", b)
        object.__setattr__(self, "model_labels", labels)

    @property
    def n(self) -> int:
        return self.means.shape[0]

    @property
    def J(self) -> int:
        return self.means.shape[1]


def load_table(path, schema: Mapping[str, object]) -> Dataset:
    """Read a comma- or tab-delimited file with a header row.

    ``schema`` maps ``"outcome"`` and ``"treatment"`` to column names and
    ``"covariates"`` to a list of column names.
    """
    path = Path(path)
    try:
        outcome = schema["outcome"]
        treatment = schema["treatment"]
        covariates = list(schema["covariates"])
    except KeyError as exc:
        raise SchemaError(f"schema is missing the {exc.args[0]!r} entry") from None
    if not covariates:
        raise SchemaError("schema must name at least one covariate column")

    with path.open(newline="") as fh:
        head = fh.readline()
        fh.seek(0)
        delimiter = "\t" if head.count("\t") > head.count(",") else ","
        reader = csv.reader(fh, delimiter=delimiter)
        header = [h.strip().strip('"') for h in next(reader)]
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    index = {name: k for k, name in enumerate(header)}
    wanted = [outcome, treatment, *covariates]
    for name in wanted:
        if name not in index:
            raise SchemaError(f"column {name!r} not found in {path.name}")
    cols = [index[name] for name in wanted]

    values = np.empty((len(rows), len(cols)))
    for r, row in enumerate(rows):
        for c, k in enumerate(cols):
            cell = row[k].strip().strip('"') if k < len(row) else ""
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise ParseError(
                    f"row {r + 1}, column {wanted[c]!r}: cannot parse {cell!r}"
                ) from None

    return Dataset(
        outcomes=values[:, 0],
        treatments=values[:, 1],
        covariates=values[:, 2:],
        column_names=tuple(covariates),
    )


def clip_probability(p, eps: float = CLIP_EPS) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)

