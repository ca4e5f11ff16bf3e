"""Monte Carlo study orchestration.

A study is a grid of cells (sample size, number of covariates, scenario,
omission flag) times ``R`` replications. Each replication is a pure
function of ``(config, cell, r)``: it derives its own seed, generates data,
fits the agents, and computes every requested estimator. Replications run in
any order on any number of workers; records are sorted before aggregation,
so the metrics file does not depend on the worker count.
"""

from __future__ import annotations

import concurrent.futures as cf
import contextlib
import dataclasses
import hashlib
import json
import logging
import math
import multiprocessing
import os
import platform
import signal
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__, agents, dgp, drposterior, synthesis
from .datamodel import ConfigError, Dataset, DataError, load_table, standardize
from .nngp import build_graph
from .rng import child_seed

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

FORMAT_TAG = "brsdr-study/1"
STUDIES = ("Sim1", "Sim2", "Sim3", "Sim4", "Empirical")
ENSEMBLES = ("SA", "SIC", "BMA")
SIM3_MODELS = ("M1", "M2", "M3")
STANDARD_MODELS = ("GLM", "GQM", "GAM")
SUCCESS_FRACTION = 0.9

# The birth-weight file as distributed with Stata's cattaneo2 example data.
CATTANEO_SCHEMA = {
    "outcome": "bweight",
    "treatment": "mbsmoke",
    "covariates": ["mage", "medu", "fedu", "nprenatal", "monthslb", "deadkids",
                   "mmarried", "alcohol", "mrace", "fbaby"],
}


class StudyError(RuntimeError):
    pass


class ReplicationTimeout(RuntimeError):
    pass


def model_labels(study: str) -> Tuple[str, ...]:
    return SIM3_MODELS if study == "Sim3" else STANDARD_MODELS


def default_methods(study: str) -> Tuple[str, ...]:
    return model_labels(study) + ENSEMBLES + ("BRS",)


@dataclass(frozen=True)
class Cell:
    study: str
    n: int
    q: int = 4
    scenario: int = 0
    omit_x3: bool = False

    @property
    def label(self) -> str:
        parts = [self.study, f"n={self.n}", f"q={self.q}"]
        if self.study == "Sim3":
            parts.append(f"scenario={self.scenario}")
        if self.study == "Sim2":
            parts.append(f"omit_x3={int(self.omit_x3)}")
        return "/".join(parts)


_SYNTH_FIELDS = {f.name for f in dataclasses.fields(synthesis.SynthesisConfig)} - {"seed"}


@dataclass(frozen=True)
class StudyConfig:
    study: str
    n: Tuple[int, ...] = (200,)
    replications: int = 100
    methods: Tuple[str, ...] = ()
    q: Tuple[int, ...] = (4,)
    scenario: Tuple[int, ...] = (1,)
    omit_x3: Tuple[bool, ...] = (False,)
    synthesis: synthesis.SynthesisConfig = field(
        default_factory=lambda: synthesis.SynthesisConfig(store_latent=False))
    base_seed: int = 0
    parallelism: int = 1
    output_dir: str = "results"
    timeout_seconds: float = 600.0
    data_path: Optional[str] = None
    # replication indices forced to fail; a testing aid for the failure path
    inject_faults: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigError(f"study must be one of {STUDIES}, got {self.study!r}")
        if not self.methods:
            object.__setattr__(self, "methods", default_methods(self.study))
        allowed = set(default_methods(self.study))
        bad = [m for m in self.methods if m not in allowed]
        if bad:
            raise ConfigError(f"methods {bad} are not available for {self.study}")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.timeout_seconds <= 0:
            raise ConfigError("timeout_seconds must be positive")
        if self.study == "Sim3" and any(s not in (1, 2, 3, 4) for s in self.scenario):
            raise ConfigError("Sim3 scenarios are 1..4")

    def cells(self) -> List[Cell]:
        if self.study == "Empirical":
            return []
        out = []
        for n in self.n:
            if self.study == "Sim1":
                out.append(Cell("Sim1", n, 4))
            elif self.study == "Sim2":
                out += [Cell("Sim2", n, q, 0, bool(o)) for q in self.q for o in self.omit_x3]
            elif self.study == "Sim3":
                out += [Cell("Sim3", n, 4, s) for s in self.scenario]
            else:
                out += [Cell("Sim4", n, q) for q in self.q]
        return out

    def to_mapping(self) -> dict:
        d = {"format": FORMAT_TAG}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "synthesis":
                v = {k: (list(x) if isinstance(x, tuple) else x)
                     for k, x in dataclasses.asdict(v).items() if k in _SYNTH_FIELDS and x is not None}
            elif isinstance(v, tuple):
                v = list(v)
            if v is not None:
                d[f.name] = v
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_mapping(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **kw) -> "StudyConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return dataclasses.replace(self, **kw) if kw else self


def config_from_mapping(d: dict) -> StudyConfig:
    """Build a StudyConfig from a parsed file; unknown keys are errors."""
    d = dict(d)
    tag = d.pop("format", None)
    if tag != FORMAT_TAG:
        raise ConfigError(f"config format must be {FORMAT_TAG!r}, got {tag!r}")
    known = {f.name for f in dataclasses.fields(StudyConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    synth = dict(d.pop("synthesis", {}))
    unknown = sorted(set(synth) - _SYNTH_FIELDS)
    if unknown:
        raise ConfigError(f"unknown synthesis keys: {unknown}")
    for k in ("beta_bar", "psi_bounds"):
        if k in synth:
            synth[k] = tuple(synth[k])
    synth.setdefault("store_latent", False)
    kw = {}
    for k, v in d.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    for k in ("n", "q", "scenario", "omit_x3"):
        if k in kw and not isinstance(kw[k], tuple):
            kw[k] = (kw[k],)
    return StudyConfig(synthesis=synthesis.SynthesisConfig(**synth), **kw)


def load_config(path) -> StudyConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_mapping(raw)


# ------------------------------------------------------------ estimation


@dataclass(frozen=True)
class Estimate:
    estimate: float
    lower: float
    upper: float
    se: float


@dataclass
class ReplicationRecord:
    cell: str
    r: int
    seed: int
    true_ate: float
    ok: bool
    estimates: Dict[str, Estimate] = field(default_factory=dict)
    runtime: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["estimates"] = {k: dataclasses.asdict(v) for k, v in self.estimates.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ReplicationRecord":
        d = dict(d)
        d["estimates"] = {k: Estimate(**v) for k, v in d["estimates"].items()}
        return cls(**d)


def replication_seed(base_seed: int, cell: Cell, r: int) -> int:
    return child_seed(base_seed, f"{cell.label}/rep{r}")


def estimate_methods(data: Dataset, agent_set: agents.AgentSet, methods: Sequence[str],
                     synth: synthesis.SynthesisConfig, seed: int,
                     timings: Optional[Dict[str, float]] = None) -> Dict[str, Estimate]:
    """Every requested estimator on one dataset with already-fitted agents."""
    timings = {} if timings is None else timings
    preds = agents.predict_agents(agent_set, data.covariates)
    out = {}
    for j, label in enumerate(agent_set.labels):
        if label in methods:
            t0 = time.perf_counter()
            e = np.eye(agent_set.J)[j]
            point, se, (lo, hi) = drposterior.combined_dr_estimate(preds, e, e, e, data)
            out[label] = Estimate(point, lo, hi, se)
            timings[label] = time.perf_counter() - t0
    for method in ENSEMBLES:
        if method in methods:
            t0 = time.perf_counter()
            w = [drposterior.ensemble_weights(method, agent_set.criteria(k, "aic"),
                                              agent_set.criteria(k, "bic")).w
                 for k in ("mu1", "mu0", "pi")]
            point, se, (lo, hi) = drposterior.combined_dr_estimate(preds, *w, data)
            out[method] = Estimate(point, lo, hi, se)
            timings[method] = time.perf_counter() - t0
    if "BRS" in methods:
        t0 = time.perf_counter()
        post = run_brs(data, preds, synth, seed)
        out["BRS"] = Estimate(post.point, post.interval[0], post.interval[1], post.se)
        timings["BRS"] = time.perf_counter() - t0
    return out


def run_brs(data: Dataset, preds, synth: synthesis.SynthesisConfig, seed: int,
            return_draws: bool = False):
    """Three synthesis chains (mu1, mu0, pi) on a shared neighbour graph,
    then the Bayesian-bootstrap DR posterior."""
    mu1, mu0, pi = preds
    xs = standardize(data)
    graph = build_graph(xs.values, synth.m)
    treated = data.treatments == 1

    def chain_cfg(label):
        return dataclasses.replace(synth, seed=child_seed(seed, f"brs/{label}"))

    d1 = synthesis.run_continuous_gibbs(data.outcomes, mu1, xs, chain_cfg("mu1"),
                                        observed=treated, graph=graph)
    d0 = synthesis.run_continuous_gibbs(data.outcomes, mu0, xs, chain_cfg("mu0"),
                                        observed=~treated, graph=graph)
    dp = synthesis.run_binary_gibbs(data.treatments, pi, xs, chain_cfg("pi"), graph=graph)
    post = drposterior.bootstrap_dr_posterior(d1.mean_function(), d0.mean_function(),
                                              dp.mean_function(), data,
                                              seed=child_seed(seed, "brs/bootstrap"))
    if return_draws:
        return post, (d1, d0, dp)
    return post


def agent_design(cell_or_study, scenario: int = 1):
    study = getattr(cell_or_study, "study", cell_or_study)
    if study == "Sim3":
        return ("Sim3", getattr(cell_or_study, "scenario", scenario))
    return "GLM_GQM_GAM"


@contextlib.contextmanager
def _deadline(seconds: float):
    """Raise ReplicationTimeout in the main thread after ``seconds``."""
    usable = (threading.current_thread() is threading.main_thread()
              and hasattr(signal, "setitimer"))
    if not usable:
        yield
        return

    def _handler(signum, frame):
        raise ReplicationTimeout(f"replication exceeded {seconds:g} s")

    previous = signal.signal(signal.SIGALRM, _handler)
    signal.setitimer(signal.ITIMER_REAL, seconds)
    try:
        yield
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0)
        signal.signal(signal.SIGALRM, previous)


def run_replication(config: StudyConfig, cell: Cell, r: int) -> ReplicationRecord:
    """One replication of one cell. Failures are caught and recorded."""
    seed = replication_seed(config.base_seed, cell, r)
    record = ReplicationRecord(cell.label, r, seed, math.nan, ok=False)
    try:
        with _deadline(config.timeout_seconds):
            if r in config.inject_faults:
                raise RuntimeError("injected fault")
            gen = dgp.generate(cell.study, cell.n, seed, q=cell.q, omit_x3=cell.omit_x3,
                               scenario=cell.scenario)
            record.true_ate = gen.true_ate
            t0 = time.perf_counter()
            agent_set = agents.build_standard_agents(gen.data, agent_design(cell))
            record.runtime["agents"] = time.perf_counter() - t0
            record.estimates = estimate_methods(gen.data, agent_set, config.methods,
                                                config.synthesis, seed, record.runtime)
        record.ok = True
    except Exception as exc:  # recorded, never propagated: the study goes on
        record.estimates = {}
        record.error = f"{type(exc).__name__}: {exc}"
        log.warning("%s rep %d failed: %s", cell.label, r, record.error)
    return record


# ------------------------------------------------------------ aggregation


@dataclass(frozen=True)
class MetricsRow:
    study: str
    n: int
    q: int
    scenario: int
    omit_x3: bool
    method: str
    bias: float
    rmse: float
    cp_percent: float
    al: float
    runtime_seconds: float
    R_effective: int


METRIC_COLUMNS = ("study", "n", "q", "scenario", "omit_x3", "method", "bias", "rmse",
                  "cp_percent", "al", "R_effective")


def aggregate_metrics(records: Iterable[ReplicationRecord], true_ate: Optional[float] = None,
                      cell: Optional[Cell] = None, methods: Sequence[str] = ()) -> List[MetricsRow]:
    """Bias, RMSE, coverage (%) and average interval length per method.

    Only successful replications enter. ``true_ate`` defaults to the value
    stored in the records.
    """
    ok = sorted((rec for rec in records if rec.ok), key=lambda rec: rec.r)
    if not ok:
        raise StudyError("no successful replications to aggregate")
    tau = ok[0].true_ate if true_ate is None else true_ate
    methods = list(methods) or list(ok[0].estimates)
    cell = cell or Cell("?", 0)
    rows = []
    for method in methods:
        est = np.array([rec.estimates[method].estimate for rec in ok])
        lo = np.array([rec.estimates[method].lower for rec in ok])
        hi = np.array([rec.estimates[method].upper for rec in ok])
        err = est - tau
        runtime = float(np.mean([rec.runtime.get(method, 0.0) for rec in ok]))
        rows.append(MetricsRow(
            cell.study, cell.n, cell.q, cell.scenario, cell.omit_x3, method,
            bias=float(err.mean()), rmse=float(np.sqrt(np.mean(err**2))),
            cp_percent=float(100 * np.mean((lo <= tau) & (tau <= hi))),
            al=float(np.mean(hi - lo)), runtime_seconds=runtime, R_effective=len(ok)))
    return rows


def write_metrics(rows: Sequence[MetricsRow], path) -> None:
    """Tab-separated metrics; runtimes are kept out so the file is reproducible."""
    with open(path, "w") as fh:
        fh.write("\t".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            vals = [getattr(row, c) for c in METRIC_COLUMNS]
            fh.write("\t".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals)
                     + "\n")


def read_metrics(path) -> List[dict]:
    types = {"n": int, "q": int, "scenario": int, "R_effective": int,
             "omit_x3": lambda s: s == "True", "study": str, "method": str}
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            vals = line.rstrip("\n").split("\t")
            rows.append({k: types.get(k, float)(v) for k, v in zip(header, vals)})
    return rows


def write_records(records: Sequence[ReplicationRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_records(path) -> List[ReplicationRecord]:
    with open(path) as fh:
        return [ReplicationRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# ------------------------------------------------------------ studies


@dataclass
class StudyResult:
    records: List[ReplicationRecord]
    metrics: List[MetricsRow]
    success: Dict[str, float]
    output_dir: Path

    @property
    def ok(self) -> bool:
        return all(v >= SUCCESS_FRACTION for v in self.success.values())


def prepare_output_dir(path) -> Path:
    """Create ``path`` and prove it is writable, before any computation."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _task(args):
    config, cell, r = args
    return run_replication(config, cell, r)


def versions() -> dict:
    import numba
    import scipy
    return {"brsdr": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def source_digest() -> str:
    """Hash of the package sources, to tie stored results to the code that made them."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def summarize(config: StudyConfig, records: Sequence[ReplicationRecord]):
    """Sort records into (cell, r) order and aggregate each cell.

    Returns ``(records, metrics, success)`` where ``success`` maps a cell
    label to its fraction of successful replications.
    """
    cells = config.cells()
    order = {c.label: k for k, c in enumerate(cells)}
    records = sorted(records, key=lambda rec: (order[rec.cell], rec.r))
    metrics, success = [], {}
    for cell in cells:
        recs = [rec for rec in records if rec.cell == cell.label]
        success[cell.label] = sum(rec.ok for rec in recs) / len(recs) if recs else 0.0
        if any(rec.ok for rec in recs):
            metrics += aggregate_metrics(recs, cell=cell, methods=config.methods)
    return records, metrics, success


_EXECUTION_FIELDS = ("parallelism", "output_dir", "timeout_seconds")


def _content(mapping: dict) -> dict:
    return {k: v for k, v in mapping.items() if k not in _EXECUTION_FIELDS}


def load_study(config: StudyConfig) -> Optional[StudyResult]:
    """Re-read a finished study from ``config.output_dir``.

    Returns None unless the stored manifest was written for the same study
    settings (worker count, output path and timeout may differ) by the same
    package sources and every replication record is present.
    """
    out = Path(config.output_dir)
    try:
        manifest = json.loads((out / "manifest.json").read_text())
        records = read_records(out / "records.jsonl")
    except (OSError, ValueError):
        return None
    if (_content(manifest.get("config", {})) != _content(config.to_mapping())
            or manifest.get("source_digest") != source_digest()
            or len(records) != len(config.cells()) * config.replications):
        return None
    records, metrics, success = summarize(config, records)
    return StudyResult(records, metrics, success, out)


def run_study(config: StudyConfig, progress=None) -> StudyResult:
    """Run every cell x replication, then write records, metrics and manifest."""
    if config.study == "Empirical":
        raise ConfigError("use run_empirical for the empirical study")
    out = prepare_output_dir(config.output_dir)
    cells = config.cells()
    tasks = [(config, cell, r) for cell in cells for r in range(config.replications)]
    started = time.time()
    records: List[ReplicationRecord] = []
    if config.parallelism == 1:
        for t in tasks:
            records.append(_task(t))
            if progress:
                progress(records[-1])
    else:
        ctx = multiprocessing.get_context("fork")
        with cf.ProcessPoolExecutor(config.parallelism, mp_context=ctx) as pool:
            for rec in pool.map(_task, tasks, chunksize=1):
                records.append(rec)
                if progress:
                    progress(rec)
    records, metrics, success = summarize(config, records)
    write_records(records, out / "records.jsonl")
    write_metrics(metrics, out / "metrics.tsv")
    with open(out / "runtimes.tsv", "w") as fh:
        fh.write("cell\tmethod\tmean_seconds\n")
        for row in metrics:
            fh.write(f"{Cell(row.study, row.n, row.q, row.scenario, row.omit_x3).label}"
                     f"\t{row.method}\t{row.runtime_seconds:.4f}\n")
    manifest = {
        "format": FORMAT_TAG, "config": config.to_mapping(), "config_hash": config.config_hash(),
        "base_seed": config.base_seed,
        "replication_seeds": {rec.cell + f"/rep{rec.r}": rec.seed for rec in records},
        "failures": {rec.cell + f"/rep{rec.r}": rec.error for rec in records if not rec.ok},
        "success_fraction": success, "versions": versions(), "source_digest": source_digest(),
        "wall_seconds": round(time.time() - started, 3),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return StudyResult(records, metrics, success, out)


# ------------------------------------------------------------ empirical


@dataclass(frozen=True)
class EmpiricalRow:
    method: str
    estimate: float
    se: float
    lower: float
    upper: float

    @property
    def length(self) -> float:
        return self.upper - self.lower


def load_cattaneo(path, schema=None) -> Dataset:
    schema = schema or CATTANEO_SCHEMA
    if path is None or not Path(path).exists():
        raise DataError(
            f"birth-weight data file not found: {path!r}. Expected a comma- or tab-separated "
            f"table with a header naming the outcome column {schema['outcome']!r}, the 0/1 "
            f"treatment column {schema['treatment']!r} and the covariates "
            f"{', '.join(schema['covariates'])} (the cattaneo2 data, 4642 rows).")
    return load_table(path, schema)


def run_empirical(config: StudyConfig, schema=None):
    """All requested estimators on the birth-weight data; returns (rows, naive)."""
    data = load_cattaneo(config.data_path, schema)
    out = prepare_output_dir(config.output_dir)
    agent_set = agents.build_standard_agents(data)
    est = estimate_methods(data, agent_set, config.methods, config.synthesis,
                           child_seed(config.base_seed, "empirical"))
    rows = [EmpiricalRow(m, e.estimate, e.se, e.lower, e.upper) for m, e in est.items()]
    naive = data.naive_difference()
    with open(out / "empirical.tsv", "w") as fh:
        fh.write("method\testimate\tse\tlower\tupper\tlength\n")
        for row in rows:
            vals = (row.estimate, row.se, row.lower, row.upper, row.length)
            fh.write(row.method + "".join(f"\t{float(v)!r}" for v in vals) + "\n")
        fh.write(f"naive\t{float(naive)!r}\tnan\tnan\tnan\tnan\n")
    with open(out / "manifest.json", "w") as fh:
        json.dump({"format": FORMAT_TAG, "config": config.to_mapping(),
                   "config_hash": config.config_hash(), "n": data.n,
                   "versions": versions()}, fh, indent=2, sort_keys=True)
    return rows, naive


def read_empirical(path):
    """Parse ``empirical.tsv`` back into ``(rows, naive)``."""
    rows, naive = [], math.nan
    with open(path) as fh:
        fh.readline()
        for line in fh:
            method, est, se, lo, hi, _ = line.rstrip("\n").split("\t")
            if method == "naive":
                naive = float(est)
            else:
                rows.append(EmpiricalRow(method, float(est), float(se), float(lo), float(hi)))
    return rows, naive
