"""Command-line entry point: ``brsdr {simulate,empirical,validate,dump-draws}``.

Settings come from a TOML study file; any flag given on the command line
overrides the corresponding file value.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import agents, dgp, harness, synthesis, validation
from .datamodel import ConfigError, DataError, standardize
from .nngp import build_graph
from .rng import child_seed


def _overrides(args) -> dict:
    kw = {
        "n": tuple(args.n) if args.n else None,
        "replications": args.replications,
        "parallelism": args.parallelism,
        "base_seed": args.base_seed,
        "output_dir": args.output_dir,
        "timeout_seconds": args.timeout,
    }
    if getattr(args, "data", None):
        kw["data_path"] = args.data
    return kw


def _load(args, default_study: str) -> harness.StudyConfig:
    if args.config:
        cfg = harness.load_config(args.config)
    else:
        cfg = harness.StudyConfig(study=args.study or default_study)
    cfg = cfg.with_overrides(**_overrides(args))
    if args.n_iter is not None or args.burn_in is not None:
        syn = dataclasses.replace(cfg.synthesis,
                                  **{k: v for k, v in (("n_iter", args.n_iter),
                                                       ("burn_in", args.burn_in)) if v is not None})
        cfg = dataclasses.replace(cfg, synthesis=syn)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _load(args, "Sim1")

    def progress(rec):
        status = "ok" if rec.ok else f"FAILED ({rec.error})"
        print(f"{rec.cell} rep {rec.r}: {status}", flush=True)

    result = harness.run_study(cfg, progress=None if args.quiet else progress)
    for row in result.metrics:
        print(f"{row.study}\tn={row.n}\t{row.method}\tbias={row.bias:+.3f}\trmse={row.rmse:.3f}"
              f"\tCP={row.cp_percent:.1f}\tAL={row.al:.3f}\tR={row.R_effective}")
    print(f"results written to {result.output_dir}")
    return 0 if result.ok else 1


def cmd_empirical(args) -> int:
    cfg = _load(args, "Empirical")
    rows, naive = harness.run_empirical(cfg)
    print("method\testimate\tse\t95% interval\tlength")
    for r in rows:
        print(f"{r.method}\t{r.estimate:.2f}\t{r.se:.2f}\t[{r.lower:.2f}, {r.upper:.2f}]\t{r.length:.2f}")
    print(f"naive difference in means: {naive:.2f}")
    return 0


def cmd_validate(args) -> int:
    checks = validation.run_validation(quick=args.quick)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:32s} {c.detail}  ({c.seconds:.1f} s)")
    return 0 if all(c.passed for c in checks) else 1


def cmd_dump_draws(args) -> int:
    gen = dgp.generate(args.study, args.n, args.seed, q=args.q, scenario=args.scenario,
                       omit_x3=args.omit_x3)
    data = gen.data
    agent_set = agents.build_standard_agents(data, harness.agent_design(args.study, args.scenario))
    mu1, mu0, pi = agents.predict_agents(agent_set, data.covariates)
    xs = standardize(data)
    cfg = synthesis.SynthesisConfig(n_iter=args.n_iter, burn_in=args.burn_in, store_latent=False,
                                    seed=child_seed(args.seed, f"brs/{args.target}"))
    graph = build_graph(xs.values, cfg.m)
    if args.target == "pi":
        draws = synthesis.run_binary_gibbs(data.treatments, pi, xs, cfg, graph=graph)
    else:
        agent, arm = (mu1, 1) if args.target == "mu1" else (mu0, 0)
        draws = synthesis.run_continuous_gibbs(data.outcomes, agent, xs, cfg,
                                               observed=data.treatments == arm, graph=graph)
    synthesis.dump_draws(draws, args.out, probe_units=tuple(args.probe))
    print(f"wrote {draws.n_draws} draws to {args.out}; "
          f"psi acceptance {', '.join(f'{a:.2f}' for a in draws.acceptance_rates)}")
    return 0


def _study_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML study file")
    p.add_argument("--study", choices=harness.STUDIES)
    p.add_argument("--n", type=int, nargs="+", help="sample size(s)")
    p.add_argument("--replications", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--base-seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--timeout", type=float, help="per-replication timeout in seconds")
    p.add_argument("--n-iter", type=int)
    p.add_argument("--burn-in", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brsdr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    _study_flags(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("empirical", help="birth-weight analysis")
    _study_flags(p)
    p.add_argument("--data", help="path to the cattaneo2 table (csv or tsv)")
    p.set_defaults(func=cmd_empirical)

    p = sub.add_parser("validate", help="run the invariant and oracle checks")
    p.add_argument("--quick", action="store_true", help="skip the Geweke runs")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("dump-draws", help="write synthesis draws for one dataset")
    p.add_argument("--study", choices=harness.STUDIES[:-1], default="Sim1")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--q", type=int, default=4)
    p.add_argument("--scenario", type=int, default=1)
    p.add_argument("--omit-x3", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", choices=("mu1", "mu0", "pi"), default="mu1")
    p.add_argument("--n-iter", type=int, default=2000)
    p.add_argument("--burn-in", type=int, default=500)
    p.add_argument("--probe", type=int, nargs="+", default=[0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_draws)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
