"""Run one Monte Carlo study from a TOML file and print its metrics table.

    python scripts/run_study.py configs/sim1.toml [--parallelism 4] [--replications 10]
"""

import argparse
import sys

from brsdr import harness


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--output-dir")
    args = p.parse_args(argv)
    cfg = harness.load_config(args.config).with_overrides(
        parallelism=args.parallelism, replications=args.replications, output_dir=args.output_dir)
    result = harness.run_study(cfg, progress=lambda rec: print(
        f"{rec.cell} rep {rec.r}: {'ok' if rec.ok else rec.error}", flush=True))
    print("\t".join(harness.METRIC_COLUMNS))
    for row in result.metrics:
        print("\t".join(f"{getattr(row, k):.4g}" if isinstance(getattr(row, k), float)
                        else str(getattr(row, k)) for k in harness.METRIC_COLUMNS))
    print(f"results written to {result.output_dir}")
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
