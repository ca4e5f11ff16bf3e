"""Run (or reuse) the four desk-scale Monte Carlo studies behind the acceptance tests.

Outputs go to ``results/acceptance/<name>`` (or ``BRSDR_ACCEPTANCE_DIR``),
exactly where ``tests/test_acceptance.py`` looks for them, so running this
first lets the acceptance tests finish in seconds.

    python scripts/run_acceptance_studies.py [--parallelism 8] [--only sim1-n200 ...] [--fresh]
"""

import argparse
import os
import sys
import time
from pathlib import Path

from brsdr import harness

ROOT = Path(__file__).resolve().parents[1]
STUDIES = ROOT / "configs" / "acceptance"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--parallelism", type=int, default=max(1, os.cpu_count() or 1))
    p.add_argument("--only", nargs="+", help="study names (file stems in configs/acceptance)")
    p.add_argument("--fresh", action="store_true", help="ignore stored results")
    args = p.parse_args(argv)
    results = Path(os.environ.get("BRSDR_ACCEPTANCE_DIR", ROOT / "results" / "acceptance"))
    names = args.only or sorted(f.stem for f in STUDIES.glob("*.toml"))
    status = 0
    for name in names:
        cfg = harness.load_config(STUDIES / f"{name}.toml").with_overrides(
            output_dir=str(results / name), parallelism=args.parallelism)
        t0 = time.perf_counter()
        res = None if args.fresh else harness.load_study(cfg)
        how = "reused"
        if res is None:
            res = harness.run_study(cfg)
            how = f"ran in {time.perf_counter() - t0:.0f} s"
        status |= 0 if res.ok else 1
        print(f"{name}: {how}")
        for row in res.metrics:
            print(f"  n={row.n} scenario={row.scenario} {row.method:4s} bias={row.bias:+.4f} "
                  f"rmse={row.rmse:.4f} CP={row.cp_percent:.1f} R={row.R_effective}")
    return status


if __name__ == "__main__":
    sys.exit(main())
