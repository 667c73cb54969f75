"""Run (or resume) the desk ablation and print the seed-averaged table.

    python3 scripts/run_desk_experiment.py --out results/desk

Every stage is cached, so an interrupted run picks up where it stopped.
"""

import argparse
import sys
from pathlib import Path

from sgsgan.experiment import VARIANTS, DeskConfig, format_summary, run_desk


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/desk")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    args = p.parse_args()

    def log(msg):
        print(msg, file=sys.stderr, flush=True)

    desk = DeskConfig(out=Path(args.out), seeds=tuple(args.seeds), variants=tuple(args.variants))
    summary = run_desk(desk, log)
    sys.stdout.write(format_summary(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
