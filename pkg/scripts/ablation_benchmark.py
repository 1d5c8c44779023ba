"""Run the FF / FA / CL ablation on the synthetic phantom benchmark.

    python3 scripts/ablation_benchmark.py --out runs/ablation --seeds 0 1 2
    python3 scripts/ablation_benchmark.py --config my.ini --set train.epochs=4
"""

import argparse
import logging
import os
import sys

from aasn.benchmark import run_benchmark
from aasn.config import RunConfig


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        key, _, val = item.partition("=")
        cfg.set(key, val)
    os.makedirs(args.out, exist_ok=True)
    res = run_benchmark(cfg, args.out, tuple(args.seeds))
    table = res.table()
    print(table)
    trend = res.trend()
    for k, ok in trend.items():
        print(f"{k}: {'ok' if ok else 'NOT MET'}")
    print(f"total {res.seconds / 60:.1f} min")
    with open(os.path.join(args.out, "summary.tsv"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    return 0 if all(trend.values()) else 3


if __name__ == "__main__":
    sys.exit(main())
