"""Per-dataset mean test MSE of the stochastic methods against a plain forest.

    python3 scripts/error_benchmark.py --datasets 20 --splits 20 --out errors.csv
"""

import argparse
import csv
import sys

from mixedforest.simulation import SimulationConfig, error_benchmark


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--methods", default="smert,sreemtree,smerf,sreemforest,rf")
    ap.add_argument("--datasets", type=int, default=20)
    ap.add_argument("--splits", type=int, default=20)
    ap.add_argument("--trees", type=int, default=100)
    ap.add_argument("--mtry", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)

    methods = args.methods.split(",")
    cfg = SimulationConfig.low("stochastic", seed=args.seed)
    err = error_benchmark(cfg, methods, args.datasets, args.splits, rf_trees=args.trees,
                          n_trees=args.trees, mtry=args.mtry)
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["dataset"] + methods)
    for d in range(args.datasets):
        w.writerow([d + 1] + [err[m][d] for m in methods])


if __name__ == "__main__":
    main()
