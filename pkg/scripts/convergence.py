"""Log-likelihood traces of SMERF for several mtry values.

Writes ``mtry,run,iteration,loglik`` rows plus a convergence count per mtry
on stderr.

    python3 scripts/convergence.py --mtry-values 1,2,4,6 --runs 20 --out traces.csv
"""

import argparse
import csv
import sys

from mixedforest.em import fit
from mixedforest.simulation import SimulationConfig, method_spec, simulate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--method", default="smerf")
    ap.add_argument("--mtry-values", default="1,2,4,6")
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--trees", type=int, default=100)
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)

    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["mtry", "run", "iteration", "loglik"])
    for mtry in map(int, args.mtry_values.split(",")):
        conv = 0
        for r in range(args.runs):
            s = simulate(SimulationConfig.low("stochastic", seed=r))
            model = fit(s.dataset, method_spec(args.method, s.config, seed=r, mtry=mtry,
                                               n_trees=args.trees))
            conv += model.converged
            for it, ll in enumerate(model.loglik_trace, 1):
                w.writerow([mtry, r + 1, it, ll])
        print(f"# mtry={mtry}: converged {conv}/{args.runs}", file=sys.stderr)


if __name__ == "__main__":
    main()
