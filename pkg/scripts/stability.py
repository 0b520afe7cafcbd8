"""Importance-ranking stability across mtry on simulated high-dimensional data.

Thin wrapper over ``mixedforest stability``; extra flags pass through.

    python3 scripts/stability.py --mtry-values 100,300,600 --etas 0,5,10,20 --out stab.csv
"""

import sys

from mixedforest.cli import main

if __name__ == "__main__":
    sys.exit(main(["stability", "--dim", "high"] + sys.argv[1:]))
