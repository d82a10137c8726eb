"""Coarse text map of which states each method can certify as safe.

Legend per cell: ``#`` tube MPSF (always inside SL-MPSF), ``o`` explicit
box outside the tube set, ``+`` SL-MPSF only, ``.`` none of them.  Full-resolution studies are
available through ``slsfilter reproduce``.

Usage: python3 demos/safe_set_map.py [--grid 16]
"""

import argparse

import numpy as np

from slsfilter.problems import double_integrator
from slsfilter.sim import coverage
from slsfilter.study import SetBundle, grid_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=16)
    args = ap.parse_args()

    bundle = SetBundle.compute(double_integrator())
    study = grid_study(bundle, counts=args.grid)
    f = {k: np.asarray(v).reshape(args.grid, args.grid) for k, v in study.feasible.items()}
    # rows are x2 from top (large) to bottom, columns are x1
    for j in reversed(range(args.grid)):
        row = ""
        for i in range(args.grid):
            if f["tube"][i, j]:
                row += "#"
            elif f["explicit"][i, j]:
                row += "o"
            elif f["sl"][i, j]:
                row += "+"
            else:
                row += "."
        print(row)
    cov = coverage(study, "xi_max")
    print(", ".join(f"{k} {v:.2f}" for k, v in sorted(cov.items())), "(coverage of the maximal RCI set)")


if __name__ == "__main__":
    main()
