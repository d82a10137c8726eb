"""Synthesise the explicit safe box offline, then show the periodic backup cycle.

A learned policy that always pushes at twice the input bound is rejected at
every step, so the stored backup law runs and brings the state back into the
box every ``N`` steps.

Usage: python3 demos/explicit_safe_set.py [--horizon 10] [--out safe_set.json]
"""

import argparse

import numpy as np

from slsfilter.explicit_filter import run_algorithm1, synthesize
from slsfilter.problems import double_integrator
from slsfilter.sim import VertexDisturbance, constant_policy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--horizon", type=int, default=10)
    ap.add_argument("--out", default=None, help="optional JSON file for the synthesised set")
    args = ap.parse_args()

    p = double_integrator(N=args.horizon)
    S = synthesize(p)
    print(f"center {np.round(S.center, 4) + 0.0}, alpha {S.alpha:.4f}, horizon {S.horizon}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(S.to_json())

    x0 = S.center + 0.8 * S.radii
    ep = run_algorithm1(S, p, x0, constant_policy([6.0]), VertexDisturbance(p.W, seed=3), 3 * S.horizon)
    for t in range(0, len(ep.states), S.horizon):
        slack = S.slack(ep.states[t]).min()
        print(f"t={t:3d}  x={np.round(ep.states[t], 3)}  min box slack {slack:+.3f}")
    print(f"violations: {ep.violations}")


if __name__ == "__main__":
    main()
