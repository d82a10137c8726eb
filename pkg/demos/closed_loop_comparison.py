"""Run the four safety filters on the double integrator against an aggressive learned policy.

Usage: python3 demos/closed_loop_comparison.py [--steps 40] [--seed 0]
"""

import argparse

import numpy as np

from slsfilter.baseline_mpsf import TubeMPSF
from slsfilter.explicit_filter import ExplicitFilter, RCIFilter
from slsfilter.problems import double_integrator
from slsfilter.sim import AdversarialPolicy, VertexDisturbance, run_episode
from slsfilter.sl_mpsf import SLMPSF
from slsfilter.study import SetBundle


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    p = double_integrator()
    bundle = SetBundle.compute(p)
    x0 = bundle.explicit.center
    filters = {
        "sl-mpsf": SLMPSF(p),
        "tube-mpsf": TubeMPSF(bundle.tube),
        "explicit": ExplicitFilter(bundle.explicit, p),
        "rci-hull": RCIFilter(bundle.rci_hull, p),
    }
    print(f"start x0 = {np.round(x0, 3) + 0.0}, explicit box radius alpha = {bundle.explicit.alpha:.3f}")
    print(f"{'filter':<10} {'violations':>10} {'engaged':>8} {'mean |u-u_L|':>13} {'ms/step':>8}")
    for name, flt in filters.items():
        ep = run_episode(flt, AdversarialPolicy(p.U, scale=2.0, seed=args.seed),
                         VertexDisturbance(p.W, seed=args.seed + 1), x0, args.steps, problem=p)
        print(f"{name:<10} {ep.violations:>10d} {int(ep.engaged.sum()):>8d} "
              f"{ep.interventions.mean():>13.3f} {1e3 * ep.step_times.mean():>8.2f}")


if __name__ == "__main__":
    main()
