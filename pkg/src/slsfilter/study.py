"""Offline set computations and the safe-set / intervention comparison study."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import partial

import numpy as np

from .baseline_mpsf import TubeConfig, TubeMPSF
from .explicit_filter import ExplicitSafeSet, rci_hull, synthesize
from .polytope import MAX_VERTEX_DIM, Polytope, contains_set, max_rci
from .sim import GridSpec, GridStudy, coverage, intervention_map, intervention_summary, membership_map, write_json
from .sl_mpsf import SLMPSF
from .sls_core import SafetyProblem
from .solver import SolverSettings

EXCESS_TOL = 1e-4
EXCESS_SHARE = 0.01
ROUNDOFF = 1e-9


@dataclass
class SetBundle:
    """Sets and gains computed offline for one problem."""

    problem: SafetyProblem
    tube: TubeConfig
    explicit: ExplicitSafeSet
    xi_max: Polytope | None
    rci_hull: Polytope | None

    @classmethod
    def compute(cls, problem: SafetyProblem, with_rci: bool = True, hyperbox: bool = False,
                tube_eps: float = 1e-2, settings: SolverSettings | None = None) -> "SetBundle":
        """Tube ingredients, explicit safe set and (for ``n <= 3``) the RCI sets.

        ``with_rci=False`` skips the maximal RCI set and the explicit hull.
        """
        tube = TubeConfig.from_problem(problem, eps=tube_eps)
        S = synthesize(problem, hyperbox=hyperbox, settings=settings)
        small = problem.n <= MAX_VERTEX_DIM
        xi = max_rci(problem.A, problem.B, problem.U, problem.X, problem.W, problem.B_w) if with_rci and small else None
        hull = rci_hull(S) if with_rci and small else None
        return cls(problem, tube, S, xi, hull)

    def artifacts(self) -> dict:
        """JSON-ready dictionaries keyed by artifact file stem."""
        out = {
            "lqr_gain": {"K_f": self.problem.K_f.tolist()},
            "omega_min": self.tube.tube.to_dict(),
            "omega_max": self.problem.terminal.to_dict(),
            "pi_max": self.tube.terminal.to_dict(),
            "explicit_set": self.explicit.to_dict(),
        }
        if self.xi_max is not None:
            out["xi_max"] = self.xi_max.to_dict()
        if self.rci_hull is not None:
            out["rci_hull"] = self.rci_hull.to_dict()
        return out

    def write(self, out_dir) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for stem, data in self.artifacts().items():
            path = os.path.join(out_dir, f"{stem}.json")
            write_json(data, path)
            paths.append(path)
        return paths


def grid_study(bundle: SetBundle, counts=50, settings: SolverSettings | None = None, n_jobs: int = 1) -> GridStudy:
    """Feasibility of every set and worst-case interventions of both online filters."""
    p = bundle.problem
    grid = GridSpec.over(p.X, counts)
    study = intervention_map(partial(SLMPSF, p, settings), grid, p.U, "sl", n_jobs=n_jobs)
    study.merge(intervention_map(partial(TubeMPSF, bundle.tube, settings), grid, p.U, "tube", n_jobs=n_jobs))
    study.merge(membership_map(bundle.explicit.contains, grid, "explicit"))
    study.merge(membership_map(lambda x: p.terminal.contains(x), grid, "omega_max"))
    if bundle.xi_max is not None:
        study.merge(membership_map(lambda x: bundle.xi_max.contains(x), grid, "xi_max"))
    return study


def orderings(bundle: SetBundle, study: GridStudy) -> dict:
    """Checks of the expected set and intervention relations, with supporting numbers."""
    f = study.feasible
    checks: dict = {}
    numbers: dict = {}
    tube_not_sl = int(np.sum(f["tube"] & ~f["sl"]))
    numbers["tube_outside_sl_cells"] = tube_not_sl
    checks["tube_subset_of_sl"] = tube_not_sl == 0
    if "xi_max" in f:
        cov = coverage(study, "xi_max")
        numbers["coverage"] = cov
        checks["sl_larger_than_tube_by_5pct"] = cov["sl"] >= cov["tube"] + 0.05
        checks["coverage_at_most_one"] = all(c <= 1.0 for c in cov.values())
    outside = f["explicit"] & ~f["omega_max"] & ~f["tube"]
    numbers["explicit_cells_outside_omega_max_and_tube"] = int(outside.sum())
    checks["explicit_covers_new_cells"] = bool(outside.any())
    checks["explicit_alpha_positive"] = bundle.explicit.alpha > 0
    checks["omega_max_not_in_explicit"] = not contains_set(bundle.explicit.box.to_polytope(), bundle.problem.terminal)
    summ = intervention_summary(study, "sl", "tube")
    joint = f["sl"] & f["tube"]
    excess = study.max_intervention["sl"][joint] - study.max_intervention["tube"][joint]
    above = int(np.sum(excess > ROUNDOFF))
    summ["cells_exceeding"] = above
    numbers["intervention"] = summ
    checks["sl_mean_intervention_not_larger"] = summ["mean_sl"] <= summ["mean_tube"]
    checks["sl_max_intervention_not_larger"] = summ["max_sl"] <= summ["max_tube"]
    checks["per_cell_excess_within_tolerance"] = bool(
        (excess.size == 0 or excess.max() <= EXCESS_TOL) and above <= EXCESS_SHARE * max(1, joint.sum())
    )
    return {"checks": checks, "numbers": numbers}


def render_report(cfg_digest: str, seed: int, result: dict, timing: dict | None) -> str:
    """Markdown report with the three comparison panels and the check list."""
    num, checks = result["numbers"], result["checks"]
    lines = [f"# Safety filter comparison", "", f"config hash `{cfg_digest}`, seed {seed}", ""]
    lines += ["## Safe-set coverage (fraction of the maximal RCI set's cells)", ""]
    if "coverage" in num:
        lines += ["| set | coverage |", "|---|---|"]
        lines += [f"| {k} | {v:.4f} |" for k, v in sorted(num["coverage"].items())]
    else:
        lines += ["maximal RCI set skipped"]
    iv = num["intervention"]
    lines += ["", "## Maximal intervention over jointly feasible cells", "",
              "| method | mean | max |", "|---|---|---|",
              f"| sl | {iv['mean_sl']:.4f} | {iv['max_sl']:.4f} |",
              f"| tube | {iv['mean_tube']:.4f} | {iv['max_tube']:.4f} |",
              "", f"cells: {iv['cells']}, cells where sl exceeds tube: {iv['cells_exceeding']} "
              f"(largest excess {iv['max_excess']:.2e})", ""]
    if timing is not None:
        lines += ["## Computation time per call (median, seconds)", "", "| method | solver | total |", "|---|---|---|"]
        lines += [f"| {k} | {v['median']:.3e} | {v['median_total']:.3e} |" for k, v in timing.items()]
        lines += [""]
    lines += ["## Checks", ""]
    lines += [f"- {'PASS' if ok else 'FAIL'} {name}" for name, ok in checks.items()]
    broken = [name for name, ok in checks.items() if not ok]
    lines += ["", "All orderings hold." if not broken else "Broken orderings: " + ", ".join(broken), ""]
    return "\n".join(lines)
