"""End-to-end acceptance checks on the double-integrator benchmark.

Each test records a ``PASS``/``FAIL`` line (printed in the terminal summary)
before asserting, so a red criterion still reports its measured numbers.
"""

import time

import numpy as np
import pytest

from oracles import enumerate_lp, enumerate_qp, random_small_program, rollout_errors, vertex_sequences
from slsfilter.baseline_mpsf import NominalMPSF, TubeMPSF
from slsfilter.explicit_filter import BackupState, ExplicitFilter, RCIFilter, backup_input, check_learned_input
from slsfilter.problems import double_integrator
from slsfilter.sim import AdversarialPolicy, VertexDisturbance, run_episode, timing_bench, timing_ordering
from slsfilter.sl_mpsf import SLMPSF
from slsfilter.sls_core import BlockLowerTriangular, build_stacked, responses_from_controller, tighten_row
from slsfilter.solver import ConicProgram, Status, kkt_residuals, solve
from slsfilter.study import SetBundle, grid_study, orderings

pytestmark = pytest.mark.acceptance

UNIT_VERTS = np.array([(1, 1), (1, -1), (-1, 1), (-1, -1)], dtype=float)


def _record(log, idx, ok, detail, elapsed=None):
    took = "" if elapsed is None else f" [{elapsed:.1f} s]"
    log.append(f"criterion {idx}: {'PASS' if ok else 'FAIL'} {detail}{took}")
    return ok


@pytest.fixture(scope="module")
def bundle():
    return SetBundle.compute(double_integrator())


@pytest.fixture(scope="module")
def grid_result(bundle):
    tic = time.perf_counter()
    study = grid_study(bundle, counts=50)
    return study, orderings(bundle, study), time.perf_counter() - tic


def test_1_tightening_exactness(acceptance_log):
    tic = time.perf_counter()
    rng = np.random.default_rng(2024)
    p = double_integrator(N=3)
    blocks = {(k, i): 0.5 * rng.normal(size=(1, 2)) for k in range(p.N + 1) for i in range(k + 1)}
    K = BlockLowerTriangular.from_blocks(blocks, p.N, 1, 2)
    resp = responses_from_controller(K, build_stacked(p))
    K_blocks = [[K.block(k, i) for i in range(k + 1)] for k in range(p.N + 1)]
    seqs = [np.array(s) for s in vertex_sequences(p.n_w, p.N)]
    assert len(seqs) == 64
    rolls = [rollout_errors(p.A, p.B, K_blocks, p.B_w_eff, np.zeros(2), s) for s in seqs]
    worst = 0.0
    for which, rows in (("x", p.X.A), ("u", p.U.A)):
        for k in range(p.N + 1):
            errs = np.array([(dx if which == "x" else du)[k] for dx, du in rolls])
            brute = np.max(errs @ rows.T, axis=0)
            ours = np.array([tighten_row(a, resp, k, which=which) for a in rows])
            worst = max(worst, float(np.max(np.abs(ours - brute))))
    elapsed = time.perf_counter() - tic
    ok = worst <= 1e-9 and elapsed < 10
    assert _record(acceptance_log, 1, ok, f"max |bound - brute force| = {worst:.2e} (tol 1e-9)", elapsed)


def test_2_recursive_feasibility(bundle, acceptance_log):
    tic = time.perf_counter()
    p = bundle.problem
    sl, probe = SLMPSF(p), SLMPSF(p)
    rng = np.random.default_rng(7)
    failures = trials = 0
    while trials < 1000:
        x = rng.uniform(-5, 5, 2)
        if not probe.is_feasible(x):
            continue
        res = sl.filter_step(x, rng.uniform(-6, 6, 1))
        w = p.B_w_eff @ UNIT_VERTS[rng.integers(4)]
        x_next = p.A @ x + p.B @ res.u_applied + w
        failures += int(not res.feasible or not probe.is_feasible(x_next))
        trials += 1
    elapsed = time.perf_counter() - tic
    ok = failures == 0 and elapsed < 300
    assert _record(acceptance_log, 2, ok, f"{failures} infeasible successors in {trials} trials", elapsed)


def _push_out(U):
    """Deterministic adversary: twice the input bound in the direction that grows |x1 + x2|."""
    hi = 2 * U.bounding_box().half_widths

    def policy(x, t):
        return hi * (1.0 if x[0] + x[1] >= 0 else -1.0)
    return policy


def test_3_robust_safety(bundle, acceptance_log):
    tic = time.perf_counter()
    p = bundle.problem
    filters = {
        "sl": SLMPSF(p),
        "tube": TubeMPSF(bundle.tube),
        "explicit": ExplicitFilter(bundle.explicit, p),
        "rci": RCIFilter(bundle.rci_hull, p),
    }
    members = {
        "sl": SLMPSF(p).is_feasible,
        "tube": TubeMPSF(bundle.tube).is_feasible,
        "explicit": bundle.explicit.contains,
        "rci": lambda x: bundle.rci_hull.contains(x),
    }
    violations = {}
    for name, flt in filters.items():
        rng = np.random.default_rng(11)
        total = episodes = 0
        while episodes < 100:
            x0 = rng.uniform(-5, 5, 2)
            if not members[name](x0):
                continue
            policy = AdversarialPolicy(p.U, scale=2.0, seed=episodes) if episodes % 2 else _push_out(p.U)
            ep = run_episode(flt, policy, VertexDisturbance(p.W, seed=1000 + episodes), x0, 50, problem=p)
            total += ep.violations
            episodes += 1
        violations[name] = total
    elapsed = time.perf_counter() - tic
    ok = not any(violations.values()) and elapsed < 600
    assert _record(acceptance_log, 3, ok, f"violations per filter over 100x50 steps: {violations}", elapsed)


def test_4_safe_set_ordering(grid_result, acceptance_log):
    study, res, elapsed = grid_result
    num = res["numbers"]
    cov = num["coverage"]
    outside = num["tube_outside_sl_cells"]
    margin = cov["sl"] - cov["tube"]
    ok = outside == 0 and margin >= 0.05
    detail = (f"tube cells outside SL = {outside}; coverage sl {cov['sl']:.3f}, tube {cov['tube']:.3f}, "
              f"margin {margin:.3f} (need >= 0.05)")
    assert _record(acceptance_log, 4, ok, detail, elapsed)


def test_5_explicit_set_relations(bundle, grid_result, acceptance_log):
    _, res, _ = grid_result
    c = res["checks"]
    cells = res["numbers"]["explicit_cells_outside_omega_max_and_tube"]
    ok = c["explicit_alpha_positive"] and c["explicit_covers_new_cells"] and c["omega_max_not_in_explicit"]
    detail = (f"alpha = {bundle.explicit.alpha:.4f}; {cells} cells outside Omega_max and tube set; "
              f"Omega_max not contained: {c['omega_max_not_in_explicit']}")
    assert _record(acceptance_log, 5, ok, detail)


def test_6_intervention_dominance(grid_result, acceptance_log):
    _, res, _ = grid_result
    iv = res["numbers"]["intervention"]
    c = res["checks"]
    ok = c["sl_mean_intervention_not_larger"] and c["sl_max_intervention_not_larger"] and \
        c["per_cell_excess_within_tolerance"]
    detail = (f"mean sl {iv['mean_sl']:.4f} vs tube {iv['mean_tube']:.4f}; max sl {iv['max_sl']:.4f} vs "
              f"tube {iv['max_tube']:.4f}; {iv['cells_exceeding']}/{iv['cells']} cells exceed, "
              f"largest excess {iv['max_excess']:.1e} (tol 1e-4 on <= 1%)")
    assert _record(acceptance_log, 6, ok, detail)


def test_7_periodic_return(bundle, acceptance_log):
    S, p = bundle.explicit, bundle.problem
    rng = np.random.default_rng(99)
    worst = np.inf
    failures = 0
    for x in S.center + S.radii * rng.uniform(-1, 1, (1000, 2)):
        bs = BackupState(0, True, [x])
        for _ in range(S.horizon):
            u = backup_input(bs, S)
            x = p.A @ x + p.B @ u + p.B_w_eff @ UNIT_VERTS[rng.integers(4)]
            bs.history.append(x)
            bs.j += 1
        slack = float(np.min(S.slack(x)))
        worst = min(worst, slack)
        failures += int(slack < -1e-8)
    ok = failures == 0
    assert _record(acceptance_log, 7, ok, f"{failures} failures in 1000; smallest slack {worst:.3e} (tol -1e-8)")


def test_8_timing_ordering(bundle, acceptance_log):
    p, S = bundle.problem, bundle.explicit
    sl, tube = SLMPSF(p), TubeMPSF(bundle.tube)

    def run_explicit(x, u):
        check_learned_input(x, u, S, p)

    stats = timing_bench({
        "explicit": run_explicit,
        "tube": lambda x, u: tube.filter_step(x, u).solve_time,
        "sl": lambda x, u: sl.filter_step(x, u).solve_time,
    }, p.X, p.m, n_samples=200, seed=0)
    checks = timing_ordering(stats)
    ok = checks["explicit_100x_faster_than_sl"] and checks["tube_not_slower_than_sl"]
    med = {k: v["median"] for k, v in stats.items()}
    detail = ", ".join(f"{k} {v:.2e} s" for k, v in med.items()) + " (medians over 200 states)"
    assert _record(acceptance_log, 8, ok, detail)


def test_9_solver_soundness(acceptance_log):
    rng = np.random.default_rng(31)
    worst_obj = worst_kkt = 0.0
    bad = 0
    for i in range(200):
        kind = "qp" if i % 2 == 0 else "lp"
        H, f, A_eq, b_eq, A_in, b_in = random_small_program(rng, kind)
        prog = ConicProgram(f=f, H=H, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)
        sol = solve(prog)
        ref = enumerate_qp(H, f, A_eq, b_eq, A_in, b_in) if kind == "qp" else enumerate_lp(f, A_eq, b_eq, A_in, b_in)
        if sol.status is not Status.OPTIMAL:
            bad += 1
            continue
        worst_obj = max(worst_obj, abs(sol.objective - ref[1]))
        worst_kkt = max(worst_kkt, max(kkt_residuals(prog, sol).values()))
    ok = bad == 0 and worst_obj <= 1e-6 and worst_kkt <= 1e-6
    detail = f"{bad} non-optimal; max objective gap {worst_obj:.1e}, max KKT residual {worst_kkt:.1e} (tol 1e-6)"
    assert _record(acceptance_log, 9, ok, detail)


def test_10_zero_disturbance_reduction(acceptance_log):
    p = double_integrator(disturbance=0.0)
    sl, nom = SLMPSF(p), NominalMPSF(p)
    rng = np.random.default_rng(5)
    worst, mismatched, cases = 0.0, 0, 0
    while cases < 20:
        x = rng.uniform(-5, 5, 2)
        a = sl.filter_step(x, rng.uniform(-6, 6, 1))
        b = nom.filter_step(x, a.u_learned)
        if a.feasible != b.feasible:
            mismatched += 1
        if not (a.feasible and b.feasible):
            continue
        worst = max(worst, float(np.max(np.abs(a.u_applied - b.u_applied))))
        cases += 1
    ok = mismatched == 0 and worst <= 1e-6
    assert _record(acceptance_log, 10, ok, f"max input difference {worst:.1e} over 20 cases (tol 1e-6); "
                   f"{mismatched} feasibility mismatches")
