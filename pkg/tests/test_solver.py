import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import enumerate_lp, enumerate_qp, random_small_program
from slsfilter.solver import (
    AdmmSolver,
    ConicProgram,
    LinprogBackend,
    ProgramBuilder,
    SolverSettings,
    Status,
    encode_l1_row,
    kkt_residuals,
    l1_norm_bound,
    solve,
)


def test_scalar_qp():
    sol = solve(ConicProgram(f=[0.0], H=[[2.0]], A_in=[[-1.0]], b_in=[-1.0]))
    assert sol.status is Status.OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-8)


def test_scalar_lp():
    sol = solve(ConicProgram(f=[-1.0], A_in=[[1.0], [1.0]], b_in=[3.0, 5.0]))
    assert sol.status is Status.OPTIMAL
    assert sol.x[0] == pytest.approx(3.0, abs=1e-8)
    assert sol.objective == pytest.approx(-3.0, abs=1e-8)


def test_random_box_qp_matches_enumeration():
    rng = np.random.default_rng(7)
    n = 10
    M = rng.normal(size=(n, n))
    H = M @ M.T + np.eye(n)
    f = rng.normal(size=n) * 5
    A_in = np.vstack([np.eye(n), -np.eye(n)])
    b_in = np.ones(2 * n)
    sol = solve(ConicProgram(f=f, H=H, A_in=A_in, b_in=b_in))
    # box QP: enumerate which bound (lower, upper, none) is active per coordinate
    best = None
    for pattern in itertools.product((-1, 0, 1), repeat=n):
        fixed = np.array(pattern, dtype=float)
        free = fixed == 0
        x = fixed.copy()
        if free.any():
            rhs = -(f[free] + H[np.ix_(free, ~free)] @ fixed[~free])
            x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.any(np.abs(x) > 1 + 1e-12):
            continue
        obj = 0.5 * x @ H @ x + f @ x
        if best is None or obj < best[1]:
            best = (x, obj)
    assert sol.status is Status.OPTIMAL
    assert np.max(np.abs(sol.x - best[0])) <= 1e-6
    assert sol.objective == pytest.approx(best[1], abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_random_programs_against_enumeration(seed):
    rng = np.random.default_rng(seed)
    for kind in ("qp", "lp"):
        H, f, A_eq, b_eq, A_in, b_in = random_small_program(rng, kind)
        prog = ConicProgram(f=f, H=H, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)
        sol = solve(prog)
        ref = enumerate_qp(H, f, A_eq, b_eq, A_in, b_in) if kind == "qp" else enumerate_lp(f, A_eq, b_eq, A_in, b_in)
        assert sol.status is Status.OPTIMAL
        assert sol.objective == pytest.approx(ref[1], abs=1e-6)
        res = kkt_residuals(prog, sol)
        assert max(res.values()) <= 1e-6


def test_infeasible_detected():
    prog = ConicProgram(f=[1.0, 0.0], A_in=[[1.0, 0.0], [-1.0, 0.0]], b_in=[-1.0, -1.0])
    assert solve(prog).status is Status.INFEASIBLE


def test_infeasible_equalities():
    prog = ConicProgram(f=[0.0, 0.0], H=np.eye(2), A_eq=[[1.0, 1.0], [1.0, 1.0]], b_eq=[1.0, 2.0])
    assert solve(prog).status is Status.INFEASIBLE


def test_unbounded_detected():
    prog = ConicProgram(f=[-1.0, 0.0], A_in=[[0.0, 1.0]], b_in=[1.0])
    assert solve(prog).status is Status.UNBOUNDED


def test_deterministic():
    rng = np.random.default_rng(3)
    H, f, A_eq, b_eq, A_in, b_in = random_small_program(rng, "qp")
    prog = ConicProgram(f=f, H=H, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)
    a, b = solve(prog), solve(prog)
    assert np.array_equal(a.x, b.x) and a.iterations == b.iterations


def test_pure_admm_still_converges():
    rng = np.random.default_rng(5)
    H, f, A_eq, b_eq, A_in, b_in = random_small_program(rng, "qp")
    prog = ConicProgram(f=f, H=H, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)
    sol = solve(prog, SolverSettings(interior_after=0))
    ref = enumerate_qp(H, f, A_eq, b_eq, A_in, b_in)
    assert sol.status is Status.OPTIMAL
    assert sol.objective == pytest.approx(ref[1], abs=1e-6)


def test_warm_start_reuses_workspace():
    rng = np.random.default_rng(9)
    H, f, A_eq, b_eq, A_in, b_in = random_small_program(rng, "qp")
    prog = ConicProgram(f=f, H=H, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)
    solver = AdmmSolver()
    first = solver.solve(prog)
    again = solver.solve(prog.with_data(f=f * 1.0001), warm_start=first)
    assert again.status is Status.OPTIMAL
    assert again.iterations <= first.iterations


@given(st.integers(0, 10_000))
def test_relaxing_bounds_keeps_feasibility(seed):
    rng = np.random.default_rng(seed)
    H, f, A_eq, b_eq, A_in, b_in = random_small_program(rng, "qp")
    prog = ConicProgram(f=f, H=H, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)
    if solve(prog).status is Status.OPTIMAL:
        assert solve(prog.with_data(b_in=b_in + 1.0)).status is Status.OPTIMAL


def test_encode_l1_constant_entry():
    b = ProgramBuilder()
    x = b.variable(1)
    bound = encode_l1_row(b, x * 0.0 + (-2.5), rhs_budget=x[0])
    b.add_linear(x.sum())
    sol = solve(b.build())
    assert sol.x[0] == pytest.approx(2.5, abs=1e-8)
    assert bound.value(sol.x)[()] == pytest.approx(2.5)


def test_encode_l1_all_zero_is_nominal_only():
    b = ProgramBuilder()
    x = b.variable(2)
    before = b.n_var
    encode_l1_row(b, x * 0.0, rhs_budget=1.0, other=x[0])
    assert b.n_var == before


def test_l1_encoding_matches_sign_expansion():
    rng = np.random.default_rng(11)
    n, k = 3, 3
    C = rng.normal(size=(k, n))
    d = rng.normal(size=k)
    target = rng.normal(size=n)
    # epigraph encoding
    b = ProgramBuilder()
    x = b.variable(n)
    b.add_le(x[0] + l1_norm_bound(b, C @ x + d), 2.0)
    b.add_quadratic(x - target)
    sol = solve(b.build())
    # direct expansion: one linear row per sign pattern
    rows, rhs = [], []
    for s in itertools.product((-1.0, 1.0), repeat=k):
        s = np.array(s)
        rows.append(np.eye(n)[0] + s @ C)
        rhs.append(2.0 - s @ d)
    ref = solve(ConicProgram(f=-2 * target, H=2 * np.eye(n), A_in=np.array(rows), b_in=np.array(rhs),
                             offset=float(target @ target)))
    assert sol.objective == pytest.approx(ref.objective, abs=1e-7)


def test_linprog_backend_agrees():
    rng = np.random.default_rng(21)
    _, f, A_eq, b_eq, A_in, b_in = random_small_program(rng, "lp")
    prog = ConicProgram(f=f, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)
    ext = LinprogBackend().solve(prog)
    assert ext.objective == pytest.approx(solve(prog).objective, abs=1e-7)


def test_linprog_backend_rejects_qp():
    with pytest.raises(ValueError):
        LinprogBackend().solve(ConicProgram(f=[0.0], H=[[1.0]]))


def test_program_validation():
    with pytest.raises(ValueError):
        ConicProgram(f=[0.0, 0.0], H=[[1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        ConicProgram(f=[np.inf])


def test_dump_triplets(tmp_path):
    prog = ConicProgram(f=[1.0, 0.0], H=np.eye(2), A_in=[[1.0, 2.0]], b_in=[3.0])
    path = tmp_path / "prog.txt"
    prog.dump_triplets(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# n_var 2 n_eq 0 n_in 1"
    assert "A_in 0 1 2.0" in lines and "b_in 0 0 3.0" in lines
