"""Online predictive safety filter with optimised affine error feedback.

Each call solves a QP over a nominal trajectory ``(z, v)`` and causal
disturbance responses.  State, input and terminal constraints are tightened
by the exact 1-norm worst case of the responses, so the filter certifies the
learned input against every admissible disturbance sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._programs import add_tightened_rows, response_chain, stage_blocks, structural_slack_count
from .errors import DimensionMismatchError, SingularResponseError, SolverFailureError
from .polytope import Polytope
from .sls_core import (
    BlockLowerTriangular,
    SafetyProblem,
    SystemResponses,
    controller_from_responses,
    policy_input,
)
from .solver import AdmmSolver, ConicProgram, ProgramBuilder, Solution, SolverSettings, Status

REGULARIZATION = 1e-8


@dataclass(frozen=True)
class FilterResult:
    """Outcome of one filter evaluation.

    ``u_applied`` is ``None`` when the program was infeasible.
    """

    u_applied: np.ndarray | None
    u_learned: np.ndarray
    intervention: float
    feasible: bool
    z: np.ndarray | None = None
    v: np.ndarray | None = None
    responses: SystemResponses | None = None
    status: Status = Status.OPTIMAL
    iterations: int = 0
    solve_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "u_applied": arr(self.u_applied),
            "u_learned": arr(self.u_learned),
            "intervention": None if not np.isfinite(self.intervention) else float(self.intervention),
            "feasible": bool(self.feasible),
            "z": arr(self.z),
            "v": arr(self.v),
            "status": self.status.value,
            "iterations": int(self.iterations),
            "solve_time": float(self.solve_time),
        }


@dataclass(frozen=True)
class _Layout:
    program: ConicProgram
    z: slice
    v: slice
    v0: slice
    phi_u: dict
    n_slack: int
    fixed_v0_rows: slice | None


def terminal_of(problem: SafetyProblem) -> Polytope:
    """Terminal constraint used at stage ``N`` (the state set if none given)."""
    return problem.terminal if problem.terminal is not None else problem.X


def _build(problem: SafetyProblem, regularization: float, fix_v0: bool) -> _Layout:
    n, m, N = problem.n, problem.m, problem.N
    A, B = problem.A, problem.B
    b = ProgramBuilder()
    z = b.variable((N + 1, n), name="z")
    v = b.variable((N + 1, m), name="v")
    Phi_x, Phi_u = response_chain(b, A, B, problem.B_w_eff, N)
    n_before_slack = b.n_var

    b.add_eq(z[0], np.zeros(n))
    for k in range(N):
        b.add_eq(z[k + 1] - A @ z[k] - B @ v[k])
    fixed = b.add_eq(v[0], np.zeros(m)) if fix_v0 else None

    X, U, T = problem.X, problem.U, terminal_of(problem)
    for k in range(N):
        add_tightened_rows(b, X.A, X.b, z[k], stage_blocks(Phi_x, k))
        add_tightened_rows(b, U.A, U.b, v[k], stage_blocks(Phi_u, k))
    add_tightened_rows(b, T.A, T.b, z[N], stage_blocks(Phi_x, N))

    b.add_quadratic(v[0], 1.0)
    b.add_quadratic(v, regularization)
    for blk in Phi_u.values():
        b.add_quadratic(blk, regularization)
    # slack curvature makes the optimum unique, which the polish step needs
    for s in b.slacks:
        b.add_quadratic(s, regularization)
    prog = b.build()
    return _Layout(
        program=prog,
        z=b.names["z"],
        v=b.names["v"],
        v0=slice(b.names["v"].start, b.names["v"].start + m),
        phi_u={key: b.names[f"phi_u[{key[0]},{key[1]}]"] for key in Phi_u},
        n_slack=b.n_var - n_before_slack,
        fixed_v0_rows=fixed,
    )


def variable_census(problem: SafetyProblem) -> dict:
    """Closed-form size of the online program for ``problem``.

    Nominal states and inputs cover stages ``0..N``; input responses are
    the blocks ``(k, c)`` with ``1 <= c <= k <= N - 1``; slacks are counted
    from the constraint directions and the system structure.
    """
    n, m, N, n_w = problem.n, problem.m, problem.N, problem.n_w
    A, B = problem.A, problem.B
    slacks = sum(structural_slack_count(problem.X.A, A, B, n_w, k) for k in range(N))
    slacks += sum(structural_slack_count(problem.U.A, A, B, n_w, k, which="u") for k in range(N))
    slacks += structural_slack_count(terminal_of(problem).A, A, B, n_w, N)
    counts = {
        "nominal": (N + 1) * (n + m),
        "responses": m * n_w * N * (N - 1) // 2,
        "slacks": slacks,
    }
    counts["total"] = sum(counts.values())
    return counts


class SLMPSF:
    """Online filter bound to one problem; the program is assembled once.

    Only the initial-state equality and the linear cost change between
    calls, so the solver reuses its factorisation and warm-starts from the
    previous solution.

    Args:
        problem: validated problem data.
        settings: solver tolerances.
        regularization: weight of the tie-breaking term on nominal inputs
            and input responses.
        keep_responses: attach the optimal responses to every result.
    """

    def __init__(
        self,
        problem: SafetyProblem,
        settings: SolverSettings | None = None,
        regularization: float = REGULARIZATION,
        keep_responses: bool = False,
    ):
        self.problem = problem
        self.regularization = regularization
        self.keep_responses = keep_responses
        self._layout = _build(problem, regularization, fix_v0=False)
        self._fixed_layout: _Layout | None = None
        self._solver = AdmmSolver(settings)
        self._fixed_solver = AdmmSolver(settings)
        self._warm: Solution | None = None
        self._plan: dict | None = None

    @property
    def n_var(self) -> int:
        return self._layout.program.n_var

    @property
    def n_slack(self) -> int:
        return self._layout.n_slack

    def program(self, x, u_L) -> ConicProgram:
        """The QP for state ``x`` and learned input ``u_L``."""
        return self._instantiate(self._layout, x, u_L)

    def _instantiate(self, layout: _Layout, x, u_L, v0_fixed=None) -> ConicProgram:
        p = self.problem
        x = np.asarray(x, dtype=float).reshape(-1)
        u_L = np.asarray(u_L, dtype=float).reshape(-1)
        if x.size != p.n or u_L.size != p.m:
            raise DimensionMismatchError(f"expected state of size {p.n} and input of size {p.m}")
        prog = layout.program
        f = prog.f.copy()
        f[layout.v0] -= 2.0 * u_L
        b_eq = prog.b_eq.copy()
        b_eq[: p.n] = x
        if v0_fixed is not None:
            b_eq[layout.fixed_v0_rows] = v0_fixed
        return prog.with_data(f=f, b_eq=b_eq, offset=float(u_L @ u_L))

    def _unpack(self, sol: Solution, x, u_L) -> FilterResult:
        p, lay = self.problem, self._layout
        u_L = np.asarray(u_L, dtype=float).reshape(-1)
        if sol.status is Status.INFEASIBLE:
            return FilterResult(None, u_L, np.inf, False, status=sol.status,
                                iterations=sol.iterations, solve_time=sol.solve_time)
        if sol.status is not Status.OPTIMAL:
            raise SolverFailureError(
                f"solver stopped with status {sol.status.value} "
                f"(primal {sol.primal_residual:.2e}, dual {sol.dual_residual:.2e})",
                sol,
            )
        z = sol.x[lay.z].reshape(p.N + 1, p.n)
        v = sol.x[lay.v].reshape(p.N + 1, p.m)
        u = v[0].copy()
        resp = self._responses(sol.x) if self.keep_responses else None
        return FilterResult(
            u_applied=u,
            u_learned=u_L,
            intervention=float(np.linalg.norm(u - u_L)),
            feasible=True,
            z=z,
            v=v[: p.N],
            responses=resp,
            status=sol.status,
            iterations=sol.iterations,
            solve_time=sol.solve_time,
        )

    def _responses(self, xvec) -> SystemResponses:
        p = self.problem
        n, m, N, n_w = p.n, p.m, p.N, p.n_w
        Bw = p.B_w_eff
        cols = (0,) + (n_w,) * N
        ux = {(k, c): xvec[s].reshape(m, n_w) for (k, c), s in self._layout.phi_u.items()}
        px = {}
        for c in range(1, N + 1):
            px[(c, c)] = Bw
            for k in range(c, N):
                px[(k + 1, c)] = p.A @ px[(k, c)] + p.B @ ux[(k, c)]
        return SystemResponses(
            Phi_x=BlockLowerTriangular.from_blocks(px, N, n, cols),
            Phi_u=BlockLowerTriangular.from_blocks(ux, N, m, cols),
        )

    def filter_step(self, x, u_L) -> FilterResult:
        """Solve the filter program; infeasible states give ``feasible=False``.

        Raises:
            SolverFailureError: the solver hit its iteration limit.
        """
        prog = self.program(x, u_L)
        sol = self._solver.solve(prog, warm_start=self._warm)
        if sol.status is Status.OPTIMAL:
            self._warm = sol
        return self._unpack(sol, x, u_L)

    def is_feasible(self, x) -> bool:
        """Membership of ``x`` in the filter's safe set (program feasibility)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        prog = self.program(x, np.zeros(self.problem.m))
        sol = self._solver.solve(prog, warm_start=self._warm)
        if sol.status is Status.OPTIMAL:
            self._warm = sol
            return True
        if sol.status is Status.INFEASIBLE:
            return False
        raise SolverFailureError(f"feasibility probe ended with status {sol.status.value}", sol)

    def is_admissible(self, x, v0) -> bool:
        """Whether the program stays feasible with the first input fixed to ``v0``."""
        if self._fixed_layout is None:
            self._fixed_layout = _build(self.problem, self.regularization, fix_v0=True)
        prog = self._instantiate(self._fixed_layout, x, v0, v0_fixed=np.asarray(v0, dtype=float).reshape(-1))
        sol = self._fixed_solver.solve(prog)
        if sol.status is Status.OPTIMAL:
            return True
        if sol.status is Status.INFEASIBLE:
            return False
        raise SolverFailureError(f"feasibility probe ended with status {sol.status.value}", sol)

    def reset(self) -> None:
        self._warm = None
        self._plan = None

    def safe_input(self, x, u_L) -> tuple[np.ndarray, FilterResult]:
        """Filtered input with a fallback for states where the program fails.

        Out of the safe set the last feasible plan is continued with its
        error feedback for up to ``N - 1`` further steps; without a usable
        plan ``u_L`` is projected onto the input set.
        """
        x = np.asarray(x, dtype=float).reshape(-1)
        res = self.filter_step(x, u_L)
        if res.feasible:
            self._plan = {"z": res.z, "v": res.v, "history": [x], "sol": self._warm}
            return res.u_applied, res
        plan = self._plan
        if plan is not None and len(plan["history"]) < self.problem.N:
            plan["history"].append(x)
            K = self._plan_gain(plan)
            if K is None:
                u = plan["v"][len(plan["history"]) - 1].copy()
            else:
                u = policy_input(K, plan["z"], plan["v"], plan["history"])
            return u, res
        self._plan = None
        return project_onto(self.problem.U, u_L), res

    def _plan_gain(self, plan: dict) -> BlockLowerTriangular | None:
        if "K" not in plan:
            try:
                plan["K"] = controller_from_responses(self._responses(plan["sol"].x))
            except (SingularResponseError, DimensionMismatchError):
                plan["K"] = None
        return plan["K"]


def project_onto(P: Polytope, u) -> np.ndarray:
    """Euclidean projection onto a polytope (clipping for boxes)."""
    u = np.asarray(u, dtype=float).reshape(-1)
    if P.contains(u):
        return u.copy()
    prog = ConicProgram(f=-2.0 * u, H=2.0 * np.eye(u.size), A_in=P.A, b_in=P.b)
    sol = AdmmSolver().solve(prog)
    if not sol.ok:
        raise SolverFailureError("projection failed", sol)
    return sol.x


def assemble(problem: SafetyProblem, x, u_L, regularization: float = REGULARIZATION) -> ConicProgram:
    """Stand-alone assembly of the online filter program."""
    return SLMPSF(problem, regularization=regularization).program(x, u_L)


def filter_step(problem: SafetyProblem, x, u_L) -> FilterResult:
    """One-shot filter evaluation (assembles a fresh program)."""
    return SLMPSF(problem).filter_step(x, u_L)
