"""Comparison filters: the nominal predictive filter and a fixed-gain tube filter.

Also hosts LQR synthesis, which supplies both the terminal feedback of the
main filter and the tube gain of the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NotStabilizableError, SolverFailureError
from .polytope import Box, Polytope, contains_set, max_rpi, min_rpi_approx, pontryagin_difference, pre_set, support
from .sl_mpsf import REGULARIZATION, FilterResult, project_onto, terminal_of
from .sls_core import SafetyProblem
from .solver import AdmmSolver, ConicProgram, ProgramBuilder, Solution, SolverSettings, Status


def lqr(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Infinite-horizon discrete LQR gain with the convention ``u = K x``.

    The Riccati equation is solved by value iteration until successive
    iterates differ by at most ``tol`` (relative to the iterate's size).

    Raises:
        NotStabilizableError: the iteration diverges or does not settle.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        G = R + B.T @ P @ B
        try:
            BtPA = np.linalg.solve(G, B.T @ P @ A)
        except np.linalg.LinAlgError:
            BtPA = np.linalg.lstsq(G, B.T @ P @ A, rcond=None)[0]
        P_next = Q + A.T @ P @ A - (A.T @ P @ B) @ BtPA
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.max(np.abs(P_next)) > 1e14:
            raise NotStabilizableError("Riccati iteration diverged; (A, B) is not stabilizable")
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P_next))):
            P = P_next
            break
        P = P_next
    else:
        raise NotStabilizableError("Riccati iteration did not settle")
    G = R + B.T @ P @ B
    K = -np.linalg.lstsq(G, B.T @ P @ A, rcond=None)[0]
    if np.max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1.0 - 1e-12:
        raise NotStabilizableError("LQR closed loop is not Schur stable")
    return K


def dare_residual(A, B, Q, R, K) -> float:
    """Residual of the Riccati equation at the cost matrix implied by ``K``."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    A_cl = A + B @ K
    # cost-to-go of the closed loop: P = Q + K'RK + A_cl' P A_cl
    n = A.shape[0]
    M = np.eye(n * n) - np.kron(A_cl.T, A_cl.T)
    P = np.linalg.solve(M, (Q + K.T @ R @ K).reshape(-1)).reshape(n, n)
    G = R + B.T @ P @ B
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(G, B.T @ P @ A)
    return float(np.max(np.abs(P - rhs)))


class _NominalTrajectoryProgram:
    """Shared assembly of ``z_{k+1} = A z_k + B v_k`` programs."""

    def __init__(self, problem: SafetyProblem, settings: SolverSettings | None):
        self.problem = problem
        self.solver = AdmmSolver(settings)
        self.warm: Solution | None = None

    def _solve(self, prog: ConicProgram) -> Solution:
        sol = self.solver.solve(prog, warm_start=self.warm)
        if sol.status is Status.OPTIMAL:
            self.warm = sol
        elif sol.status is not Status.INFEASIBLE:
            raise SolverFailureError(f"solver stopped with status {sol.status.value}", sol)
        return sol


class NominalMPSF(_NominalTrajectoryProgram):
    """Certainty-equivalent predictive filter (no disturbance handling)."""

    def __init__(self, problem: SafetyProblem, settings: SolverSettings | None = None,
                 regularization: float = REGULARIZATION):
        super().__init__(problem, settings)
        p = problem
        b = ProgramBuilder()
        z = b.variable((p.N + 1, p.n), name="z")
        v = b.variable((p.N + 1, p.m), name="v")
        b.add_eq(z[0], np.zeros(p.n))
        for k in range(p.N):
            b.add_eq(z[k + 1] - p.A @ z[k] - p.B @ v[k])
            b.add_le(p.X.A @ z[k], p.X.b)
            b.add_le(p.U.A @ v[k], p.U.b)
        T = terminal_of(p)
        b.add_le(T.A @ z[p.N], T.b)
        b.add_quadratic(v[0], 1.0)
        b.add_quadratic(v, regularization)
        self._prog = b.build()
        self._z, self._v = b.names["z"], b.names["v"]

    def filter_step(self, x, u_L) -> FilterResult:
        p = self.problem
        x = np.asarray(x, dtype=float).reshape(-1)
        u_L = np.asarray(u_L, dtype=float).reshape(-1)
        if x.size != p.n or u_L.size != p.m:
            raise DimensionMismatchError("state or input has the wrong size")
        f = self._prog.f.copy()
        f[self._v.start:self._v.start + p.m] -= 2.0 * u_L
        b_eq = self._prog.b_eq.copy()
        b_eq[: p.n] = x
        sol = self._solve(self._prog.with_data(f=f, b_eq=b_eq))
        if not sol.ok:
            return FilterResult(None, u_L, np.inf, False, status=sol.status,
                                iterations=sol.iterations, solve_time=sol.solve_time)
        z = sol.x[self._z].reshape(p.N + 1, p.n)
        v = sol.x[self._v].reshape(p.N + 1, p.m)
        return FilterResult(v[0].copy(), u_L, float(np.linalg.norm(v[0] - u_L)), True, z=z, v=v[: p.N],
                            status=sol.status, iterations=sol.iterations, solve_time=sol.solve_time)

    def is_feasible(self, x) -> bool:
        return self.filter_step(x, np.zeros(self.problem.m)).feasible

    def reset(self) -> None:
        self.warm = None

    def safe_input(self, x, u_L) -> tuple[np.ndarray, FilterResult]:
        """Filtered input, or ``u_L`` projected onto the input set when the program is infeasible."""
        res = self.filter_step(x, u_L)
        if res.feasible:
            return res.u_applied, res
        return project_onto(self.problem.U, u_L), res


def nominal_filter(problem: SafetyProblem, x, u_L) -> FilterResult:
    """One-shot nominal predictive filter."""
    return NominalMPSF(problem).filter_step(x, u_L)


@dataclass(frozen=True)
class TubeConfig:
    """Offline ingredients of the fixed-gain tube filter."""

    problem: SafetyProblem
    K: np.ndarray
    tube: Polytope
    X_tight: Polytope
    U_tight: Polytope
    terminal: Polytope

    @classmethod
    def from_problem(cls, problem: SafetyProblem, K=None, eps: float = 1e-2) -> "TubeConfig":
        """Tube = eps-approximate minimal RPI set, terminal = maximal PI set.

        ``K`` defaults to the problem's terminal feedback.
        """
        K = problem.K_f if K is None else np.asarray(K, dtype=float).reshape(problem.m, problem.n)
        if K is None:
            raise ValueError("a tube gain is required (problem has no K_f)")
        A_cl = problem.A + problem.B @ K
        tube = min_rpi_approx(A_cl, problem.W, problem.B_w, eps=eps)
        X_tight = pontryagin_difference(problem.X, tube).minimal()
        # U minus K*tube, row by row: b_j - max_{e in tube} a_j K e
        shrink = np.array([support(tube, K.T @ a) for a in problem.U.A])
        U_tight = Polytope(problem.U.A, problem.U.b - shrink).minimal()
        joint = X_tight.intersect(U_tight.preimage(K))
        terminal = max_rpi(A_cl, joint, Box.unit(problem.n_w), np.zeros_like(problem.B_w))
        cfg = cls(problem, K, tube, X_tight, U_tight, terminal)
        cfg.check()
        return cfg

    def check(self) -> None:
        A_cl = self.problem.A + self.problem.B @ self.K
        if not contains_set(self.problem.X, self.X_tight) or not contains_set(self.problem.U, self.U_tight):
            raise ValueError("tightened sets must lie inside the original constraints")
        if not contains_set(pre_set(self.tube, A_cl, self.problem.W, self.problem.B_w), self.tube, 1e-7):
            raise ValueError("tube is not robustly invariant under K")


class TubeMPSF(_NominalTrajectoryProgram):
    """Tube filter: nominal plan in tightened sets plus fixed error feedback.

    The initial nominal state is a decision variable constrained to keep the
    measured state inside the tube around it.  The applied input is
    ``v_0 + K (x - z_0)``, and the cost penalises its distance to ``u_L``.
    """

    def __init__(self, cfg: TubeConfig, settings: SolverSettings | None = None,
                 regularization: float = REGULARIZATION):
        super().__init__(cfg.problem, settings)
        self.cfg = cfg
        p, K = cfg.problem, cfg.K
        b = ProgramBuilder()
        z = b.variable((p.N + 1, p.n), name="z")
        v = b.variable((p.N + 1, p.m), name="v")
        # H_tube (x - z_0) <= h_tube  ->  -H_tube z_0 <= h_tube - H_tube x
        self._tube_rows = b.add_le(-(cfg.tube.A @ z[0]), cfg.tube.b)
        for k in range(p.N):
            b.add_eq(z[k + 1] - p.A @ z[k] - p.B @ v[k])
            b.add_le(cfg.X_tight.A @ z[k], cfg.X_tight.b)
            b.add_le(cfg.U_tight.A @ v[k], cfg.U_tight.b)
        b.add_le(cfg.terminal.A @ z[p.N], cfg.terminal.b)
        self._applied = v[0] - K @ z[0]  # plus K x, added per call
        b.add_quadratic(self._applied, 1.0)
        b.add_quadratic(v, regularization)
        b.add_quadratic(z[0], regularization)
        self._prog = b.build()
        self._z, self._v = b.names["z"], b.names["v"]
        self._applied_coef = self._applied.widened(self._prog.n_var)
        self._plan = None

    def filter_step(self, x, u_L) -> FilterResult:
        p, cfg = self.problem, self.cfg
        x = np.asarray(x, dtype=float).reshape(-1)
        u_L = np.asarray(u_L, dtype=float).reshape(-1)
        if x.size != p.n or u_L.size != p.m:
            raise DimensionMismatchError("state or input has the wrong size")
        r = cfg.K @ x - u_L
        f = self._prog.f + 2.0 * self._applied_coef.T @ r
        b_in = self._prog.b_in.copy()
        b_in[self._tube_rows] = cfg.tube.b - cfg.tube.A @ x
        sol = self._solve(self._prog.with_data(f=f, b_in=b_in, offset=float(r @ r)))
        if not sol.ok:
            return FilterResult(None, u_L, np.inf, False, status=sol.status,
                                iterations=sol.iterations, solve_time=sol.solve_time)
        z = sol.x[self._z].reshape(p.N + 1, p.n)
        v = sol.x[self._v].reshape(p.N + 1, p.m)
        u = v[0] + cfg.K @ (x - z[0])
        return FilterResult(u, u_L, float(np.linalg.norm(u - u_L)), True, z=z, v=v[: p.N],
                            status=sol.status, iterations=sol.iterations, solve_time=sol.solve_time)

    def is_feasible(self, x) -> bool:
        return self.filter_step(x, np.zeros(self.problem.m)).feasible

    def reset(self) -> None:
        self.warm = None
        self._plan = None

    def safe_input(self, x, u_L) -> tuple[np.ndarray, FilterResult]:
        """Filtered input; off the safe set the last plan keeps running for up to ``N - 1`` steps."""
        x = np.asarray(x, dtype=float).reshape(-1)
        res = self.filter_step(x, u_L)
        if res.feasible:
            self._plan = {"z": res.z, "v": res.v, "t": 0}
            return res.u_applied, res
        plan = getattr(self, "_plan", None)
        if plan is not None and plan["t"] + 1 < self.problem.N:
            plan["t"] += 1
            t = plan["t"]
            return plan["v"][t] + self.cfg.K @ (x - plan["z"][t]), res
        self._plan = None
        return project_onto(self.problem.U, u_L), res


def tube_filter(x, u_L, cfg: TubeConfig) -> FilterResult:
    """One-shot tube filter evaluation."""
    return TubeMPSF(cfg).filter_step(x, u_L)
