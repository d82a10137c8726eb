"""Explicit safe set: an offline box with a periodic backup policy.

A single LP finds the largest box ``{z_0} + alpha * unit-box`` together with
a nominal trajectory and causal disturbance feedback such that every state
in the box is steered back into the box after ``N`` steps, with all
intermediate states and inputs robustly admissible.  Online, a learned input
is accepted when its disturbed successor set lies in the box; otherwise the
stored feedback policy is replayed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._programs import add_tightened_rows, response_chain, stage_blocks
from .errors import (
    DimensionMismatchError,
    HistoryInconsistentError,
    InfeasibleError,
    InitialStateOutsideSafeSetError,
    SolverFailureError,
)
from .polytope import Box, Polytope, zonotope_vertices
from .sls_core import (
    BlockLowerTriangular,
    SafetyProblem,
    SystemResponses,
    controller_from_responses,
    policy_input,
)
from .solver import AdmmSolver, Affine, ConicProgram, ProgramBuilder, SolverSettings, Status, l1_norm_bound, stack

ALPHA_TOL = 1e-9
BOX_TOL = 1e-9


def _diagonal(radius: Affine, n: int) -> Affine:
    """``diag(radius)`` as an ``n x n`` expression (scalar radius is repeated)."""
    w = radius.width
    rows = radius.widened(w)
    coef = np.zeros((n * n, w))
    for i in range(n):
        coef[i * n + i] = rows[i if radius.size > 1 else 0]
    return Affine(coef, np.zeros(n * n), (n, n))


@dataclass(frozen=True)
class ExplicitSafeSet:
    """Box-shaped safe set with its periodic backup plan.

    Attributes:
        alpha: box radius (the smallest per-axis radius for hyperboxes).
        radii: per-axis radii of the box around ``z_star[0]``.
        z_star: nominal states, ``(N + 1, n)``.
        v_star: nominal inputs, ``(N, m)``.
        K_star: causal feedback on the deviation from the nominal states.
        responses: closed-loop responses whose initial column already
            carries the box radii.
    """

    alpha: float
    radii: np.ndarray
    z_star: np.ndarray
    v_star: np.ndarray
    K_star: BlockLowerTriangular
    responses: SystemResponses

    @property
    def horizon(self) -> int:
        return self.v_star.shape[0]

    @property
    def center(self) -> np.ndarray:
        return self.z_star[0]

    @property
    def box(self) -> Box:
        return Box(self.center, self.radii)

    def slack(self, x) -> np.ndarray:
        """Per-axis distance to the box boundary (negative outside)."""
        return self.radii - np.abs(np.asarray(x, dtype=float) - self.center)

    def contains(self, x, tol: float = BOX_TOL) -> bool:
        return bool(np.all(self.slack(x) >= -tol))

    def to_dict(self) -> dict:
        Px, Pu = self.responses.Phi_x, self.responses.Phi_u
        return {
            "alpha": self.alpha,
            "radii": self.radii.tolist(),
            "z_star": self.z_star.tolist(),
            "v_star": self.v_star.tolist(),
            "K_star": {"dense": self.K_star.dense().tolist(), "p": self.K_star.p,
                       "col_sizes": list(self.K_star.col_sizes)},
            "Phi_x": {"dense": Px.dense().tolist(), "p": Px.p, "col_sizes": list(Px.col_sizes)},
            "Phi_u": {"dense": Pu.dense().tolist(), "p": Pu.p, "col_sizes": list(Pu.col_sizes)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "ExplicitSafeSet":
        def blt(d):
            return BlockLowerTriangular(np.asarray(d["dense"], dtype=float), d["p"], d["col_sizes"], check=False)

        v = np.asarray(data["v_star"], dtype=float)
        return cls(
            alpha=float(data["alpha"]),
            radii=np.asarray(data["radii"], dtype=float),
            z_star=np.asarray(data["z_star"], dtype=float),
            v_star=v.reshape(len(data["v_star"]), -1),
            K_star=blt(data["K_star"]),
            responses=SystemResponses(blt(data["Phi_x"]), blt(data["Phi_u"])),
        )

    @classmethod
    def from_json(cls, text: str) -> "ExplicitSafeSet":
        return cls.from_dict(json.loads(text))


def synthesis_program(problem: SafetyProblem, hyperbox: bool = False):
    """Assemble the safe-box LP.

    Returns:
        ``(program, layout)`` where ``layout`` maps names to variable slices
        and holds the response expressions for unpacking.
    """
    n, m, N = problem.n, problem.m, problem.N
    A, B = problem.A, problem.B
    b = ProgramBuilder()
    radius = b.variable(n if hyperbox else 1, name="alpha")
    z = b.variable((N + 1, n), name="z")
    v = b.variable((N, m), name="v")
    Phi_x, Phi_u = response_chain(b, A, B, problem.B_w_eff, N, init=_diagonal(radius, n))

    for k in range(N):
        b.add_eq(z[k + 1] - A @ z[k] - B @ v[k])
        add_tightened_rows(b, problem.X.A, problem.X.b, z[k], stage_blocks(Phi_x, k))
        add_tightened_rows(b, problem.U.A, problem.U.b, v[k], stage_blocks(Phi_u, k))

    # after N steps the reachable box must fit in the initial one, per axis
    drift = z[N] - z[0]
    final = stage_blocks(Phi_x, N)
    for j in range(n):
        spread = l1_norm_bound(b, stack([blk[j] for blk in final]))
        r_j = radius[j if hyperbox else 0]
        b.add_le(drift[j] + spread - r_j)
        b.add_le(-drift[j] + spread - r_j)
    b.add_linear(-radius.sum())
    return b.build(), {"names": dict(b.names), "Phi_x": Phi_x, "Phi_u": Phi_u}


def synthesize(problem: SafetyProblem, hyperbox: bool = False,
               settings: SolverSettings | None = None) -> ExplicitSafeSet:
    """Largest safe box with an ``N``-periodic return policy.

    Args:
        problem: system data; the terminal ingredients are not used.
        hyperbox: optimise one radius per axis (maximising their sum)
            instead of a single radius.
        settings: solver settings for the LP.

    Raises:
        InfeasibleError: no box with positive radius exists for this horizon.
        SolverFailureError: the LP solve did not terminate.
    """
    n, m, N = problem.n, problem.m, problem.N
    prog, layout = synthesis_program(problem, hyperbox)
    sol = AdmmSolver(settings).solve(prog)
    if sol.status is Status.INFEASIBLE:
        raise InfeasibleError("no safe box exists for this horizon")
    if sol.status is not Status.OPTIMAL:
        raise SolverFailureError(f"safe-box LP ended with status {sol.status.value}", sol)
    x = sol.x
    names = layout["names"]
    radius = np.atleast_1d(x[names["alpha"]])
    if np.min(radius) <= ALPHA_TOL:
        raise InfeasibleError(f"safe-box radius {np.min(radius):.3g} is not positive")
    radii = radius.copy() if hyperbox else np.full(n, radius[0])
    v = x[names["v"]].reshape(N, m)
    # re-derive the nominal trajectory and the state responses from the
    # independent variables so the stored plan is exactly consistent
    z = np.empty((N + 1, n))
    z[0] = x[names["z"]][:n]
    for k in range(N):
        z[k + 1] = problem.A @ z[k] + problem.B @ v[k]
    responses = _numeric_responses(problem, layout, x, radii)
    K = controller_from_responses(_unit_initial(responses, radii))
    return ExplicitSafeSet(alpha=float(np.min(radii)), radii=radii, z_star=z, v_star=v,
                           K_star=K, responses=responses)


def _numeric_responses(problem: SafetyProblem, layout: dict, x, radii) -> SystemResponses:
    n, m, N = problem.n, problem.m, problem.N
    B_w = problem.B_w_eff
    cols = (n,) + (problem.n_w,) * N
    px, pu = {}, {}
    for c in range(N + 1):
        px[(c, c)] = np.diag(radii) if c == 0 else B_w
        for k in range(c, N):
            if c > 0 and not np.any(B_w):
                # responses to a disturbance that cannot occur are arbitrary; pin them to zero
                pu[(k, c)] = np.zeros((m, cols[c]))
            else:
                pu[(k, c)] = layout["Phi_u"][(k, c)].value(x).reshape(m, cols[c])
            px[(k + 1, c)] = problem.A @ px[(k, c)] + problem.B @ pu[(k, c)]
    return SystemResponses(
        Phi_x=BlockLowerTriangular.from_blocks(px, N, n, cols),
        Phi_u=BlockLowerTriangular.from_blocks(pu, N, m, cols),
    )


def _unit_initial(resp: SystemResponses, radii) -> SystemResponses:
    """Responses to the raw initial deviation (initial column divided by the radii)."""
    n0 = resp.n0
    scale = np.ones(resp.Phi_x.shape[1])
    scale[:n0] = 1.0 / np.asarray(radii)
    Px, Pu = resp.Phi_x, resp.Phi_u
    return SystemResponses(
        BlockLowerTriangular(Px.dense() * scale, Px.p, Px.col_sizes, check=False),
        BlockLowerTriangular(Pu.dense() * scale, Pu.p, Pu.col_sizes, check=False),
    )


def return_margin(S: ExplicitSafeSet) -> np.ndarray:
    """Per-axis slack of the ``N``-step return condition at the stored plan."""
    N = S.horizon
    drift = np.abs(S.z_star[N] - S.z_star[0])
    spread = np.abs(S.responses.Phi_x.row(N)).sum(axis=1)
    return S.radii - drift - spread


def check_learned_input(x, u_L, S: ExplicitSafeSet, problem: SafetyProblem) -> bool:
    """Whether ``u_L`` is admissible and keeps every disturbed successor in the box."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u_L = np.asarray(u_L, dtype=float).reshape(-1)
    if x.size != problem.n or u_L.size != problem.m:
        raise DimensionMismatchError("state or input has the wrong size")
    if not np.all(problem.U.A @ u_L <= problem.U.b):
        return False
    spread = np.abs(problem.B_w_eff).sum(axis=1)
    nxt = problem.A @ x + problem.B @ u_L
    return bool(np.all(np.abs(nxt - S.center) + spread <= S.radii))


@dataclass
class BackupState:
    """Runtime phase of the backup policy.

    ``history[i]`` is the state measured ``i`` steps after the backup
    engaged; while engaged it holds exactly ``j + 1`` states.
    """

    j: int = 0
    engaged: bool = False
    history: list = field(default_factory=list)

    def reset(self) -> None:
        self.j = 0
        self.engaged = False
        self.history = []


def backup_input(bs: BackupState, S: ExplicitSafeSet) -> np.ndarray:
    """Input of the stored feedback policy at the current backup phase.

    Raises:
        HistoryInconsistentError: the state is not engaged or its history
            length does not match the phase.
    """
    if not bs.engaged or not 0 <= bs.j < S.horizon or len(bs.history) != bs.j + 1:
        raise HistoryInconsistentError(
            f"backup phase {bs.j} with {len(bs.history)} recorded states (engaged={bs.engaged})"
        )
    return policy_input(S.K_star, S.z_star, S.v_star, bs.history)


class ExplicitFilter:
    """Runtime of the explicit filter: cheap check, periodic backup otherwise."""

    def __init__(self, S: ExplicitSafeSet, problem: SafetyProblem):
        if S.horizon != problem.N or S.center.size != problem.n:
            raise DimensionMismatchError("safe set does not match the problem")
        self.S = S
        self.problem = problem
        self.state = BackupState()

    def reset(self) -> None:
        self.state.reset()

    def safe_input(self, x, u_L) -> tuple[np.ndarray, dict]:
        """Filtered input and ``{"engaged", "phase"}``.

        Raises:
            InitialStateOutsideSafeSetError: a new backup cycle would start
                from a state outside the box.
        """
        x = np.asarray(x, dtype=float).reshape(-1)
        u_L = np.asarray(u_L, dtype=float).reshape(-1)
        bs = self.state
        if check_learned_input(x, u_L, self.S, self.problem):
            bs.reset()
            return u_L.copy(), {"engaged": False, "phase": 0}
        if bs.engaged and bs.j + 1 < self.S.horizon:
            bs.j += 1
            bs.history.append(x)
        else:
            if not self.S.contains(x):
                raise InitialStateOutsideSafeSetError(
                    f"backup cycle would start outside the safe box (slack {self.S.slack(x).min():.3g})"
                )
            bs.j, bs.engaged, bs.history = 0, True, [x]
        return backup_input(bs, self.S), {"engaged": True, "phase": bs.j}


def run_algorithm1(S: ExplicitSafeSet, problem: SafetyProblem, x0, learned_policy, disturbance_source, T: int):
    """Closed loop of the explicit filter from ``x0`` in the box.

    Returns:
        The simulated ``Episode``.

    Raises:
        InitialStateOutsideSafeSetError: ``x0`` is outside the box.
    """
    from .sim import run_episode

    if not S.contains(x0):
        raise InitialStateOutsideSafeSetError("initial state is outside the safe box")
    return run_episode(ExplicitFilter(S, problem), learned_policy, disturbance_source, x0, T, problem=problem)


def stage_zonotopes(S: ExplicitSafeSet, stages=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(center, generators)`` of the reachable set at each stage (default ``0..N-1``)."""
    stages = range(S.horizon) if stages is None else stages
    return [(S.z_star[k], S.responses.Phi_x.row(k)) for k in stages]


def rci_hull(S: ExplicitSafeSet) -> Polytope:
    """Convex hull of the stage reachable sets of the backup plan.

    Raises:
        DimensionTooLargeError: state dimension above 3.
    """
    V = np.vstack([zonotope_vertices(c, G) for c, G in stage_zonotopes(S)])
    return Polytope.from_vertices(V).minimal()


class RCIFilter:
    """Least-squares input correction keeping the successor set in ``C``."""

    def __init__(self, C: Polytope, problem: SafetyProblem, settings: SolverSettings | None = None):
        self.C = C
        self.problem = problem
        p = problem
        margin = np.abs(C.A @ p.B_w_eff).sum(axis=1)
        self._G = np.vstack([C.A @ p.B, p.U.A])
        self._h_const = np.concatenate([C.b - margin, p.U.b])
        self._CA = C.A @ p.A
        self._prog = ConicProgram(f=np.zeros(p.m), H=2.0 * np.eye(p.m), A_in=self._G, b_in=self._h_const)
        self._solver = AdmmSolver(settings)

    def reset(self) -> None:
        pass

    def filter_input(self, x, u_L) -> np.ndarray:
        """Minimiser of ``||u - u_L||`` over inputs with a robustly safe successor.

        Raises:
            InfeasibleError: no such input exists at ``x``.
        """
        p = self.problem
        x = np.asarray(x, dtype=float).reshape(-1)
        u_L = np.asarray(u_L, dtype=float).reshape(-1)
        if x.size != p.n or u_L.size != p.m:
            raise DimensionMismatchError("state or input has the wrong size")
        h = self._h_const.copy()
        h[: self.C.n_rows] -= self._CA @ x
        if np.all(self._G @ u_L <= h):
            return u_L.copy()
        sol = self._solver.solve(self._prog.with_data(f=-2.0 * u_L, b_in=h))
        if sol.status is Status.INFEASIBLE:
            raise InfeasibleError("state is outside the robust pre-image of the invariant set")
        if not sol.ok:
            raise SolverFailureError(f"projection ended with status {sol.status.value}", sol)
        return sol.x

    def safe_input(self, x, u_L) -> tuple[np.ndarray, dict]:
        u = self.filter_input(x, u_L)
        return u, {"engaged": bool(np.any(u != np.asarray(u_L, dtype=float).reshape(-1)))}


def rci_filter(x, u_L, C: Polytope, problem: SafetyProblem) -> np.ndarray:
    """One-shot evaluation of :class:`RCIFilter`."""
    return RCIFilter(C, problem).filter_input(x, u_L)
