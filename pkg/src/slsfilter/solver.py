"""Convex QP/LP solving for the safety-filter programs.

The built-in solver is an operator-splitting (ADMM) method in the style of
OSQP: Ruiz equilibration, a cached factorisation of the quasi-definite KKT
matrix, over-relaxation, adaptive step size, infeasibility certificates and
an active-set polishing step.  A warm start is polished before iterating,
so an unchanged active set costs one factorisation.

Programs whose solution sits close to the boundary of the feasible set make
first-order splitting crawl (thousands of iterations for a few dozen
variables).  If ADMM has not terminated after ``interior_after`` iterations,
the solve continues with a primal-dual interior-point phase on the same
scaled data and KKT sparsity pattern, and the result is polished on its
active set as before.

Programs are posed as::

    minimise    0.5 x' H x + f' x
    subject to  A_eq x == b_eq,   A_in x <= b_in
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp
import qdldl

from .errors import DimensionMismatchError


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


def _as_matrix(M, n_cols: int):
    if M is None:
        return sp.csc_matrix((0, n_cols))
    if sp.issparse(M):
        return M.tocsc()
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return np.zeros((0, n_cols))
    return M


def _as_vector(v, size: int) -> np.ndarray:
    if v is None:
        return np.zeros(size)
    return np.asarray(v, dtype=float).reshape(-1)


@dataclass(frozen=True)
class ConicProgram:
    """``min 0.5 x'Hx + f'x  s.t.  A_eq x = b_eq, A_in x <= b_in``.

    Matrices may be dense arrays or scipy sparse matrices.  ``H=None`` gives
    a linear program.
    """

    f: np.ndarray
    H: object = None
    A_eq: object = None
    b_eq: np.ndarray | None = None
    A_in: object = None
    b_in: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        f = _as_vector(self.f, 0)
        n = f.size
        H = sp.csc_matrix((n, n)) if self.H is None else _as_matrix(self.H, n)
        A_eq = _as_matrix(self.A_eq, n)
        A_in = _as_matrix(self.A_in, n)
        b_eq = _as_vector(self.b_eq, A_eq.shape[0])
        b_in = _as_vector(self.b_in, A_in.shape[0])
        if H.shape != (n, n):
            raise DimensionMismatchError(f"H is {H.shape}, expected {(n, n)}")
        if A_eq.shape != (b_eq.size, n) or A_in.shape != (b_in.size, n):
            raise DimensionMismatchError("constraint matrices do not match their right-hand sides")
        Hd = H.toarray() if sp.issparse(H) else H
        if np.max(np.abs(Hd - Hd.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(Hd), initial=0.0)):
            raise ValueError("H must be symmetric")
        for name, arr in (("f", f), ("b_eq", b_eq), ("b_in", b_in)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "A_in", A_in)
        object.__setattr__(self, "b_eq", b_eq)
        object.__setattr__(self, "b_in", b_in)

    @property
    def n_var(self) -> int:
        return self.f.size

    @property
    def n_eq(self) -> int:
        return self.b_eq.size

    @property
    def n_in(self) -> int:
        return self.b_in.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.H @ x) + self.f @ x + self.offset)

    def with_data(self, **changes) -> "ConicProgram":
        """Copy with new vectors; matrices are shared so solver caches stay valid."""
        out = copy.copy(self)
        for name, value in changes.items():
            if name == "offset":
                object.__setattr__(out, name, float(value))
                continue
            if name not in ("f", "b_eq", "b_in"):
                raise ValueError(f"with_data only replaces vectors, not {name!r}")
            value = np.asarray(value, dtype=float).reshape(-1)
            if value.shape != getattr(self, name).shape or not np.all(np.isfinite(value)):
                raise ValueError(f"replacement {name} has the wrong size or non-finite entries")
            object.__setattr__(out, name, value)
        return out

    def dump_triplets(self, path) -> None:
        """Write all data as ``section row col value`` lines (0-based)."""
        with open(path, "w") as fh:
            fh.write(f"# n_var {self.n_var} n_eq {self.n_eq} n_in {self.n_in}\n")
            for name in ("H", "A_eq", "A_in"):
                M = sp.coo_matrix(getattr(self, name))
                for i, j, v in zip(M.row, M.col, M.data):
                    fh.write(f"{name} {i} {j} {float(v)!r}\n")
            for name in ("f", "b_eq", "b_in"):
                for i, v in enumerate(getattr(self, name)):
                    if v != 0.0:
                        fh.write(f"{name} {i} 0 {float(v)!r}\n")


@dataclass(frozen=True)
class SolverSettings:
    """Tolerances and tuning of :class:`AdmmSolver`.

    Termination uses unscaled residuals: primal ``<= eps_abs + eps_rel *
    scale`` and likewise for the dual.  ``interior_after = 0`` keeps the
    solve purely first-order up to ``max_iter``.
    """

    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    eps_prim_inf: float = 1e-5
    eps_dual_inf: float = 1e-5
    max_iter: int = 100_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iters: int = 15
    check_every: int = 10
    adapt_every: int = 50
    polish: bool = True
    polish_delta: float = 1e-9
    polish_refine: int = 4
    polish_rounds: int = 3
    polish_rounds_kkt: int = 3
    polish_prox: float = 1e-5
    polish_near: float = 1e-6
    polish_every: int = 100
    interior_after: int = 50
    divergence_threshold: float = 1e6
    divergence_after: int = 1000


@dataclass(frozen=True)
class Solution:
    x: np.ndarray | None
    status: Status
    y_eq: np.ndarray | None = None
    y_in: np.ndarray | None = None
    primal_residual: float = np.inf
    dual_residual: float = np.inf
    objective: float = np.nan
    iterations: int = 0
    solve_time: float = 0.0
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


def kkt_residuals(prog: ConicProgram, sol: Solution) -> dict:
    """Stationarity, primal feasibility and complementarity residuals (inf-norm)."""
    x = sol.x
    y_eq = sol.y_eq if sol.y_eq is not None else np.zeros(prog.n_eq)
    y_in = sol.y_in if sol.y_in is not None else np.zeros(prog.n_in)
    stat = prog.H @ x + prog.f + prog.A_eq.T @ y_eq + prog.A_in.T @ y_in
    eq = prog.A_eq @ x - prog.b_eq
    slack = prog.b_in - prog.A_in @ x
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal": float(max(np.max(np.abs(eq), initial=0.0), np.max(-slack, initial=0.0))),
        "dual_sign": float(np.max(-y_in, initial=0.0)),
        "complementarity": float(np.max(np.abs(y_in * slack), initial=0.0)),
    }


def _col_inf_norm(M) -> np.ndarray:
    if sp.issparse(M):
        return np.asarray(abs(M).max(axis=0).todense()).ravel() if M.shape[0] else np.zeros(M.shape[1])
    return np.max(np.abs(M), axis=0, initial=0.0)


def _row_inf_norm(M) -> np.ndarray:
    if sp.issparse(M):
        return np.asarray(abs(M).max(axis=1).todense()).ravel() if M.shape[1] else np.zeros(M.shape[0])
    return np.max(np.abs(M), axis=1, initial=0.0)


def _limit(v: np.ndarray) -> np.ndarray:
    v = np.where(v < 1e-4, 1.0, v)
    return np.minimum(v, 1e4)


class _Workspace:
    """Scaled problem data and KKT factorisations for one matrix pair."""

    def __init__(self, H, C, is_eq: np.ndarray, settings: SolverSettings):
        n = H.shape[0]
        P = sp.csc_matrix(H)
        C = sp.csc_matrix(C)
        D = np.ones(n)
        E = np.ones(C.shape[0])
        for _ in range(settings.scaling_iters):
            d = 1.0 / np.sqrt(_limit(np.maximum(_col_inf_norm(P), _col_inf_norm(C))))
            e = 1.0 / np.sqrt(_limit(_row_inf_norm(C))) if C.shape[0] else np.ones(0)
            Dd, Ed = sp.diags(d), sp.diags(e)
            P = (Dd @ P @ Dd).tocsc()
            C = (Ed @ C @ Dd).tocsc()
            D *= d
            E *= e
        p_norm = np.mean(_col_inf_norm(P)) if n else 0.0
        self.c = 1.0 / min(max(p_norm, 1e-4), 1e4) if p_norm > 1e-10 else 1.0
        self.P = (self.c * P).tocsc()
        self.C = C
        self.CT = C.T.tocsc()
        self.D = D
        self.E = E
        self.is_eq = is_eq
        self.settings = settings
        self._factors: dict[float, object] = {}
        self._patterns: dict[str, _PatternKKT] = {}

    def pattern_kkt(self, key: str, top, top_shift: float = 0.0) -> "_PatternKKT":
        """Cached fixed-pattern KKT matrix; ``top`` is a thunk for its upper block."""
        if key not in self._patterns:
            self._patterns[key] = _PatternKKT(top(), self.C, top_shift)
        return self._patterns[key]

    def factor(self, rho: float):
        if rho not in self._factors:
            s = self.settings
            rho_vec = np.where(self.is_eq, 1e3 * rho, rho)
            n, m = self.P.shape[0], self.C.shape[0]
            K = sp.bmat(
                [
                    [self.P + s.sigma * sp.eye(n), self.CT],
                    [self.C, sp.diags(-1.0 / rho_vec) if m else None],
                ],
                format="csc",
            )
            if len(self._factors) > 12:
                self._factors.pop(next(iter(self._factors)))
            self._factors[rho] = (_ldl(K), rho_vec)
        return self._factors[rho]


def _ldl(K):
    """LDL' factorisation of a quasi-definite matrix (no pivoting needed)."""
    return qdldl.Solver(sp.csc_matrix(K))


class AdmmSolver:
    """Dense-interface QP/LP solver with a per-instance workspace cache.

    Repeated solves that share the same ``H``/``A_eq``/``A_in`` objects (as
    produced by :meth:`ConicProgram.with_data`) reuse the scaling and
    factorisations.  One instance per thread.
    """

    def __init__(self, settings: SolverSettings | None = None):
        self.settings = settings or SolverSettings()
        self._key = None
        self._ws: _Workspace | None = None

    def _workspace(self, prog: ConicProgram) -> _Workspace:
        key = (id(prog.H), id(prog.A_eq), id(prog.A_in))
        if self._ws is None or key != self._key[0]:
            C = sp.vstack([sp.csc_matrix(prog.A_eq), sp.csc_matrix(prog.A_in)], format="csc")
            is_eq = np.concatenate([np.ones(prog.n_eq, bool), np.zeros(prog.n_in, bool)])
            self._ws = _Workspace(prog.H, C, is_eq, self.settings)
            # keep references so ids cannot be recycled while cached
            self._key = (key, (prog.H, prog.A_eq, prog.A_in))
        return self._ws

    def solve(self, prog: ConicProgram, warm_start: Solution | None = None) -> Solution:
        t0 = time.perf_counter()
        s = self.settings
        ws = self._workspace(prog)
        n = prog.n_var
        m = prog.n_eq + prog.n_in
        D, E, c = ws.D, ws.E, ws.c
        q = c * D * prog.f
        l_raw = np.concatenate([prog.b_eq, np.full(prog.n_in, -np.inf)])
        u_raw = np.concatenate([prog.b_eq, prog.b_in])
        l, u = E * l_raw, E * u_raw
        P, C, CT = ws.P, ws.C, ws.CT

        x = np.zeros(n)
        z = np.zeros(m)
        y = np.zeros(m)
        if warm_start is not None and warm_start.x is not None and warm_start.x.size == n:
            x = warm_start.x / D
            z = np.clip(C @ x, l, u)
            if warm_start.y_eq is not None and warm_start.y_in is not None:
                y = c * np.concatenate([warm_start.y_eq, warm_start.y_in]) / E

        def unscaled_residuals(x, z, y):
            xu = D * x
            Cx = (C @ x) / E
            zu = z / E
            yu = E * y / c
            Px = (P @ x) / (c * D)
            CTy = (CT @ y) / (c * D)
            q_u = prog.f
            r_p = np.max(np.abs(Cx - zu), initial=0.0)
            r_d = np.max(np.abs(Px + q_u + CTy), initial=0.0)
            e_p = s.eps_abs + s.eps_rel * max(np.max(np.abs(Cx), initial=0.0), np.max(np.abs(zu), initial=0.0))
            e_d = s.eps_abs + s.eps_rel * max(
                np.max(np.abs(Px), initial=0.0), np.max(np.abs(CTy), initial=0.0), np.max(np.abs(q_u), initial=0.0)
            )
            return xu, yu, r_p, r_d, e_p, e_d

        def finish(status, x_u=None, y_u=None, r_p=np.inf, r_d=np.inf, it=0, polished=False):
            obj = prog.objective(x_u) if x_u is not None else np.nan
            y_eq = y_u[: prog.n_eq] if y_u is not None else None
            y_in = np.maximum(y_u[prog.n_eq:], 0.0) if y_u is not None else None
            return Solution(
                x=x_u,
                status=status,
                y_eq=y_eq,
                y_in=y_in,
                primal_residual=float(r_p),
                dual_residual=float(r_d),
                objective=obj,
                iterations=it,
                solve_time=time.perf_counter() - t0,
                polished=polished,
            )

        def try_polish(x, z, y, it, restore=False, strict=False):
            if not s.polish:
                return None
            out = self._polish(ws, prog, q, l, u, x, z, y)
            polished = out is not None
            if out is None:
                xp = self._restore(ws, l, u, x) if restore else None
                if xp is None:
                    return None
                out = (xp, y)
            xp, yp = out
            xu = D * xp
            yu = E * yp / c
            Cx = prog.A_eq @ xu if prog.n_eq else np.zeros(0)
            Ain_x = prog.A_in @ xu if prog.n_in else np.zeros(0)
            r_p = max(
                np.max(np.abs(Cx - prog.b_eq), initial=0.0),
                np.max(Ain_x - prog.b_in, initial=0.0),
            )
            yin = yu[prog.n_eq:]
            stat = prog.H @ xu + prog.f + prog.A_eq.T @ yu[: prog.n_eq] + prog.A_in.T @ yin
            r_d = np.max(np.abs(stat), initial=0.0)
            scale_p = max(np.max(np.abs(Cx), initial=0.0), np.max(np.abs(Ain_x), initial=0.0),
                          np.max(np.abs(prog.b_in), initial=0.0), np.max(np.abs(prog.b_eq), initial=0.0))
            e_p = s.eps_abs + s.eps_rel * scale_p
            e_d = s.eps_abs + s.eps_rel * max(
                np.max(np.abs(prog.H @ xu), initial=0.0), np.max(np.abs(prog.f), initial=0.0),
                np.max(np.abs(prog.A_in.T @ yin), initial=0.0),
            )
            # an active-set point with a clearly negative multiplier has the wrong active set
            sign_tol = s.eps_abs if polished else e_d
            if strict:
                # a guessed active set must be exact, not merely within the relative tolerance
                e_p = e_d = sign_tol = s.eps_abs
            if r_p <= e_p and r_d <= e_d and np.min(yin, initial=0.0) >= -sign_tol:
                return finish(Status.OPTIMAL, xu, yu, r_p, r_d, it, polished=polished)
            return None

        if warm_start is not None and warm_start.status is Status.OPTIMAL:
            res = try_polish(x, z, y, 0, strict=True)
            if res is not None:
                return res

        rho = s.rho
        lu, rho_vec = ws.factor(rho)
        next_polish = s.polish_every
        x_prev, y_prev = x.copy(), y.copy()
        y_window = y.copy()
        for it in range(1, s.max_iter + 1):
            x_prev[:] = x
            y_prev[:] = y
            rhs = np.concatenate([s.sigma * x - q, z - y / rho_vec])
            sol = lu.solve(rhs)
            x_t = sol[:n]
            nu = sol[n:]
            z_t = z + (nu - y) / rho_vec
            x_new = s.alpha * x_t + (1.0 - s.alpha) * x
            z_relax = s.alpha * z_t + (1.0 - s.alpha) * z
            z_new = np.clip(z_relax + y / rho_vec, l, u)
            y_new = y + rho_vec * (z_relax - z_new)
            x, z, y = x_new, z_new, y_new

            if it % s.check_every and it != s.max_iter:
                continue
            xu, yu, r_p, r_d, e_p, e_d = unscaled_residuals(x, z, y)
            if r_p <= e_p and r_d <= e_d:
                res = try_polish(x, z, y, it, restore=True)
                return res if res is not None else finish(Status.OPTIMAL, xu, yu, r_p, r_d, it)
            if it >= next_polish:
                next_polish = it + max(s.polish_every, it // 4)
                res = try_polish(x, z, y, it)
                if res is not None:
                    return res
            if self._primal_infeasible(ws, prog, y - y_prev, l_raw, u_raw) or (
                it >= s.divergence_after
                and np.max(np.abs(y)) > s.divergence_threshold
                and self._primal_infeasible(ws, prog, y, l_raw, u_raw)
            ):
                return finish(Status.INFEASIBLE, it=it)
            if self._dual_infeasible(ws, prog, x - x_prev, l_raw, u_raw):
                return finish(Status.UNBOUNDED, it=it)
            if it % s.adapt_every == 0:
                if self._certify_infeasible(ws, prog, y - y_window, u_raw):
                    return finish(Status.INFEASIBLE, it=it)
                y_window = y.copy()
                new_rho = self._adapt_rho(ws, prog, q, x, z, y, rho)
                if new_rho != rho:
                    rho = new_rho
                    lu, rho_vec = ws.factor(rho)
            if it == s.interior_after:
                res = self._interior(ws, prog, q, l, u, l_raw, u_raw, unscaled_residuals, try_polish, finish, it)
                if res is not None:
                    return res
        xu, yu, r_p, r_d, _, _ = unscaled_residuals(x, z, y)
        return finish(Status.MAX_ITER, xu, yu, r_p, r_d, s.max_iter)

    # ------------------------------------------------------------------
    def _interior(self, ws, prog, q, l, u, l_raw, u_raw, unscaled_residuals, try_polish, finish, it0):
        s = self.settings

        def converged(x, y, gap):
            z = np.clip(ws.C @ x, l, u)
            xu, _, r_p, r_d, e_p, e_d = unscaled_residuals(x, z, y)
            obj = abs(prog.objective(xu))
            return r_p <= e_p and r_d <= e_d and gap / ws.c <= s.eps_abs + s.eps_rel * obj

        def infeasible(y):
            return np.max(np.abs(y), initial=0.0) > 1e4 and self._certify_infeasible(ws, prog, y, u_raw)

        def unbounded(x):
            return np.max(np.abs(x), initial=0.0) > 1e8 and self._dual_infeasible(ws, prog, x, l_raw, u_raw)

        status, x, y, k = _InteriorPoint(ws, s).run(q, u, converged, infeasible, unbounded)
        it = it0 + k
        if status is None:
            return None
        if status is not Status.OPTIMAL:
            return finish(status, it=it)
        z = np.clip(ws.C @ x, l, u)
        res = try_polish(x, z, y, it, restore=True)
        if res is not None:
            return res
        xu, yu, r_p, r_d, _, _ = unscaled_residuals(x, z, y)
        return finish(Status.OPTIMAL, xu, yu, r_p, r_d, it)

    def _adapt_rho(self, ws, prog, q, x, z, y, rho):
        Cx = ws.C @ x
        Px = ws.P @ x
        CTy = ws.CT @ y
        r_p = np.max(np.abs(Cx - z), initial=0.0) / max(np.max(np.abs(Cx), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-10)
        r_d = np.max(np.abs(Px + q + CTy), initial=0.0) / max(
            np.max(np.abs(Px), initial=0.0), np.max(np.abs(CTy), initial=0.0), np.max(np.abs(q), initial=0.0), 1e-10
        )
        ratio = np.sqrt(r_p / max(r_d, 1e-12))
        if 0.2 < ratio < 5.0:
            return rho
        new = float(np.clip(rho * ratio, 1e-6, 1e6))
        return float(10.0 ** (np.round(4.0 * np.log10(new)) / 4.0))

    def _primal_infeasible(self, ws, prog, dy_scaled, l_raw, u_raw) -> bool:
        s = self.settings
        dy = ws.E * dy_scaled
        lo_inf = ~np.isfinite(l_raw)
        up_inf = ~np.isfinite(u_raw)
        dy = np.where(lo_inf & up_inf, 0.0, dy)
        dy = np.where(up_inf & ~lo_inf, np.minimum(dy, 0.0), dy)
        dy = np.where(lo_inf & ~up_inf, np.maximum(dy, 0.0), dy)
        norm = np.max(np.abs(dy), initial=0.0)
        if norm < 1e-12:
            return False
        A = sp.vstack([sp.csc_matrix(prog.A_eq), sp.csc_matrix(prog.A_in)]) if not hasattr(ws, "C_raw") else ws.C_raw
        ws.C_raw = A
        lhs = np.max(np.abs(A.T @ dy), initial=0.0)
        u_f = np.where(up_inf, 0.0, u_raw)
        l_f = np.where(lo_inf, 0.0, l_raw)
        support = u_f @ np.maximum(dy, 0.0) + l_f @ np.minimum(dy, 0.0)
        return lhs <= s.eps_prim_inf * norm and support <= -s.eps_prim_inf * norm

    def _certify_infeasible(self, ws, prog, dy_scaled, u_raw) -> bool:
        """Try to turn a dual drift direction into an exact Farkas certificate.

        The drift is projected onto ``{w : C_S' w = 0}`` over the rows where it
        is significant; the projected vector is accepted if it has the right
        signs and a strictly negative support value.
        """
        s = self.settings
        dy = ws.E * dy_scaled
        dy[prog.n_eq:] = np.maximum(dy[prog.n_eq:], 0.0)
        scale = np.max(np.abs(dy), initial=0.0)
        if scale < 1e-12:
            return False
        rows = np.flatnonzero(np.abs(dy) > 1e-4 * scale)
        if rows.size > prog.n_var + 50:
            return False
        if not hasattr(ws, "C_raw"):
            ws.C_raw = sp.vstack([sp.csc_matrix(prog.A_eq), sp.csc_matrix(prog.A_in)]).tocsr()
        C_S = ws.C_raw[rows].toarray()
        # projection of dy_S onto the null space of C_S'
        coef = np.linalg.lstsq(C_S, dy[rows], rcond=None)[0]
        w = dy[rows] - C_S @ coef
        ineq = rows >= prog.n_eq
        w[ineq] = np.maximum(w[ineq], 0.0)
        w_norm = np.max(np.abs(w), initial=0.0)
        if w_norm < 1e-9 * scale:
            return False
        b_S = u_raw[rows]
        col_scale = np.max(np.abs(C_S), initial=1.0)
        lhs = np.max(np.abs(C_S.T @ w), initial=0.0)
        gap = b_S @ w
        return lhs <= 1e-9 * col_scale * w_norm and gap <= -s.eps_prim_inf * w_norm * max(1.0, np.max(np.abs(b_S)))

    def _dual_infeasible(self, ws, prog, dx_scaled, l_raw, u_raw) -> bool:
        s = self.settings
        dx = ws.D * dx_scaled
        norm = np.max(np.abs(dx), initial=0.0)
        if norm < 1e-12:
            return False
        eps = s.eps_dual_inf * norm
        if np.max(np.abs(prog.H @ dx), initial=0.0) > eps or prog.f @ dx > -eps:
            return False
        Cdx = np.concatenate([prog.A_eq @ dx, prog.A_in @ dx])
        lo_inf = ~np.isfinite(l_raw)
        up_inf = ~np.isfinite(u_raw)
        ok_up = up_inf | (Cdx <= eps)
        ok_lo = lo_inf | (Cdx >= -eps)
        return bool(np.all(ok_up & ok_lo))

    def _polish(self, ws, prog, q, l, u, x, z, y):
        """Refine an ADMM iterate by solving on its active set.

        The rows guessed active (by multiplier sign or by a nearly attained
        bound) are imposed as equalities and a small proximal term keeps the
        point near ``x`` along directions the cost barely determines.  A few
        active-set corrections follow: violated rows are added and rows with
        wrong-sign multipliers dropped.  Returns scaled ``(x, y)`` or ``None``.
        """
        s = self.settings
        finite_l, finite_u = np.isfinite(l), np.isfinite(u)
        Cx = ws.C @ x
        near_u = np.abs(np.where(finite_u, u, 0.0))
        near_l = np.abs(np.where(finite_l, l, 0.0))
        upper = finite_u & ((u - z < y) | (u - Cx <= s.polish_near * (1.0 + near_u)))
        lower = finite_l & ((z - l < -y) | (Cx - l <= s.polish_near * (1.0 + near_l))) & ~upper
        upper |= ws.is_eq
        lower &= ~ws.is_eq
        for _ in range(s.polish_rounds_kkt):
            out = self._polish_solve(ws, q, l, u, lower, upper, x)
            if out is None:
                return None
            xp, yp = out
            Cx = ws.C @ xp
            act = lower | upper
            add_up = ~act & finite_u & (Cx > u + 1e-10 * (1.0 + near_u))
            add_lo = ~act & finite_l & (Cx < l - 1e-10 * (1.0 + near_l))
            drop = (upper & ~ws.is_eq & (yp < 0.0)) | (lower & (yp > 0.0))
            if not (add_up.any() or add_lo.any() or drop.any()):
                return xp, yp
            upper = (upper & ~drop) | add_up
            lower = (lower & ~drop) | add_lo
        return None

    def _restore(self, ws, l, u, x):
        """Nearest point to ``x`` that meets its nearly active rows with equality.

        Used when the KKT polish fails on a converged iterate: the result
        satisfies every row to round-off, which matters more for a safety
        filter than the last digits of a tie-breaking objective.
        """
        s = self.settings
        n = x.size
        finite_l, finite_u = np.isfinite(l), np.isfinite(u)
        mag_u = 1.0 + np.abs(np.where(finite_u, u, 0.0))
        mag_l = 1.0 + np.abs(np.where(finite_l, l, 0.0))
        Cx = ws.C @ x
        upper = ws.is_eq | (finite_u & (Cx >= u - s.polish_near * mag_u))
        lower = finite_l & (Cx <= l + s.polish_near * mag_l) & ~upper
        kkt = ws.pattern_kkt("restore", lambda: sp.eye(n, format="csc"))
        for _ in range(s.polish_rounds):
            act = lower | upper
            b_A = np.where(upper, u, np.where(lower, l, 0.0))
            sol = kkt.solve_masked(act, np.concatenate([x, b_A]), s)
            if sol is None:
                return None
            xp = sol[:n]
            Cx = ws.C @ xp
            bad_u = finite_u & (Cx > u + 1e-11 * mag_u)
            bad_l = finite_l & (Cx < l - 1e-11 * mag_l)
            if not (bad_u.any() or bad_l.any()):
                return xp
            if not ((bad_u & ~upper).any() or (bad_l & ~lower).any()):
                return None  # equalities themselves inconsistent
            upper |= bad_u
            lower |= bad_l & ~upper
        return None

    def _polish_solve(self, ws, q, l, u, lower, upper, x_ref):
        s = self.settings
        n = q.size
        prox = s.polish_prox
        act = lower | upper
        b_A = np.where(upper, u, np.where(lower, l, 0.0))
        kkt = ws.pattern_kkt("polish", lambda: (ws.P + prox * sp.eye(n)).tocsc())
        sol = kkt.solve_masked(act, np.concatenate([prox * x_ref - q, b_A]), s)
        if sol is None:
            return None
        return sol[:n], np.where(act, sol[n:], 0.0)


class _PatternKKT:
    """Quasi-definite matrix ``[[T, C'], [C, -diag(d)]]`` with a fixed pattern.

    Only the diagonal ``d`` changes between solves, so every solve after the
    first is a numeric refactorisation.  Rows can be switched off by a huge
    ``d``, which decouples them.  The factorised matrix may carry a small
    shift on ``T`` and on the switched-on rows; iterative refinement against
    the unshifted matrix removes its effect.
    """

    OFF = 1e12

    def __init__(self, top, C, top_shift: float = 0.0):
        n, m = top.shape[0], C.shape[0]
        self.top = sp.csc_matrix(top)
        self.C = sp.csc_matrix(C)
        self.CT = self.C.T.tocsc()
        self.n, self.m = n, m
        K = sp.bmat([[self.top + top_shift * sp.eye(n), self.CT], [self.C, -sp.eye(m) if m else None]],
                    format="csc")
        K.sort_indices()
        pos = np.empty(m, dtype=int)
        for j in range(n, n + m):
            lo, hi = K.indptr[j], K.indptr[j + 1]
            pos[j - n] = lo + int(np.flatnonzero(K.indices[lo:hi] == j)[0])
        self.K, self.pos, self.fac = K, pos, None

    def factor(self, d_fact) -> bool:
        self.K.data[self.pos] = -d_fact
        try:
            if self.fac is None:
                self.fac = _ldl(self.K)
            else:
                self.fac.update(self.K)
        except (ValueError, RuntimeError):
            self.fac = None
            return False
        return True

    def solve(self, d_true, rhs, refine: int):
        """Solve with the current factorisation, refining against ``d_true``."""
        if self.fac is None:
            return None
        n = self.n
        sol = self.fac.solve(rhs)
        for _ in range(refine):
            p, w = sol[:n], sol[n:]
            resid = rhs - np.concatenate([self.top @ p + self.CT @ w, self.C @ p - d_true * w])
            sol = sol + self.fac.solve(resid)
        return sol if np.all(np.isfinite(sol)) else None

    def solve_masked(self, active, rhs, s: SolverSettings):
        """Rows in ``active`` as equalities, the rest ignored (their rhs must be 0)."""
        if not self.factor(np.where(active, s.polish_delta, self.OFF)):
            return None
        return self.solve(np.where(active, 0.0, self.OFF), rhs, s.polish_refine)


class _InteriorPoint:
    """Mehrotra predictor-corrector iterations on the scaled program.

    Used when ADMM has not finished within its budget.  The Newton systems
    share the quasi-definite pattern of the ADMM matrix, so each iteration is
    a numeric refactorisation.  Infeasibility and unboundedness are reported
    only after the growing dual (or primal) iterate passes the certificate
    checks of :class:`AdmmSolver`.
    """

    def __init__(self, ws: "_Workspace", settings: SolverSettings):
        self.ws, self.s = ws, settings
        self.delta = settings.polish_delta
        self.kkt = ws.pattern_kkt("interior", lambda: ws.P, top_shift=self.delta)
        self.n, self.m = ws.P.shape[0], ws.C.shape[0]

    def _factor(self, diag_true, d_fact=None):
        d_fact = np.where(self.ws.is_eq, self.delta, diag_true) if d_fact is None else d_fact
        if not self.kkt.factor(d_fact):
            raise np.linalg.LinAlgError("interior-point KKT factorisation failed")

    def _solve(self, diag_true, rhs):
        sol = self.kkt.solve(diag_true, rhs, refine=3)
        if sol is None:
            raise np.linalg.LinAlgError("interior-point KKT solve failed")
        return sol

    def run(self, q, u, converged, infeasible, unbounded, max_iter: int = 200):
        """Iterate until ``converged(x, y, s_gap)`` or a certificate holds.

        Returns ``(status, x, y, iterations)`` in scaled variables, where
        ``status`` is ``None`` when the iteration stalls.
        """
        ws, n, m = self.ws, self.n, self.m
        ineq = ~ws.is_eq
        # least-squares start: all rows treated as soft equalities
        try:
            self._factor(np.ones(m), np.ones(m))
            sol = self._solve(np.ones(m), np.concatenate([-q, u]))
        except np.linalg.LinAlgError:
            return None, np.zeros(n), np.zeros(m), 0
        x, y = sol[:n], sol[n:].copy()
        slack = (u - ws.C @ x)[ineq]
        lam = y[ineq]
        if slack.size:
            slack = slack + max(0.0, 1.0 - np.min(slack))
            lam = lam + max(0.0, 1.0 - np.min(lam))
        y[ineq] = lam
        for it in range(1, max_iter + 1):
            r_d = ws.P @ x + q + ws.CT @ y
            r_p = ws.C @ x - u
            r_p[ineq] += slack
            gap = float(slack @ lam)
            if converged(x, y, gap):
                return Status.OPTIMAL, x, y, it
            if infeasible(y):
                return Status.INFEASIBLE, x, y, it
            if unbounded(x):
                return Status.UNBOUNDED, x, y, it
            mu = gap / max(slack.size, 1)
            diag_true = np.zeros(m)
            diag_true[ineq] = slack / lam

            def direction(r_c):
                rhs_low = -r_p.copy()
                rhs_low[ineq] -= r_c / lam
                d = self._solve(diag_true, np.concatenate([-r_d, rhs_low]))
                dx, dy = d[:n], d[n:]
                dlam = dy[ineq]
                ds = (r_c - slack * dlam) / lam
                return dx, dy, ds, dlam

            try:
                self._factor(diag_true)
                dx, dy, ds, dlam = direction(-slack * lam)
                a_aff = min(_max_step(slack, ds), _max_step(lam, dlam))
                mu_aff = float((slack + a_aff * ds) @ (lam + a_aff * dlam)) / max(slack.size, 1)
                sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
                dx, dy, ds, dlam = direction(-slack * lam - ds * dlam + sigma * mu)
            except np.linalg.LinAlgError:
                return None, x, y, it
            alpha = min(1.0, 0.99 * min(_max_step(slack, ds), _max_step(lam, dlam)))
            if alpha < 1e-10:
                return None, x, y, it
            x = x + alpha * dx
            y = y + alpha * dy
            slack = slack + alpha * ds
            lam = y[ineq]
        return None, x, y, max_iter


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def solve(prog: ConicProgram, settings: SolverSettings | None = None) -> Solution:
    """One-shot solve with a fresh :class:`AdmmSolver`."""
    return AdmmSolver(settings).solve(prog)


class LinprogBackend:
    """External-backend adapter: HiGHS through scipy, linear programs only."""

    def solve(self, prog: ConicProgram, warm_start=None) -> Solution:
        from scipy.optimize import linprog

        if (sp.issparse(prog.H) and prog.H.nnz) or (not sp.issparse(prog.H) and np.any(prog.H)):
            raise ValueError("LinprogBackend handles linear programs only")
        t0 = time.perf_counter()
        res = linprog(
            prog.f,
            A_ub=prog.A_in if prog.n_in else None,
            b_ub=prog.b_in if prog.n_in else None,
            A_eq=prog.A_eq if prog.n_eq else None,
            b_eq=prog.b_eq if prog.n_eq else None,
            bounds=[(None, None)] * prog.n_var,
            method="highs",
        )
        status = {0: Status.OPTIMAL, 2: Status.INFEASIBLE, 3: Status.UNBOUNDED}.get(res.status, Status.MAX_ITER)
        if status is not Status.OPTIMAL:
            return Solution(x=None, status=status, solve_time=time.perf_counter() - t0)
        y_eq = -np.asarray(res.eqlin.marginals) if prog.n_eq else np.zeros(0)
        y_in = -np.asarray(res.ineqlin.marginals) if prog.n_in else np.zeros(0)
        return Solution(
            x=res.x, status=status, y_eq=y_eq, y_in=y_in, primal_residual=0.0, dual_residual=0.0,
            objective=prog.objective(res.x), iterations=int(getattr(res, "nit", 0)),
            solve_time=time.perf_counter() - t0,
        )


# ---------------------------------------------------------------------------
# program construction
# ---------------------------------------------------------------------------
class Affine:
    """Array of affine functions ``coef @ x + const`` of the decision vector.

    ``coef`` has one row per entry (C order) and may be narrower than the
    final variable count; missing columns are zero.
    """

    __slots__ = ("coef", "const", "shape")
    __array_ufunc__ = None  # make ``ndarray @ Affine`` defer to __rmatmul__

    def __init__(self, coef: np.ndarray, const: np.ndarray, shape: tuple):
        self.coef = coef
        self.const = const
        self.shape = tuple(shape)

    @classmethod
    def constant(cls, value, n_var: int = 0) -> "Affine":
        value = np.asarray(value, dtype=float)
        return cls(np.zeros((value.size, n_var)), value.ravel().copy(), value.shape)

    @property
    def size(self) -> int:
        return self.const.size

    @property
    def width(self) -> int:
        return self.coef.shape[1]

    def widened(self, n_var: int) -> np.ndarray:
        if self.width == n_var:
            return self.coef
        out = np.zeros((self.size, n_var))
        out[:, : self.width] = self.coef
        return out

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (self.coef @ x[: self.width] + self.const).reshape(self.shape)

    def is_constant(self, tol: float = 0.0) -> np.ndarray:
        """Per-entry flag: no dependence on any variable."""
        return np.max(np.abs(self.coef), axis=1, initial=0.0) <= tol

    def ravel(self) -> "Affine":
        return Affine(self.coef, self.const, (self.size,))

    def reshape(self, *shape) -> "Affine":
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape
        return Affine(self.coef, self.const, np.empty(self.size).reshape(shape).shape)

    def __getitem__(self, key) -> "Affine":
        idx = np.arange(self.size).reshape(self.shape)[key]
        idx = np.asarray(idx)
        flat = idx.ravel()
        return Affine(self.coef[flat], self.const[flat], idx.shape)

    def sum(self) -> "Affine":
        return Affine(self.coef.sum(axis=0, keepdims=True), np.array([self.const.sum()]), ())

    def _binary(self, other, sign: float) -> "Affine":
        if isinstance(other, Affine):
            w = max(self.width, other.width)
            if other.shape != self.shape and other.size != 1 and self.size != 1:
                raise DimensionMismatchError(f"shapes {self.shape} and {other.shape}")
            a, b = self.widened(w), other.widened(w)
            ca, cb = self.const, other.const
            shape = self.shape if self.size >= other.size else other.shape
            if a.shape[0] != b.shape[0]:
                a = np.broadcast_to(a, (max(a.shape[0], b.shape[0]), w))
                b = np.broadcast_to(b, a.shape)
                ca = np.broadcast_to(ca, (a.shape[0],))
                cb = np.broadcast_to(cb, (a.shape[0],))
            return Affine(a + sign * b, ca + sign * cb, shape)
        other = np.broadcast_to(np.asarray(other, dtype=float), self.shape).ravel()
        return Affine(self.coef, self.const + sign * other, self.shape)

    def __add__(self, other):
        return self._binary(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, -1.0)

    def __rsub__(self, other):
        return (-self)._binary(other, 1.0)

    def __neg__(self):
        return Affine(-self.coef, -self.const, self.shape)

    def __mul__(self, scalar):
        scalar = float(scalar)
        return Affine(self.coef * scalar, self.const * scalar, self.shape)

    __rmul__ = __mul__

    def __matmul__(self, M) -> "Affine":
        M = np.asarray(M, dtype=float)
        w = self.width
        if len(self.shape) == 1:
            if M.ndim == 1:
                return Affine((M @ self.coef).reshape(1, w), np.atleast_1d(self.const @ M), ())
            return Affine(M.T @ self.coef, self.const @ M, (M.shape[1],))
        p, qd = self.shape
        M2 = M.reshape(qd, -1)
        coef = np.einsum("pqv,qs->psv", self.coef.reshape(p, qd, w), M2)
        const = self.const.reshape(p, qd) @ M2
        shape = (p, M2.shape[1]) if M.ndim == 2 else (p,)
        return Affine(coef.reshape(const.size, w), const.ravel(), shape)

    def __rmatmul__(self, M) -> "Affine":
        M = np.asarray(M, dtype=float)
        w = self.width
        if len(self.shape) == 1:
            if M.ndim == 1:
                return Affine((M @ self.coef).reshape(1, w), np.atleast_1d(M @ self.const), ())
            return Affine(M @ self.coef, M @ self.const, (M.shape[0],))
        p, qd = self.shape
        M2 = M.reshape(-1, p)
        coef = np.einsum("rp,pqv->rqv", M2, self.coef.reshape(p, qd, w))
        const = M2 @ self.const.reshape(p, qd)
        shape = (M2.shape[0], qd) if M.ndim == 2 else (qd,)
        return Affine(coef.reshape(const.size, w), const.ravel(), shape)


def stack(exprs, n_var: int | None = None) -> Affine:
    """Concatenate flattened expressions."""
    w = max(e.width for e in exprs) if n_var is None else n_var
    coef = np.vstack([e.widened(w) for e in exprs])
    const = np.concatenate([e.const for e in exprs])
    return Affine(coef, const, (const.size,))


class ProgramBuilder:
    """Incrementally collects variables, constraints and a quadratic cost."""

    def __init__(self):
        self.n_var = 0
        self.names: dict[str, slice] = {}
        self._eq: list[Affine] = []
        self._le: list[Affine] = []
        self._quad: list[tuple[Affine, float]] = []
        self._lin: list[Affine] = []
        self.slacks: list[Affine] = []

    def variable(self, shape, name: str | None = None) -> Affine:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        start = self.n_var
        self.n_var += size
        if name is not None:
            self.names[name] = slice(start, self.n_var)
        coef = np.zeros((size, self.n_var))
        coef[:, start:] = np.eye(size)
        return Affine(coef, np.zeros(size), shape)

    def add_eq(self, lhs: Affine, rhs=0.0) -> slice:
        """Add ``lhs == rhs``; returns the row range inside ``A_eq``."""
        e = (lhs - rhs).ravel()
        start = sum(r.size for r in self._eq)
        self._eq.append(e)
        return slice(start, start + e.size)

    def add_le(self, lhs: Affine, rhs=0.0) -> slice:
        """Add ``lhs <= rhs``; returns the row range inside ``A_in``."""
        e = (lhs - rhs).ravel()
        start = sum(r.size for r in self._le)
        self._le.append(e)
        return slice(start, start + e.size)

    def add_quadratic(self, expr: Affine, weight: float = 1.0) -> None:
        """Add ``weight * ||expr||^2`` to the cost."""
        self._quad.append((expr.ravel(), float(weight)))

    def add_linear(self, expr: Affine) -> None:
        self._lin.append(expr.ravel())

    def build(self) -> ConicProgram:
        nv = self.n_var
        H = np.zeros((nv, nv))
        f = np.zeros(nv)
        offset = 0.0
        for e, w in self._quad:
            C = e.widened(nv)
            H += 2.0 * w * C.T @ C
            f += 2.0 * w * C.T @ e.const
            offset += w * float(e.const @ e.const)
        for e in self._lin:
            f += e.widened(nv).sum(axis=0)
            offset += float(e.const.sum())

        def assemble(rows):
            if not rows:
                return sp.csc_matrix((0, nv)), np.zeros(0)
            M = np.vstack([r.widened(nv) for r in rows])
            rhs = -np.concatenate([r.const for r in rows])
            return sp.csc_matrix(M), rhs

        A_eq, b_eq = assemble(self._eq)
        A_in, b_in = assemble(self._le)
        H = 0.5 * (H + H.T)
        return ConicProgram(f=f, H=sp.csc_matrix(H), A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in, offset=offset)


def l1_norm_bound(builder: ProgramBuilder, entries: Affine) -> Affine:
    """Scalar expression ``sum(s)`` with ``s >= |entries|`` imposed via slacks.

    Entries that do not depend on any variable contribute their absolute
    value directly instead of a slack.
    """
    entries = entries.ravel()
    const_mask = entries.is_constant()
    total = Affine.constant(np.abs(entries.const[const_mask]).sum())
    free = np.flatnonzero(~const_mask)
    if free.size:
        e = entries[free]
        s = builder.variable(free.size)
        builder.slacks.append(s)
        builder.add_le(e - s)
        builder.add_le(-e - s)
        total = total + s.sum()
    return total


def encode_l1_row(builder: ProgramBuilder, coeff_row: Affine, rhs_budget=0.0, other=0.0) -> Affine:
    """Impose ``||coeff_row||_1 + other <= rhs_budget`` exactly.

    Returns the slack-sum expression so callers can reuse it for a row with
    the opposite sign (the 1-norm is sign invariant).
    """
    bound = l1_norm_bound(builder, coeff_row)
    builder.add_le(bound + other, rhs_budget)
    return bound
