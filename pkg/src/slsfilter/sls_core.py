"""System-level parameterisation of affine error-feedback policies.

Block index convention: block ``(k, c)`` of a response matrix maps the
``c``-th stacked disturbance component to the stage-``k`` error.  Component
``c = 0`` is the initial deviation ``x_0 - z_0`` and ``c >= 1`` is the
disturbance ``w_{c-1}``.  Causality means block ``(k, c)`` vanishes for
``c > k``.  ``BlockLowerTriangular.lag(k, j)`` gives the same block under
lag indexing, i.e. ``block(k, k - j)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, SingularResponseError
from .polytope import Box, Polytope, contains_set, pre_set

RCOND_MIN = 1e-10


class BlockLowerTriangular:
    """Causal block matrix with ``N + 1`` block rows and columns.

    Row blocks all have ``p`` rows.  Column block sizes may differ, which
    covers a rectangular disturbance matrix or initial-set generator.
    """

    __slots__ = ("_dense", "p", "col_sizes", "_col_offsets")

    def __init__(self, dense, p: int, col_sizes, check: bool = True, tol: float = 0.0):
        dense = np.array(dense, dtype=float)
        col_sizes = tuple(int(q) for q in col_sizes)
        n_blocks = len(col_sizes)
        if dense.shape != (n_blocks * p, sum(col_sizes)):
            raise DimensionMismatchError(
                f"dense shape {dense.shape} does not match {n_blocks} blocks of "
                f"{p} rows and columns {col_sizes}"
            )
        self.p = int(p)
        self.col_sizes = col_sizes
        self._col_offsets = np.concatenate([[0], np.cumsum(col_sizes)]).astype(int)
        if check:
            for k in range(n_blocks):
                upper = dense[k * p:(k + 1) * p, self._col_offsets[k + 1]:]
                if upper.size and np.max(np.abs(upper)) > tol:
                    raise ValueError(f"block row {k} has nonzero entries above the diagonal")
        dense.setflags(write=False)
        self._dense = dense

    @classmethod
    def zeros(cls, horizon: int, p: int, q) -> "BlockLowerTriangular":
        cols = (q,) * (horizon + 1) if np.isscalar(q) else tuple(q)
        return cls(np.zeros(((horizon + 1) * p, sum(cols))), p, cols, check=False)

    @classmethod
    def from_blocks(cls, blocks: dict, horizon: int, p: int, q) -> "BlockLowerTriangular":
        """Build from a ``{(k, c): block}`` mapping using natural indices."""
        out = cls.zeros(horizon, p, q)
        dense = np.array(out._dense)
        for (k, c), blk in blocks.items():
            if c > k:
                raise ValueError(f"block ({k}, {c}) lies above the diagonal")
            dense[k * p:(k + 1) * p, out._col_offsets[c]:out._col_offsets[c + 1]] = blk
        return cls(dense, p, out.col_sizes, check=False)

    @property
    def horizon(self) -> int:
        return len(self.col_sizes) - 1

    @property
    def n_blocks(self) -> int:
        return len(self.col_sizes)

    @property
    def shape(self) -> tuple[int, int]:
        return self._dense.shape

    def dense(self) -> np.ndarray:
        return self._dense

    def block(self, k: int, c: int) -> np.ndarray:
        return self._dense[k * self.p:(k + 1) * self.p, self._col_offsets[c]:self._col_offsets[c + 1]]

    def lag(self, k: int, j: int) -> np.ndarray:
        """Block ``M^{k,j}`` with ``j`` counting back from the diagonal."""
        return self.block(k, k - j)

    def row(self, k: int) -> np.ndarray:
        """Block row ``k`` (all columns, zeros beyond the diagonal)."""
        return self._dense[k * self.p:(k + 1) * self.p]

    def col_slice(self, c: int) -> slice:
        return slice(self._col_offsets[c], self._col_offsets[c + 1])

    def __matmul__(self, other: "BlockLowerTriangular") -> "BlockLowerTriangular":
        if not isinstance(other, BlockLowerTriangular):
            return self._dense @ other
        if self.col_sizes != (other.p,) * other.n_blocks:
            raise DimensionMismatchError("inner block sizes differ")
        return BlockLowerTriangular(self._dense @ other._dense, self.p, other.col_sizes, tol=1e-12)

    def __sub__(self, other: "BlockLowerTriangular") -> "BlockLowerTriangular":
        return BlockLowerTriangular(self._dense - other._dense, self.p, self.col_sizes, check=False)

    def to_csv(self, path) -> None:
        np.savetxt(path, self._dense, delimiter=",")


@dataclass(frozen=True)
class SafetyProblem:
    """Linear system, constraints, disturbance set, horizon and terminal ingredients.

    The disturbance box ``W`` must be centred at the origin; its half widths
    are folded into ``B_w`` (see ``B_w_eff``) so all SLS code can assume
    ``w`` in the unit box.
    """

    A: np.ndarray
    B: np.ndarray
    B_w: np.ndarray
    X: Polytope
    U: Polytope
    N: int
    terminal: Polytope | None = None
    K_f: np.ndarray | None = None
    W: Box | None = None
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        B = B.reshape(A.shape[0], -1)
        B_w = np.asarray(self.B_w, dtype=float).reshape(A.shape[0], -1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "B_w", B_w)
        W = self.W if self.W is not None else Box.unit(B_w.shape[1])
        object.__setattr__(self, "W", W)
        if self.K_f is not None:
            object.__setattr__(self, "K_f", np.asarray(self.K_f, dtype=float).reshape(B.shape[1], A.shape[0]))
        n, m = B.shape
        if A.shape != (n, n):
            raise DimensionMismatchError(f"A must be square, got {A.shape}")
        if self.X.dim != n or self.U.dim != m:
            raise DimensionMismatchError("constraint sets do not match the state/input dimensions")
        if W.dim != B_w.shape[1]:
            raise DimensionMismatchError("W does not match B_w")
        if np.any(W.center != 0):
            raise ValueError("disturbance box must be centred at the origin")
        if int(self.N) < 1:
            raise ValueError("horizon N must be at least 1")
        object.__setattr__(self, "N", int(self.N))
        if self.terminal is not None and self.terminal.dim != n:
            raise DimensionMismatchError("terminal set dimension mismatch")
        if self.validate:
            self.check()

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n_w(self) -> int:
        return self.B_w.shape[1]

    @property
    def B_w_eff(self) -> np.ndarray:
        return self.B_w * self.W.half_widths

    def replace(self, **changes) -> "SafetyProblem":
        from dataclasses import replace

        return replace(self, **changes)

    def check(self) -> None:
        """Validate sign conventions, compactness of U and the terminal assumption.

        Raises:
            ValueError: when any condition fails.
        """
        if np.any(self.X.b <= 0) or np.any(self.U.b <= 0):
            raise ValueError("state and input constraints need strictly positive b")
        if not self.U.is_bounded():
            raise ValueError("input constraint set must be compact")
        if self.terminal is None:
            return
        if self.K_f is None:
            raise ValueError("terminal set given without terminal feedback K_f")
        A_cl = self.A + self.B @ self.K_f
        if not contains_set(pre_set(self.terminal, A_cl, self.W, self.B_w), self.terminal, 1e-7):
            raise ValueError("terminal set is not robustly invariant under K_f")
        if not contains_set(self.X, self.terminal, 1e-7):
            raise ValueError("terminal set is not contained in X")
        if not contains_set(self.U.preimage(self.K_f), self.terminal, 1e-7):
            raise ValueError("terminal feedback violates input constraints on the terminal set")


@dataclass(frozen=True)
class StackedSystem:
    """Block operators of the stacked error dynamics over stages ``0..N``."""

    ZA: BlockLowerTriangular
    ZB: BlockLowerTriangular
    E: BlockLowerTriangular
    horizon: int
    n: int
    m: int

    def dump_csv(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for name in ("ZA", "ZB", "E"):
            getattr(self, name).to_csv(os.path.join(directory, f"{name}.csv"))


def build_stacked(problem: SafetyProblem, P_init=None) -> StackedSystem:
    """Stacked shift-dynamics operators and the disturbance matrix.

    ``P_init`` fills the top-left block of ``E`` (zero for the online
    filter).  It may be rectangular ``n x n0``.
    """
    n, m, N = problem.n, problem.m, problem.N
    B_w = problem.B_w_eff
    P0 = np.zeros((n, n)) if P_init is None else np.atleast_2d(np.asarray(P_init, dtype=float))
    if P0.shape[0] != n:
        raise DimensionMismatchError(f"P_init must have {n} rows, got {P0.shape}")
    ZA = {(k + 1, k): problem.A for k in range(N)}
    ZB = {(k + 1, k): problem.B for k in range(N)}
    E = {(0, 0): P0}
    E.update({(k, k): B_w for k in range(1, N + 1)})
    return StackedSystem(
        ZA=BlockLowerTriangular.from_blocks(ZA, N, n, n),
        ZB=BlockLowerTriangular.from_blocks(ZB, N, n, m),
        E=BlockLowerTriangular.from_blocks(E, N, n, (P0.shape[1],) + (B_w.shape[1],) * N),
        horizon=N,
        n=n,
        m=m,
    )


@dataclass(frozen=True)
class SystemResponses:
    """Closed-loop maps from the stacked disturbance to state/input errors."""

    Phi_x: BlockLowerTriangular
    Phi_u: BlockLowerTriangular

    @property
    def n0(self) -> int:
        return self.Phi_x.col_sizes[0]

    def initial_part(self, k: int, which: str = "x") -> np.ndarray:
        M = self.Phi_x if which == "x" else self.Phi_u
        return M.row(k)[:, : self.n0]

    def disturbance_part(self, k: int, which: str = "x") -> np.ndarray:
        M = self.Phi_x if which == "x" else self.Phi_u
        return M.row(k)[:, self.n0:]

    def apply(self, delta) -> tuple[np.ndarray, np.ndarray]:
        """Stacked error trajectories ``(dx, du)`` for a stacked disturbance."""
        delta = np.asarray(delta, dtype=float)
        return self.Phi_x.dense() @ delta, self.Phi_u.dense() @ delta


def subspace_residual(resp: SystemResponses, sys: StackedSystem) -> float:
    """Max-abs entry of ``(I - ZA) Phi_x - ZB Phi_u - E``."""
    eye = np.eye(sys.ZA.shape[0])
    R = (eye - sys.ZA.dense()) @ resp.Phi_x.dense() - sys.ZB.dense() @ resp.Phi_u.dense() - sys.E.dense()
    return float(np.max(np.abs(R)))


def responses_from_controller(K: BlockLowerTriangular, sys: StackedSystem) -> SystemResponses:
    """Closed-loop responses of the causal feedback ``du = K dx``."""
    eye = np.eye(sys.ZA.shape[0])
    Phi_x = np.linalg.solve(eye - sys.ZA.dense() - sys.ZB.dense() @ K.dense(), sys.E.dense())
    Phi_u = K.dense() @ Phi_x
    cols = sys.E.col_sizes
    return SystemResponses(
        Phi_x=BlockLowerTriangular(Phi_x, sys.n, cols, tol=1e-9),
        Phi_u=BlockLowerTriangular(Phi_u, sys.m, cols, tol=1e-9),
    )


def controller_from_responses(resp: SystemResponses) -> BlockLowerTriangular:
    """Causal feedback ``K = Phi_u Phi_x^{-1}`` reproducing the responses.

    When the initial-condition column is absent or identically zero (the
    online case, where the initial error is zero) the stage-0 feedback is
    irrelevant; it is set to zero and ``K`` is recovered from the
    disturbance columns alone.  When instead no disturbance enters, the
    feedback acts on the initial deviation only.

    Raises:
        SingularResponseError: a diagonal block of ``Phi_x`` is numerically
            singular (reciprocal condition number below 1e-10).
    """
    Px, Pu = resp.Phi_x, resp.Phi_u
    n, m, N = Px.p, Pu.p, Px.horizon
    if any(q != n for q in Px.col_sizes[1:]):
        raise DimensionMismatchError("controller recovery needs square disturbance blocks")
    n0 = Px.col_sizes[0]
    drop_initial = n0 == 0 or not np.any(Px.block(0, 0))
    start = 1 if drop_initial else 0
    if not drop_initial and n0 != n:
        raise DimensionMismatchError("controller recovery needs a square initial block")
    if not drop_initial and not np.any(Px.dense()[:, n0:]):
        # no disturbance enters: feedback on the initial deviation alone reproduces the maps
        P0 = Px.block(0, 0)
        if _rcond(P0) < RCOND_MIN:
            raise SingularResponseError("diagonal block 0 of Phi_x is singular")
        K = np.zeros(((N + 1) * m, (N + 1) * n))
        for k in range(N + 1):
            K[k * m:(k + 1) * m, :n] = np.linalg.solve(P0.T, Pu.block(k, 0).T).T
        return BlockLowerTriangular(K, m, (n,) * (N + 1), check=False)
    for k in range(start, N + 1):
        blk = Px.block(k, k)
        if _rcond(blk) < RCOND_MIN:
            raise SingularResponseError(f"diagonal block {k} of Phi_x is singular")
    rows = slice(start * n, (N + 1) * n)
    cols = slice(Px.col_slice(start).start, Px.shape[1])
    X = Px.dense()[rows, cols]
    Ucols = Pu.dense()[start * m:(N + 1) * m, cols]
    K_sub = np.linalg.solve(X.T, Ucols.T).T
    K = np.zeros(((N + 1) * m, (N + 1) * n))
    K[start * m:, start * n:] = K_sub
    return BlockLowerTriangular(K, m, (n,) * (N + 1), tol=1e-8 * max(1.0, np.max(np.abs(K))))


def _rcond(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    s = np.linalg.svd(M, compute_uv=False)
    return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def tighten_row(a, resp: SystemResponses, k: int, P_init=None, which: str = "x") -> float:
    """Worst-case margin ``||a Phi_0^k P_init||_1 + ||a Phi_w^k||_1``.

    ``P_init=None`` means the initial-condition column carries its own
    scaling already (identity).
    """
    a = np.asarray(a, dtype=float)
    init = a @ resp.initial_part(k, which)
    if P_init is not None and init.size:
        init = init @ np.atleast_2d(np.asarray(P_init, dtype=float))
    return float(np.abs(init).sum() + np.abs(a @ resp.disturbance_part(k, which)).sum())


def reachable_box(z_k, resp: SystemResponses, k: int, P_init=None, which: str = "x") -> Box:
    """Tight per-axis bounds of the stage-``k`` reachable set around ``z_k``."""
    z_k = np.asarray(z_k, dtype=float)
    eye = np.eye(z_k.size)
    half = np.array([tighten_row(e, resp, k, P_init, which) for e in eye])
    return Box(z_k, half)


def policy_input(K: BlockLowerTriangular, z, v, history) -> np.ndarray:
    """Input of the causal affine policy at stage ``len(history) - 1``.

    ``history[i]`` is the state measured ``i`` steps after the plan started;
    ``z``/``v`` are the nominal stages.  Returns
    ``v_j + sum_i K^(j,i) (history[i] - z_i)`` with ``j = len(history) - 1``.
    """
    j = len(history) - 1
    if j < 0 or j > K.horizon:
        raise ValueError(f"history length {len(history)} outside 1..{K.horizon + 1}")
    u = np.array(v[j], dtype=float, copy=True)
    for i in range(j + 1):
        u += K.block(j, i) @ (np.asarray(history[i], dtype=float) - z[i])
    return u
