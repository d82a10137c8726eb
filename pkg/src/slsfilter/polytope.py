"""H-representation polytopes, axis-aligned boxes and invariant-set algorithms.

Every set here is immutable after construction.  Linear programs go through
HiGHS (``scipy.optimize.linprog``); vertex enumeration and convex hulls are
restricted to dimension <= 3 and use Qhull.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError

from .errors import (
    DimensionMismatchError,
    DimensionTooLargeError,
    EmptySetError,
    InfeasibleError,
    NotConvergedError,
    NotStableError,
    UnboundedError,
)

#: Slack on support values used for containment and fixed-point termination.
SET_TOL = 1e-8
MAX_VERTEX_DIM = 3
_ZERO_ROW_TOL = 1e-12


def _lp(c, A_ub, b_ub):
    return linprog(
        c,
        A_ub=A_ub,
        b_ub=b_ub,
        bounds=[(None, None)] * len(c),
        method="highs",
    )


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{center} + diag(half_widths) * unit inf-ball``."""

    center: np.ndarray
    half_widths: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float)).ravel()
        h = np.atleast_1d(np.asarray(self.half_widths, dtype=float)).ravel()
        if h.size == 1 and c.size > 1:
            h = np.full(c.size, h[0])
        if c.shape != h.shape:
            raise DimensionMismatchError(
                f"center has {c.size} entries, half_widths {h.size}"
            )
        if np.any(h < 0) or not np.all(np.isfinite(h)) or not np.all(np.isfinite(c)):
            raise ValueError("half widths must be finite and non-negative")
        object.__setattr__(self, "center", _readonly(c))
        object.__setattr__(self, "half_widths", _readonly(h))

    @classmethod
    def unit(cls, dim: int, radius: float = 1.0) -> "Box":
        return cls(np.zeros(dim), np.full(dim, float(radius)))

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_widths

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_widths

    def support(self, a) -> float:
        a = np.asarray(a, dtype=float)
        return float(a @ self.center + np.abs(a) @ self.half_widths)

    def vertices(self) -> np.ndarray:
        signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * self.dim, indexing="ij"))
        signs = signs.reshape(self.dim, -1).T
        return self.center + signs * self.half_widths

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(np.abs(x - self.center) <= self.half_widths + tol))

    def to_polytope(self) -> "Polytope":
        eye = np.eye(self.dim)
        A = np.vstack([eye, -eye])
        b = np.concatenate([self.center + self.half_widths, self.half_widths - self.center])
        return Polytope(A, b)

    def scale(self, factor: float) -> "Box":
        return Box(self.center * factor, self.half_widths * abs(factor))


class Polytope:
    """Polyhedron ``{x : A x <= b}`` in H-representation.

    Rows with an infinite right-hand side are dropped, as are all-zero rows
    with ``b >= 0``.  An all-zero row with ``b < 0`` makes the set empty and is
    replaced by a canonical infeasible pair so the stored ``A`` never carries
    a zero row.
    """

    __slots__ = ("_A", "_b", "_vertex_cache")

    def __init__(self, A, b):
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float).ravel()
        if A.ndim == 1:
            A = A.reshape(1, -1) if b.size == 1 else A.reshape(-1, 1)
        if A.shape[0] != b.size:
            raise DimensionMismatchError(f"A has {A.shape[0]} rows but b has {b.size}")
        if np.any(np.isnan(b)) or np.any(b == -np.inf) or not np.all(np.isfinite(A)):
            raise ValueError("polytope data must be finite (b may be +inf)")
        keep = np.isfinite(b)
        A, b = A[keep], b[keep]
        zero = np.max(np.abs(A), axis=1, initial=0.0) <= _ZERO_ROW_TOL
        if np.any(zero & (b < 0)):
            n = A.shape[1]
            e = np.zeros((2, n))
            e[0, 0], e[1, 0] = 1.0, -1.0
            A, b = e, np.array([-1.0, -1.0])
        else:
            A, b = A[~zero], b[~zero]
        self._A = _readonly(A)
        self._b = _readonly(b)
        self._vertex_cache = None

    # -- construction -------------------------------------------------------
    @classmethod
    def from_bounds(cls, lb, ub) -> "Polytope":
        lb = np.asarray(lb, dtype=float)
        ub = np.asarray(ub, dtype=float)
        return Box((lb + ub) / 2, (ub - lb) / 2).to_polytope()

    @classmethod
    def from_box(cls, box: Box) -> "Polytope":
        return box.to_polytope()

    @classmethod
    def from_vertices(cls, V) -> "Polytope":
        """Convex hull of the rows of ``V`` (dimension <= 3)."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        n = V.shape[1]
        if n > MAX_VERTEX_DIM:
            raise DimensionTooLargeError(f"convex hull limited to dim <= {MAX_VERTEX_DIM}")
        mean = V.mean(axis=0)
        basis, complement = _affine_basis(V - mean)
        r = basis.shape[1]
        coords = (V - mean) @ basis
        if r == 0:
            A_r = np.zeros((0, 0))
            b_r = np.zeros(0)
        elif r == 1:
            A_r = np.array([[1.0], [-1.0]])
            b_r = np.array([coords.max(), -coords.min()])
        else:
            hull = ConvexHull(coords)
            A_r = hull.equations[:, :-1]
            b_r = -hull.equations[:, -1]
            A_r, b_r = _dedupe_rows(A_r, b_r)
        A = A_r @ basis.T if r else np.zeros((0, n))
        b = b_r + A @ mean if r else np.zeros(0)
        if complement.shape[1]:
            C = complement.T
            A = np.vstack([A, C, -C])
            b = np.concatenate([b, C @ mean, -(C @ mean)])
        return cls(A, b)

    @classmethod
    def empty(cls, dim: int) -> "Polytope":
        return cls(np.zeros((1, dim)), np.array([-1.0]))

    @classmethod
    def from_dict(cls, data: dict) -> "Polytope":
        A = np.asarray(data["A"], dtype=float)
        b = np.asarray(data["b"], dtype=float)
        if A.size == 0:
            A = A.reshape(0, int(data.get("dim", 0)))
        return cls(A, b)

    @classmethod
    def from_json(cls, text: str) -> "Polytope":
        return cls.from_dict(json.loads(text))

    # -- basic accessors ----------------------------------------------------
    @property
    def A_mat(self) -> np.ndarray:
        return self._A

    @property
    def b_vec(self) -> np.ndarray:
        return self._b

    A = A_mat
    b = b_vec

    @property
    def dim(self) -> int:
        return self._A.shape[1]

    @property
    def n_rows(self) -> int:
        return self._A.shape[0]

    def __repr__(self) -> str:
        return f"Polytope(dim={self.dim}, rows={self.n_rows})"

    def to_dict(self) -> dict:
        return {"A": self._A.tolist(), "b": self._b.tolist(), "dim": self.dim}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    # -- queries ------------------------------------------------------------
    def contains(self, x, tol: float = 1e-9):
        """Membership of a point, or of each row of a 2-D array of points."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return bool(np.all(self._A @ x <= self._b + tol))
        return np.all(x @ self._A.T <= self._b + tol, axis=1)

    def chebyshev_center(self) -> tuple[np.ndarray, float]:
        """Center and radius of the largest inscribed 2-norm ball.

        Raises:
            EmptySetError: if the polytope is empty.
        """
        n = self.dim
        if self.n_rows == 0:
            return np.zeros(n), np.inf
        norms = np.linalg.norm(self._A, axis=1)
        A_ub = np.hstack([self._A, norms[:, None]])
        c = np.zeros(n + 1)
        c[-1] = -1.0
        res = linprog(
            c,
            A_ub=A_ub,
            b_ub=self._b,
            bounds=[(None, None)] * n + [(None, 1e9)],
            method="highs",
        )
        if res.status == 2 or (res.status == 0 and res.x[-1] < -1e-12):
            raise EmptySetError("polytope is empty")
        if res.status != 0:
            raise InfeasibleError(f"Chebyshev LP failed: {res.message}")
        return res.x[:n], float(max(res.x[-1], 0.0))

    def is_empty(self) -> bool:
        if self.n_rows == 0:
            return False
        res = _lp(np.zeros(self.dim), self._A, self._b)
        return res.status == 2

    def is_bounded(self) -> bool:
        try:
            for j in range(self.dim):
                e = np.zeros(self.dim)
                e[j] = 1.0
                support(self, e)
                support(self, -e)
        except UnboundedError:
            return False
        except InfeasibleError:
            return True
        return True

    def bounding_box(self) -> Box:
        eye = np.eye(self.dim)
        up = _support_many(self, eye)
        lo = -_support_many(self, -eye)
        return Box((up + lo) / 2, (up - lo) / 2)

    def vertices(self) -> np.ndarray:
        """Vertices of a bounded polytope of dimension <= 3 (cached)."""
        if self._vertex_cache is None:
            self._vertex_cache = _readonly(_enumerate_vertices(self))
        return self._vertex_cache

    # -- transformations ----------------------------------------------------
    def intersect(self, other: "Polytope") -> "Polytope":
        if other.dim != self.dim:
            raise DimensionMismatchError(f"dims {self.dim} and {other.dim}")
        return Polytope(np.vstack([self._A, other._A]), np.concatenate([self._b, other._b]))

    def scale(self, factor: float) -> "Polytope":
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return Polytope(self._A, self._b * factor)

    def translate(self, t) -> "Polytope":
        return Polytope(self._A, self._b + self._A @ np.asarray(t, dtype=float))

    def preimage(self, M) -> "Polytope":
        """``{x : M x in P}``."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return Polytope(self._A @ M, self._b)

    def image(self, M) -> "Polytope":
        """``M P`` for square invertible ``M``."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return Polytope(self._A @ np.linalg.inv(M), self._b)

    def normalized(self) -> "Polytope":
        norms = np.linalg.norm(self._A, axis=1)
        return Polytope(self._A / norms[:, None], self._b / norms)

    def minimal(self, tol: float = 1e-10) -> "Polytope":
        """Equivalent polytope with redundant rows removed."""
        P = self.normalized()
        A, b = _dedupe_rows(P._A, P._b)
        P = Polytope(A, b)
        if P.n_rows <= 1:
            return P
        if P.dim <= MAX_VERTEX_DIM:
            reduced = _minimal_by_vertices(P, tol)
            if reduced is not None:
                return reduced
        return _minimal_by_lp(P, tol)

    def equals(self, other: "Polytope", tol: float = SET_TOL) -> bool:
        return contains_set(self, other, tol) and contains_set(other, self, tol)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _affine_basis(V0: np.ndarray, tol: float = 1e-10):
    n = V0.shape[1]
    if V0.shape[0] == 0:
        return np.zeros((n, 0)), np.eye(n)
    _, s, vt = np.linalg.svd(V0, full_matrices=True)
    scale = max(1.0, float(np.max(np.abs(V0))))
    r = int(np.sum(s > tol * scale))
    return vt[:r].T, vt[r:].T


def _dedupe_rows(A: np.ndarray, b: np.ndarray, decimals: int = 9):
    if A.shape[0] == 0:
        return A, b
    norms = np.linalg.norm(A, axis=1)
    An = A / norms[:, None]
    bn = b / norms
    keys = np.round(An, decimals)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    out_A, out_b = [], []
    for g in np.unique(inverse):
        idx = np.flatnonzero(inverse == g)
        best = idx[np.argmin(bn[idx])]
        out_A.append(An[best])
        out_b.append(bn[best])
    return np.array(out_A), np.array(out_b)


def _extreme_points(V: np.ndarray) -> np.ndarray:
    """Rows of ``V`` that are extreme points of its convex hull."""
    if V.shape[0] <= 1:
        return V
    mean = V.mean(axis=0)
    basis, _ = _affine_basis(V - mean)
    r = basis.shape[1]
    if r == 0:
        return V[:1]
    coords = (V - mean) @ basis
    if r == 1:
        return V[[int(np.argmin(coords[:, 0])), int(np.argmax(coords[:, 0]))]]
    return V[ConvexHull(coords).vertices]


def _enumerate_vertices(P: Polytope) -> np.ndarray:
    n = P.dim
    if n > MAX_VERTEX_DIM:
        raise DimensionTooLargeError(f"vertex enumeration limited to dim <= {MAX_VERTEX_DIM}")
    center, radius = P.chebyshev_center()
    if not np.isfinite(radius) or radius >= 1e8:
        raise UnboundedError("vertex enumeration needs a bounded polytope")
    if radius > 1e-9 and n >= 2:
        hs = np.hstack([P.A, -P.b[:, None]])
        try:
            pts = HalfspaceIntersection(hs, center).intersections
            return _extreme_points(pts)
        except QhullError:
            pass
    return _enumerate_vertices_combinatorial(P)


def _enumerate_vertices_combinatorial(P: Polytope, tol: float = 1e-9) -> np.ndarray:
    from itertools import combinations

    n = P.dim
    A, b = P.A, P.b
    if n == 1:
        up = b[A[:, 0] > 0] / A[A[:, 0] > 0, 0]
        lo = b[A[:, 0] < 0] / A[A[:, 0] < 0, 0]
        pts = np.array([[lo.max()], [up.min()]])
        return _extreme_points(pts)
    pts = []
    for rows in combinations(range(P.n_rows), n):
        M = A[list(rows)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        x = np.linalg.solve(M, b[list(rows)])
        if np.all(A @ x <= b + tol * max(1.0, np.max(np.abs(b)))):
            pts.append(x)
    if not pts:
        raise EmptySetError("no vertices found")
    return _extreme_points(np.array(pts))


def _minimal_by_vertices(P: Polytope, tol: float):
    try:
        center, radius = P.chebyshev_center()
    except EmptySetError:
        return Polytope.empty(P.dim)
    if not np.isfinite(radius) or radius >= 1e8 or radius <= 1e-7:
        return None
    if P.dim == 1:
        up = np.flatnonzero(P.A[:, 0] > 0)
        lo = np.flatnonzero(P.A[:, 0] < 0)
        keep = [up[np.argmin(P.b[up] / P.A[up, 0])]] if up.size else []
        keep += [lo[np.argmax(P.b[lo] / P.A[lo, 0])]] if lo.size else []
        return Polytope(P.A[keep], P.b[keep])
    try:
        V = HalfspaceIntersection(np.hstack([P.A, -P.b[:, None]]), center).intersections
    except QhullError:
        return None
    scale = max(1.0, float(np.max(np.abs(V))))
    slack = np.abs(V @ P.A.T - P.b)
    keep = []
    for i in range(P.n_rows):
        active = V[slack[:, i] <= 1e-7 * scale]
        if active.shape[0] < P.dim:
            continue
        basis, _ = _affine_basis(active - active.mean(axis=0), tol=1e-7)
        if basis.shape[1] == P.dim - 1:
            keep.append(i)
    if len(keep) < P.dim + 1:
        return None
    return Polytope(P.A[keep], P.b[keep])


def _minimal_by_lp(P: Polytope, tol: float) -> Polytope:
    if P.is_empty():
        return Polytope.empty(P.dim)
    keep = np.ones(P.n_rows, dtype=bool)
    for i in range(P.n_rows):
        keep[i] = False
        A_ub = np.vstack([P.A[keep], P.A[i]])
        b_ub = np.concatenate([P.b[keep], [P.b[i] + 1.0]])
        res = _lp(-P.A[i], A_ub, b_ub)
        if res.status != 0 or -res.fun > P.b[i] + tol:
            keep[i] = True
    return Polytope(P.A[keep], P.b[keep])


def _support_any(S, a) -> float:
    if isinstance(S, Box):
        return S.support(a)
    return support(S, a)


def _support_many(P, D: np.ndarray) -> np.ndarray:
    """Support values of ``P`` along every row of ``D``."""
    D = np.atleast_2d(D)
    if isinstance(P, Box):
        return D @ P.center + np.abs(D) @ P.half_widths
    if P.dim <= MAX_VERTEX_DIM:
        try:
            V = P.vertices()
            return np.max(D @ V.T, axis=1)
        except (QhullError, DimensionTooLargeError):
            pass
    return np.array([support(P, d) for d in D])


def _disturbance_image_support(W, B_w, D: np.ndarray) -> np.ndarray:
    """Support of ``B_w W`` along each row of ``D``."""
    return _support_many(W, D @ B_w) if D.shape[0] else np.zeros(0)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------
def support(P: Polytope, a) -> float:
    """``max a.x`` over ``P`` via one LP.

    Raises:
        UnboundedError: ``a.x`` is unbounded over ``P``.
        InfeasibleError: ``P`` is empty.
    """
    a = np.asarray(a, dtype=float)
    if isinstance(P, Box):
        return P.support(a)
    if a.size != P.dim:
        raise DimensionMismatchError(f"direction has {a.size} entries, polytope dim {P.dim}")
    if P.n_rows == 0:
        if np.allclose(a, 0):
            return 0.0
        raise UnboundedError("support of the full space")
    res = _lp(-a, P.A, P.b)
    if res.status == 2:
        raise InfeasibleError("support of an empty polytope")
    if res.status == 3:
        raise UnboundedError("support function is unbounded")
    if res.status != 0:
        raise InfeasibleError(f"support LP failed: {res.message}")
    return float(-res.fun)


def minkowski_sum(P: Polytope, Q: Polytope) -> Polytope:
    """``P + Q``.

    Exact (vertex sums and a convex hull) up to dimension 3.  Above that an
    outer description is returned using the facet normals of both operands
    plus the coordinate directions, each offset by the summed support.
    """
    if isinstance(P, Box):
        P = P.to_polytope()
    if isinstance(Q, Box):
        Q = Q.to_polytope()
    if P.dim != Q.dim:
        raise DimensionMismatchError(f"dims {P.dim} and {Q.dim}")
    if P.dim <= MAX_VERTEX_DIM:
        VP, VQ = P.vertices(), Q.vertices()
        sums = (VP[:, None, :] + VQ[None, :, :]).reshape(-1, P.dim)
        return Polytope.from_vertices(_extreme_points(sums))
    eye = np.eye(P.dim)
    D = np.vstack([P.normalized().A, Q.normalized().A, eye, -eye])
    h = _support_many(P, D) + _support_many(Q, D)
    return Polytope(D, h).minimal()


def pontryagin_difference(P: Polytope, Q) -> Polytope:
    """``P - Q = {x : x + Q subset P}``, exact row-wise tightening."""
    return Polytope(P.A, P.b - _support_many(Q, P.A))


def pre_set(P: Polytope, A_cl, W, B_w=None) -> Polytope:
    """Robust one-step preimage ``{x : A_cl x + B_w w in P for all w in W}``."""
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    if A_cl.shape != (P.dim, P.dim):
        raise DimensionMismatchError(f"A_cl is {A_cl.shape}, polytope dim {P.dim}")
    B_w = np.eye(P.dim) if B_w is None else np.atleast_2d(np.asarray(B_w, dtype=float))
    if B_w.shape[0] != P.dim or B_w.shape[1] != W.dim:
        raise DimensionMismatchError("B_w does not match the polytope and disturbance set")
    return Polytope(P.A @ A_cl, P.b - _disturbance_image_support(W, B_w, P.A))


def contains_set(P: Polytope, Q, tol: float = SET_TOL) -> bool:
    """``Q subset P``, checked row by row with support functions."""
    if Q.dim != P.dim:
        raise DimensionMismatchError(f"dims {P.dim} and {Q.dim}")
    if P.n_rows == 0:
        return True
    if isinstance(Q, Polytope):
        if Q.is_empty():
            return True
        try:
            h = _support_many(Q, P.A)
        except UnboundedError:
            return False
    else:
        h = _support_many(Q, P.A)
    return bool(np.all(h <= P.b + tol))


def max_rpi(
    A_cl,
    X_joint: Polytope,
    W,
    B_w=None,
    max_iter: int = 500,
    tol: float = SET_TOL,
) -> Polytope:
    """Maximal robust positively invariant set inside ``X_joint``.

    Iterates ``O <- pre(O) & O`` starting from ``X_joint`` until two iterates
    contain each other within ``tol``.

    Raises:
        EmptySetError: the iteration collapsed to the empty set.
        NotConvergedError: ``max_iter`` reached.
    """
    omega = X_joint.minimal()
    if omega.is_empty():
        raise EmptySetError("constraint set is empty")
    for it in range(1, max_iter + 1):
        nxt = pre_set(omega, A_cl, W, B_w).intersect(omega).minimal()
        if nxt.is_empty():
            raise EmptySetError(f"invariant-set iteration became empty at step {it}")
        if contains_set(nxt, omega, tol):
            return nxt
        omega = nxt
    raise NotConvergedError(f"max_rpi did not converge in {max_iter} iterations", max_iter)


def zonotope_vertices(center, generators) -> np.ndarray:
    """Vertices of ``center + G * unit-box`` for dimension <= 3."""
    c = np.asarray(center, dtype=float)
    G = np.atleast_2d(np.asarray(generators, dtype=float))
    if c.size > MAX_VERTEX_DIM:
        raise DimensionTooLargeError(f"zonotope vertices limited to dim <= {MAX_VERTEX_DIM}")
    pts = c[None, :]
    scale = max(1.0, float(np.max(np.abs(G), initial=0.0)))
    for g in G.T:
        if np.max(np.abs(g)) <= 1e-14 * scale:
            continue
        pts = _extreme_points(np.vstack([pts + g, pts - g]))
    return pts


def zonotope(center, generators) -> Polytope:
    """H-representation of a zonotope (dimension <= 3)."""
    return Polytope.from_vertices(zonotope_vertices(center, generators))


def min_rpi_approx(A_cl, W: Box, B_w=None, eps: float = 1e-2, max_terms: int = 2000) -> Polytope:
    """Outer epsilon-approximation of the minimal RPI set.

    Picks the smallest ``s`` with ``A_cl^s B_w W subset theta B_w W`` where
    ``theta <= eps / (1 + eps)`` and returns ``(1 + eps) * sum_{i<s} A_cl^i B_w W``.
    The returned set is RPI and contains the true minimal RPI set.  A zero
    disturbance gives the singleton at the origin.

    Raises:
        NotStableError: spectral radius of ``A_cl`` is not below one.
        NotConvergedError: ``s`` would exceed ``max_terms`` or the RPI check fails.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    n = A_cl.shape[0]
    B_w = np.eye(n) if B_w is None else np.atleast_2d(np.asarray(B_w, dtype=float))
    if B_w.shape != (n, W.dim):
        raise DimensionMismatchError("B_w does not match A_cl and W")
    if np.max(np.abs(np.linalg.eigvals(A_cl))) >= 1.0:
        raise NotStableError("closed loop is not strictly Schur stable")
    if np.any(W.center != 0):
        raise ValueError("min_rpi_approx expects a disturbance box centred at the origin")
    G0 = B_w * W.half_widths
    if not np.any(G0):
        return Polytope.from_bounds(np.zeros(n), np.zeros(n))
    if np.linalg.matrix_rank(G0) < n:
        raise DimensionMismatchError("B_w W must be full-dimensional")
    if G0.shape[1] == n:
        facets = np.linalg.inv(G0)
        offsets = np.ones(n)
    else:
        Wimg = zonotope(np.zeros(n), G0)
        facets, offsets = Wimg.A, Wimg.b
    theta_target = eps / (1.0 + eps)
    gens = [G0]
    power = A_cl @ G0
    s = 1
    while True:
        theta = np.max(np.abs(facets @ power).sum(axis=1) / offsets)
        if theta <= theta_target:
            break
        if s >= max_terms:
            raise NotConvergedError(f"min_rpi_approx needs more than {max_terms} terms", s)
        gens.append(power)
        power = A_cl @ power
        s += 1
    G = np.hstack(gens) * (1.0 + eps)
    if n <= MAX_VERTEX_DIM:
        omega = zonotope(np.zeros(n), G)
    else:
        eye = np.eye(n)
        D = np.vstack([facets / offsets[:, None], -facets / offsets[:, None], eye, -eye])
        omega = Polytope(D, np.abs(D @ G).sum(axis=1))
    if not contains_set(pre_set(omega, A_cl, W, B_w), omega, 1e-7):
        raise NotConvergedError("approximation failed the RPI check", s)
    return omega


def fourier_motzkin(P: Polytope, keep: int) -> Polytope:
    """Project ``P`` onto its first ``keep`` coordinates."""
    A, b = np.array(P.A), np.array(P.b)
    for col in range(P.dim - 1, keep - 1, -1):
        c = A[:, col]
        pos, neg, zero = c > 1e-12, c < -1e-12, np.abs(c) <= 1e-12
        rows = [A[zero]]
        rhs = [b[zero]]
        if pos.any() and neg.any():
            Ap, bp = A[pos] / c[pos, None], b[pos] / c[pos]
            An, bn = A[neg] / -c[neg, None], b[neg] / -c[neg]
            rows.append((Ap[:, None, :] + An[None, :, :]).reshape(-1, A.shape[1]))
            rhs.append((bp[:, None] + bn[None, :]).ravel())
        A = np.vstack(rows)[:, :col]
        b = np.concatenate(rhs)
        red = Polytope(A, b)
        if red.n_rows > 1:
            red = red.minimal()
        A, b = np.array(red.A), np.array(red.b)
    return Polytope(A, b)


def max_rci(
    A,
    B,
    U: Polytope,
    X: Polytope,
    W,
    B_w=None,
    max_iter: int = 300,
    tol: float = SET_TOL,
) -> Polytope:
    """Maximal robust control invariant set inside ``X`` (state dim <= 3).

    Each step keeps the states of the current iterate from which some
    admissible input drives every disturbed successor back into it; the
    existential input is removed by Fourier-Motzkin elimination.

    Raises:
        DimensionTooLargeError: state dimension above 3.
        EmptySetError: iteration collapsed.
        NotConvergedError: ``max_iter`` reached.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, m = B.shape
    if n > MAX_VERTEX_DIM:
        raise DimensionTooLargeError(f"max_rci supports state dimension <= {MAX_VERTEX_DIM}")
    B_w = np.eye(n) if B_w is None else np.atleast_2d(np.asarray(B_w, dtype=float))
    omega = X.minimal()
    for it in range(1, max_iter + 1):
        target = pontryagin_difference(omega, disturbance_image(W, B_w))
        lifted_A = np.vstack(
            [
                np.hstack([target.A @ A, target.A @ B]),
                np.hstack([omega.A, np.zeros((omega.n_rows, m))]),
                np.hstack([np.zeros((U.n_rows, n)), U.A]),
            ]
        )
        lifted_b = np.concatenate([target.b, omega.b, U.b])
        lifted = Polytope(lifted_A, lifted_b)
        if lifted.is_empty():
            raise EmptySetError(f"control-invariant iteration became empty at step {it}")
        nxt = fourier_motzkin(lifted, n).minimal()
        if nxt.is_empty():
            raise EmptySetError(f"control-invariant iteration became empty at step {it}")
        if contains_set(nxt, omega, tol):
            return nxt
        omega = nxt
    raise NotConvergedError(f"max_rci did not converge in {max_iter} iterations", max_iter)


def disturbance_image(W, B_w) -> Box | Polytope:
    """The set ``B_w W`` as a Box when ``B_w`` is square diagonal, else a polytope."""
    B_w = np.atleast_2d(np.asarray(B_w, dtype=float))
    square = B_w.shape[0] == B_w.shape[1]
    if isinstance(W, Box) and square and np.allclose(B_w, np.diag(np.diag(B_w))):
        d = np.diag(B_w)
        return Box(d * W.center, np.abs(d) * W.half_widths)
    if isinstance(W, Box):
        return zonotope(B_w @ W.center, B_w * W.half_widths)
    return Polytope.from_vertices(W.vertices() @ B_w.T)
