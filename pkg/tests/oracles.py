"""Independent reference computations used by the tests.

Nothing here imports the package's solver or SLS code paths that it is
meant to check.
"""

import itertools

import numpy as np


def enumerate_qp(H, f, A_eq, b_eq, A_in, b_in, tol=1e-9):
    """Exact optimum of a small strictly convex QP by active-set enumeration.

    Every subset of inequality rows is tried as the active set; the KKT
    system is solved and the point kept when it is primal feasible with
    non-negative multipliers.
    """
    n = len(f)
    best = None
    m_in = len(b_in)
    for r in range(min(m_in, n - len(b_eq)) + 1):
        for act in itertools.combinations(range(m_in), r):
            G = np.vstack([A_eq, A_in[list(act)]]) if (len(b_eq) or act) else np.zeros((0, n))
            h = np.concatenate([b_eq, b_in[list(act)]])
            k = G.shape[0]
            K = np.block([[H, G.T], [G, np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-f, h]))
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.any(A_in @ x > b_in + tol) or np.any(lam[len(b_eq):] < -tol):
                continue
            obj = 0.5 * x @ H @ x + f @ x
            if best is None or obj < best[1] - 1e-12:
                best = (x, obj)
    return best


def enumerate_lp(f, A_eq, b_eq, A_in, b_in, tol=1e-9):
    """Exact optimum of a small bounded LP by enumerating basic feasible points."""
    n = len(f)
    need = n - len(b_eq)
    best = None
    for act in itertools.combinations(range(len(b_in)), need):
        G = np.vstack([A_eq, A_in[list(act)]])
        h = np.concatenate([b_eq, b_in[list(act)]])
        if abs(np.linalg.det(G)) < 1e-12:
            continue
        x = np.linalg.solve(G, h)
        if np.any(A_in @ x > b_in + tol):
            continue
        obj = f @ x
        if best is None or obj < best[1]:
            best = (x, obj)
    return best


def rollout_errors(A, B, K_blocks, B_w, x_err0, ws):
    """Closed-loop error trajectory of ``du_k = sum_i K[k][i] dx_i`` by direct simulation."""
    dx = [np.asarray(x_err0, dtype=float)]
    du = []
    for k in range(len(ws) + 1):
        u = sum(K_blocks[k][i] @ dx[i] for i in range(k + 1))
        du.append(u)
        if k < len(ws):
            dx.append(A @ dx[k] + B @ u + B_w @ ws[k])
    return np.array(dx), np.array(du)


def vertex_sequences(n_w, length):
    """All sequences of ``length`` vertices of the unit box in ``R^n_w``."""
    verts = list(itertools.product([-1.0, 1.0], repeat=n_w))
    return itertools.product(verts, repeat=length)


def scalar_box_radius(a, b, bw, x_max, u_max, step=1e-5):
    """Largest safe-box radius for ``x+ = a x + b u + bw w`` with horizon one.

    By symmetry the box is centred at zero with zero nominal input.  For
    each candidate radius the best feedback cancels as much of ``a * r`` as
    the input bound allows; the radius is feasible when the disturbed
    successor interval fits back inside.
    """
    r = np.arange(step, x_max + step / 2, step)
    phi = np.clip(-a * r / b, -u_max, u_max)
    ok = np.abs(a * r + b * phi) + abs(bw) <= r + 1e-12
    return float(r[ok].max()) if ok.any() else 0.0


def box_contains_all_successors(x, u, A, B, B_w, center, radius):
    """Brute force over the disturbance vertices."""
    nxt = A @ x + B @ u
    for w in itertools.product([-1.0, 1.0], repeat=B_w.shape[1]):
        if np.any(np.abs(nxt + B_w @ np.array(w) - center) > radius):
            return False
    return True


def random_small_program(rng, kind):
    """Random bounded QP (strictly convex) or LP with box bounds and a few extra rows.

    Returns ``(H, f, A_eq, b_eq, A_in, b_in)`` with dense arrays.  The
    feasible set always contains a known interior point.
    """
    n = int(rng.integers(2, 5))
    extra = int(rng.integers(1, 4))
    n_eq = int(rng.integers(0, 2))
    x_feas = rng.uniform(-0.5, 0.5, n)
    G = rng.normal(size=(extra, n))
    A_in = np.vstack([np.eye(n), -np.eye(n), G])
    b_in = np.concatenate([np.ones(n), np.ones(n), G @ x_feas + rng.uniform(0.05, 1.0, extra)])
    A_eq = rng.normal(size=(n_eq, n))
    b_eq = A_eq @ x_feas
    if kind == "qp":
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.1 * np.eye(n)
    else:
        H = np.zeros((n, n))
    f = rng.normal(size=n) * 3.0
    return H, f, A_eq, b_eq, A_in, b_in
