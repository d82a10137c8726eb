"""Ready-made problem instances."""

from __future__ import annotations

import numpy as np

from .baseline_mpsf import lqr
from .polytope import Box, Polytope, max_rpi
from .sls_core import SafetyProblem


def with_lqr_terminal(A, B, B_w, X: Polytope, U: Polytope, N: int, Q, R, W: Box | None = None) -> SafetyProblem:
    """Problem whose terminal set is the maximal RPI set of the LQR closed loop."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    B_w = np.asarray(B_w, dtype=float).reshape(A.shape[0], -1)
    W = Box.unit(B_w.shape[1]) if W is None else W
    K = lqr(A, B, Q, R)
    terminal = max_rpi(A + B @ K, X.intersect(U.preimage(K)), W, B_w)
    return SafetyProblem(A, B, B_w, X, U, N, terminal=terminal, K_f=K, W=W)


def double_integrator(N: int = 10, disturbance: float = 0.3, x_max: float = 5.0, u_max: float = 3.0,
                      R: float = 100.0, terminal: bool = True) -> SafetyProblem:
    """Discrete double integrator with box constraints and a box disturbance.

    ``disturbance`` scales the identity disturbance matrix.  With
    ``terminal=False`` no terminal ingredients are attached.
    """
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5], [1.0]])
    B_w = disturbance * np.eye(2)
    X = Polytope.from_bounds(-x_max * np.ones(2), x_max * np.ones(2))
    U = Polytope.from_bounds([-u_max], [u_max])
    if not terminal:
        return SafetyProblem(A, B, B_w, X, U, N)
    return with_lqr_terminal(A, B, B_w, X, U, N, np.eye(2), R * np.eye(1))
