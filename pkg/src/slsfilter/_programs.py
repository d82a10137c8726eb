"""Building blocks shared by the online and explicit synthesis programs."""

from __future__ import annotations

import numpy as np

from .solver import Affine, ProgramBuilder, l1_norm_bound


def response_chain(builder: ProgramBuilder, A, B, B_w, N: int, init: Affine | None = None):
    """Condensed system responses over stages ``0..N``.

    Input responses ``Phi_u[(k, c)]`` are decision variables for
    ``c <= k <= N - 1``.  State responses follow from the subspace
    equation, ``Phi_x[(k+1, c)] = A Phi_x[(k, c)] + B Phi_u[(k, c)]`` with
    ``Phi_x[(c, c)]`` equal to the corresponding diagonal block of the
    disturbance matrix (``init`` for ``c = 0``; omitted when ``None``).

    Returns:
        ``(Phi_x, Phi_u)`` dictionaries keyed by ``(stage, column)``.
    """
    m = B.shape[1]
    Phi_x: dict = {}
    Phi_u: dict = {}
    columns = ([0] if init is not None else []) + list(range(1, N + 1))
    for c in columns:
        Phi_x[(c, c)] = init if c == 0 else Affine.constant(B_w)
        q = Phi_x[(c, c)].shape[1]
        for k in range(c, N):
            Phi_u[(k, c)] = builder.variable((m, q), name=f"phi_u[{k},{c}]")
            Phi_x[(k + 1, c)] = A @ Phi_x[(k, c)] + B @ Phi_u[(k, c)]
    return Phi_x, Phi_u


def stage_blocks(Phi: dict, k: int) -> list:
    return [Phi[key] for key in sorted(Phi) if key[0] == k]


def direction_groups(H: np.ndarray) -> list[tuple[np.ndarray, list[tuple[int, float]]]]:
    """Group constraint rows that are positive multiples of ``+d`` or ``-d``.

    The 1-norm tightening of ``a`` and ``-a`` is identical, so such rows can
    share one set of slack variables.
    """
    groups: dict = {}
    for i, a in enumerate(np.asarray(H, dtype=float)):
        scale = np.max(np.abs(a))
        d = a / scale
        first = d[np.flatnonzero(np.abs(d) > 1e-12)[0]]
        d = d if first > 0 else -d
        key = tuple(np.round(d, 12))
        groups.setdefault(key, (d, []))[1].append((i, scale))
    return list(groups.values())


def add_tightened_rows(builder: ProgramBuilder, H, h, nominal: Affine, blocks: list) -> None:
    """Impose ``H_i nominal + ||H_i [blocks]||_1 <= h_i`` for every row."""
    H = np.asarray(H, dtype=float)
    for d, members in direction_groups(H):
        if blocks:
            entries = [(d @ blk).ravel() for blk in blocks]
            bound = l1_norm_bound(builder, _concat(entries))
        else:
            bound = None
        for i, scale in members:
            lhs = H[i] @ nominal
            if bound is not None:
                lhs = lhs + bound * scale
            builder.add_le(lhs, h[i])


def _concat(exprs: list) -> Affine:
    from .solver import stack

    return stack(exprs)


def structural_slack_count(H, A, B, n_w: int, k: int, which: str = "x") -> int:
    """Slack variables the 1-norm encoding needs for rows ``H`` at stage ``k``.

    Online case (no initial-condition column).  A response entry needs a
    slack unless it is a known constant, which is decided from the system
    structure alone; this makes the count an independent check on the
    assembled program.
    """
    total = 0
    for d, _ in direction_groups(H):
        if which == "u":
            total += n_w * k
            continue
        # block (k, c) with c < k depends on the input responses through d A^i B
        reach = [np.any(np.abs(d @ np.linalg.matrix_power(A, i) @ B) > 0) for i in range(k)]
        total += n_w * sum(any(reach[: k - c]) for c in range(1, k))
    return total
