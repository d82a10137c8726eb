"""Closed-loop simulation, grid studies and timing benchmarks.

Filters used here expose ``safe_input(x, u_L) -> (u, info)`` and ``reset()``;
grid studies additionally call ``filter_step(x, u_L)`` returning a
``FilterResult``.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError
from .polytope import Box, Polytope
from .sls_core import SafetyProblem

VIOLATION_TOL = 1e-6


# -- disturbance sources ------------------------------------------------------
class DisturbanceSource:
    """Seeded generator of disturbances inside the box ``W``."""

    def __init__(self, W: Box, seed: int | None = 0):
        self.W = W
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    def draw(self) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t: int) -> np.ndarray:
        w = self.draw()
        if not self.W.contains(w, tol=1e-12):
            raise ValueError(f"disturbance {w} left the disturbance box")
        return w


class UniformDisturbance(DisturbanceSource):
    def draw(self) -> np.ndarray:
        return self.W.center + self.W.half_widths * self.rng.uniform(-1.0, 1.0, self.W.dim)


class VertexDisturbance(DisturbanceSource):
    """Random vertex of the box at every step (the extreme case)."""

    def draw(self) -> np.ndarray:
        return self.W.center + self.W.half_widths * self.rng.choice([-1.0, 1.0], self.W.dim)


class ZeroDisturbance(DisturbanceSource):
    def draw(self) -> np.ndarray:
        return np.array(self.W.center, dtype=float)


class SequenceDisturbance(DisturbanceSource):
    """Replays a fixed sequence (rows), cycling when exhausted."""

    def __init__(self, W: Box, sequence):
        super().__init__(W, None)
        self.sequence = np.atleast_2d(np.asarray(sequence, dtype=float))

    def __call__(self, t: int) -> np.ndarray:
        w = self.sequence[t % len(self.sequence)]
        if not self.W.contains(w, tol=1e-12):
            raise ValueError(f"disturbance {w} left the disturbance box")
        return w


# -- learned policies ---------------------------------------------------------
def constant_policy(u):
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return lambda x, t: u.copy()


def linear_policy(K):
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return lambda x, t: K @ x


class AdversarialPolicy:
    """Random vertex of a scaled input box; pushes the state towards constraint violation.

    ``scale=2`` proposes inputs on the boundary of twice the input set.
    """

    def __init__(self, U: Polytope, scale: float = 1.0, seed: int | None = 0):
        box = U.bounding_box()
        self.center = box.center
        self.half = box.half_widths * scale
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, x, t: int) -> np.ndarray:
        return self.center + self.half * self.rng.choice([-1.0, 1.0], self.half.size)


class UniformPolicy(AdversarialPolicy):
    """Uniform sample from a scaled input box."""

    def __call__(self, x, t: int) -> np.ndarray:
        return self.center + self.half * self.rng.uniform(-1.0, 1.0, self.half.size)


# -- closed loop --------------------------------------------------------------
@dataclass
class Episode:
    """Trajectory and bookkeeping of one closed-loop run."""

    states: np.ndarray
    inputs: np.ndarray
    learned: np.ndarray
    interventions: np.ndarray
    engaged: np.ndarray
    violations: int
    step_times: np.ndarray
    disturbances: np.ndarray = field(default=None)

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    def to_dict(self) -> dict:
        return {
            "states": self.states.tolist(),
            "inputs": self.inputs.tolist(),
            "learned": self.learned.tolist(),
            "interventions": self.interventions.tolist(),
            "engaged": self.engaged.tolist(),
            "violations": int(self.violations),
            "step_times": self.step_times.tolist(),
        }


def count_violations(problem: SafetyProblem, states, inputs, tol: float = VIOLATION_TOL) -> int:
    """Number of states outside ``X`` plus inputs outside ``U`` (with tolerance)."""
    bad_x = ~problem.X.contains(np.atleast_2d(states), tol=tol)
    bad_u = ~problem.U.contains(np.atleast_2d(inputs), tol=tol)
    return int(np.sum(bad_x) + np.sum(bad_u))


def run_episode(filter, learned_policy, disturbance_source, x0, T: int,
                problem: SafetyProblem | None = None) -> Episode:
    """Simulate ``x+ = A x + B u + B_w w`` with the filtered input for ``T`` steps."""
    problem = problem if problem is not None else filter.problem
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.size != problem.n:
        raise DimensionMismatchError("initial state has the wrong size")
    n, m = problem.n, problem.m
    states = np.empty((T + 1, n))
    inputs = np.empty((T, m))
    learned = np.empty((T, m))
    ws = np.empty((T, problem.n_w))
    interventions = np.empty(T)
    engaged = np.zeros(T, dtype=bool)
    times = np.empty(T)
    states[0] = x
    if hasattr(filter, "reset"):
        filter.reset()
    for t in range(T):
        u_L = np.atleast_1d(np.asarray(learned_policy(x, t), dtype=float))
        tic = time.perf_counter()
        u, info = filter.safe_input(x, u_L)
        times[t] = time.perf_counter() - tic
        u = np.asarray(u, dtype=float).reshape(m)
        interventions[t] = float(np.linalg.norm(u - u_L))
        engaged[t] = info["engaged"] if isinstance(info, dict) else interventions[t] > 1e-9
        w = np.asarray(disturbance_source(t), dtype=float).reshape(-1)
        x = problem.A @ x + problem.B @ u + problem.B_w @ w
        states[t + 1] = x
        inputs[t] = u
        learned[t] = u_L
        ws[t] = w
    violations = count_violations(problem, states, inputs)
    return Episode(states, inputs, learned, interventions, engaged, violations, times, ws)


# -- grid studies -------------------------------------------------------------
@dataclass(frozen=True)
class GridSpec:
    """Cell-centred grid over a box: ``counts[i]`` cells on axis ``i``."""

    lower: tuple
    upper: tuple
    counts: tuple

    @classmethod
    def over(cls, P: Polytope, counts=50) -> "GridSpec":
        box = P.bounding_box()
        counts = (counts,) * P.dim if np.isscalar(counts) else tuple(counts)
        return cls(tuple(box.lower.tolist()), tuple(box.upper.tolist()), tuple(int(c) for c in counts))

    def axes(self) -> list[np.ndarray]:
        out = []
        for lo, hi, c in zip(self.lower, self.upper, self.counts):
            h = (hi - lo) / c
            out.append(lo + h * (np.arange(c) + 0.5))
        return out

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass
class GridStudy:
    """Per-cell feasibility and maximal intervention for several methods."""

    grid: GridSpec
    points: np.ndarray
    feasible: dict = field(default_factory=dict)
    max_intervention: dict = field(default_factory=dict)

    def merge(self, other: "GridStudy") -> "GridStudy":
        self.feasible.update(other.feasible)
        self.max_intervention.update(other.max_intervention)
        return self

    def to_csv(self, path) -> None:
        names = sorted(set(self.feasible) | set(self.max_intervention))
        cols = [f"x{i + 1}" for i in range(self.points.shape[1])]
        cols += [f"feasible_{k}" for k in names if k in self.feasible]
        cols += [f"max_intervention_{k}" for k in names if k in self.max_intervention]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for i, p in enumerate(self.points):
                row = [repr(float(v)) for v in p]
                row += [int(self.feasible[k][i]) for k in names if k in self.feasible]
                row += [repr(float(self.max_intervention[k][i])) for k in names if k in self.max_intervention]
                wr.writerow(row)


def input_vertices(U: Polytope) -> np.ndarray:
    return U.vertices()


def _evaluate_cells(make_filter, points, U_vertices):
    flt = make_filter() if callable(make_filter) and not hasattr(make_filter, "filter_step") else make_filter
    feas = np.zeros(len(points), dtype=bool)
    worst = np.full(len(points), np.nan)
    for i, x in enumerate(points):
        best = 0.0
        for u in U_vertices:
            res = flt.filter_step(x, u)
            if not res.feasible:
                break
            best = max(best, res.intervention)
        else:
            feas[i] = True
            worst[i] = best
    return feas, worst


def intervention_map(make_filter, grid: GridSpec, U: Polytope, name: str = "method",
                     n_jobs: int = 1) -> GridStudy:
    """Feasibility and worst-case intervention over the vertices of ``U`` per cell.

    The intervention is convex in the learned input, so its maximum over
    ``U`` is attained at a vertex.

    Args:
        make_filter: a filter, or a picklable zero-argument factory (needed
            for ``n_jobs > 1``, each worker builds its own instance).
        grid: grid specification.
        U: input set whose vertices are probed.
        name: key under which results are stored.
        n_jobs: worker processes.
    """
    pts = grid.points()
    V = input_vertices(U)
    if n_jobs <= 1:
        feas, worst = _evaluate_cells(make_filter, pts, V)
    else:
        chunks = np.array_split(np.arange(len(pts)), n_jobs)
        with ProcessPoolExecutor(n_jobs) as ex:
            parts = list(ex.map(_evaluate_cells, [make_filter] * n_jobs, [pts[c] for c in chunks], [V] * n_jobs))
        feas = np.concatenate([p[0] for p in parts])
        worst = np.concatenate([p[1] for p in parts])
    return GridStudy(grid, pts, {name: feas}, {name: worst})


def membership_map(contains, grid: GridSpec, name: str) -> GridStudy:
    """Grid study of a plain membership test ``contains(x) -> bool``."""
    pts = grid.points()
    return GridStudy(grid, pts, {name: np.array([bool(contains(x)) for x in pts])})


def coverage(study: GridStudy, reference: str) -> dict:
    """Fraction of the reference set's cells covered by each method's feasible set."""
    ref = study.feasible[reference]
    total = int(ref.sum())
    return {k: (float(np.sum(v & ref)) / total if total else 0.0) for k, v in study.feasible.items()}


def intervention_summary(study: GridStudy, a: str, b: str) -> dict:
    """Mean/max of both methods over jointly feasible cells and per-cell excess of ``a`` over ``b``."""
    joint = study.feasible[a] & study.feasible[b]
    ia, ib = study.max_intervention[a][joint], study.max_intervention[b][joint]
    excess = ia - ib
    return {
        "cells": int(joint.sum()),
        f"mean_{a}": float(ia.mean()) if ia.size else np.nan,
        f"mean_{b}": float(ib.mean()) if ib.size else np.nan,
        f"max_{a}": float(ia.max()) if ia.size else np.nan,
        f"max_{b}": float(ib.max()) if ib.size else np.nan,
        "max_excess": float(excess.max()) if excess.size else 0.0,
        "cells_exceeding": int(np.sum(excess > 0.0)),
    }


# -- timing -------------------------------------------------------------------
def sample_states(P: Polytope, n_samples: int, seed: int) -> np.ndarray:
    """Uniform samples from ``P`` by rejection from its bounding box."""
    rng = np.random.default_rng(seed)
    box = P.bounding_box()
    out = []
    while len(out) < n_samples:
        cand = rng.uniform(box.lower, box.upper, size=(max(16, 2 * (n_samples - len(out))), P.dim))
        out.extend(cand[P.contains(cand, tol=0.0)])
    return np.array(out[:n_samples])


def timing_bench(methods: dict, X: Polytope, m: int, n_samples: int = 200, seed: int = 0) -> dict:
    """Wall-time statistics per method over states sampled uniformly in ``X``.

    Args:
        methods: name -> callable ``(x, u_L) -> solve_time or None``; the
            callable's return value (pure solver time, excluding assembly)
            is recorded next to the total wall time of the call.
        X: sampling region.
        m: input dimension (learned inputs are zero).
        n_samples: number of sampled states.
        seed: RNG seed for the samples.
    """
    pts = sample_states(X, n_samples, seed)
    u = np.zeros(m)
    stats = {}
    for name, fn in methods.items():
        total = np.empty(len(pts))
        core = np.empty(len(pts))
        for i, x in enumerate(pts):
            tic = time.perf_counter()
            inner = fn(x, u)
            total[i] = time.perf_counter() - tic
            core[i] = total[i] if inner is None else inner
        stats[name] = {
            "mean": float(core.mean()), "std": float(core.std()), "median": float(np.median(core)),
            "mean_total": float(total.mean()), "std_total": float(total.std()),
            "median_total": float(np.median(total)), "samples": int(len(pts)),
        }
    return stats


def timing_ordering(stats: dict, explicit: str = "explicit", tube: str = "tube", sl: str = "sl") -> dict:
    """Checks of the expected speed ordering on medians."""
    e, t, s = (stats[k]["median"] for k in (explicit, tube, sl))
    return {"explicit_100x_faster_than_sl": e <= 1e-2 * s, "tube_not_slower_than_sl": t <= s,
            "explicit_faster_than_tube": e < t}


def write_timing_csv(stats: dict, path) -> None:
    keys = ["mean", "std", "median", "mean_total", "std_total", "median_total", "samples"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["method"] + keys)
        for name, s in stats.items():
            wr.writerow([name] + [s[k] for k in keys])


def write_json(data, path) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")
