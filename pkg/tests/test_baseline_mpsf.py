import itertools

import numpy as np
import pytest
import scipy.linalg

from slsfilter.baseline_mpsf import NominalMPSF, TubeConfig, TubeMPSF, dare_residual, lqr, nominal_filter, tube_filter
from slsfilter.errors import NotStabilizableError
from slsfilter.polytope import contains_set
from slsfilter.problems import double_integrator
from slsfilter.sim import VertexDisturbance, ZeroDisturbance, constant_policy, run_episode
from slsfilter.sl_mpsf import SLMPSF


def test_lqr_deadbeat_plant():
    assert np.allclose(lqr([[0.0]], [[1.0]], [[1.0]], [[1.0]]), 0.0)


def test_lqr_cheap_control_limit():
    assert lqr([[1.0]], [[1.0]], [[1.0]], [[1e-9]])[0, 0] == pytest.approx(-1.0, abs=1e-6)


def test_lqr_double_integrator(problem):
    A, B, Q, R = problem.A, problem.B, np.eye(2), 100.0 * np.eye(1)
    K = lqr(A, B, Q, R)
    assert np.max(np.abs(np.linalg.eigvals(A + B @ K))) < 1
    assert dare_residual(A, B, Q, R, K) <= 1e-10
    # independent Riccati solution
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    K_ref = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    assert np.allclose(K, K_ref, atol=1e-8)
    assert np.allclose(problem.K_f, K)


def test_lqr_not_stabilizable():
    with pytest.raises(NotStabilizableError):
        lqr([[2.0, 0.0], [0.0, 0.5]], [[0.0], [1.0]], np.eye(2), np.eye(1))


def test_nominal_origin(problem):
    res = nominal_filter(problem, [0.0, 0.0], [0.0])
    assert res.feasible and res.intervention <= 1e-7


def test_nominal_closed_loop_without_disturbance(problem):
    f = NominalMPSF(problem)
    for x0 in ([3.0, 1.0], [-4.0, 1.5], [2.0, -2.5]):
        assert f.filter_step(x0, [0.0]).feasible
        state = np.array(x0)
        for u_L in (3.0, -3.0) * 10:
            res = f.filter_step(state, [u_L])
            assert res.feasible
            state = problem.A @ state + problem.B @ res.u_applied
            assert problem.X.contains(state, tol=1e-7)


def test_tube_config_sets(tube_cfg, problem):
    assert contains_set(problem.X, tube_cfg.X_tight)
    assert contains_set(problem.U, tube_cfg.U_tight)
    assert contains_set(tube_cfg.X_tight, tube_cfg.terminal, 1e-7)


def test_tube_is_invariant_on_samples(tube_cfg, problem, rng):
    A_cl = problem.A + problem.B @ tube_cfg.K
    box = tube_cfg.tube.bounding_box()
    pts = rng.uniform(box.lower, box.upper, (3000, 2))
    pts = pts[tube_cfg.tube.contains(pts)][:500]
    for w in itertools.product([-1.0, 1.0], repeat=2):
        nxt = pts @ A_cl.T + problem.B_w_eff @ np.array(w)
        assert np.all(tube_cfg.tube.contains(nxt, tol=1e-9))


def test_tube_origin(tube_cfg):
    res = tube_filter([0.0, 0.0], [0.0], tube_cfg)
    assert res.feasible and res.intervention <= 1e-7


def test_tube_applied_input_formula(tube_cfg, problem):
    x = np.array([2.0, -1.0])
    res = TubeMPSF(tube_cfg).filter_step(x, [2.5])
    assert res.feasible
    assert np.allclose(res.u_applied, res.v[0] + tube_cfg.K @ (x - res.z[0]))
    assert tube_cfg.tube.contains(x - res.z[0], tol=1e-7)


def test_tube_region_inside_sl_region(problem, tube_cfg):
    tube, sl = TubeMPSF(tube_cfg), SLMPSF(problem)
    g = np.linspace(-4.5, 4.5, 7)
    for x in itertools.product(g, g):
        both = tube.is_feasible(x), sl.is_feasible(x)
        assert both[1] or not both[0]
        assert not both[0] or problem.X.contains(np.array(x))


def test_tube_closed_loop_has_no_violations(problem, tube_cfg):
    f = TubeMPSF(tube_cfg)
    starts = [x for x in ([0.0, 0.0], [2.0, -1.0], [-3.0, 1.0]) if f.is_feasible(x)]
    assert len(starts) == 3
    for i, x0 in enumerate(starts):
        f.reset()
        ep = run_episode(f, constant_policy([3.0 if i % 2 else -3.0]), VertexDisturbance(problem.W, seed=i),
                         x0, 30, problem=problem)
        assert ep.violations == 0
        assert np.all(np.sum(ep.engaged) >= 0)


def test_tube_without_disturbance_matches_nominal(rng):
    p = double_integrator(disturbance=0.0)
    cfg = TubeConfig.from_problem(p)
    tube, nom = TubeMPSF(cfg), NominalMPSF(p)
    compared = 0
    for _ in range(20):
        x = rng.uniform(-5, 5, 2)
        u = rng.uniform(-6, 6, 1)
        a, b = tube.filter_step(x, u), nom.filter_step(x, u)
        assert a.feasible == b.feasible
        if a.feasible:
            assert np.max(np.abs(a.u_applied - b.u_applied)) <= 1e-6
            compared += 1
    assert compared >= 10


def test_nominal_filter_ignores_disturbance(problem):
    ep = run_episode(NominalMPSF(problem), constant_policy([0.0]), ZeroDisturbance(problem.W), [1.0, 1.0], 10,
                     problem=problem)
    assert ep.violations == 0
