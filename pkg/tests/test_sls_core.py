import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import rollout_errors, vertex_sequences
from slsfilter.errors import DimensionMismatchError, SingularResponseError
from slsfilter.polytope import Box, Polytope
from slsfilter.problems import double_integrator
from slsfilter.sls_core import (
    BlockLowerTriangular,
    SafetyProblem,
    SystemResponses,
    build_stacked,
    controller_from_responses,
    policy_input,
    reachable_box,
    responses_from_controller,
    subspace_residual,
    tighten_row,
)


def _scalar_problem(a=2.0, N=1):
    return SafetyProblem([[a]], [[1.0]], [[0.1]], Polytope.from_bounds([-1], [1]), Polytope.from_bounds([-1], [1]), N)


def _random_gain(rng, N, m, n, scale=0.5):
    blocks = {(k, i): scale * rng.normal(size=(m, n)) for k in range(N + 1) for i in range(k + 1)}
    return BlockLowerTriangular.from_blocks(blocks, N, m, n)


def _blocks(K):
    return [[K.block(k, i) for i in range(k + 1)] for k in range(K.n_blocks)]


def test_scalar_stacked_shift():
    sys = build_stacked(_scalar_problem(a=2.0))
    assert np.array_equal(sys.ZA.dense(), [[0.0, 0.0], [2.0, 0.0]])


def test_stacked_nilpotent():
    sys = build_stacked(double_integrator(N=2, terminal=False))
    ZA = sys.ZA.dense()
    assert not np.any(ZA @ ZA @ ZA)
    assert np.any(ZA @ ZA)


def test_disturbance_blocks(problem):
    sys = build_stacked(problem, P_init=np.eye(2))
    assert np.array_equal(sys.E.block(0, 0), np.eye(2))
    for k in range(1, problem.N + 1):
        assert np.array_equal(sys.E.block(k, k), 0.3 * np.eye(2))


def test_stacked_dimension_check(problem):
    with pytest.raises(DimensionMismatchError):
        build_stacked(problem, P_init=np.eye(3))


def test_block_lower_triangular_rejects_upper_entries():
    dense = np.zeros((4, 4))
    dense[0, 3] = 1.0
    with pytest.raises(ValueError):
        BlockLowerTriangular(dense, 2, (2, 2))


def test_open_loop_responses_on_subspace(problem):
    sys = build_stacked(problem, P_init=np.eye(2))
    Phi_x = np.linalg.solve(np.eye(sys.ZA.shape[0]) - sys.ZA.dense(), sys.E.dense())
    resp = SystemResponses(
        BlockLowerTriangular(Phi_x, 2, sys.E.col_sizes, tol=1e-12),
        BlockLowerTriangular.zeros(problem.N, 1, sys.E.col_sizes),
    )
    assert subspace_residual(resp, sys) == 0.0


def test_random_controller_responses_on_subspace(problem, rng):
    sys = build_stacked(problem, P_init=np.eye(2))
    resp = responses_from_controller(_random_gain(rng, problem.N, 1, 2), sys)
    assert subspace_residual(resp, sys) <= 1e-9


def test_perturbed_response_leaves_subspace(problem, rng):
    sys = build_stacked(problem, P_init=np.eye(2))
    resp = responses_from_controller(_random_gain(rng, problem.N, 1, 2), sys)
    dense = np.array(resp.Phi_x.dense())
    dense[4, 1] += 1e-3
    bad = SystemResponses(BlockLowerTriangular(dense, 2, sys.E.col_sizes, check=False), resp.Phi_u)
    assert subspace_residual(bad, sys) >= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_controller_round_trip(seed):
    rng = np.random.default_rng(seed)
    p = double_integrator(N=4, terminal=False)
    sys = build_stacked(p, P_init=np.eye(2))
    K = _random_gain(rng, p.N, 1, 2)
    resp = responses_from_controller(K, sys)
    K_back = controller_from_responses(resp)
    assert np.max(np.abs(K_back.dense() - K.dense())) <= 1e-6
    again = responses_from_controller(K_back, sys)
    assert np.max(np.abs(again.Phi_x.dense() - resp.Phi_x.dense())) <= 1e-6
    assert np.max(np.abs(again.Phi_u.dense() - resp.Phi_u.dense())) <= 1e-6


def test_zero_input_response_gives_zero_gain(problem):
    sys = build_stacked(problem, P_init=np.eye(2))
    resp = responses_from_controller(BlockLowerTriangular.zeros(problem.N, 1, 2), sys)
    assert not np.any(controller_from_responses(resp).dense())


def test_single_block_gain():
    Px = BlockLowerTriangular([[2.0, 1.0], [0.0, 4.0]], 2, (2,))
    Pu = BlockLowerTriangular([[1.0, 3.0]], 1, (2,))
    K = controller_from_responses(SystemResponses(Px, Pu))
    assert np.allclose(K.dense(), np.array([[1.0, 3.0]]) @ np.linalg.inv([[2.0, 1.0], [0.0, 4.0]]))


def test_singular_diagonal_block():
    Px = BlockLowerTriangular([[1.0, 1.0], [1.0, 1.0]], 2, (2,))
    Pu = BlockLowerTriangular([[1.0, 0.0]], 1, (2,))
    with pytest.raises(SingularResponseError):
        controller_from_responses(SystemResponses(Px, Pu))


def test_gain_reproduces_response_map(safe_set, problem, rng):
    # closed-loop rollout with the recovered gain against the response map applied to delta
    resp, radii = safe_set.responses, safe_set.radii
    K = safe_set.K_star
    Bw = problem.B_w_eff
    for _ in range(100):
        e0 = rng.uniform(-1, 1, 2)
        ws = rng.uniform(-1, 1, (problem.N, 2))
        dx, du = rollout_errors(problem.A, problem.B, _blocks(K), Bw, radii * e0, ws)
        map_x, map_u = resp.apply(np.concatenate([e0, ws.ravel()]))
        assert np.max(np.abs(dx.ravel() - map_x)) <= 1e-6
        assert np.max(np.abs(du.ravel() - map_u)) <= 1e-6


def test_tighten_zero_rows():
    resp = SystemResponses(BlockLowerTriangular.zeros(2, 2, 2), BlockLowerTriangular.zeros(2, 1, 2))
    assert tighten_row([1.0, -1.0], resp, 2) == 0.0


def test_tighten_stage_zero_without_initial_spread(problem, rng):
    sys = build_stacked(problem)
    resp = responses_from_controller(_random_gain(rng, problem.N, 1, 2), sys)
    assert tighten_row([1.0, 0.0], resp, 0, P_init=np.zeros((2, 2))) == 0.0


def _brute_force_margins(p, K, rows, k, which, init=False):
    """max of a . error_k over all disturbance (and optional initial) vertex sequences"""
    best = np.full(len(rows), -np.inf)
    inits = [np.array(e) for e in vertex_sequences(p.n, 1)] if init else [np.zeros(p.n)]
    for e0 in inits:
        e0 = np.reshape(e0, -1)
        for seq in vertex_sequences(p.n_w, p.N):
            dx, du = rollout_errors(p.A, p.B, _blocks(K), p.B_w_eff, e0, np.array(seq))
            err = dx[k] if which == "x" else du[k]
            best = np.maximum(best, rows @ err)
    return best


@pytest.mark.parametrize("which", ["x", "u"])
def test_tightening_matches_vertex_enumeration(which):
    rng = np.random.default_rng(1)
    p = double_integrator(N=3)
    rows = (p.X if which == "x" else p.U).A
    K = _random_gain(rng, p.N, 1, 2)
    resp = responses_from_controller(K, build_stacked(p))
    for k in range(p.N + 1):
        brute = _brute_force_margins(p, K, rows, k, which)
        ours = np.array([tighten_row(a, resp, k, which=which) for a in rows])
        assert np.max(np.abs(ours - brute)) <= 1e-9


def test_tightening_with_initial_set():
    rng = np.random.default_rng(2)
    p = double_integrator(N=2)
    K = _random_gain(rng, p.N, 1, 2)
    resp = responses_from_controller(K, build_stacked(p, P_init=np.eye(2)))
    for k in range(p.N + 1):
        brute = _brute_force_margins(p, K, p.X.A, k, "x", init=True)
        ours = np.array([tighten_row(a, resp, k) for a in p.X.A])
        assert np.max(np.abs(ours - brute)) <= 1e-9


def test_reachable_box_zero_response():
    resp = SystemResponses(BlockLowerTriangular.zeros(2, 2, 2), BlockLowerTriangular.zeros(2, 1, 2))
    box = reachable_box([1.0, 2.0], resp, 1)
    assert np.array_equal(box.center, [1.0, 2.0]) and not np.any(box.half_widths)


def test_reachable_box_open_loop_rollout():
    p = double_integrator(N=2)
    K = BlockLowerTriangular.zeros(2, 1, 2)
    resp = responses_from_controller(K, build_stacked(p))
    z = np.array([0.5, -1.0])
    box = reachable_box(z, resp, 2)
    ends = np.array([rollout_errors(p.A, p.B, _blocks(K), p.B_w_eff, np.zeros(2), np.array(s))[0][2]
                     for s in vertex_sequences(2, 2)])
    assert len(ends) == 16
    assert np.allclose(box.half_widths, np.max(np.abs(ends), axis=0), atol=1e-12)
    Bw = p.B_w_eff
    assert np.allclose(box.half_widths, np.abs(p.A @ Bw).sum(1) + np.abs(Bw).sum(1))


@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_reachable_box_contains_nominal(seed, k):
    rng = np.random.default_rng(seed)
    p = double_integrator(N=3, terminal=False)
    resp = responses_from_controller(_random_gain(rng, 3, 1, 2), build_stacked(p))
    z = rng.normal(size=2)
    assert np.all(reachable_box(z, resp, k).contains(z))


@given(st.integers(0, 2**31 - 1))
def test_input_is_causal(seed):
    rng = np.random.default_rng(seed)
    p = double_integrator(N=4, terminal=False)
    resp = responses_from_controller(_random_gain(rng, 4, 1, 2), build_stacked(p, P_init=np.eye(2)))
    delta = rng.uniform(-1, 1, 10)
    _, du = resp.apply(delta)
    for k in range(4):
        pert = delta.copy()
        pert[2 * (k + 1):] += rng.normal(size=pert.size - 2 * (k + 1))
        _, du2 = resp.apply(pert)
        assert np.max(np.abs(du2[: k + 1] - du[: k + 1])) <= 1e-12


def test_rectangular_disturbance_matrix():
    rng = np.random.default_rng(4)
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5], [1.0]])
    B_w = np.array([[0.1], [0.3]])
    X = Polytope.from_bounds([-5, -5], [5, 5])
    p = SafetyProblem(A, B, B_w, X, Polytope.from_bounds([-3], [3]), 3, W=Box([0.0], [1.0]))
    sys = build_stacked(p)
    assert sys.E.col_sizes == (2, 1, 1, 1)
    K = _random_gain(rng, 3, 1, 2)
    resp = responses_from_controller(K, sys)
    assert subspace_residual(resp, sys) <= 1e-9
    for k in range(4):
        brute = _brute_force_margins(p, K, X.A, k, "x")
        assert np.allclose([tighten_row(a, resp, k) for a in X.A], brute, atol=1e-9)
    delta = rng.uniform(-1, 1, 5)
    _, du = resp.apply(delta)
    pert = delta.copy()
    pert[3:] = 0.0
    assert np.max(np.abs(resp.apply(pert)[1][:2] - du[:2])) <= 1e-12


def test_policy_input_matches_gain():
    rng = np.random.default_rng(6)
    K = _random_gain(rng, 2, 1, 2)
    z = rng.normal(size=(3, 2))
    v = rng.normal(size=(3, 1))
    hist = [z[0] + 0.1, z[1] - 0.2]
    expected = v[1] + K.block(1, 0) @ (hist[0] - z[0]) + K.block(1, 1) @ (hist[1] - z[1])
    assert np.allclose(policy_input(K, z, v, hist), expected)
    with pytest.raises(ValueError):
        policy_input(K, z, v, [])


def test_gain_without_disturbance_columns():
    rng = np.random.default_rng(10)
    p = double_integrator(N=3, disturbance=0.0, terminal=False)
    sys = build_stacked(p, P_init=2.0 * np.eye(2))
    resp = responses_from_controller(_random_gain(rng, 3, 1, 2), sys)
    K = controller_from_responses(resp)
    again = responses_from_controller(K, sys)
    assert np.max(np.abs(again.Phi_u.dense() - resp.Phi_u.dense())) <= 1e-9
