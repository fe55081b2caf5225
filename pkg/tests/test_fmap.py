import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from shapesync.errors import NotPositiveDefinite, RankDeficient, ShapeMismatch
from shapesync.fmap import (FunctionalMap, elastic_objective, fmap_from_pointmap, lb_objective, nearest_neighbors,
                            pointmap_from_fmap, solve_elastic_map, solve_hybrid_map, solve_lb_map, universe_fmap)
from shapesync.pipeline import PipelineConfig, prepare_collection

from oracles import elastic_residual, lb_residual, stacked_oracle


def random_instance(rng, k, d):
    Ai = rng.standard_normal((k, d))
    Aj = rng.standard_normal((k, d))
    li = np.sort(rng.random(k) * 5)
    lj = np.sort(rng.random(k) * 5)
    B = rng.standard_normal((k, k))
    M = B @ B.T + k * np.eye(k)
    return Ai, Aj, li, lj, M


def test_lb_solver_matches_oracle(rng):
    for _ in range(30):
        k, d = rng.integers(1, 7), rng.integers(1, 11)
        Ai, Aj, li, lj, _ = random_instance(rng, k, d)
        lam = float(rng.choice([0.1, 1.0, 100.0]))
        C = solve_lb_map(Ai, Aj, li, lj, lam)
        assert np.linalg.norm(C - stacked_oracle(lb_residual(Ai, Aj, li, lj, lam), k)) < 1e-8


def test_elastic_solver_matches_oracle(rng):
    for _ in range(30):
        k, d = rng.integers(1, 7), rng.integers(1, 11)
        Ai, Aj, li, lj, M = random_instance(rng, k, d)
        C = solve_elastic_map(Ai, Aj, li, lj, M, 50.0)
        assert np.linalg.norm(C - stacked_oracle(elastic_residual(Ai, Aj, li, lj, M, 50.0), k)) < 1e-8


def test_elastic_identity_mass_equals_lb(rng):
    Ai, Aj, li, lj, _ = random_instance(rng, 5, 8)
    a = solve_elastic_map(Ai, Aj, li, lj, np.eye(5), 7.0)
    b = solve_lb_map(Ai, Aj, li, lj, 7.0)
    assert np.allclose(a, b, atol=1e-9)


def test_elastic_conjugate_gradient_path(rng):
    k = 66  # above the dense Kronecker limit
    Ai, Aj, li, lj, M = random_instance(rng, k, 80)
    M = M / k
    C = solve_elastic_map(Ai, Aj, li, lj, M, 1.0)
    Lt = np.linalg.cholesky(M).T
    # gradient of the objective vanishes at the minimiser
    R1 = C @ Ai - Aj
    R2 = C * li[None, :] - lj[:, None] * C
    Q = M @ R2
    g = M @ R1 @ Ai.T + (Q * li[None, :] - lj[:, None] * Q)
    assert np.abs(g).max() < 1e-6 * max(1.0, np.abs(M @ Aj @ Ai.T).max())
    assert np.isfinite(Lt).all()


@pytest.mark.parametrize("lam", [0.0, 100.0])
def test_identity_is_zero_energy_minimiser(rng, lam):
    A = rng.standard_normal((4, 9))
    ev = np.sort(rng.random(4))
    assert np.allclose(solve_lb_map(A, A, ev, ev, lam), np.eye(4), atol=1e-6)
    B = rng.standard_normal((4, 4))
    assert np.allclose(solve_elastic_map(A, A, ev, ev, B @ B.T + np.eye(4), lam), np.eye(4), atol=1e-6)


def test_lambda_zero_gives_pseudoinverse(rng):
    Ai, Aj = rng.standard_normal((4, 7)), rng.standard_normal((4, 7))
    ev = np.arange(4.0)
    assert np.allclose(solve_lb_map(Ai, Aj, ev, ev, 0.0), Aj @ np.linalg.pinv(Ai), atol=1e-8)


def test_local_optimality_probe(rng):
    Ai, Aj, li, lj, M = random_instance(rng, 3, 5)
    C = solve_lb_map(Ai, Aj, li, lj, 100.0)
    f0 = lb_objective(C, Ai, Aj, li, lj, 100.0)
    for eps in (1e-3, 1e-5):
        for _ in range(200):
            assert f0 <= lb_objective(C + eps * rng.standard_normal((3, 3)), Ai, Aj, li, lj, 100.0)
    Ce = solve_elastic_map(Ai, Aj, li, lj, M, 50.0)
    fe = elastic_objective(Ce, Ai, Aj, li, lj, M, 50.0)
    assert fe <= elastic_objective(solve_lb_map(Ai, Aj, li, lj, 50.0), Ai, Aj, li, lj, M, 50.0) + 1e-10


def test_singular_system_prefers_identity():
    # rank-one data with a repeated eigenvalue leaves part of C undetermined
    A = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    ev = np.array([0.0, 1.0, 1.0])
    assert np.allclose(solve_lb_map(A, A, ev, ev, 10.0), np.eye(3), atol=1e-9)
    assert np.allclose(solve_elastic_map(A, A, ev, ev, np.eye(3), 10.0), np.eye(3), atol=1e-9)


def test_elastic_rejects_bad_mass(rng):
    A = rng.standard_normal((2, 3))
    with pytest.raises(NotPositiveDefinite):
        solve_elastic_map(A, A, np.ones(2), np.ones(2), np.array([[1.0, 0], [0, -1]]))
    with pytest.raises(ShapeMismatch):
        solve_lb_map(A, A[:1], np.ones(2), np.ones(2))


@pytest.fixture(scope="module")
def perm_pair(blob200):
    perm = np.random.default_rng(7).permutation(200)
    shapes = prepare_collection([blob200, blob200.permuted(perm)], PipelineConfig(k_lb=20, k_elastic=8))
    return shapes, perm


def test_hybrid_self_map_is_identity(blob_shape):
    C = solve_hybrid_map(blob_shape, blob_shape)
    assert np.allclose(C.c11, np.eye(20), atol=1e-6) and np.allclose(C.c22, np.eye(8), atol=1e-6)
    idx = pointmap_from_fmap(C, blob_shape.basis, blob_shape.basis)
    assert np.array_equal(idx, np.arange(200))


def test_permuted_copy_recovery(perm_pair):
    (a, b), perm = perm_pair
    # vertex t of b is vertex perm[t] of a
    C_ba = solve_hybrid_map(b, a)
    idx = pointmap_from_fmap(C_ba, b.basis, a.basis)  # for each vertex of a, a vertex of b
    inv = np.argsort(perm)
    assert np.mean(idx == inv) >= 0.95
    # the same map built from the known permutation agrees
    P = np.zeros((200, 200))
    P[np.arange(200), perm] = 1.0  # Pi_ab: rows of b, columns of a
    C_known = fmap_from_pointmap(P, a.basis, b.basis)
    C_ab = solve_hybrid_map(a, b)
    assert np.linalg.norm(C_known.full - C_ab.full) < 0.1


def test_fmap_from_pointmap_identity_and_fixed_point(perm_pair):
    (a, b), perm = perm_pair
    C = fmap_from_pointmap(np.eye(200), a.basis, a.basis)
    assert np.allclose(C.full, np.eye(28), atol=1e-6)
    P = np.zeros((200, 200))
    P[np.arange(200), perm] = 1.0
    C = fmap_from_pointmap(P, a.basis, b.basis)
    assert np.array_equal(pointmap_from_fmap(C, a.basis, b.basis), perm)


def test_fmap_from_soft_pointmap_is_mass_least_squares(perm_pair, rng):
    (a, b), _ = perm_pair
    P = rng.random((200, 200))
    P /= P.sum(axis=1, keepdims=True)
    C = fmap_from_pointmap(P, a.basis, b.basis)
    M = b.basis.lb.mass.toarray()
    Phi_j, Phi_i = b.basis.lb.functions, a.basis.lb.functions
    oracle = np.linalg.solve(Phi_j.T @ M @ Phi_j, Phi_j.T @ M @ P @ Phi_i)
    assert np.allclose(C.c11, oracle, atol=1e-8)


def test_nearest_neighbors_brute_force(rng):
    Q = rng.standard_normal((150, 6))
    R = np.vstack([rng.standard_normal((50, 6)), Q[:3]])
    R = np.vstack([R, R[-1:]])  # duplicate row: the lower index must win
    expected = np.array([min(range(len(R)), key=lambda s: (np.sum((q - R[s]) ** 2), s)) for q in Q])
    assert np.array_equal(nearest_neighbors(Q, R), expected)


def test_universe_fmap(rng):
    A0 = rng.standard_normal((4, 9))
    mats = [rng.standard_normal((4, 4)) @ A0 for _ in range(3)]
    assert np.allclose(universe_fmap(mats[0], mats[0]).full, np.eye(4), atol=1e-8)
    C01, C12, C20 = (universe_fmap(mats[i], mats[j]).full for i, j in ((0, 1), (1, 2), (2, 0)))
    assert np.allclose(C20 @ C12 @ C01 @ mats[0], mats[0], atol=1e-6)
    with pytest.raises(RankDeficient):
        universe_fmap(np.vstack([A0[:3], A0[:1]]), A0)


@given(st.integers(1, 5), st.integers(0, 4))
def test_functional_map_serialisation(tmp_path_factory, k1, k2):
    rng = np.random.default_rng(k1 * 10 + k2)
    C = FunctionalMap(rng.standard_normal((k1, k1)), rng.standard_normal((k2, k2)), "a", "b")
    prefix = tmp_path_factory.mktemp("fm") / "C"
    C.save(prefix, lam_lb=100.0)
    D = FunctionalMap.load(prefix)
    assert np.array_equal(C.c11, D.c11) and np.array_equal(C.c22, D.c22) and D.source == "a"


def test_composition_and_blocks():
    A = FunctionalMap(2 * np.eye(2), 3 * np.eye(1), "x", "y")
    B = FunctionalMap(np.eye(2), 2 * np.eye(1), "y", "z")
    C = B @ A
    assert (C.source, C.target) == ("x", "z")
    assert np.allclose(C.full, scipy.linalg.block_diag(2 * np.eye(2), 6 * np.eye(1)))
