import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mbcal import mlcp
from oracles import brute_force_mlcp, random_mlcp


def complementarity_residual(S, b, nA, lam):
    w = S @ lam + b
    return max(
        np.abs(w[:nA]).max(initial=0.0),
        np.maximum(-lam[nA:], 0).max(initial=0.0),
        np.maximum(-w[nA:], 0).max(initial=0.0),
        np.abs(lam[nA:] * w[nA:]).max(initial=0.0),
    )


def test_lemke_nonnegative_q():
    np.testing.assert_array_equal(mlcp.lemke(np.array([[1.0]]), np.array([2.0])), [0.0])


def test_lemke_scalar_active():
    np.testing.assert_allclose(mlcp.lemke(np.array([[2.0]]), np.array([-4.0])), [2.0])


def test_lemke_two_by_two():
    z = mlcp.lemke(np.array([[2.0, 1.0], [1.0, 2.0]]), np.array([-1.0, -1.0]))
    np.testing.assert_allclose(z, [1 / 3, 1 / 3], atol=1e-14)


def test_lemke_unbounded_ray():
    with pytest.raises(mlcp.RayTermination):
        mlcp.lemke(np.array([[-1.0]]), np.array([-1.0]))


def test_block_factor_diagonal():
    S = np.diag([2.0, 3.0, 4.0])
    f = mlcp.block_factor(S, 2, (1, 1))
    np.testing.assert_array_equal(f.L, np.eye(3))
    np.testing.assert_array_equal(f.D, S)


def test_block_ldlt_reconstructs(rng):
    R = rng.normal(size=(5, 5))
    S = R @ R.T + np.eye(5)
    L, D = mlcp.block_ldlt(mlcp.MlcpProblem(S, np.zeros(5), 4, (2, 2)))
    np.testing.assert_allclose(L @ D @ L.T, S, atol=1e-10)


def test_zero_pivot_block():
    S = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 2.0]])
    with pytest.raises(mlcp.SingularPivot):
        mlcp.block_factor(S, 2, (2,))


def test_pure_equality_is_linear_solve(rng):
    R = rng.normal(size=(4, 4))
    S = R @ R.T + np.eye(4)
    b = rng.normal(size=4)
    sol = mlcp.solve_mlcp(mlcp.MlcpProblem(S, b, 4))
    np.testing.assert_allclose(sol.lam, np.linalg.solve(S, -b), atol=1e-10)


def test_pure_lcp_equals_lemke(rng):
    S, b = random_mlcp(rng, 0, 4)
    sol = mlcp.solve_mlcp(mlcp.MlcpProblem(S, b, 0))
    np.testing.assert_allclose(sol.lam, mlcp.lemke(S, b), atol=1e-12)


def test_random_mixed_problem_kkt(rng):
    S, b = random_mlcp(rng, 6, 4)
    sol = mlcp.solve_mlcp(mlcp.MlcpProblem(S, b, 6, (3, 3)))
    assert complementarity_residual(S, b, 6, sol.lam) <= 1e-8
    (ref,) = brute_force_mlcp(S, b, 6)
    np.testing.assert_allclose(sol.lam, ref, atol=1e-8)


def test_problem_validation():
    with pytest.raises(ValueError):
        mlcp.MlcpProblem(np.eye(2), np.zeros(3), 0)
    with pytest.raises(ValueError):
        mlcp.MlcpProblem(np.eye(3), np.zeros(3), 2, (1,))


def test_batched_lcp_matches_lemke(rng):
    Ms, qs = [], []
    for _ in range(30):
        S, b = random_mlcp(rng, 0, 5)
        Ms.append(S)
        qs.append(b)
    Z = mlcp.lcp_batch(np.array(Ms), np.array(qs))
    for M, q, z in zip(Ms, qs, Z):
        np.testing.assert_allclose(z, mlcp.lemke(M, q), atol=1e-10)


@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_mixed_solutions_complementary(nA, nB, seed):
    if nA + nB == 0:
        return
    S, b = random_mlcp(np.random.default_rng(seed), nA, nB)
    sol = mlcp.solve_mlcp(mlcp.MlcpProblem(S, b, nA))
    assert complementarity_residual(S, b, nA, sol.lam) <= 1e-8
    np.testing.assert_allclose(sol.w_B, (S @ sol.lam + b)[nA:], atol=1e-12)
