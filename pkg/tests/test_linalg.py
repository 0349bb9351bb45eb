import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aploc.errors import InvalidData, SingularPencil
from aploc.linalg import (complement, covariance, max_generalized_eig, orthonormal_basis,
                          projector, psd_factor, signal_subspace)

from conftest import random_spd

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_covariance_matches_outer_product_accumulation(rng):
    Y = rng.standard_normal((7, 13))
    C = np.zeros((7, 7))
    for t in range(Y.shape[1]):
        C += np.outer(Y[:, t], Y[:, t])
    np.testing.assert_allclose(covariance(Y), C, rtol=1e-13, atol=1e-12)
    assert np.array_equal(covariance(Y), covariance(Y).T)


def test_covariance_single_sample_is_rank_one(rng):
    y = rng.standard_normal(9)
    C = covariance(y)
    assert np.linalg.matrix_rank(C) == 1


def test_covariance_rejects_nonfinite():
    Y = np.ones((3, 4))
    Y[1, 2] = np.nan
    with pytest.raises(InvalidData):
        covariance(Y)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (8, 3), elements=finite))
def test_projector_idempotent_and_symmetric(A):
    P = projector(A).matrix
    assert np.allclose(P @ P, P, atol=1e-10)
    assert np.allclose(P, P.T, atol=1e-12)


def test_projector_of_duplicated_columns_has_reduced_rank(rng):
    a = rng.standard_normal(6)
    b = rng.standard_normal(6)
    P = projector(np.column_stack([a, b, a, 2 * b]))
    assert P.basis_rank == 2
    np.testing.assert_allclose(P.matrix @ a, a, atol=1e-12)


def test_projector_of_empty_or_zero_matrix_is_zero():
    assert projector(np.zeros((5, 0))).basis_rank == 0
    assert np.all(projector(np.zeros((5, 2))).matrix == 0.0)


def test_complement_annihilates_span(rng):
    A = rng.standard_normal((10, 3))
    Qp = complement(projector(A))
    assert Qp.basis_rank == 7
    assert np.abs(Qp.matrix @ A).max() < 1e-12


def test_projection_decomposition(rng):
    # P_[A b] = P_A + Q_A b (Q_A b)^T / (b^T Q_A b)
    for _ in range(50):
        k = rng.integers(1, 5)
        A = rng.standard_normal((12, k))
        b = rng.standard_normal(12)
        Qb = complement(projector(A)).matrix @ b
        rhs = projector(A).matrix + np.outer(Qb, Qb) / (b @ Qb)
        lhs = projector(np.column_stack([A, b])).matrix
        assert np.abs(lhs - rhs).max() <= 1e-9


def test_orthonormal_basis_is_orthonormal(rng):
    U = orthonormal_basis(rng.standard_normal((9, 4)))
    np.testing.assert_allclose(U.T @ U, np.eye(4), atol=1e-13)


def test_signal_subspace_order_and_signs(rng):
    C = random_spd(rng, 8, rank=3)
    sub = signal_subspace(C, 3)
    assert np.all(np.diff(sub.eigenvalues) <= 0)
    for v in sub.Us.T:
        assert v[np.argmax(np.abs(v))] > 0
    np.testing.assert_allclose(sub.Us @ sub.Lambda @ sub.Us.T, C, atol=1e-10 * np.abs(C).max())
    t = sub.truncate(1)
    assert t.Us.shape == (8, 1)
    np.testing.assert_array_equal(t.u1, sub.u1)
    with pytest.raises(ValueError):
        sub.truncate(4)
    with pytest.raises(ValueError):
        signal_subspace(C, 9)


def test_psd_factor_reproduces_kernel(rng):
    K = random_spd(rng, 7, rank=4)
    W = psd_factor(K)
    assert W.shape == (7, 4)
    np.testing.assert_allclose(W @ W.T, K, atol=1e-10 * np.abs(K).max())


def _rayleigh_upper(F, G, rng, n=20000):
    V = rng.standard_normal((n, F.shape[0]))
    num = np.einsum("ni,ij,nj->n", V, F, V)
    den = np.einsum("ni,ij,nj->n", V, G, V)
    ok = den > 1e-12 * np.abs(den).max()
    return np.max(num[ok] / den[ok])


def test_generalized_eig_matches_dense_solver(rng):
    for _ in range(50):
        F = random_spd(rng, 3)
        G = random_spd(rng, 3)
        lam, v = max_generalized_eig(F, G)
        assert np.linalg.norm(F @ v - lam * G @ v) <= 1e-8 * max(1.0, lam) * np.linalg.norm(G)
        ref = scipy.linalg.eigh(F, G, eigvals_only=True)[-1]
        assert np.isclose(lam, ref, rtol=1e-9)
        assert _rayleigh_upper(F, G, rng) <= lam * (1 + 1e-12)


def test_generalized_eig_deflates_singular_g(rng):
    R, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    G = R @ np.diag([2.0, 0.5, 0.0]) @ R.T
    F = random_spd(rng, 3)
    lam, v = max_generalized_eig(F, G)
    T = R[:, :2]
    ref = scipy.linalg.eigh(T.T @ F @ T, T.T @ G @ T, eigvals_only=True)[-1]
    assert np.isclose(lam, ref, rtol=1e-10)
    assert abs(v @ R[:, 2]) < 1e-10
    assert np.isclose(np.linalg.norm(v), 1.0)


def test_generalized_eig_zero_g_raises():
    with pytest.raises(SingularPencil):
        max_generalized_eig(np.eye(3), np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 1e6))
def test_generalized_eig_scale_invariance(seed, s):
    rng = np.random.default_rng(seed)
    F = random_spd(rng, 3)
    G = random_spd(rng, 3)
    lam, v = max_generalized_eig(F, G)
    lam2, v2 = max_generalized_eig(s * F, G)
    lam3, _ = max_generalized_eig(F, s * G)
    assert np.isclose(lam2, s * lam, rtol=1e-8)
    assert np.isclose(lam3, lam / s, rtol=1e-8)
    assert abs(abs(v @ v2) - 1.0) < 1e-6
