import numpy as np
import pytest

from colsdr.order import (AugmentationConfig, OrderError, Subspace, determine_D_and_d, eta_curve,
                          leading_left_singular_basis, predictor_augmentation_rank, projection_distance,
                          spectral_loss)

from _oracles import eig_leading


# --------------------------------------------------------------------- bases

def test_diag_leading_vector():
    B = leading_left_singular_basis(np.diag([3.0, 1.0]), 1)
    np.testing.assert_allclose(B.basis[:, 0], [1.0, 0.0])


def test_full_space_projection():
    B = leading_left_singular_basis(np.eye(4), 4)
    np.testing.assert_allclose(B.projection(), np.eye(4), atol=1e-14)
    assert B.degenerate is False


def test_matches_eigensolver_oracle(rng):
    M = rng.standard_normal((6, 8))
    for d in (1, 2, 3):
        assert projection_distance(leading_left_singular_basis(M, d), eig_leading(M, d)) < 1e-9


def test_sign_convention_and_orthonormality(rng):
    M = rng.standard_normal((7, 4))
    B = leading_left_singular_basis(M, 3).basis
    np.testing.assert_allclose(B.T @ B, np.eye(3), atol=1e-10)
    for j in range(3):
        assert B[np.argmax(np.abs(B[:, j])), j] > 0
    np.testing.assert_array_equal(B, leading_left_singular_basis(M, 3).basis)


def test_degenerate_flag():
    assert leading_left_singular_basis(np.diag([2.0, 2.0, 1.0]), 1).degenerate
    assert not leading_left_singular_basis(np.diag([3.0, 2.0, 1.0]), 1).degenerate


def test_bad_d():
    with pytest.raises(ValueError):
        leading_left_singular_basis(np.ones((3, 2)), 3)


# --------------------------------------------------------------------- distances

def test_distance_examples():
    e1, e2 = np.array([1.0, 0]), np.array([0, 1.0])
    assert projection_distance(e1, e1) == 0
    assert projection_distance(e1, e2) == pytest.approx(np.sqrt(2))
    assert projection_distance(e1, np.array([1.0, 1.0])) == pytest.approx(1.0)


def test_spectral_examples():
    e1, e2 = np.array([1.0, 0]), np.array([0, 1.0])
    assert spectral_loss(e1, e1) == pytest.approx(0.0, abs=1e-15)
    assert spectral_loss(e1, e2) == pytest.approx(1.0)
    assert spectral_loss(e1, np.array([1.0, 1.0])) == pytest.approx(np.sqrt(2) / 2)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        projection_distance(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        spectral_loss(np.ones(3), np.ones(4))


# --------------------------------------------------------------------- augmentation

def test_eta_curve_formula():
    # hand-built SVD: two signal directions on the original rows, noise share 0.1 on the second
    p0, r = 3, 2
    U = np.zeros((p0 + r, 2))
    U[0, 0] = 1.0
    U[1, 1] = np.sqrt(0.9)
    U[3, 1] = np.sqrt(0.1)
    M = U @ np.diag([2.0, 1.0])
    eta = eta_curve(M, p0, 2)
    expect = [4 / 5, 0 + 1 / 6, 0.1 + 0.0]
    np.testing.assert_allclose(eta, expect, atol=1e-12)


def test_zero_refit_gives_rank_zero():
    d = predictor_augmentation_rank(lambda U: np.zeros((4 + U.shape[1], 3)), 50, 4)
    assert d == 0


def _rank_two_refit(rng, p=10, n=200):
    U0 = np.linalg.qr(rng.standard_normal((p, 2)))[0]
    V0 = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    signal = U0 @ np.diag([5.0, 3.0]) @ V0.T

    def refit(U):
        top = signal + 0.1 * rng.standard_normal(signal.shape)
        bottom = 0.1 * rng.standard_normal((U.shape[1], signal.shape[1]))
        return np.vstack([top, bottom])
    return refit


def test_rank_two_construction():
    hits = 0
    for s in range(100):
        rng = np.random.default_rng(s)
        hits += predictor_augmentation_rank(_rank_two_refit(rng), 200, 10, seed=s) == 2
    assert hits >= 90


def test_refit_failure_surfaces():
    def bad(U):
        raise np.linalg.LinAlgError("singular")
    with pytest.raises(OrderError, match="refit"):
        predictor_augmentation_rank(bad, 20, 3)


def test_augmentation_config_checks():
    with pytest.raises(ValueError):
        AugmentationConfig(r_aug=0)


def test_eta_nonnegative_and_share_monotone(rng):
    M = rng.standard_normal((9, 5))
    eta = eta_curve(M, 6, 5)
    assert np.all(eta >= 0)
    U = np.linalg.svd(M, full_matrices=False)[0]
    shares = np.cumsum(np.r_[0.0, np.sum(U[6:] ** 2, axis=0)])
    assert np.all(np.diff(shares) >= 0)


# --------------------------------------------------------------------- D loop

def test_D_loop_exits_immediately():
    D, d, state, hist = determine_D_and_d(lambda D: {"D": D}, lambda s: 1)
    assert (D, d) == (15, 1) and hist == [(15, 1)]


def test_D_loop_doubles_once():
    calls = []

    def est(state):
        calls.append(state["D"])
        return 15 if len(calls) == 1 else 20
    D, d, _, hist = determine_D_and_d(lambda D: {"D": D}, est)
    assert (D, d) == (30, 20) and hist == [(15, 15), (30, 20)]


def test_D_loop_cap():
    with pytest.raises(OrderError) as err:
        determine_D_and_d(lambda D: {"D": D}, lambda s: s["D"])
    assert err.value.D == 120 and err.value.d_hat == 120


def test_subspace_from_vectors():
    S = Subspace.from_vectors(np.array([[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]))
    np.testing.assert_allclose(S.basis.T @ S.basis, np.eye(2), atol=1e-12)
    assert Subspace.from_vectors(np.zeros((3, 0))).d == 0
