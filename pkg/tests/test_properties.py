import numpy as np
from hypothesis import assume, given
from hypothesis import strategies as st

from colsdr.moments import (Dataset, build_candidate_dense, build_lambda_targets, method_specs,
                            slice_moments, slice_response)
from colsdr.order import (Subspace, eta_curve, leading_left_singular_basis, projection_distance,
                          spectral_loss)
from colsdr.penalized import GroupLassoProblem, adaptive_weights, group_lasso_fit, lambda_max
from colsdr.selection import SelectionUnit, enumerate_F_hat, forward_column_select
from colsdr.simbench import selection_metrics

seeds = st.integers(0, 2**32 - 1)


def _orth(rng, p, d):
    return np.linalg.qr(rng.standard_normal((p, d)))[0]


@given(seeds, st.integers(2, 6), st.integers(20, 80))
def test_slicing_balanced_for_distinct_values(seed, H, n):
    y = np.random.default_rng(seed).standard_normal(n)
    counts = np.bincount(slice_response(y, H))[1:]
    assert counts.size == H and counts.max() - counts.min() <= 1


@given(seeds)
def test_summary_invariant_under_row_permutation(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((40, 3))
    lab = slice_response(rng.standard_normal(40), 3)
    perm = rng.permutation(40)
    a = slice_moments(Dataset(X, lab), lab)
    b = slice_moments(Dataset(X[perm], lab[perm]), lab[perm])
    np.testing.assert_allclose(a.sigma_hat, b.sigma_hat, atol=1e-12)
    np.testing.assert_allclose(a.sigma_hat_h, b.sigma_hat_h, atol=1e-12)
    np.testing.assert_allclose(a.mu_hat, b.mu_hat, atol=1e-12)


@given(seeds, st.sampled_from(["SIR", "SAVE", "DR"]), st.integers(2, 4))
def test_sigma_b_equals_lambda(seed, method, H):
    rng = np.random.default_rng(seed)
    n, p = 50, 3
    X = rng.standard_normal((n, p))
    lab = slice_response(rng.standard_normal(n), H)
    data = Dataset(X, np.zeros(n))
    specs = method_specs(method, p, H)
    sm = slice_moments(data, lab)
    M = build_candidate_dense(sm, specs).values
    Lam, _ = build_lambda_targets(data, lab, specs)
    err = np.linalg.norm(sm.sigma_hat @ M - Lam, axis=0)
    assert np.all(err <= 1e-8 * (1 + np.linalg.norm(Lam, axis=0)))


@given(seeds, st.integers(3, 8), st.integers(1, 3))
def test_metric_identities(seed, p, d):
    rng = np.random.default_rng(seed)
    A, B, C = (Subspace(_orth(rng, p, d)) for _ in range(3))
    dab = projection_distance(A, B)
    assert dab == projection_distance(B, A)
    assert dab <= projection_distance(A, C) + projection_distance(C, B) + 1e-12
    sl = spectral_loss(A, B)
    assert 0 <= sl <= 1
    assert sl <= dab + 1e-12 and dab <= np.sqrt(2 * d) * sl + 1e-12


@given(seeds, st.integers(3, 8), st.integers(1, 3))
def test_metrics_basis_invariant(seed, p, d):
    rng = np.random.default_rng(seed)
    A, B = _orth(rng, p, d), _orth(rng, p, d)
    Q = _orth(rng, d, d)
    assert abs(projection_distance(A @ Q, B) - projection_distance(A, B)) <= 1e-10
    assert abs(spectral_loss(A @ Q, B) - spectral_loss(A, B)) <= 1e-10


@given(seeds, st.integers(1, 3), st.integers(4, 30), st.integers(4, 60))
def test_forward_selection_exact_recovery(seed, d, p, q):
    assume(d <= min(p, q))
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((p, d)) @ rng.standard_normal((d, q))
    R, _ = forward_column_select(M, d + 2)
    assert len(R) == d
    assert projection_distance(M[:, R], leading_left_singular_basis(M, d)) <= 1e-10


@given(seeds, st.integers(1, 4))
def test_F_hat_superset_closed(seed, m):
    rng = np.random.default_rng(seed)
    units = [SelectionUnit("single-column", [i]) for i in range(m)]
    M = rng.standard_normal((4, m)) * (rng.random(m) < 0.6)
    full = np.linalg.matrix_rank(M)

    def rank(cols):
        return np.linalg.matrix_rank(M[:, cols])
    F_hat, _ = enumerate_F_hat(M, units, full, rank)
    acc = set(F_hat)
    for F in acc:
        for extra in range(m):
            if extra not in F:
                assert tuple(sorted(F + (extra,))) in acc


@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 100.0)), min_size=1, max_size=6), st.floats(0.1, 3.0),
       st.sampled_from(["rho", "rho/2"]))
def test_adaptive_weight_formula(norms, rho, mode):
    v = adaptive_weights(norms, rho, mode)
    e = rho if mode == "rho" else rho / 2
    for r, w in zip(norms, v):
        assert w == np.inf if r == 0 else np.isclose(w, r ** (-e))


@given(seeds, st.integers(1, 6), st.integers(1, 3), st.floats(0.01, 0.95))
def test_solution_passes_kkt(seed, p, q, frac):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((p + 10, p))
    prob = GroupLassoProblem.from_data(X, rng.standard_normal((p + 10, q)), 0.0)
    prob.lam = frac * lambda_max(prob.cross)
    sol = group_lasso_fit(prob, "cd", tol=1e-10)
    assert sol.kkt_residual <= 1e-7
    assert np.all(sol.B[np.setdiff1d(np.arange(p), sol.active_rows)] == 0)


@given(seeds, st.floats(1.0, 10.0))
def test_zero_above_threshold(seed, mult):
    rng = np.random.default_rng(seed)
    prob = GroupLassoProblem.from_data(rng.standard_normal((15, 4)), rng.standard_normal((15, 2)), 0.0)
    prob.lam = mult * lambda_max(prob.cross) * (1 + 1e-12)
    assert np.all(group_lasso_fit(prob).B == 0)


@given(st.sets(st.integers(0, 20)), st.sets(st.integers(0, 20), min_size=1))
def test_metric_ranges(A_hat, A):
    m = selection_metrics(sorted(A_hat), sorted(A), sorted(A_hat), sorted(A))
    assert 0 <= m["TSR"] <= 1
    assert m["ACv"] <= len(A) and m["ICv"] <= 21 - len(A)


@given(seeds, st.integers(3, 7), st.integers(1, 3))
def test_eta_well_formed(seed, q, r):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((5 + r, q))
    eta = eta_curve(M, 5, min(q, 5))
    assert np.all(eta >= 0)
