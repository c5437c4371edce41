import numpy as np
import pytest

from colsdr.moments import Dataset, method_specs, slice_response
from colsdr.order import projection_distance
from colsdr.selection import (SelectionUnit, bootstrap_g, bootstrap_indices, enumerate_F_hat,
                              forward_column_select, make_units, redundancy_recheck, select_G_hat,
                              units_to_columns)


def _rank(M, cols, tol=1e-9):
    if not cols:
        return 0
    s = np.linalg.svd(M[:, cols], compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0])))


# --------------------------------------------------------------------- forward selection

def test_forward_selection_worked_example():
    b = np.array([1.0, 0, 0])
    c = np.array([0, 1.0, 0])
    M = np.column_stack([b, 2 * b, c])
    R, tr = forward_column_select(M, 3)
    assert R == [1, 2]
    assert tr.stop_reason == "residuals-zero"
    assert projection_distance(M[:, R], M[:, [0, 2]]) < 1e-14


def test_forward_selection_cap():
    M = np.random.default_rng(0).standard_normal((5, 4))
    R, tr = forward_column_select(M, 1)
    assert R == [int(np.argmax(np.linalg.norm(M, axis=0)))]
    assert tr.stop_reason == "reached-D"


def test_forward_selection_ties_smallest_index():
    M = np.column_stack([np.eye(3)[:, 0], np.eye(3)[:, 1], np.eye(3)[:, 0]])
    R, _ = forward_column_select(M, 3)
    assert R == [0, 1]


def test_all_zero_columns():
    R, tr = forward_column_select(np.zeros((4, 3)), 2)
    assert R == [] and tr.stop_reason == "residuals-zero"


def test_forward_selection_input_checks():
    with pytest.raises(ValueError):
        forward_column_select(np.ones((3, 2)), 0)
    with pytest.raises(ValueError):
        forward_column_select(np.ones((3, 0)), 1)


def test_noisy_rank_two_recovery():
    ok = 0
    for s in range(100):
        rng = np.random.default_rng(s)
        U = np.linalg.qr(rng.standard_normal((20, 2)))[0]
        signal = U @ rng.standard_normal((2, 10))
        M = signal + 1e-3 * rng.standard_normal((20, 10))
        R, _ = forward_column_select(M, 2)
        ok += projection_distance(M[:, R], U) <= 0.05
    assert ok >= 95


def test_selected_residuals_non_increasing():
    rng = np.random.default_rng(7)
    M = rng.standard_normal((12, 9))
    _, tr = forward_column_select(M, 9)
    assert np.all(np.diff(tr.residual_norms) <= 1e-12)


# --------------------------------------------------------------------- redundancy recheck

def test_recheck_prunes_duplicate_direction():
    b = np.array([1.0, 2.0, 0.0])
    c = np.array([0.0, 0.0, 1.0])
    keep = redundancy_recheck(np.column_stack([b, 3 * b, c]), 3)
    assert len(keep) == 2 and 2 in keep


def test_recheck_keeps_independent_columns():
    M = np.diag([3.0, 2.0, 1.0])
    assert sorted(redundancy_recheck(M, 3)) == [0, 1, 2]


# --------------------------------------------------------------------- F_hat enumeration

def _units(sizes):
    out, start = [], 0
    for k in sizes:
        out.append(SelectionUnit("per-variable-submatrix", list(range(start, start + k))))
        start += k
    return out


def test_rank_one_dominant_unit():
    M = np.zeros((4, 6))
    M[:, 0] = [1, 2, 0, 0]
    M[:, 1] = [2, 4, 0, 0]
    units = _units([2, 2, 2])
    F_hat, checks = enumerate_F_hat(M, units, 1, lambda cols: _rank(M, cols))
    assert set(F_hat) == {(0,), (0, 1), (0, 2), (0, 1, 2)}
    # supersets of (0,) are accepted without further rank checks
    assert checks == 4


def test_complementary_units_need_full_set():
    M = np.zeros((3, 4))
    M[0, :2] = 1.0
    M[1, 2:] = 1.0
    F_hat, _ = enumerate_F_hat(M, _units([2, 2]), 2, lambda cols: _rank(M, cols))
    assert F_hat == [(0, 1)]


def test_single_unit():
    M = np.ones((3, 2))
    F_hat, _ = enumerate_F_hat(M, _units([2]), 1, lambda cols: _rank(M, cols))
    assert F_hat == [(0,)]


def test_enumeration_cap():
    with pytest.raises(ValueError, match="per-variable"):
        enumerate_F_hat(np.ones((2, 25)), _units([1] * 25), 1, lambda c: 1)


def test_units_partition_specs():
    specs = method_specs("SAVE", 4, 3)
    for mode in ("single-column", "per-variable-submatrix"):
        units = make_units(specs, mode)
        assert sorted(units_to_columns(units, range(len(units)))) == list(range(len(specs)))
    assert len(make_units(specs)) == 4
    with pytest.raises(ValueError):
        make_units(specs, "pairs")


# --------------------------------------------------------------------- bootstrap criterion

def _save_data(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 4))
    y = X[:, 0] ** 2 + 0.2 * rng.standard_normal(n)
    lab = slice_response(y, 3)
    return Dataset(X, y), lab, method_specs("SAVE", 4, 3)


def test_g_without_bootstrap_is_penalty():
    data, lab, specs = _save_data(100, 0)
    g = bootstrap_g(data, lab, specs, [0, 4, 8], B_reps=0, c=0.2)
    assert g == pytest.approx(100 ** -0.2 * 3)


def test_g_is_seed_deterministic():
    data, lab, specs = _save_data(80, 1)
    a = bootstrap_g(data, lab, specs, [0, 4, 8], B_reps=15, seed=5)
    b = bootstrap_g(data, lab, specs, [0, 4, 8], B_reps=15, seed=5)
    c = bootstrap_g(data, lab, specs, [0, 4, 8], B_reps=15, seed=6)
    assert a == b and a != c


def test_g_variability_shrinks_with_n():
    vals = []
    for n in (100, 400, 1600):
        data, lab, specs = _save_data(n, 2)
        g = bootstrap_g(data, lab, specs, [0, 4, 8], B_reps=40, seed=3)
        vals.append(g - n ** -0.2 * 3)
    assert vals[0] > vals[1] > vals[2]


def test_bootstrap_indices_keep_every_slice():
    lab = np.array([1] * 3 + [2] * 30)
    for idx in bootstrap_indices(lab, 33, 50, 0):
        assert set(lab[idx]) == {1, 2}


def test_bootstrap_indices_give_up():
    # slice 2 has no rows, so no resample can cover all three slices
    lab = np.array([1, 1, 3, 3])
    with pytest.raises(RuntimeError, match="empty slices"):
        bootstrap_indices(lab, 4, 5, 0)


def test_select_singleton_F_hat():
    data, lab, specs = _save_data(60, 4)
    units = make_units(specs)
    G, g = select_G_hat(data, lab, specs, units, [(0, 1)], B_reps=5)
    assert G == (0, 1) and set(g) == {(0, 1)}


def test_select_tie_prefers_smaller_set():
    data, lab, specs = _save_data(60, 4)
    units = make_units(specs)
    # with no resamples g is the column-count penalty, so ties are decided by the rule
    G, g = select_G_hat(data, lab, specs, units, [(0, 1), (2,), (1,)], B_reps=0)
    assert G == (1,)
