"""Column selection.

Two procedures are provided.  Forward column selection greedily picks the
column with the largest residual after projecting out the columns already
chosen, for the sparse high-dimensional path.  The efficiency-adapted search
enumerates unit subsets whose estimated rank matches the full candidate
matrix and keeps the one minimizing a bootstrap variability criterion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .moments import (CandidateEstimate, ColumnSpec, Dataset, build_candidate_dense,
                      per_variable_units, slice_moments)
from .order import leading_left_singular_basis

__all__ = [
    "SelectionUnit",
    "ForwardTrace",
    "make_units",
    "forward_column_select",
    "redundancy_recheck",
    "enumerate_F_hat",
    "bootstrap_indices",
    "bootstrap_candidates",
    "bootstrap_g",
    "select_G_hat",
    "units_to_columns",
]

ZERO_TOL = 1e-8
UNIT_CAP = 20
MAX_REDRAWS = 100


@dataclass
class SelectionUnit:
    """A block of candidate columns selected or dropped together."""

    unit_mode: str
    members: List[int]
    specs: List[ColumnSpec] = field(default_factory=list)

    def label(self) -> str:
        if self.unit_mode == "per-variable-submatrix" and self.specs and self.specs[0].variable is not None:
            return f"X{self.specs[0].variable + 1}"
        return ",".join(s.label() for s in self.specs) or ",".join(map(str, self.members))


@dataclass
class ForwardTrace:
    selected: List[int]
    residual_norms: List[float]
    max_remaining: List[float]
    stop_reason: str


def make_units(specs: Sequence[ColumnSpec], unit_mode: str = "per-variable-submatrix") -> List[SelectionUnit]:
    """Partition the spec list into selection units."""
    specs = list(specs)
    if unit_mode == "single-column":
        return [SelectionUnit(unit_mode, [i], [s]) for i, s in enumerate(specs)]
    if unit_mode == "per-variable-submatrix":
        return [SelectionUnit(unit_mode, g, [specs[i] for i in g]) for g in per_variable_units(specs)]
    raise ValueError(f"unknown unit mode {unit_mode!r}")


def units_to_columns(units: Sequence[SelectionUnit], F: Sequence[int]) -> List[int]:
    return sorted(c for u in F for c in units[u].members)


def _values(M):
    return M.values if isinstance(M, CandidateEstimate) else np.asarray(M, dtype=float)


def _orthonormal_append(Q: np.ndarray, v: np.ndarray) -> Optional[np.ndarray]:
    # two rounds of Gram-Schmidt keep the basis orthonormal to working precision
    for _ in range(2):
        if Q.shape[1]:
            v = v - Q @ (Q.T @ v)
    nv = np.linalg.norm(v)
    if nv == 0:
        return None
    return np.column_stack([Q, v / nv])


def forward_column_select(M_tilde, D: int, zero_tol: float = ZERO_TOL) -> Tuple[List[int], ForwardTrace]:
    """Greedy selection by projected residual norm.

    The first column maximizes ||M_i||; each later column maximizes the norm
    of its residual after projection onto the span of the chosen columns.
    Stops when every remaining residual is at most ``zero_tol`` times the
    first selected norm, or after D columns.  Ties go to the smallest index.
    """
    if D < 1:
        raise ValueError("D must be at least 1")
    M = _values(M_tilde)
    if M.ndim != 2 or M.shape[1] == 0:
        raise ValueError("need at least one column")
    p, q = M.shape
    norms = np.linalg.norm(M, axis=0)
    first = int(np.argmax(norms))
    if norms[first] == 0:
        return [], ForwardTrace([], [], [0.0], "residuals-zero")
    thresh = zero_tol * norms[first]
    Q = np.zeros((p, 0))
    selected: List[int] = []
    res_norms: List[float] = []
    remaining: List[float] = []
    resid = norms.copy()
    reason = "reached-D"
    while len(selected) < D:
        cand = resid.copy()
        cand[selected] = -np.inf
        j = int(np.argmax(cand))
        if cand[j] <= thresh:
            reason = "residuals-zero"
            break
        R = M[:, j] - Q @ (Q.T @ M[:, j])
        Q_new = _orthonormal_append(Q, R)
        if Q_new is None:
            reason = "residuals-zero"
            break
        Q = Q_new
        selected.append(j)
        res_norms.append(float(cand[j]))
        # recompute from scratch so rounding does not accumulate
        Rm = M - Q @ (Q.T @ M)
        resid = np.linalg.norm(Rm, axis=0)
        others = np.delete(resid, selected)
        remaining.append(float(others.max()) if others.size else 0.0)
    if len(selected) == D and (not remaining or remaining[-1] <= thresh):
        reason = "residuals-zero"
    return selected, ForwardTrace(selected, res_norms, remaining, reason)


def redundancy_recheck(M_refit_R, D: int, zero_tol: float = ZERO_TOL) -> List[int]:
    """Re-run forward selection on re-estimated columns; returns kept positions in selection order."""
    M = _values(M_refit_R)
    if M.shape[1] == 0:
        raise ValueError("R must be nonempty")
    keep, _ = forward_column_select(M, min(D, M.shape[1]), zero_tol)
    return keep


def enumerate_F_hat(M_hat, units: Sequence[SelectionUnit], rank_of_full: int,
                    order_fn: Callable[[List[int]], int], cap: int = UNIT_CAP):
    """Unit subsets whose estimated rank equals ``rank_of_full``.

    Subsets are visited in increasing cardinality and lexicographic order;
    supersets of an accepted subset are accepted without calling
    ``order_fn``.  ``order_fn`` receives the column positions of a subset.
    Returns a list of sorted unit-index tuples and the number of rank checks.
    """
    m = len(units)
    if m > cap:
        raise ValueError(f"{m} selection units exceed the enumeration cap of {cap}; "
                         "use per-variable units or fewer predictors")
    accepted: List[Tuple[int, ...]] = []
    masks: List[int] = []
    checks = 0
    for k in range(1, m + 1):
        for F in combinations(range(m), k):
            mask = sum(1 << u for u in F)
            if any(a & mask == a for a in masks):
                accepted.append(F)
                masks.append(mask)
                continue
            checks += 1
            if order_fn(units_to_columns(units, F)) == rank_of_full:
                accepted.append(F)
                masks.append(mask)
    return accepted, checks


def bootstrap_indices(labels, n: int, B_reps: int, seed) -> List[np.ndarray]:
    """Row resamples, one RNG stream per replicate; draws with an empty slice are redrawn."""
    labels = np.asarray(labels)
    H = int(labels.max())
    out = []
    for b, child in enumerate(np.random.SeedSequence(seed).spawn(B_reps)):
        rng = np.random.default_rng(child)
        for _ in range(MAX_REDRAWS):
            idx = rng.integers(0, n, n)
            if np.unique(labels[idx]).size == H:
                break
        else:
            raise RuntimeError(f"bootstrap replicate {b} kept producing empty slices")
        out.append(idx)
    return out


def bootstrap_candidates(data: Dataset, labels, specs, B_reps: int, seed) -> np.ndarray:
    """Dense candidate matrices on B_reps row resamples (labels travel with rows)."""
    labels = np.asarray(labels)
    third = any(s.method == "TM" for s in specs)
    out = []
    for idx in bootstrap_indices(labels, data.n, B_reps, seed):
        sm = slice_moments(data.subset(idx), labels[idx], third=third)
        out.append(build_candidate_dense(sm, specs).values)
    return np.array(out).reshape(B_reps, data.p, len(specs))


def _leading_projections(Ms: np.ndarray, d: int) -> np.ndarray:
    # batched projections onto the d leading left singular vectors of each M
    G = Ms @ np.swapaxes(Ms, 1, 2)
    _, V = np.linalg.eigh(G)
    V = V[:, :, ::-1][:, :, :d]
    return V @ np.swapaxes(V, 1, 2)


def _g_from_boot(M_hat_F, boot_F, d: int, n: int, c: float) -> float:
    P0 = leading_left_singular_basis(M_hat_F, d).projection()
    var = 0.0
    if boot_F.shape[0]:
        P = _leading_projections(boot_F, d)
        var = float(np.sum((P - P0) ** 2))
    return var + n ** (-c) * M_hat_F.shape[1]


def bootstrap_g(data: Dataset, labels, specs, F_columns: Sequence[int], B_reps: Optional[int] = None,
                c: float = 0.2, d: int = 1, seed=0, M_hat=None) -> float:
    """Bootstrap variability of the column set F plus the size penalty n^-c C(F).

    C(F) counts columns.  ``B_reps`` defaults to n.
    """
    B_reps = data.n if B_reps is None else int(B_reps)
    labels = np.asarray(labels)
    cols = list(F_columns)
    specs_F = [specs[i] for i in cols]
    if M_hat is None:
        third = any(s.method == "TM" for s in specs_F)
        M_F = build_candidate_dense(slice_moments(data, labels, third=third), specs_F).values
    else:
        M_F = _values(M_hat)[:, cols]
    boot = bootstrap_candidates(data, labels, specs_F, B_reps, seed) if B_reps else \
        np.zeros((0, data.p, len(cols)))
    return _g_from_boot(M_F, boot, d, data.n, c)


def select_G_hat(data: Dataset, labels, specs, units: Sequence[SelectionUnit], F_hat,
                 B_reps: Optional[int] = None, c: float = 0.2, d: int = 1, seed=0, M_hat=None):
    """Minimize g over F_hat.

    All subsets share the same bootstrap resamples.  Ties within 1e-12 go to
    the smaller cardinality, then to the lexicographically first unit set.
    Returns (G_hat unit tuple, {F: g}).
    """
    if not F_hat:
        raise ValueError("F_hat is empty")
    B_reps = data.n if B_reps is None else int(B_reps)
    labels = np.asarray(labels)
    if M_hat is None:
        third = any(s.method == "TM" for s in specs)
        M_hat = build_candidate_dense(slice_moments(data, labels, third=third), specs).values
    M_hat = _values(M_hat)
    boot = bootstrap_candidates(data, labels, specs, B_reps, seed) if B_reps else \
        np.zeros((0,) + M_hat.shape)
    g = {}
    for F in F_hat:
        cols = units_to_columns(units, F)
        g[tuple(F)] = _g_from_boot(M_hat[:, cols], boot[:, :, cols], d, data.n, c)
    best_val = min(g.values())
    ties = [F for F, v in g.items() if v <= best_val + 1e-12]
    G = min(ties, key=lambda F: (len(F), F))
    return G, g
