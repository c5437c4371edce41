"""Slicing, sample moments and candidate-matrix construction.

Every candidate column has the form

    Sigma^{-1} [ E{X f(X)} - E{X f(X - mu_h) | Y_D = h} ]

for a polynomial ``f`` of degree at most two.  The dense path evaluates this
directly from slice moments (requires an invertible covariance), while the
target path builds the centred response matrix ``Yc`` whose cross-product with
the centred predictors gives ``Lambda = Sigma M`` without any inversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = [
    "Dataset",
    "SliceSummary",
    "ColumnSpec",
    "CandidateEstimate",
    "SlicingError",
    "SingularCovarianceError",
    "slice_response",
    "slice_labels",
    "effective_H",
    "slice_moments",
    "build_candidate_dense",
    "build_lambda_targets",
    "centered_targets",
    "dense_candidate_from_targets",
    "method_specs",
    "parse_method",
    "per_variable_units",
    "DEFAULT_H",
]

METHODS = ("SIR", "SAVE", "DR", "TM")

# Slice counts used when a method is named without an explicit H.
DEFAULT_H = {"SIR": 5, "SAVE": 2, "DR": 2, "TM": 2}

EIGEN_FLOOR = 1e-10
TM_COLUMN_GUARD = 10**6


class SlicingError(ValueError):
    """Raised when a response cannot be sliced into the requested bins."""


class SingularCovarianceError(np.linalg.LinAlgError):
    """Raised by the dense path when the sample covariance is near singular."""


@dataclass
class Dataset:
    """Predictor matrix ``X`` (n x p) with response ``y`` (length n)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise ValueError("X must be a 2-D array")
        n, p = X.shape
        if n < 2 or p < 1:
            raise ValueError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if y.shape[0] != n:
            raise ValueError(f"y has {y.shape[0]} entries but X has {n} rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("Dataset contains non-finite entries")
        self.X = X
        self.y = y

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.X[rows], self.y[rows])


@dataclass(frozen=True)
class ColumnSpec:
    """Identity of one candidate column.

    ``method`` is one of SIR, SAVE, DR (the quadratic DR block) or TM;
    ``h`` is the 1-based slice; ``f_index`` is None (SIR), a variable index
    ``i`` (SAVE, DR) or a pair ``(i, j)`` (TM).  Variable indices are 0-based.
    ``H`` is the number of slices of the slicing the column belongs to.
    """

    method: str
    h: int
    f_index: Union[None, int, Tuple[int, int]]
    H: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 1 <= self.h <= self.H:
            raise ValueError(f"slice index {self.h} outside 1..{self.H}")
        if self.method == "SIR" and self.f_index is not None:
            raise ValueError("SIR columns carry no f index")
        if self.method in ("SAVE", "DR") and not isinstance(self.f_index, (int, np.integer)):
            raise ValueError(f"{self.method} columns need an integer f index")
        if self.method == "TM" and not (isinstance(self.f_index, tuple) and len(self.f_index) == 2):
            raise ValueError("TM columns need an (i, j) f index")

    def check_range(self, p: int) -> None:
        idx = self.f_index
        if idx is None:
            return
        pair = idx if isinstance(idx, tuple) else (idx,)
        if any(not 0 <= int(i) < p for i in pair):
            raise ValueError(f"f index {idx} outside range for p={p}")

    @property
    def variable(self) -> Optional[int]:
        """Variable owning the column for per-variable units (first index for TM)."""
        if self.f_index is None:
            return None
        if isinstance(self.f_index, tuple):
            return int(self.f_index[0])
        return int(self.f_index)

    def label(self) -> str:
        if self.f_index is None:
            f = "-"
        elif isinstance(self.f_index, tuple):
            f = f"{self.f_index[0] + 1}:{self.f_index[1] + 1}"
        else:
            f = str(self.f_index + 1)
        return f"{self.method}[H={self.H},h={self.h},f={f}]"


@dataclass
class SliceSummary:
    """Sample moments of X overall and within each slice (n-type denominators)."""

    H: int
    counts: np.ndarray
    mu_hat: np.ndarray            # H x p slice means
    sigma_hat_h: np.ndarray       # H x p x p within-slice covariances
    sigma_hat: np.ndarray         # p x p
    mu_hat_global: np.ndarray     # p
    third_global: Optional[np.ndarray] = None   # p x p x p central third moment
    third_h: Optional[np.ndarray] = None        # H x p x p x p

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def p(self) -> int:
        return self.sigma_hat.shape[0]


@dataclass
class CandidateEstimate:
    """Estimated candidate columns (p x q) keyed by ColumnSpec."""

    specs: List[ColumnSpec]
    values: np.ndarray
    lambdas: Optional[np.ndarray] = None
    info: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.specs):
            raise ValueError("values must be p x len(specs)")

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def q(self) -> int:
        return self.values.shape[1]

    def column(self, spec: ColumnSpec) -> np.ndarray:
        return self.values[:, self.specs.index(spec)]

    def subset(self, idx: Sequence[int]) -> "CandidateEstimate":
        idx = list(idx)
        lam = None if self.lambdas is None else self.lambdas[idx]
        return CandidateEstimate([self.specs[i] for i in idx], self.values[:, idx], lam)

    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=1)

    def support(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.values != 0, axis=1))


# --------------------------------------------------------------------------
# slicing


def _is_integral(y: np.ndarray) -> bool:
    return bool(np.all(np.equal(np.mod(y, 1), 0)))


def effective_H(y, H: int) -> int:
    """Slice count actually produced for ``y`` (fewer when y is discrete)."""
    y = np.asarray(y, dtype=float).ravel()
    k = np.unique(y).size
    if k <= H and _is_integral(y):
        return k
    return H


def slice_response(y, H: int) -> np.ndarray:
    """Assign each response to one of H quantile slices, labelled 1..H.

    A discrete response (integer values) with at most H distinct values keeps
    its own levels, relabelled 1..k in increasing order.  Otherwise slice h
    holds the observations whose sorted rank falls in ((h-1)n/H, hn/H]; ties
    straddling a boundary are moved to the lower slice.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if H < 1:
        raise ValueError("H must be positive")
    if n < H:
        raise SlicingError(f"degenerate slicing: n={n} < H={H}")
    levels, inverse = np.unique(y, return_inverse=True)
    if levels.size <= H:
        if _is_integral(y):
            return inverse.astype(np.int64) + 1
        if levels.size < H:
            raise SlicingError(
                f"degenerate slicing: {levels.size} distinct values for H={H}")
    order = np.argsort(y, kind="stable")
    ranks = np.arange(1, n + 1)
    sorted_labels = np.ceil(ranks * H / n).astype(np.int64)
    # ties go to the lowest slice of their run
    ys = y[order]
    first = np.r_[True, ys[1:] != ys[:-1]]
    run_id = np.cumsum(first) - 1
    run_min = np.minimum.reduceat(sorted_labels, np.flatnonzero(first))
    sorted_labels = run_min[run_id]
    labels = np.empty(n, dtype=np.int64)
    labels[order] = sorted_labels
    if np.unique(labels).size != H:
        raise SlicingError(f"degenerate slicing: ties leave an empty slice for H={H}")
    return labels


def slice_labels(y, specs: Iterable[ColumnSpec]) -> Dict[int, np.ndarray]:
    """Labels for every slicing referenced by ``specs``, keyed by H."""
    return {H: slice_response(y, H) for H in sorted({s.H for s in specs})}


def _as_label_map(labels, specs: Sequence[ColumnSpec]) -> Dict[int, np.ndarray]:
    if isinstance(labels, Mapping):
        return {int(k): np.asarray(v) for k, v in labels.items()}
    Hs = {s.H for s in specs}
    if len(Hs) > 1:
        raise ValueError("specs use several slicings; pass labels as {H: labels}")
    arr = np.asarray(labels)
    return {H: arr for H in Hs} if Hs else {}


# --------------------------------------------------------------------------
# moments


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def slice_moments(data: Dataset, labels, third: bool = False) -> SliceSummary:
    """Overall and per-slice sample moments with n (resp. n_h) denominators."""
    X = data.X
    labels = np.asarray(labels).ravel()
    if labels.shape[0] != X.shape[0]:
        raise ValueError("labels and X disagree in length")
    H = int(labels.max())
    if labels.min() < 1:
        raise ValueError("labels must lie in 1..H")
    counts = np.bincount(labels, minlength=H + 1)[1:]
    if np.any(counts == 0):
        raise SlicingError(f"empty slice(s): {np.flatnonzero(counts == 0) + 1}")
    n, p = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    sigma = _sym(Xc.T @ Xc / n)
    mu = np.empty((H, p))
    sig_h = np.empty((H, p, p))
    t3_h = np.empty((H, p, p, p)) if third else None
    for h in range(H):
        rows = X[labels == h + 1]
        mu[h] = rows.mean(axis=0)
        D = rows - mu[h]
        sig_h[h] = _sym(D.T @ D / counts[h])
        if third:
            t3_h[h] = np.einsum("ka,kb,kc->abc", D, D, D) / counts[h]
    t3 = np.einsum("ka,kb,kc->abc", Xc, Xc, Xc) / n if third else None
    return SliceSummary(H, counts, mu, sig_h, sigma, mean, t3, t3_h)


def _dense_solver(sigma: np.ndarray):
    w = np.linalg.eigvalsh(sigma)
    if w[-1] <= 0 or w[0] < EIGEN_FLOOR * w[-1]:
        raise SingularCovarianceError(
            "sample covariance is near singular (smallest/largest eigenvalue "
            f"{w[0]:.3g}/{w[-1]:.3g}); use the sparse (penalized) path")
    c = np.linalg.cholesky(sigma)

    def solve(B):
        return np.linalg.solve(c.T, np.linalg.solve(c, B))

    return solve


def build_candidate_dense(summary, specs: Sequence[ColumnSpec],
                          tm_guard: int = TM_COLUMN_GUARD) -> CandidateEstimate:
    """Dense candidate matrix Sigma^{-1} Lambda evaluated from slice moments.

    ``summary`` is a SliceSummary, or a mapping ``{H: SliceSummary}`` when the
    specs mix slicings.  TM columns need summaries built with ``third=True``.
    """
    specs = list(specs)
    summaries = summary if isinstance(summary, Mapping) else {summary.H: summary}
    first = next(iter(summaries.values()))
    sigma = first.sigma_hat
    p = sigma.shape[0]
    n_tm = sum(s.method == "TM" for s in specs)
    if n_tm > tm_guard:
        raise MemoryError(f"{n_tm} TM columns exceed the guard of {tm_guard}")
    lam = np.empty((p, len(specs)))
    for c, s in enumerate(specs):
        s.check_range(p)
        sm = summaries[s.H]
        h = s.h - 1
        mu_c = sm.mu_hat[h] - sm.mu_hat_global
        if s.method == "SIR":
            lam[:, c] = mu_c
        elif s.method == "SAVE":
            lam[:, c] = sigma[:, s.f_index] - sm.sigma_hat_h[h][:, s.f_index]
        elif s.method == "DR":
            i = s.f_index
            lam[:, c] = sigma[:, i] - sm.sigma_hat_h[h][:, i] + mu_c * mu_c[i]
        else:
            if sm.third_h is None:
                raise ValueError("TM columns need slice_moments(..., third=True)")
            i, j = s.f_index
            within = sm.third_h[h][:, i, j] + mu_c * sm.sigma_hat_h[h][i, j]
            lam[:, c] = sm.third_global[:, i, j] - within
    solve = _dense_solver(sigma)
    return CandidateEstimate(specs, solve(lam))


def centered_targets(X: np.ndarray, labels, specs: Sequence[ColumnSpec],
                     tm_guard: int = TM_COLUMN_GUARD) -> np.ndarray:
    """Rowwise sample copies of the centred polynomial f_C(X, Y_D), n x q.

    Slice weights use n/n_h in place of H so that (1/n) Xc' Yc reproduces the
    plug-in Lambda exactly for unequal slice sizes; an empty slice contributes
    nothing.
    """
    specs = list(specs)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    lab = _as_label_map(labels, specs)
    if sum(s.method == "TM" for s in specs) > tm_guard:
        raise MemoryError("TM column count exceeds the configured guard")
    Xc = X - X.mean(axis=0)
    cache = {}
    for H, l in lab.items():
        ind = np.stack([l == h for h in range(1, H + 1)], axis=1).astype(float)
        cnt = ind.sum(axis=0)
        wt = np.divide(n, cnt, out=np.zeros(H), where=cnt > 0)
        means = np.divide(ind.T @ Xc, cnt[:, None], out=np.zeros((H, p)), where=cnt[:, None] > 0)
        cache[H] = (ind * wt, means)
    Y = np.empty((n, len(specs)))
    for c, s in enumerate(specs):
        s.check_range(p)
        w, means = cache[s.H]
        d = w[:, s.h - 1]
        if s.method == "SIR":
            Y[:, c] = d
        elif s.method == "SAVE":
            i = s.f_index
            Y[:, c] = Xc[:, i] - d * (Xc[:, i] - means[s.h - 1, i])
        elif s.method == "DR":
            i = s.f_index
            Y[:, c] = Xc[:, i] - d * (Xc[:, i] - 2.0 * means[s.h - 1, i])
        else:
            i, j = s.f_index
            mi, mj = means[s.h - 1, i], means[s.h - 1, j]
            Y[:, c] = Xc[:, i] * Xc[:, j] - d * (Xc[:, i] - mi) * (Xc[:, j] - mj)
    return Y


def build_lambda_targets(data: Dataset, labels, specs: Sequence[ColumnSpec]):
    """Return ``(Lambda_hat, Yc)`` with Lambda_hat = Xc' Yc / n."""
    Yc = centered_targets(data.X, labels, specs)
    Xc = data.X - data.X.mean(axis=0)
    return Xc.T @ Yc / data.n, Yc


def dense_candidate_from_targets(Z: np.ndarray, Yc: np.ndarray) -> np.ndarray:
    """Sigma_Z^{-1} Zc' Yc / n for an arbitrary predictor block ``Z``.

    Used for refits on augmented or reduced predictors, where the centred
    targets still come from the original X.
    """
    n = Z.shape[0]
    Zc = Z - Z.mean(axis=0)
    sigma = _sym(Zc.T @ Zc / n)
    return _dense_solver(sigma)(Zc.T @ Yc / n)


# --------------------------------------------------------------------------
# method specifications


def method_specs(method: str, p: int, H: int) -> List[ColumnSpec]:
    """Column list of one inverse-regression method."""
    m = method.upper()
    sir = [ColumnSpec("SIR", h, None, H) for h in range(1, H + 1)]
    save = [ColumnSpec("SAVE", h, i, H) for h in range(1, H + 1) for i in range(p)]
    if m == "SIR":
        return sir
    if m == "SAVE":
        return save
    if m == "DR":
        return [ColumnSpec("DR", h, i, H) for h in range(1, H + 1) for i in range(p)] + sir
    if m == "TM":
        tm = [ColumnSpec("TM", h, (i, j), H)
              for h in range(1, H + 1) for i in range(p) for j in range(p)]
        return tm + save + sir
    raise ValueError(f"unknown method {method!r}")


def parse_method(text: str, H: Optional[Mapping[str, int]] = None) -> List[Tuple[str, int]]:
    """Parse ``sir``, ``save``, ``ensemble=sir,save`` into (METHOD, H) pairs.

    A method may carry its own slice count as ``save:5``.
    """
    H = {k.upper(): v for k, v in (H or {}).items()}
    body = text.strip()
    if body.lower().startswith("ensemble="):
        body = body.split("=", 1)[1]
    out = []
    for tok in body.split(","):
        tok = tok.strip()
        if not tok:
            continue
        name, _, h = tok.partition(":")
        name = name.strip().upper()
        if name not in METHODS:
            raise ValueError(f"unknown method {name!r}")
        out.append((name, int(h) if h else H.get(name, DEFAULT_H[name])))
    if not out:
        raise ValueError(f"no methods in {text!r}")
    return out


def specs_for(methods: Sequence[Tuple[str, int]], y, p: int) -> List[ColumnSpec]:
    """Concatenate method specs, shrinking H for discrete responses."""
    specs: List[ColumnSpec] = []
    for name, H in methods:
        specs += method_specs(name, p, effective_H(y, H))
    return specs


def per_variable_units(specs: Sequence[ColumnSpec]) -> List[List[int]]:
    """Group column positions by their owning variable (SIR columns form one unit)."""
    groups: Dict = {}
    for c, s in enumerate(specs):
        key = ("var", s.variable) if s.variable is not None else ("sir", s.H)
        groups.setdefault(key, []).append(c)
    var_keys = sorted((k for k in groups if k[0] == "var"), key=lambda k: k[1])
    other = [k for k in groups if k[0] != "var"]
    return [groups[k] for k in var_keys + other]
