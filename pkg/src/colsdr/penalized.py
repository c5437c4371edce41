"""Group-lasso estimation of candidate columns.

The multi-response loss

    (1/2n) ||Yc - Xc B||_F^2 + lam * sum_j v_j ||B^j||

depends on the data only through S = Xc'Xc/n and L = Xc'Yc/n, so every
solver here works with these Gram moments.  The constant ||Yc||^2/(2n) is
carried along so reported objectives equal the least-squares form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import _kernels
from .moments import CandidateEstimate, ColumnSpec, Dataset, centered_targets

__all__ = [
    "GroupLassoProblem",
    "GroupLassoSolution",
    "ConvergenceError",
    "group_lasso_fit",
    "kkt_certify",
    "adaptive_weights",
    "lambda_max",
    "lambda_grid",
    "make_folds",
    "cross_validate_lambda",
    "cv_curve",
    "initial_column_estimates",
    "refit_columns",
    "refined_estimate",
]

DEFAULT_TOL = {"cd": 1e-7, "admm": 1e-8}
DEFAULT_MAX_ITER = {"cd": 20000, "admm": 50000}
# sweep cap for grid points inside cross-validation paths; near-interpolating
# fits at the small end of the grid are scored as they stand
CV_MAX_SWEEPS = 500
# path fits stop early once they explain this fraction of the null loss
PATH_SATURATION = 0.999
# objective-scale sweep tolerance for the held-out fold paths
CV_PATH_TOL = 1e-5
CV_RULES = ("min", "1se")


class ConvergenceError(RuntimeError):
    """Solver stopped at ``max_iter``; carries the last iterate and residual."""

    def __init__(self, message, B=None, residual=None):
        super().__init__(message)
        self.B = B
        self.residual = residual


@dataclass
class GroupLassoProblem:
    """Gram-form group-lasso instance.

    Parameters
    ----------
    gram : (p, p) array
        Xc'Xc / n.
    cross : (p, q) array
        Xc'Yc / n.
    lam : float
        Penalty level.
    weights : (p,) array
        Row weights; ``inf`` forces a zero row.
    const : float
        ||Yc||^2 / (2n), added to objectives.
    """

    gram: np.ndarray
    cross: np.ndarray
    lam: float
    weights: np.ndarray = None
    const: float = 0.0

    def __post_init__(self):
        self.gram = np.asarray(self.gram, dtype=float)
        self.cross = np.asarray(self.cross, dtype=float)
        if self.cross.ndim == 1:
            self.cross = self.cross[:, None]
        p = self.gram.shape[0]
        if self.gram.shape != (p, p) or self.cross.shape[0] != p:
            raise ValueError("gram must be p x p and cross p x q")
        if self.weights is None:
            self.weights = np.ones(p)
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.shape != (p,):
            raise ValueError("weights must have length p")
        if np.any(np.isnan(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative (inf allowed)")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and nonnegative")
        self.lam = float(self.lam)

    @classmethod
    def from_data(cls, X, Y, lam, weights=None):
        """Build the instance from a design and a multi-response target (both centred here)."""
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0]:
            raise ValueError("X and Y disagree in rows")
        n = X.shape[0]
        Xc = X - X.mean(axis=0)
        Yc = Y - Y.mean(axis=0)
        gram = Xc.T @ Xc / n
        gram = 0.5 * (gram + gram.T)
        return cls(gram, Xc.T @ Yc / n, lam, weights, float(np.sum(Yc**2)) / (2 * n))

    @property
    def p(self) -> int:
        return self.gram.shape[0]

    @property
    def q(self) -> int:
        return self.cross.shape[1]

    def thresholds(self) -> np.ndarray:
        # infinite weights pin a row to zero even when lam is 0
        finite = np.isfinite(self.weights)
        return np.where(finite, self.lam * np.where(finite, self.weights, 0.0), np.inf)

    def objective(self, B) -> float:
        B = np.asarray(B, dtype=float).reshape(self.p, self.q)
        v = self.weights
        nz = np.linalg.norm(B, axis=1)
        if np.any(nz[np.isinf(v)] > 0):
            return np.inf
        fin = np.isfinite(v)
        pen = self.lam * float(np.sum(v[fin] * nz[fin]))
        quad = 0.5 * float(np.sum(B * (self.gram @ B))) - float(np.sum(B * self.cross))
        return quad + pen + self.const


@dataclass
class GroupLassoSolution:
    B: np.ndarray
    active_rows: np.ndarray
    objective: float
    kkt_residual: float
    n_iter: int
    method: str
    lam: float = 0.0
    objective_trace: Optional[np.ndarray] = None


def kkt_certify(problem: GroupLassoProblem, B) -> float:
    """Largest violation of the block optimality conditions.

    Active rows need G_j = lam v_j B_j/||B_j|| and inactive rows need
    ||G_j|| <= lam v_j, where G = L - S B.  Rows with infinite weight must be
    zero.  Returns 0 at an exact minimizer.
    """
    B = np.asarray(B, dtype=float).reshape(problem.p, problem.q)
    G = problem.cross - problem.gram @ B
    v = problem.weights
    worst = 0.0
    for j in range(problem.p):
        bn = np.linalg.norm(B[j])
        if np.isinf(v[j]):
            worst = max(worst, bn)
            continue
        t = problem.lam * v[j]
        if bn > 0:
            worst = max(worst, float(np.linalg.norm(G[j] - t * B[j] / bn)))
        else:
            worst = max(worst, max(0.0, float(np.linalg.norm(G[j])) - t))
    return worst


def _admm(S, L, thr, B0, tol, max_iter, rho0=1.0):
    p, q = L.shape
    d, V = np.linalg.eigh(S)
    d = np.maximum(d, 0.0)
    VtL = V.T @ L
    Z = np.zeros((p, q)) if B0 is None else B0.copy()
    rho = rho0
    # warm-started dual so that a stationary B0 is a fixed point
    U = (L - S @ Z) / rho
    for it in range(1, max_iter + 1):
        rhs = VtL + rho * (V.T @ (Z - U))
        B = V @ (rhs / (d + rho)[:, None])
        Z_old = Z
        Z = _kernels.row_soft_threshold(B + U, thr / rho)
        U = U + B - Z
        r = np.linalg.norm(B - Z)
        s = rho * np.linalg.norm(Z - Z_old)
        scale = 1.0 + max(np.linalg.norm(B), np.linalg.norm(Z))
        if r <= tol * scale and s <= tol * (1.0 + rho * np.linalg.norm(U)):
            return Z, it, True, max(r, s)
        if it < 2000:
            if r > 10 * s:
                rho *= 2.0
                U /= 2.0
            elif s > 10 * r:
                rho /= 2.0
                U *= 2.0
    return Z, max_iter, False, max(r, s)


def group_lasso_fit(problem: GroupLassoProblem, method: str = "cd", tol=None, max_iter=None,
                    B0=None, trace: bool = False) -> GroupLassoSolution:
    """Minimize the penalized loss by block coordinate descent or ADMM.

    Rows with infinite weight are removed before solving and returned as
    exact zeros.  Raises ConvergenceError after ``max_iter`` sweeps
    (coordinate descent) or iterations (ADMM).
    """
    method = {"coordinate-descent": "cd"}.get(method, method)
    if method not in ("cd", "admm"):
        raise ValueError(f"unknown method {method!r}")
    tol = DEFAULT_TOL[method] if tol is None else float(tol)
    if tol <= 0:
        raise ValueError("tol must be positive")
    max_iter = DEFAULT_MAX_ITER[method] if max_iter is None else int(max_iter)
    p, q = problem.p, problem.q
    keep = np.flatnonzero(np.isfinite(problem.weights))
    S = np.ascontiguousarray(problem.gram[np.ix_(keep, keep)])
    L = np.ascontiguousarray(problem.cross[keep])
    thr = problem.lam * problem.weights[keep]
    start = np.zeros((keep.size, q)) if B0 is None else \
        np.ascontiguousarray(np.asarray(B0, dtype=float).reshape(p, q)[keep])
    objs = None
    if keep.size == 0:
        sub, n_iter, ok, res = np.zeros((0, q)), 0, True, 0.0
    elif method == "cd":
        sub, n_iter, ok, objs = _kernels.group_cd(S, L, thr, start, tol, max_iter, trace)
        res = None
        if trace:
            objs = objs + problem.const
    else:
        sub, n_iter, ok, res = _admm(S, L, thr, None if B0 is None else start, tol, max_iter)
    B = np.zeros((p, q))
    B[keep] = sub
    if not ok:
        raise ConvergenceError(
            f"{method} did not converge in {max_iter} iterations", B,
            res if res is not None else kkt_certify(problem, B))
    active = np.flatnonzero(np.any(B != 0, axis=1))
    return GroupLassoSolution(B, active, problem.objective(B), kkt_certify(problem, B),
                              int(n_iter), method, problem.lam, objs)


def adaptive_weights(row_norms, rho: float = 1.0, exponent_mode: str = "rho", K: float = np.inf):
    """Row weights ||M_tilde^j||^{-e}, e = rho or rho/2; zero rows get K."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    if not (K > 0):
        raise ValueError("K must be positive or inf")
    e = {"rho": rho, "rho/2": rho / 2.0}.get(exponent_mode)
    if e is None:
        raise ValueError("exponent_mode must be 'rho' or 'rho/2'")
    r = np.asarray(row_norms, dtype=float)
    v = np.full(r.shape, float(K))
    nz = r > 0
    v[nz] = r[nz] ** (-e)
    return v


def lambda_max(cross, weights=None) -> float:
    """Smallest lambda with the all-zero solution: max_j ||L_j|| / v_j."""
    cross = np.asarray(cross, dtype=float)
    if cross.ndim == 1:
        cross = cross[:, None]
    v = np.ones(cross.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    nrm = np.linalg.norm(cross, axis=1)
    ok = np.isfinite(v)
    pos = ok & (v > 0)
    if np.any(ok & (v == 0) & (nrm > 0)):
        return np.inf
    if not np.any(pos):
        return 0.0
    return float(np.max(nrm[pos] / v[pos]))


def lambda_grid(lmax: float, grid_size: int = 10, ratio: float = 1e-3) -> np.ndarray:
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    return lmax * np.logspace(0.0, np.log10(ratio), grid_size)


def make_folds(y, folds: int = 5, seed=0) -> np.ndarray:
    """Fold ids 0..folds-1 stratified by the order of ``y``.

    Consecutive blocks of ``folds`` sorted responses are spread over distinct
    folds, so every fold covers the whole response range.
    """
    y = np.asarray(y).ravel()
    n = y.size
    if folds < 2:
        raise ValueError("folds must be at least 2")
    if n < folds:
        raise ValueError(f"n={n} is smaller than the number of folds ({folds})")
    rng = np.random.default_rng(seed)
    order = np.argsort(y, kind="stable")
    ids = np.empty(n, dtype=np.int64)
    for start in range(0, n, folds):
        block = order[start:start + folds]
        ids[block] = rng.permutation(folds)[:block.size]
    return ids


def _label_map(labels, specs):
    if isinstance(labels, Mapping):
        return {int(k): np.asarray(v) for k, v in labels.items()}
    Hs = {s.H for s in specs}
    if len(Hs) != 1:
        raise ValueError("pass labels as {H: labels} for mixed slicings")
    return {Hs.pop(): np.asarray(labels)}


def _moments(X, labels, specs, rows=None):
    lab = _label_map(labels, specs)
    if rows is not None:
        X = X[rows]
        lab = {H: l[rows] for H, l in lab.items()}
    Yc = centered_targets(X, lab, specs)
    n = X.shape[0]
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / n
    null = np.sum((Yc - Yc.mean(0)) ** 2, axis=0) / (2 * n)
    return 0.5 * (S + S.T), Xc.T @ Yc / n, null


def _fold_moments(data, labels, specs, fold_ids):
    out = []
    for f in range(int(fold_ids.max()) + 1):
        te = fold_ids == f
        out.append((_moments(data.X, labels, specs, ~te), _moments(data.X, labels, specs, te)[:2]))
    return out


def _pick(fold_loss: np.ndarray, rule: str) -> np.ndarray:
    """Grid index per column from held-out losses of shape (folds, grid, q).

    ``min`` takes the smallest mean loss; ``1se`` takes the heaviest penalty
    whose mean loss is within one standard error of that minimum.
    """
    if rule not in CV_RULES:
        raise ValueError(f"cv rule must be one of {CV_RULES}")
    mean = fold_loss.mean(axis=0)
    best = np.argmin(mean, axis=0)
    if rule == "min":
        return best
    cols = np.arange(mean.shape[1])
    se = fold_loss.std(axis=0, ddof=1) / np.sqrt(fold_loss.shape[0])
    cut = mean[best, cols] + se[best, cols]
    return np.argmax(mean <= cut[None, :], axis=0)


def _heldout(B, S_te, L_te):
    return 0.5 * float(np.sum(B * (S_te @ B))) - float(np.sum(B * L_te))


def cv_curve(data: Dataset, labels, specs: Sequence[ColumnSpec], folds: int = 5,
             grid_size: int = 10, seed=0, weights=None, tol: float = 1e-7,
             rule: str = "min") -> Dict:
    """Joint cross-validation curve for the multi-response fit over ``specs``.

    Returns a dict with ``grid``, ``loss`` (mean held-out loss per grid
    point), ``se`` (its standard error over folds) and ``lambda_star``
    chosen by ``rule``.
    """
    specs = list(specs)
    S, L, _ = _moments(data.X, labels, specs)
    p = S.shape[0]
    v = np.ones(p) if weights is None else np.asarray(weights, dtype=float)
    lmax = lambda_max(L, v)
    if lmax == 0.0:
        return {"grid": np.zeros(grid_size), "loss": np.zeros(grid_size),
                "se": np.zeros(grid_size), "lambda_star": 0.0, "n_capped": 0}
    grid = lambda_grid(lmax, grid_size)
    fid = make_folds(data.y, folds, seed)
    keep = np.flatnonzero(np.isfinite(v))
    loss = np.zeros((folds, grid_size))
    n_capped = 0
    for f, ((S_tr, L_tr, _), (S_te, L_te)) in enumerate(_fold_moments(data, labels, specs, fid)):
        Ss = np.ascontiguousarray(S_tr[np.ix_(keep, keep)])
        Ls = np.ascontiguousarray(L_tr[keep])
        Ste = S_te[np.ix_(keep, keep)]
        Lte = L_te[keep]
        b = np.zeros_like(Ls)
        for k, lam in enumerate(grid):
            b, _, ok, _ = _kernels.group_cd(Ss, Ls, lam * v[keep], b, tol, CV_MAX_SWEEPS, False)
            n_capped += not ok
            loss[f, k] = _heldout(b, Ste, Lte)
    k = int(_pick(loss[:, :, None], rule)[0])
    return {"grid": grid, "loss": loss.mean(axis=0),
            "se": loss.std(axis=0, ddof=1) / np.sqrt(folds),
            "lambda_star": float(grid[k]), "n_capped": n_capped}


def cross_validate_lambda(data: Dataset, labels, specs: Sequence[ColumnSpec], folds: int = 5,
                          grid_size: int = 10, seed=0, weights=None, rule: str = "min") -> float:
    """CV-selected penalty for the joint fit over ``specs`` (ties go to the larger lambda)."""
    return cv_curve(data, labels, specs, folds, grid_size, seed, weights, rule=rule)["lambda_star"]


def initial_column_estimates(data: Dataset, labels, specs: Sequence[ColumnSpec], folds: int = 5,
                             grid_size: int = 10, seed=0, tol: float = 1e-7,
                             rule: str = "min") -> CandidateEstimate:
    """Lasso estimate of every candidate column, each with its own CV-tuned lambda.

    Paths stop coordinate sweeps once every S_jj * change^2 falls below
    ``tol`` times the column's null loss, the usual rule for preliminary
    lasso paths.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("specs must be nonempty")
    S, L, null = _moments(data.X, labels, specs)
    p, q = L.shape
    v = np.ones(p)
    lmax = np.max(np.abs(L), axis=0)
    grids = np.outer(lmax, lambda_grid(1.0, grid_size))
    fid = make_folds(data.y, folds, seed)
    loss = np.zeros((folds, grid_size, q))
    full = np.full(q, grid_size - 1)
    n_capped = 0
    for f, ((S_tr, L_tr, null_tr), (S_te, L_te)) in enumerate(_fold_moments(data, labels, specs, fid)):
        coef, _, nf = _kernels.lasso_paths(S_tr, np.ascontiguousarray(L_tr), grids, v, null_tr,
                                           max(tol, CV_PATH_TOL),
                                           CV_MAX_SWEEPS, full, PATH_SATURATION)
        n_capped += nf
        SB = np.einsum("ij,kjc->kic", S_te, coef)
        loss[f] = 0.5 * np.sum(coef * SB, axis=1) - np.sum(coef * L_te[None], axis=1)
    best = _pick(loss, rule)
    lam = grids[np.arange(q), best]
    coef, _, nf = _kernels.lasso_paths(S, np.ascontiguousarray(L), grids, v, null, tol,
                                       DEFAULT_MAX_ITER["cd"], best.astype(np.int64),
                                       PATH_SATURATION)
    if nf:
        raise ConvergenceError("initial lasso fit did not converge")
    M = coef[best, :, np.arange(q)].T
    M[:, lmax == 0] = 0.0
    return CandidateEstimate(specs, M, lam, {"cv_loss": loss.mean(axis=0), "cv_capped": n_capped,
                                                  "cv_index": best})


def refit_columns(data: Dataset, labels, specs: Sequence[ColumnSpec], lambdas, method: str = "admm",
                  tol=None) -> CandidateEstimate:
    """Re-estimate each column separately at a given lambda."""
    specs = list(specs)
    S, L, _ = _moments(data.X, labels, specs)
    out = np.zeros_like(L)
    kkt = np.zeros(len(specs))
    for c in range(len(specs)):
        prob = GroupLassoProblem(S, L[:, c], float(lambdas[c]))
        sol = group_lasso_fit(prob, method, tol)
        out[:, c] = sol.B[:, 0]
        kkt[c] = sol.kkt_residual
    return CandidateEstimate(specs, out, np.asarray(lambdas, dtype=float), {"kkt": kkt})


def refined_estimate(data: Dataset, labels, specs_R: Sequence[ColumnSpec], M_tilde_R,
                     rho: float = 1.0, exponent_mode: str = "rho", K: float = np.inf,
                     folds: int = 5, grid_size: int = 10, seed=0, method: str = "admm",
                     lam: Optional[float] = None, rule: str = "min") -> GroupLassoSolution:
    """Adaptive group-lasso fit of the selected columns jointly.

    Weights come from the row norms of ``M_tilde_R``; lambda is chosen by
    joint cross-validation unless given.
    """
    specs_R = list(specs_R)
    if not specs_R:
        raise ValueError("R must contain at least one column")
    M_tilde_R = np.asarray(M_tilde_R, dtype=float).reshape(-1, len(specs_R))
    v = adaptive_weights(np.linalg.norm(M_tilde_R, axis=1), rho, exponent_mode, K)
    if lam is None:
        lam = cross_validate_lambda(data, labels, specs_R, folds, grid_size, seed, v, rule)
    S, L, null = _moments(data.X, labels, specs_R)
    return group_lasso_fit(GroupLassoProblem(S, L, lam, v, float(null.sum())), method)
