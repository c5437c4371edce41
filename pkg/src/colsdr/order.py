"""Subspace extraction, subspace distances and order determination.

The dimension of the central subspace is estimated by predictor
augmentation: pure-noise predictors U are appended to the retained
predictors, the candidate matrix is re-estimated, and the share of each
leading left singular vector that falls on U is traded off against the
remaining singular values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

__all__ = [
    "Subspace",
    "AugmentationConfig",
    "OrderError",
    "leading_left_singular_basis",
    "as_subspace",
    "projection",
    "projection_distance",
    "spectral_loss",
    "eta_curve",
    "predictor_augmentation_rank",
    "determine_D_and_d",
]


class OrderError(RuntimeError):
    """Raised when the iterative D loop fails to reach D > d_hat."""

    def __init__(self, message, D=None, d_hat=None):
        super().__init__(message)
        self.D = D
        self.d_hat = d_hat


@dataclass
class Subspace:
    """Column-orthonormal basis (p x d) of a subspace."""

    basis: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim == 1:
            b = b[:, None]
        self.basis = b

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    @property
    def p(self) -> int:
        return self.basis.shape[0]

    def projection(self) -> np.ndarray:
        return self.basis @ self.basis.T

    @classmethod
    def from_vectors(cls, V) -> "Subspace":
        """Orthonormalize the columns of V (assumed linearly independent)."""
        V = np.asarray(V, dtype=float)
        if V.ndim == 1:
            V = V[:, None]
        if V.shape[1] == 0:
            return cls(np.zeros((V.shape[0], 0)))
        q, _ = np.linalg.qr(V)
        return cls(q)


@dataclass
class AugmentationConfig:
    r_aug: int = 5
    reps: int = 10
    D_init: int = 15
    max_doublings: int = 4

    def __post_init__(self):
        if self.r_aug < 1 or self.reps < 1 or self.D_init < 1:
            raise ValueError("r_aug, reps and D_init must be positive")


def _fix_signs(U: np.ndarray) -> np.ndarray:
    if U.size == 0:
        return U
    idx = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return U * s


def leading_left_singular_basis(M, d: int) -> Subspace:
    """The d leading left singular vectors of M.

    Each vector is signed so that its largest-magnitude entry is positive.
    ``degenerate`` is set when the d-th and (d+1)-th singular values tie
    within 1e-12 (relative to the largest), so the subspace is not unique.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    p, q = M.shape
    if d < 0 or d > min(p, q):
        raise ValueError(f"d={d} outside 0..min(p, q)={min(p, q)}")
    if d == 0:
        return Subspace(np.zeros((p, 0)))
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    degenerate = False
    if d < s.size:
        degenerate = bool(s[d - 1] - s[d] <= 1e-12 * max(1.0, s[0]))
    return Subspace(_fix_signs(U[:, :d]), degenerate)


def as_subspace(A) -> Subspace:
    if isinstance(A, Subspace):
        return A
    return Subspace.from_vectors(A)


def projection(A) -> np.ndarray:
    return as_subspace(A).projection()


def projection_distance(A, B) -> float:
    """Frobenius norm of the difference of the two orthogonal projections."""
    A, B = as_subspace(A), as_subspace(B)
    if A.p != B.p:
        raise ValueError("subspaces live in different dimensions")
    return float(np.linalg.norm(A.projection() - B.projection()))


def spectral_loss(A, B) -> float:
    """Largest singular value of the difference of the two projections."""
    A, B = as_subspace(A), as_subspace(B)
    if A.p != B.p:
        raise ValueError("subspaces live in different dimensions")
    w = np.linalg.eigvalsh(A.projection() - B.projection())
    return float(min(1.0, np.max(np.abs(w)))) if w.size else 0.0


def eta_curve(M_star, p_orig: int, max_rank: int) -> np.ndarray:
    """eta(l), l = 0..max_rank, for one augmented estimate.

    Rows ``p_orig:`` of ``M_star`` belong to the noise predictors.
    eta(l) = sum_{i<=l} ||beta_(i),U||^2 + tau_{l+1}^2 / (1 + sum_{i<=l+1} tau_i^2)
    with tau beyond the available singular values set to zero.
    """
    M_star = np.asarray(M_star, dtype=float)
    U, s, _ = np.linalg.svd(M_star, full_matrices=False)
    k = s.size
    tau = np.zeros(max_rank + 2)
    tau[1:min(k, max_rank + 1) + 1] = s[:min(k, max_rank + 1)]
    u_share = np.zeros(max_rank + 1)
    m = min(k, max_rank)
    u_share[1:m + 1] = np.sum(U[p_orig:, :m] ** 2, axis=0)
    ell = np.arange(max_rank + 1)
    tau2 = tau**2
    return np.cumsum(u_share) + tau2[ell + 1] / (1.0 + np.cumsum(tau2)[ell + 1])


def predictor_augmentation_rank(refit: Callable[[np.ndarray], np.ndarray], n: int, p_orig: int,
                                cfg: Optional[AugmentationConfig] = None,
                                max_rank: Optional[int] = None, seed=0,
                                return_curve: bool = False):
    """Estimate rank(M) by predictor augmentation.

    Parameters
    ----------
    refit : callable
        ``refit(U)`` re-estimates the candidate matrix on the augmented
        predictors (X, U) and returns a (p_orig + r) x q array.
    n : int
        Sample size (rows of U).
    p_orig : int
        Number of original predictors in the augmented matrix.
    max_rank : int, optional
        Largest rank considered; defaults to min(q, p_orig) from the first refit.

    Returns the minimizer of the repetition-averaged eta (smallest on ties).
    """
    cfg = cfg or AugmentationConfig()
    ss = np.random.SeedSequence(seed)
    total = None
    for child in ss.spawn(cfg.reps):
        U = np.random.default_rng(child).standard_normal((n, cfg.r_aug))
        try:
            M_star = np.asarray(refit(U), dtype=float)
        except Exception as exc:  # surfaces as an order-stage failure
            raise OrderError(f"augmented refit failed: {exc}") from exc
        if M_star.ndim == 1:
            M_star = M_star[:, None]
        if M_star.shape[0] != p_orig + cfg.r_aug:
            raise OrderError("augmented refit returned the wrong number of rows")
        if max_rank is None:
            max_rank = min(M_star.shape[1], p_orig)
        e = eta_curve(M_star, p_orig, max_rank)
        total = e if total is None else total + e
    curve = total / cfg.reps
    d_hat = int(np.argmin(curve))
    return (d_hat, curve) if return_curve else d_hat


def determine_D_and_d(run_sparse: Callable[[int], Tuple[object, object]],
                      estimate_d: Callable[[object], int],
                      cfg: Optional[AugmentationConfig] = None):
    """Iterate the sparse fit until D exceeds the estimated rank.

    ``run_sparse(D)`` returns a fitted state for column budget D and
    ``estimate_d(state)`` its rank estimate.  D starts at ``cfg.D_init`` and
    doubles while D <= d_hat, for at most ``cfg.max_doublings`` passes.
    Returns ``(D, d_hat, state, history)``.
    """
    cfg = cfg or AugmentationConfig()
    D = cfg.D_init
    history = []
    for _ in range(cfg.max_doublings):
        state = run_sparse(D)
        d_hat = int(estimate_d(state))
        history.append((D, d_hat))
        if D > d_hat:
            return D, d_hat, state, history
        D *= 2
    raise OrderError(f"D loop did not reach D > d_hat (last D={history[-1][0]}, "
                     f"d_hat={history[-1][1]})", *history[-1])
