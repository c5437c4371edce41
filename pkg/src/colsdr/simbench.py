"""Simulation models, covariance builders, benchmark metrics and oracles.

Models I-IV are the low-dimensional designs used for the efficiency-adapted
search and Models V-VIII the sparse high-dimensional designs.  The module
also carries the asymptotic efficiency limit of a SAVE submatrix under
Gaussian slices, a Gaussian-slice sampler to check it by Monte Carlo, and the
two-column toy experiment.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .moments import Dataset, build_candidate_dense, method_specs, slice_moments
from .order import Subspace, leading_left_singular_basis, projection_distance, spectral_loss

__all__ = [
    "CovarianceSpec",
    "ModelSpec",
    "SimDataset",
    "build_covariance",
    "parse_covariance",
    "simulate",
    "selection_metrics",
    "save_efficiency_limit",
    "gaussian_slices",
    "save_efficiency_mc",
    "two_column_trial",
    "optimal_units",
    "run_benchmark",
    "write_table",
]

MODELS = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII")


@dataclass(frozen=True)
class CovarianceSpec:
    """``kind`` is "cs" (compound symmetry with off-diagonal ``a``), "ar"
    (entries ``a**|i-j|``, default a = 0.5) or "b" (AR entries whenever an
    index lies in ``active``, 0.5 elsewhere)."""

    kind: str
    p: int
    a: float = 0.5
    active: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("cs", "ar", "b"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.p < 1:
            raise ValueError("p must be positive")
        if self.kind == "cs" and self.p > 1 and not (-1.0 / (self.p - 1) < self.a < 1.0):
            raise ValueError("compound symmetry needs a in (-1/(p-1), 1)")

    def label(self) -> str:
        if self.kind == "cs":
            return f"cs:{self.a:g}"
        return self.kind if self.kind == "b" or self.a == 0.5 else f"ar:{self.a:g}"


def parse_covariance(text: str, p: int, active: Sequence[int] = ()) -> CovarianceSpec:
    """Parse ``cs:0.2``, ``ar``, ``ar:0.5`` or ``b``."""
    kind, _, val = text.strip().lower().partition(":")
    aliases = {"sigma2": ("cs", 0.2), "sigma8": ("cs", 0.8), "a": ("ar", 0.5)}
    if kind in aliases and not val:
        kind, a = aliases[kind]
    else:
        a = float(val) if val else 0.5
    if kind == "cs" and not val and text.strip().lower() == "cs":
        raise ValueError("compound symmetry needs a value, e.g. cs:0.2")
    return CovarianceSpec(kind, p, a, tuple(int(i) for i in active))


def build_covariance(spec: CovarianceSpec) -> np.ndarray:
    p = spec.p
    idx = np.arange(p)
    lag = np.abs(np.subtract.outer(idx, idx))
    if spec.kind == "cs":
        S = np.full((p, p), spec.a)
        np.fill_diagonal(S, 1.0)
        return S
    ar = spec.a ** lag
    if spec.kind == "ar":
        return ar.astype(float)
    inA = np.zeros(p, dtype=bool)
    inA[list(spec.active)] = True
    use_ar = np.eye(p, dtype=bool) | inA[:, None] | inA[None, :]
    return np.where(use_ar, 0.5 ** lag, 0.5)


def _head(p, r):
    v = np.zeros(p)
    v[:r] = 1.0
    return v


def _tail(p, r):
    v = np.zeros(p)
    v[p - r:] = 1.0
    return v


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    n: int
    p: int
    noise_sd: float = 0.2

    def __post_init__(self):
        if self.model_id not in MODELS:
            raise ValueError(f"unknown model {self.model_id!r}")
        need = {"I": 1, "II": 1, "III": 2, "IV": 2, "V": 6, "VI": 7, "VII": 3, "VIII": 5}
        if self.p < need[self.model_id]:
            raise ValueError(f"model {self.model_id} needs p >= {need[self.model_id]}")
        if self.n < 2:
            raise ValueError("n must be at least 2")

    def directions(self) -> np.ndarray:
        """Index vectors spanning the central subspace (p x d, not orthonormalized)."""
        p, m = self.p, self.model_id
        e = np.eye(p)
        if m == "I":
            return e[:, [0]]
        if m == "II":
            return np.ones((p, 1))
        if m in ("III", "IV"):
            return e[:, [0, 1]]
        if m == "V":
            return _head(p, 5)[:, None]
        if m == "VI":
            return np.column_stack([_head(p, 3), _tail(p, 3)])
        if m == "VII":
            return _head(p, 2)[:, None]
        return np.column_stack([_head(p, 2), _tail(p, 2)])

    def active_set(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.directions() != 0, axis=1))

    def response(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n, p = X.shape
        m = self.model_id
        if m == "V":
            eta = np.exp((X @ _head(p, 5)) ** 2 - 4.4)
            prob = eta / (1.0 + eta)
            return (rng.random(n) < prob).astype(float)
        eps = self.noise_sd * rng.standard_normal(n)
        if m == "I":
            return np.exp(X[:, 0] ** 2) + eps
        if m == "II":
            return np.log(X.sum(axis=1) ** 2 + 5.0) + eps
        if m == "III":
            return 0.4 * X[:, 0] ** 2 + 3.0 * np.sqrt(np.abs(X[:, 1])) + eps
        if m == "IV":
            return 3.0 * np.sin(X[:, 0] / 4.0) + 0.4 * X[:, 1] ** 2 + eps
        if m == "VI":
            return 0.4 * (X @ _head(p, 3)) ** 2 + 3.0 * np.sqrt(np.abs(X @ _tail(p, 3))) + eps
        if m == "VII":
            return 0.2 * np.exp(X @ _head(p, 2)) + eps
        sign = 2.0 * (X @ _tail(p, 2) > 0) - 1.0
        return sign * (np.cbrt(X @ _head(p, 2)) + 0.5) + eps


@dataclass
class SimDataset(Dataset):
    """A Dataset carrying its true central-subspace basis and active set."""

    beta0: Optional[Subspace] = None
    active: Optional[np.ndarray] = None


def simulate(model: ModelSpec, cov: CovarianceSpec, seed=0) -> SimDataset:
    """Draw X ~ N(0, Sigma) and Y from the model; deterministic in ``seed``."""
    if cov.p != model.p:
        raise ValueError("covariance and model disagree on p")
    if cov.kind == "b" and not cov.active:
        cov = CovarianceSpec("b", cov.p, cov.a, tuple(model.active_set()))
    rng = np.random.default_rng(seed)
    S = build_covariance(cov)
    L = np.linalg.cholesky(S)
    X = rng.standard_normal((model.n, model.p)) @ L.T
    y = model.response(X, rng)
    return SimDataset(X, y, Subspace.from_vectors(model.directions()), model.active_set())


def selection_metrics(A_hat, A_true, G_hat=None, G_true=None) -> Dict[str, float]:
    """TSR = |G_hat & G|/|G|, ACv = |A \\ A_hat|, ICv = |A_hat \\ A|."""
    A_hat, A_true = set(np.asarray(A_hat).tolist()), set(np.asarray(A_true).tolist())
    out = {"ACv": float(len(A_true - A_hat)), "ICv": float(len(A_hat - A_true))}
    if G_true is not None:
        G_hat, G_true = set(G_hat or ()), set(G_true)
        out["TSR"] = len(G_hat & G_true) / len(G_true) if G_true else float("nan")
    return out


# --------------------------------------------------------------------------
# efficiency limit of SAVE submatrices


def save_efficiency_limit(w, beta0, Sigma, Sigma_h: Sequence[np.ndarray],
                          mu_h: Optional[Sequence[np.ndarray]] = None, tol: float = 1e-8) -> float:
    """Limit of n E||Pi(beta_w) - Pi(beta0)||^2 for the SAVE units selected by w.

    Assumes a rank-one SAVE matrix, Gaussian slices with equal proportions
    and within-slice covariances Sigma_h = Sigma - a_h Psi with
    Psi = Sigma beta0 beta0' Sigma.  With u = w * (Sigma beta0),
    Q = I - beta0 beta0' and T = tr(Q Sigma^{-1}) the limit is

        2 u'[(a' Delta_H a) Q + sum_hj a_h a_j Phi_hj] u
        / {(sum_h a_h^2) w'(Sigma beta0 * Sigma beta0)}^2

    where Delta_H = H I - 11' and Phi_hj = T {H delta_hj Sigma_h - Sigma_h Sigma^{-1} Sigma_j}.
    Returns inf when w keeps no informative unit.
    """
    w = np.asarray(w, dtype=float).ravel()
    b = np.asarray(beta0, dtype=float).ravel()
    b = b / np.linalg.norm(b)
    Sigma = np.asarray(Sigma, dtype=float)
    Sh = [np.asarray(s, dtype=float) for s in Sigma_h]
    H = len(Sh)
    p = b.size
    Sb = Sigma @ b
    Psi = np.outer(Sb, Sb)
    scale = float(b @ Sb) ** 2
    a = np.array([float(b @ (Sigma - s) @ b) / scale for s in Sh])
    ref = max(1.0, float(np.abs(Sigma).max()))
    for h, s in enumerate(Sh):
        if np.abs(Sigma - s - a[h] * Psi).max() > tol * ref:
            raise ValueError(f"slice {h + 1} covariance is not Sigma - a_h Sigma b b' Sigma")
    Si = np.linalg.inv(Sigma)
    Q = np.eye(p) - np.outer(b, b)
    if mu_h is not None:
        for m in mu_h:
            if np.abs(Q @ Si @ np.asarray(m, dtype=float)).max() > tol * ref:
                raise ValueError("slice means must lie in Sigma span(beta0)")
    if np.sum(a**2) == 0:
        raise ValueError("degenerate: Sigma_h equals Sigma for every slice, SAVE matrix is zero")
    T = float(np.trace(Q @ Si))
    Delta = H * np.eye(H) - np.ones((H, H))
    inner = float(a @ Delta @ a) * Q
    for h in range(H):
        for j in range(H):
            Phi = T * ((H if h == j else 0) * Sh[h] - Sh[h] @ Si @ Sh[j])
            inner = inner + a[h] * a[j] * Phi
    u = w * Sb
    den = (np.sum(a**2) * float(w @ (Sb * Sb))) ** 2
    if den == 0:
        return np.inf
    return 2.0 * float(u @ inner @ u) / den


def gaussian_slices(Sigma_h: Sequence[np.ndarray], n_per_slice: int, seed=0,
                    mu_h: Optional[Sequence[np.ndarray]] = None):
    """Draw n_per_slice rows from N(mu_h, Sigma_h) for each slice; returns (X, labels)."""
    rng = np.random.default_rng(seed)
    Xs, labs = [], []
    for h, S in enumerate(Sigma_h):
        L = np.linalg.cholesky(np.asarray(S, dtype=float))
        Z = rng.standard_normal((n_per_slice, L.shape[0])) @ L.T
        if mu_h is not None:
            Z = Z + np.asarray(mu_h[h])
        Xs.append(Z)
        labs.append(np.full(n_per_slice, h + 1))
    return np.vstack(Xs), np.concatenate(labs)


def save_efficiency_mc(w, beta0, Sigma_h: Sequence[np.ndarray], n: int, reps: int, seed=0):
    """Monte Carlo mean and standard error of n ||Pi(beta_w) - Pi(beta0)||^2."""
    w = np.asarray(w).ravel()
    H = len(Sigma_h)
    p = w.size
    specs = [s for s in method_specs("SAVE", p, H) if w[s.f_index]]
    b = Subspace.from_vectors(np.asarray(beta0, dtype=float))
    vals = np.empty(reps)
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(reps)):
        X, lab = gaussian_slices(Sigma_h, n // H, child)
        M = build_candidate_dense(slice_moments(Dataset(X, np.zeros(X.shape[0])), lab), specs).values
        vals[r] = X.shape[0] * projection_distance(leading_left_singular_basis(M, 1), b) ** 2
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(reps))


def two_column_trial(v: float, kappa: float, p: int = 3, n: int = 1000, reps: int = 400, seed=0):
    """Monte Carlo risks of span(M_1) and span(M_1, M_2) when M = (b, b).

    The column errors are Gaussian with n Var = (I, v^2 I, kappa v I).
    Returns (risk of column 1 alone, risk of both columns).
    """
    rng = np.random.default_rng(seed)
    b = np.zeros(p)
    b[0] = 1.0
    C = np.array([[1.0, kappa * v], [kappa * v, v * v]])
    Lc = np.linalg.cholesky(C + 1e-15 * np.eye(2)) / np.sqrt(n)
    one = both = 0.0
    for _ in range(reps):
        E = rng.standard_normal((p, 2)) @ Lc.T
        M = b[:, None] + E
        one += projection_distance(M[:, [0]], b) ** 2
        both += projection_distance(leading_left_singular_basis(M, 1), b) ** 2
    return n * one / reps, n * both / reps


# --------------------------------------------------------------------------
# benchmark tables


def optimal_units(model_id: str, cov: CovarianceSpec) -> Tuple[int, ...]:
    """Per-variable SAVE units of the best column set in the low-dimensional models."""
    if model_id == "I":
        return (0,)
    if model_id == "II":
        return tuple(range(cov.p))
    if model_id == "III":
        return (0, 1) if cov.a < 0.5 else (1,)
    if model_id == "IV":
        return (0, 1)
    raise ValueError("optimal units are defined for Models I-IV only")


def _summ(values) -> Tuple[float, float]:
    x = np.asarray(values, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")
    return float(x.mean()), se


def _table1_run(model_id, cov, n, seed, B_reps, B_boot, cfg):
    from .pipeline import efficiency_adapted_fit, subset_estimator
    from .selection import make_units, units_to_columns
    model = ModelSpec(model_id, n, cov.p)
    data = simulate(model, cov, seed)
    H = 5
    lab = _labels(data.y, H)
    rep = efficiency_adapted_fit(data, {H: lab}, f"save:{H}", B_reps=B_reps, seed=seed, config=cfg)
    specs = rep.specs
    units = make_units(specs, "per-variable-submatrix")
    d = model.directions().shape[1]
    G_true = units_to_columns(units, optimal_units(model_id, cov))
    full = subset_estimator(specs, range(len(specs)), d)
    sel = subset_estimator(specs, rep.selected_columns or range(len(specs)), d)
    opt = subset_estimator(specs, G_true, d)
    from .selection import bootstrap_indices
    risk = {"sel": 0.0, "full": 0.0, "opt": 0.0}
    for idx in bootstrap_indices(lab, data.n, B_boot, seed + 1):
        sub, lb = data.subset(idx), lab[idx]
        for k, est in (("sel", sel), ("full", full), ("opt", opt)):
            risk[k] += projection_distance(est(sub, lb), data.beta0) ** 2
    tsr = selection_metrics([], [], rep.selected_columns, G_true)["TSR"]
    return {"efficiency": risk["sel"] / risk["full"], "opt": risk["opt"] / risk["full"],
            "cols": float(len(rep.selected_columns)), "TSR": tsr, "d_hat": float(rep.d_hat)}


def _labels(y, H):
    from .moments import slice_response, effective_H
    return slice_response(y, effective_H(y, H))


def _table2_run(model_id, cov, n, method, seed, cfg):
    from .pipeline import sparsity_adapted_fit
    model = ModelSpec(model_id, n, cov.p)
    data = simulate(model, cov, seed)
    spec = {"SCS-SAVE": "save:2", "SCS-ENS": "ensemble=sir:5,save:2"}[method]
    rep = sparsity_adapted_fit(data, None, spec, cfg, seed)
    m = selection_metrics(rep.active_set, data.active)
    out = {"spectral_loss": spectral_loss(rep.basis, data.beta0) if rep.d_hat else 1.0,
           "ACv": m["ACv"], "ICv": m["ICv"], "cols": float(len(rep.selected_columns)),
           "d_hat": float(rep.d_hat)}
    return out


def run_benchmark(table: str, overrides: Optional[Dict] = None, seed: int = 0, n_jobs: int = 1) -> List[Dict]:
    """Replicate cells of the low-dimensional (table "1") or sparse (table "2") study.

    ``overrides`` may set ``models``, ``covs`` (strings for parse_covariance),
    ``ps``, ``n``, ``runs``, ``methods`` (table 2), ``B_reps`` and ``B_boot``
    (table 1) and ``config`` (a PipelineConfig).  Returns one row per
    (cell, metric) with mean, standard error (NaN for a single run), run
    count and base seed.
    """
    from joblib import Parallel, delayed
    from .pipeline import PipelineConfig
    ov = dict(overrides or {})
    table = str(table).replace("table", "")
    cfg = ov.get("config") or PipelineConfig()
    rows: List[Dict] = []
    if table == "1":
        models = ov.get("models", ["I", "II", "III", "IV"])
        covs = ov.get("covs", ["cs:0.2", "cs:0.8"])
        ps = ov.get("ps", [6, 10])
        runs = int(ov.get("runs", 100))
        cells = []
        for m in models:
            for cs in covs:
                for p in ps:
                    n = int(ov.get("n", 200 if m in ("I", "II") else 500))
                    cells.append((m, parse_covariance(cs, p), n, "efficiency-SAVE"))
        for m, cov, n, meth in cells:
            seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence([seed, MODELS.index(m), cov.p]).spawn(runs)]
            res = Parallel(n_jobs=n_jobs)(delayed(_table1_run)(m, cov, n, s, ov.get("B_reps"),
                                                               int(ov.get("B_boot", 100)), cfg)
                                          for s in seeds)
            for metric in ("efficiency", "opt", "cols", "TSR"):
                mean, se = _summ([r[metric] for r in res])
                rows.append(dict(model=m, p=cov.p, sigma=cov.label(), method=meth, metric=metric,
                                 mean=mean, se=se, runs=runs, seed=seed))
    elif table == "2":
        models = ov.get("models", ["V", "VI", "VII", "VIII"])
        covs = ov.get("covs", ["ar", "b"])
        ps = ov.get("ps", [200])
        runs = int(ov.get("runs", 50))
        methods = ov.get("methods", ["SCS-SAVE", "SCS-ENS"])
        for m in models:
            for cs in covs:
                for p in ps:
                    cov = parse_covariance(cs, p)
                    n = int(ov.get("n", 200))
                    for meth in methods:
                        seeds = [int(s.generate_state(1)[0]) for s in
                                 np.random.SeedSequence([seed, MODELS.index(m), p]).spawn(runs)]
                        res = Parallel(n_jobs=n_jobs)(delayed(_table2_run)(m, cov, n, meth, s, cfg)
                                                      for s in seeds)
                        for metric in ("spectral_loss", "ACv", "ICv", "cols"):
                            mean, se = _summ([r[metric] for r in res])
                            rows.append(dict(model=m, p=p, sigma=cov.label(), method=meth,
                                             metric=metric, mean=mean, se=se, runs=runs, seed=seed))
    else:
        raise ValueError(f"unknown table {table!r}; use 1 or 2")
    return rows


def write_table(rows: Iterable[Dict], path) -> None:
    """CSV with columns model, p, Sigma, method, metric, mean, se, runs, seed; SE 'NA' when undefined."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["model", "p", "Sigma", "method", "metric", "mean", "se", "runs", "seed"])
        for r in rows:
            se = "NA" if not np.isfinite(r["se"]) else repr(float(r["se"]))
            wr.writerow([r["model"], r["p"], r["sigma"], r["method"], r["metric"],
                         repr(float(r["mean"])), se, r["runs"], r["seed"]])
