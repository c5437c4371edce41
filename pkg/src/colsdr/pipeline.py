"""End-to-end drivers.

``sparsity_adapted_fit`` runs the high-dimensional path: lasso estimates of
every candidate column, forward column selection, per-column re-estimation
with a redundancy check, an adaptive group-lasso fit of the kept columns and
order determination by predictor augmentation.

``efficiency_adapted_fit`` runs the low-dimensional path: dense candidate
matrix, rank screening of unit subsets and bootstrap selection of the most
stable subset.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .moments import (ColumnSpec, Dataset, SingularCovarianceError, SlicingError,
                      build_candidate_dense, centered_targets, dense_candidate_from_targets,
                      parse_method, slice_moments, slice_response, specs_for)
from .order import (AugmentationConfig, OrderError, Subspace, determine_D_and_d,
                    leading_left_singular_basis, predictor_augmentation_rank,
                    projection_distance)
from .penalized import initial_column_estimates, refined_estimate, refit_columns
from .selection import (bootstrap_indices, enumerate_F_hat, forward_column_select, make_units,
                        redundancy_recheck, select_G_hat, units_to_columns)

__all__ = [
    "PipelineConfig",
    "SelectionReport",
    "PipelineError",
    "EfficiencyResult",
    "make_labels",
    "sparsity_adapted_fit",
    "efficiency_adapted_fit",
    "subset_estimator",
    "relative_efficiency",
]


class PipelineError(RuntimeError):
    """A stage failure; ``stage`` names the step that raised."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    D_init: int = 15
    rho: float = 1.0
    exponent_mode: str = "rho"
    K: float = np.inf
    folds: int = 5
    grid_size: int = 10
    zero_tol: float = 1e-8
    r_aug: int = 5
    reps: int = 10
    c: float = 0.2
    B_reps: Optional[int] = None
    unit_mode: str = "per-variable-submatrix"
    init_solver: str = "cd"
    refit_solver: str = "admm"
    max_doublings: int = 4
    cv_rule: str = "min"

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(self.r_aug, self.reps, self.D_init, self.max_doublings)


@dataclass
class SelectionReport:
    mode: str
    selected_set: List[ColumnSpec]
    selected_columns: List[int]
    basis: Subspace
    active_set: np.ndarray
    d_hat: int
    specs: List[ColumnSpec] = field(default_factory=list)
    coef: Optional[np.ndarray] = None
    D: Optional[int] = None
    diagnostics: Dict = field(default_factory=dict)


class _Stage:
    # tags any exception escaping the block with the stage name
    def __init__(self, name, timings):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, et, ev, tb):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + time.perf_counter() - self.t0
        if ev is not None and not isinstance(ev, PipelineError):
            raise PipelineError(self.name, f"{type(ev).__name__}: {ev}") from ev
        return False


def make_labels(y, specs: Sequence[ColumnSpec]) -> Dict[int, np.ndarray]:
    return {H: slice_response(y, H) for H in sorted({s.H for s in specs})}


def _resolve(data: Dataset, method_spec, H=None) -> List[ColumnSpec]:
    if isinstance(method_spec, str):
        methods = parse_method(method_spec, H)
    else:
        methods = [(m.upper(), h) for m, h in method_spec]
    return specs_for(methods, data.y, data.p)


def _augmented_refit(X_A: np.ndarray, Yc: np.ndarray):
    def refit(U):
        return dense_candidate_from_targets(np.column_stack([X_A, U]), Yc)
    return refit


def sparsity_adapted_fit(data: Dataset, labels=None, method_spec: Union[str, Sequence] = "save",
                         config: Optional[PipelineConfig] = None, seed=0, H=None) -> SelectionReport:
    """Sparse inverse regression by forward column selection.

    Parameters
    ----------
    data : Dataset
    labels : dict, optional
        ``{H: slice labels}``; computed from ``data.y`` when omitted.
    method_spec : str or list of (method, H)
        E.g. ``"save"``, ``"ensemble=sir,save"`` or ``[("SAVE", 2)]``.
    """
    cfg = config or PipelineConfig()
    timings: Dict[str, float] = {}
    diag: Dict = {"timings": timings}
    with _Stage("moments", timings):
        specs = _resolve(data, method_spec, H)
        labels = make_labels(data.y, specs) if labels is None else labels
    with _Stage("initial", timings):
        M_tilde = initial_column_estimates(data, labels, specs, cfg.folds, cfg.grid_size, seed,
                                           rule=cfg.cv_rule)
    diag["initial_lambdas"] = M_tilde.lambdas
    diag["initial_support"] = int(np.count_nonzero(M_tilde.row_norms()))
    diag["initial_column_nnz"] = np.count_nonzero(M_tilde.values, axis=0)

    def run_sparse(D):
        with _Stage("forward", timings):
            R, trace = forward_column_select(M_tilde, D, cfg.zero_tol)
        state = {"D": D, "trace": trace, "R_forward": R}
        if not R:
            state.update(R=[], active=np.zeros(0, dtype=int), coef=np.zeros((data.p, 0)))
            return state
        with _Stage("reestimate", timings):
            refit = refit_columns(data, labels, [specs[i] for i in R], M_tilde.lambdas[R],
                                  cfg.refit_solver)
            keep = redundancy_recheck(refit, D, cfg.zero_tol)
            R2 = [R[k] for k in keep] if keep else R[:1]
        with _Stage("refined", timings):
            sol = refined_estimate(data, labels, [specs[i] for i in R2], M_tilde.values[:, R2],
                                   cfg.rho, cfg.exponent_mode, cfg.K, cfg.folds, cfg.grid_size,
                                   seed, cfg.refit_solver, rule=cfg.cv_rule)
        state.update(R=R2, active=sol.active_rows, coef=sol.B, solution=sol,
                     refit_kkt=refit.info["kkt"])
        return state

    def estimate_d(state):
        A = state["active"]
        if len(state["R"]) == 0 or A.size == 0:
            state["eta"] = None
            return 0
        with _Stage("order", timings):
            Yc = centered_targets(data.X, labels, [specs[i] for i in state["R"]])
            max_rank = min(len(state["R"]), A.size)
            d, curve = predictor_augmentation_rank(_augmented_refit(data.X[:, A], Yc), data.n, A.size,
                                                   cfg.augmentation(), max_rank, seed,
                                                   return_curve=True)
        state["eta"] = curve
        return d

    try:
        D, d_hat, state, history = determine_D_and_d(run_sparse, estimate_d, cfg.augmentation())
    except OrderError as exc:
        raise PipelineError("order", str(exc)) from exc
    d_hat = min(d_hat, state["coef"].shape[1])
    basis = leading_left_singular_basis(state["coef"], d_hat) if state["coef"].size else \
        Subspace(np.zeros((data.p, 0)))
    diag.update(trace=state["trace"], D_history=history, eta=state.get("eta"),
                forward_columns=state["R_forward"])
    if "solution" in state:
        sol = state["solution"]
        diag.update(refined_lambda=sol.lam, refined_kkt=sol.kkt_residual, refit_kkt=state["refit_kkt"])
    R = state["R"]
    return SelectionReport("sparse", [specs[i] for i in R], list(R), basis, np.asarray(state["active"]),
                           int(d_hat), specs, state["coef"], D, diag)


def _order_fn(data, Yc, cfg, seed):
    def order_fn(cols):
        return predictor_augmentation_rank(_augmented_refit(data.X, Yc[:, cols]), data.n, data.p,
                                           cfg.augmentation(), min(len(cols), data.p), seed)
    return order_fn


def efficiency_adapted_fit(data: Dataset, labels=None, method_spec="save:5",
                           unit_mode: Optional[str] = None, c: Optional[float] = None,
                           B_reps: Optional[int] = None, seed=0,
                           config: Optional[PipelineConfig] = None, H=None) -> SelectionReport:
    """Rank-screened subset search with the bootstrap criterion g."""
    cfg = config or PipelineConfig()
    unit_mode = unit_mode or cfg.unit_mode
    c = cfg.c if c is None else c
    B_reps = (cfg.B_reps if cfg.B_reps is not None else data.n) if B_reps is None else B_reps
    timings: Dict[str, float] = {}
    with _Stage("moments", timings):
        specs = _resolve(data, method_spec, H)
        if len({s.H for s in specs}) > 1:
            raise ValueError("the efficiency path needs a single slicing")
        labels = make_labels(data.y, specs) if labels is None else labels
        lab = labels[specs[0].H] if isinstance(labels, dict) else np.asarray(labels)
        third = any(s.method == "TM" for s in specs)
        M_hat = build_candidate_dense(slice_moments(data, lab, third=third), specs).values
        Yc = centered_targets(data.X, {specs[0].H: lab}, specs)
    units = make_units(specs, unit_mode)
    order_fn = _order_fn(data, Yc, cfg, seed)
    with _Stage("order", timings):
        d = order_fn(list(range(len(specs))))
    diag = {"timings": timings, "units": [u.label() for u in units]}
    if d == 0:
        return SelectionReport("efficiency", [], [], Subspace(np.zeros((data.p, 0))),
                               np.zeros(0, dtype=int), 0, specs, M_hat, None, diag)
    with _Stage("screen", timings):
        F_hat, checks = enumerate_F_hat(M_hat, units, d, order_fn)
    if not F_hat:
        F_hat = [tuple(range(len(units)))]
    with _Stage("bootstrap", timings):
        G, g = select_G_hat(data, lab, specs, units, F_hat, B_reps, c, d, seed, M_hat)
    cols = units_to_columns(units, G)
    basis = leading_left_singular_basis(M_hat[:, cols], d)
    A = np.flatnonzero(np.any(np.abs(basis.basis) > 0, axis=1))
    diag.update(G_units=G, g_values=g, F_hat_size=len(F_hat), rank_checks=checks)
    return SelectionReport("efficiency", [specs[i] for i in cols], cols, basis, A, int(d), specs,
                           M_hat, None, diag)


def subset_estimator(specs: Sequence[ColumnSpec], cols: Sequence[int], d: int):
    """Estimator mapping (data, labels) to the d leading directions of M_hat restricted to ``cols``."""
    sub = [specs[i] for i in cols]
    third = any(s.method == "TM" for s in sub)

    def est(data, labels):
        return leading_left_singular_basis(
            build_candidate_dense(slice_moments(data, labels, third=third), sub).values, d)
    return est


@dataclass
class EfficiencyResult:
    ratio: float
    se: float
    ratios: np.ndarray
    loss_selected: np.ndarray
    loss_full: np.ndarray
    extras: List = field(default_factory=list)


def relative_efficiency(data_generator: Callable, fit_G: Callable, fit_full: Callable, beta0,
                        runs: int, seed=0, B_boot: int = 100) -> EfficiencyResult:
    """Mean over runs of the bootstrap-risk ratio of two estimators.

    For each run, ``data_generator(seed_r)`` returns (data, labels);
    ``fit_G(data, labels, seed_r)`` and ``fit_full(...)`` return estimators
    ``est(data, labels) -> Subspace`` (optionally as ``(est, extra)``).  The
    risk of each estimator is the mean of ||Pi(beta_b) - Pi(beta0)||^2 over
    ``B_boot`` row resamples of the run's data.
    """
    children = np.random.SeedSequence(seed).spawn(runs)
    ratios, lg, lf, extras = [], [], [], []
    for child in children:
        s = int(child.generate_state(1)[0])
        data, labels = data_generator(s)
        eg = fit_G(data, labels, s)
        extra = None
        if isinstance(eg, tuple):
            eg, extra = eg
        ef = fit_full(data, labels, s)
        if isinstance(ef, tuple):
            ef = ef[0]
        dg = df = 0.0
        for idx in bootstrap_indices(labels, data.n, B_boot, s + 1):
            sub, lab = data.subset(idx), labels[idx]
            dg += projection_distance(eg(sub, lab), beta0) ** 2
            df += projection_distance(ef(sub, lab), beta0) ** 2
        lg.append(dg / B_boot)
        lf.append(df / B_boot)
        ratios.append(dg / df if df > 0 else 1.0)
        extras.append(extra)
    ratios = np.array(ratios)
    se = float(ratios.std(ddof=1) / np.sqrt(runs)) if runs > 1 else float("nan")
    return EfficiencyResult(float(ratios.mean()), se, ratios, np.array(lg), np.array(lf), extras)
