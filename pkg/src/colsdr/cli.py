"""Command-line front end.

Subcommands
-----------
fit        run the sparse or efficiency path on a CSV and write report.csv,
           diagnostics.csv and the resolved config
simulate   draw a dataset from one of the simulation models
benchmark  replicate cells of the low- or high-dimensional study

Exit status is 0 on success, 2 for input or configuration errors and 3 when a
pipeline stage or numerical step fails.  The seed falls back to the
``COLSDR_SEED`` environment variable, then to 0.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .moments import Dataset, parse_method
from .order import OrderError
from .penalized import CV_RULES, ConvergenceError
from .pipeline import PipelineConfig, PipelineError, efficiency_adapted_fit, sparsity_adapted_fit

__all__ = ["InputError", "RunConfig", "load_csv", "write_csv", "read_config", "write_config", "main"]

EXIT_OK, EXIT_INPUT, EXIT_STAGE = 0, 2, 3
NA_TOKENS = {"", "na", "nan", "null", "none", "n/a", "inf", "-inf", "+inf", "infinity", "-infinity"}


class InputError(ValueError):
    """Malformed data file, flag or configuration."""


def fmt(x) -> str:
    """17 significant digits, enough for an exact float round trip."""
    x = float(x)
    if math.isnan(x):
        return "NA"
    return format(x, ".17g")


# --------------------------------------------------------------------------
# data files


def load_csv(path, response_column: Optional[str] = None) -> Dataset:
    """Read a numeric CSV with a header row.

    The response is the column named ``response_column``, or the last column
    when it is None.  Non-finite or missing cells are reported with their
    1-based data row numbers.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    seen = set()
    dups = sorted({h for h in header if h in seen or seen.add(h)})
    if dups:
        raise InputError(f"duplicate header names: {', '.join(dups)}")
    if len(header) < 2:
        raise InputError("need at least one predictor column and a response column")
    body = rows[1:]
    ragged = [i + 1 for i, r in enumerate(body) if len(r) != len(header)]
    if ragged:
        raise InputError(f"rows with {'a wrong' if len(ragged) == 1 else 'wrong'} cell count: "
                         f"{_row_list(ragged)} (header has {len(header)} columns)")
    vals = np.empty((len(body), len(header)))
    bad_rows, text_cells = [], []
    for i, r in enumerate(body):
        for j, cell in enumerate(r):
            c = cell.strip()
            if c.lower() in NA_TOKENS:
                bad_rows.append(i + 1)
                vals[i, j] = np.nan
                continue
            try:
                vals[i, j] = float(c)
            except ValueError:
                text_cells.append(f"row {i + 1} column {header[j]!r} ({c!r})")
                continue
            if not math.isfinite(vals[i, j]):
                bad_rows.append(i + 1)
    if text_cells:
        raise InputError("non-numeric cells: " + "; ".join(text_cells[:10]) +
                         (" ..." if len(text_cells) > 10 else ""))
    if bad_rows:
        raise InputError(f"missing or non-finite values in rows {_row_list(sorted(set(bad_rows)))}")
    if response_column is None:
        k = len(header) - 1
    elif response_column in header:
        k = header.index(response_column)
    else:
        raise InputError(f"response column {response_column!r} not in header")
    X = np.delete(vals, k, axis=1)
    try:
        return Dataset(X, vals[:, k])
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _row_list(rows: Sequence[int], limit: int = 20) -> str:
    s = ", ".join(map(str, rows[:limit]))
    return s + (f" and {len(rows) - limit} more" if len(rows) > limit else "")


def write_csv(path, X: np.ndarray, y: np.ndarray, names: Optional[List[str]] = None) -> None:
    X = np.asarray(X, dtype=float)
    names = names or [f"x{j + 1}" for j in range(X.shape[1])] + ["y"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(names)
        for row, yi in zip(X, np.asarray(y, dtype=float)):
            wr.writerow([fmt(v) for v in row] + [fmt(yi)])


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    method: str = "save"
    mode: str = "sparse"
    H: str = ""
    D_init: int = 15
    rho: float = 1.0
    exponent_mode: str = "rho"
    c: float = 0.2
    B_reps: Optional[int] = None
    folds: int = 5
    grid_size: int = 10
    zero_tol: float = 1e-8
    cv_rule: str = "min"
    unit_mode: str = "per-variable-submatrix"
    seed: int = 0
    center: bool = False
    standardize: bool = False
    arctan: bool = False
    response: Optional[str] = None
    threads: int = 1

    def validate(self) -> "RunConfig":
        if self.mode not in ("sparse", "efficiency"):
            raise InputError(f"mode must be sparse or efficiency, got {self.mode!r}")
        try:
            parse_method(self.method, self.H_map())
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        checks = [
            (self.D_init >= 1, "D_init must be at least 1"),
            (self.rho > 0, "rho must be positive"),
            (self.exponent_mode in ("rho", "rho/2"), "exponent_mode must be rho or rho/2"),
            (0 < self.c < 0.5, "c must lie in (0, 0.5)"),
            (self.B_reps is None or self.B_reps >= 0, "B_reps must be nonnegative"),
            (self.folds >= 2, "folds must be at least 2"),
            (self.grid_size >= 2, "grid_size must be at least 2"),
            (0 <= self.zero_tol < 1, "zero_tol must lie in [0, 1)"),
            (self.cv_rule in CV_RULES, f"cv_rule must be one of {', '.join(CV_RULES)}"),
            (self.unit_mode in ("per-variable-submatrix", "single-column"),
             "unit_mode must be per-variable-submatrix or single-column"),
            (self.seed >= 0, "seed must be nonnegative"),
            (self.threads >= 1, "threads must be at least 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InputError(msg)
        return self

    def H_map(self) -> Dict[str, int]:
        """``H`` is written as ``sir:5,save:2``."""
        out = {}
        for tok in filter(None, (t.strip() for t in self.H.split(","))):
            name, sep, val = tok.partition(":")
            if not sep:
                raise InputError(f"H entries look like sir:5, got {tok!r}")
            try:
                out[name.strip().upper()] = int(val)
            except ValueError as exc:
                raise InputError(f"bad slice count in {tok!r}") from exc
        return out

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(D_init=self.D_init, rho=self.rho, exponent_mode=self.exponent_mode,
                              folds=self.folds, grid_size=self.grid_size, zero_tol=self.zero_tol,
                              c=self.c, B_reps=self.B_reps, unit_mode=self.unit_mode,
                              cv_rule=self.cv_rule)


def _coerce(name: str, text: str):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    t = text.strip()
    if "bool" in str(ftype):
        if t.lower() in ("1", "true", "yes", "on"):
            return True
        if t.lower() in ("0", "false", "no", "off"):
            return False
        raise InputError(f"{name} expects true/false, got {text!r}")
    if "Optional" in str(ftype) and t.lower() in ("", "none"):
        return None
    try:
        if "int" in str(ftype):
            return int(t)
        if "float" in str(ftype):
            return float(t)
    except ValueError as exc:
        raise InputError(f"{name}: cannot parse {text!r}") from exc
    return t


# keys that describe the invocation rather than the fit; echoed so a run can be repeated
EXTRA_KEYS = {"data": str, "table": str, "models": str, "covs": str, "ps": str, "methods": str,
              "n": int, "runs": int, "B_boot": int}


def read_config(path) -> Dict[str, object]:
    """Flat ``key = value`` file; blank lines and ``#`` comments are skipped."""
    known = {f.name for f in fields(RunConfig)} | set(EXTRA_KEYS)
    out: Dict[str, object] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for k, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise InputError(f"{path}:{k}: expected key = value")
        if key not in known:
            raise InputError(f"{path}:{k}: unknown key {key!r}")
        if key in EXTRA_KEYS:
            try:
                out[key] = EXTRA_KEYS[key](val.strip())
            except ValueError as exc:
                raise InputError(f"{path}:{k}: cannot parse {key}") from exc
        else:
            out[key] = _coerce(key, val)
    return out


def write_config(cfg: RunConfig, path, extra: Optional[Dict[str, object]] = None) -> None:
    lines = []
    for k, v in list(asdict(cfg).items()) + list((extra or {}).items()):
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = fmt(v)
        elif v is None:
            v = "none"
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _seed_default() -> int:
    env = os.environ.get("COLSDR_SEED")
    if env is None or not env.strip():
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise InputError(f"COLSDR_SEED must be an integer, got {env!r}") from exc


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags.

    Invocation keys from the file (data path, benchmark cells) fill in the
    matching ``args`` attributes that were not given on the command line.
    """
    values: Dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for key in EXTRA_KEYS:
        v = values.pop(key, None)
        if v is not None and getattr(args, key, None) is None:
            setattr(args, key, v)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if "seed" not in values:
        values["seed"] = _seed_default()
    return RunConfig(**values).validate()


def preprocess(data: Dataset, cfg: RunConfig) -> Dataset:
    """Optional arctan transform, then centering and scaling of the predictors."""
    X = data.X.copy()
    if cfg.arctan:
        X = np.arctan(X)
    if cfg.center or cfg.standardize:
        X = X - X.mean(axis=0)
    if cfg.standardize:
        sd = X.std(axis=0, ddof=1)
        if np.any(sd == 0):
            raise InputError(f"constant predictor columns: {np.flatnonzero(sd == 0).tolist()}")
        X = X / sd
    return Dataset(X, data.y)


# --------------------------------------------------------------------------
# subcommands


def _diag_rows(rep) -> List[List[str]]:
    rows = []
    d = rep.diagnostics
    for k, v in d.get("timings", {}).items():
        rows.append(["timing_seconds", k, fmt(v)])
    if rep.mode == "sparse":
        tr = d.get("trace")
        if tr is not None:
            rows.append(["forward_stop", "", tr.stop_reason])
            for i, (c, r) in enumerate(zip(tr.selected, tr.residual_norms)):
                rows.append(["forward_residual", str(c), fmt(r)])
        for i, lam in enumerate(np.atleast_1d(d.get("initial_lambdas", []))):
            rows.append(["initial_lambda", str(i), fmt(lam)])
        for D, dh in d.get("D_history", []) or []:
            rows.append(["D_history", str(D), str(dh)])
        eta = d.get("eta")
        if eta is not None:
            for i, v in enumerate(np.asarray(eta)):
                rows.append(["eta", str(i), fmt(v)])
        for key in ("refined_lambda", "refined_kkt", "refit_kkt"):
            v = np.atleast_1d(d.get(key, []))
            for i, x in enumerate(v):
                rows.append([key, str(i) if v.size > 1 else "", fmt(x)])
        rows.append(["initial_support", "", str(d.get("initial_support", ""))])
    else:
        for F, g in sorted(d.get("g_values", {}).items()):
            rows.append(["g_value", " ".join(str(u + 1) for u in F), fmt(g)])
        rows.append(["F_hat_size", "", str(d.get("F_hat_size", ""))])
        rows.append(["rank_checks", "", str(d.get("rank_checks", ""))])
    return rows


def write_report(rep, outdir: Path) -> None:
    with open(outdir / "report.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["field", "i", "j", "value"])
        wr.writerow(["mode", "", "", rep.mode])
        wr.writerow(["d_hat", "", "", rep.d_hat])
        if rep.D is not None:
            wr.writerow(["D", "", "", rep.D])
        for a in rep.active_set:
            wr.writerow(["active", int(a) + 1, "", f"x{int(a) + 1}"])
        for c, s in zip(rep.selected_columns, rep.selected_set):
            wr.writerow(["selected", c + 1, "", s.label()])
        B = rep.basis.basis
        for i in range(B.shape[0]):
            for j in range(B.shape[1]):
                wr.writerow(["basis", i + 1, j + 1, fmt(B[i, j])])
    with open(outdir / "diagnostics.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["key", "index", "value"])
        wr.writerows(_diag_rows(rep))


def cmd_fit(args) -> int:
    cfg = resolve_config(args)
    if args.data is None:
        raise InputError("no data file given")
    data = preprocess(load_csv(args.data, cfg.response), cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    H = cfg.H_map()
    if cfg.mode == "sparse":
        rep = sparsity_adapted_fit(data, None, cfg.method, cfg.pipeline(), cfg.seed, H=H)
    else:
        rep = efficiency_adapted_fit(data, None, cfg.method, seed=cfg.seed, config=cfg.pipeline(), H=H)
    write_report(rep, outdir)
    write_config(cfg, outdir / "config.txt", {"data": str(Path(args.data).resolve())})
    print(f"d_hat={rep.d_hat} selected={len(rep.selected_columns)} active={len(rep.active_set)} -> {outdir}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simbench import ModelSpec, parse_covariance, simulate
    seed = args.seed if args.seed is not None else _seed_default()
    try:
        model = ModelSpec(args.model, args.n, args.p)
        cov = parse_covariance(args.cov, args.p)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    sim = simulate(model, cov, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, sim.X, sim.y)
    truth = out.with_name(out.stem + ".truth.csv")
    with open(truth, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["field", "i", "j", "value"])
        for a in sim.active:
            wr.writerow(["active", int(a) + 1, "", f"x{int(a) + 1}"])
        B = sim.beta0.basis
        for i in range(B.shape[0]):
            for j in range(B.shape[1]):
                wr.writerow(["basis", i + 1, j + 1, fmt(B[i, j])])
    Path(out.with_name(out.stem + ".config.txt")).write_text(
        f"model = {args.model}\nn = {args.n}\np = {args.p}\ncov = {args.cov}\nseed = {seed}\n")
    print(f"wrote {out} and {truth}")
    return EXIT_OK


def _split(text, conv=str):
    return [conv(t.strip()) for t in text.split(",") if t.strip()] if text else None


def cmd_benchmark(args) -> int:
    from .simbench import run_benchmark, write_table
    cfg = resolve_config(args)
    ov: Dict[str, object] = {"config": cfg.pipeline()}
    args.table = str(args.table or "").replace("table", "")
    try:
        for key, val in (("models", _split(args.models)), ("covs", _split(args.covs)),
                         ("ps", _split(args.ps, int)), ("methods", _split(args.methods))):
            if val:
                ov[key] = val
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    for key in ("runs", "n", "B_boot"):
        if getattr(args, key) is not None:
            ov[key] = getattr(args, key)
    if cfg.B_reps is not None:
        ov["B_reps"] = cfg.B_reps
    if str(args.table) not in ("1", "2"):
        raise InputError("table must be 1 or 2")
    rows = run_benchmark(args.table, ov, cfg.seed, cfg.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(rows, out)
    extra = {k: ",".join(map(str, v)) if isinstance(v, list) else v
             for k, v in ov.items() if k not in ("config", "B_reps")}
    write_config(cfg, out.with_name(out.stem + ".config.txt"), {"table": args.table, **extra})
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def _add_run_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="flat key = value file; flags override it")
    sp.add_argument("--method", help="sir, save, dr, tm or ensemble=sir,save (optionally save:5)")
    sp.add_argument("--mode", choices=["sparse", "efficiency"])
    sp.add_argument("--H", help="slice counts, e.g. sir:5,save:2")
    sp.add_argument("--D-init", dest="D_init", type=int)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--exponent-mode", dest="exponent_mode")
    sp.add_argument("--c", type=float)
    sp.add_argument("--B-reps", dest="B_reps", type=int)
    sp.add_argument("--folds", type=int)
    sp.add_argument("--grid-size", dest="grid_size", type=int)
    sp.add_argument("--zero-tol", dest="zero_tol", type=float)
    sp.add_argument("--cv-rule", dest="cv_rule", choices=list(CV_RULES))
    sp.add_argument("--unit-mode", dest="unit_mode")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="colsdr", description="Adaptive column selection for "
                                 "inverse-regression sufficient dimension reduction.")
    sub = ap.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit the sparse or efficiency path to a CSV")
    fit.add_argument("data", nargs="?", help="CSV with a header row (or data = ... in the config)")
    fit.add_argument("--response", help="response column name (default: last column)")
    fit.add_argument("--out", default="colsdr_out", help="output directory")
    _add_run_flags(fit)
    for flag in ("center", "standardize", "arctan"):
        fit.add_argument(f"--{flag}", action="store_true", default=None)
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="draw a dataset from a simulation model")
    sim.add_argument("--model", required=True, choices=["I", "II", "III", "IV", "V", "VI", "VII", "VIII"])
    sim.add_argument("--n", type=int, default=200)
    sim.add_argument("--p", type=int, required=True)
    sim.add_argument("--cov", default="ar", help="cs:0.2, ar, ar:0.5 or b")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", default="sim.csv")
    sim.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("benchmark", help="replicate benchmark table cells")
    bench.add_argument("--table", help="1 (low-dimensional) or 2 (sparse)")
    bench.add_argument("--runs", type=int)
    bench.add_argument("--models", help="comma list, e.g. I,II")
    bench.add_argument("--covs", help="comma list, e.g. cs:0.2,cs:0.8")
    bench.add_argument("--ps", help="comma list of p")
    bench.add_argument("--n", type=int)
    bench.add_argument("--methods", help="table 2 only: SCS-SAVE,SCS-ENS")
    bench.add_argument("--B-boot", dest="B_boot", type=int, help="resamples for the risk estimate")
    bench.add_argument("--out", default="table.csv")
    _add_run_flags(bench)
    bench.set_defaults(func=cmd_benchmark)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PipelineError as exc:
        print(f"stage failure {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OrderError, ConvergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
