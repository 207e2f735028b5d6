"""Command-line interface: ``pencox {fit,path,cv,simulate,predict}``.

Inputs are counting-process CSV files with one row per covariate-constant
interval.  Scalar results are written as JSON, curves and paths as TSV with
fixed column order.

Exit codes
----------
0  success
1  unreadable input (missing file, malformed CSV or JSON)
2  schema or data mismatch (unknown columns, invalid values, bad model formula)
3  a fit did not converge (results are still written)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from .breslow import fit_dataset as breslow_fit
from .data import DataError, SchemaError, dataset_from_frame, dataset_to_frame
from .estimator import FitSettings, cumulative_hazard_curve, fit
from .likelihood import Design, ModelSpec
from .selection import adaptive_weights, cross_validate, make_grid, path
from .simulation import MetricReport, ScenarioSpec, evaluation_grid, generate, metrics
from .splines import ConfigurationError, DomainError, SplineBasis

log = logging.getLogger("pencox")

EXIT_OK, EXIT_INPUT, EXIT_SCHEMA, EXIT_NONCONVERGED = 0, 1, 2, 3
THREADS_ENV = "PENCOX_THREADS"
FLOAT_FORMAT = "%.10g"
CURVE_POINTS = 200


class InputError(Exception):
    """Input file missing or unparsable."""


def _terms(text) -> tuple:
    if not text:
        return ()
    out = []
    for chunk in text if isinstance(text, list) else [text]:
        out.extend(t.strip() for t in chunk.replace(",", "+").split("+") if t.strip())
    return tuple(out)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _write_tsv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, sep="\t", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _finite(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_finite(obj), indent=2, allow_nan=False) + "\n")


def _read_csv(path) -> pd.DataFrame:
    path = Path(path)
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _load(args):
    """Frame, dataset and model spec from the command-line formula."""
    frame = _read_csv(args.input)
    pen, unpen, tv = _terms(args.pen), _terms(args.unpen), _terms(args.tv)
    factors = _terms(args.factor)
    schema = {"id": args.id, "start": args.start, "stop": args.stop, "event": args.event}
    if args.frailty:
        schema["cluster"] = args.frailty
    elif "cluster" in frame.columns:
        schema["cluster"] = "cluster"
    else:
        if args.id not in frame.columns:
            raise SchemaError(f"missing required column(s): {args.id}")
        frame = frame.assign(_cluster=frame[args.id])
        schema["cluster"] = "_cluster"
    reserved = set(schema.values())
    named = pen + unpen + tv
    if args.pen:
        covariates = list(dict.fromkeys(named))
    else:
        covariates = [c for c in frame.columns if c not in reserved]
    schema["covariates"] = covariates
    schema["factors"] = list(factors)
    dataset = dataset_from_frame(frame, schema)
    levels = {f: [str(v) for v in dict.fromkeys(frame[f].tolist())] for f in factors}
    model = ModelSpec(
        penalized=pen if args.pen else None,
        unpenalized=unpen,
        tv=tv,
        frailty=bool(args.frailty),
        M=args.M,
        degree=args.degree,
    )
    return dataset, model, levels


def _settings(args) -> FitSettings:
    return FitSettings(max_outer=args.max_outer, tol_params=args.tol_params, tol_grad=args.tol_grad)


def _penalty(design: Design, args, settings: FitSettings):
    weights = adaptive_weights(design, settings) if args.weights == "adaptive" else None
    return design.penalty(0.0, weights=weights)


def _grid(design, pen, args, settings):
    if args.grid:
        grid = np.sort(np.array([float(v) for v in _terms(args.grid)]))[::-1]
        if np.any(grid < 0) or np.any(np.diff(grid) >= 0):
            raise ConfigurationError("grid values must be distinct and non-negative")
        return grid
    return make_grid(design, pen, length=args.grid_length, settings=settings, ratio=args.grid_ratio)


def cmd_fit(args) -> int:
    dataset, model, levels = _load(args)
    settings = _settings(args)
    design = Design(dataset, model)
    pen = _penalty(design, args, settings).with_xi(args.xi)
    res = fit(design, pen=pen, settings=settings)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)

    summary = res.summary()
    summary.update(
        {
            "M": int(design.basis.M),
            "t_max": float(design.basis.t_max),
            "columns": list(design.columns),
            "factors": {f: lv for f, lv in levels.items()},
            "frailty_column": args.frailty or None,
        }
    )
    _write_json(summary, out / "fit.json")
    t, lam = res.baseline_curve
    _write_tsv(pd.DataFrame({"t": t, "baseline_hazard": lam}), out / "baseline.tsv")
    t, curves = res.tv_curves
    tv = pd.DataFrame({"t": t})
    for name, curve in zip(design.tv_names, curves):
        tv[name] = curve
    _write_tsv(tv, out / "tv_effects.tsv")
    if not res.converged:
        log.warning("fit did not converge")
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_path(args) -> int:
    dataset, model, _ = _load(args)
    settings = _settings(args)
    design = Design(dataset, model)
    pen = _penalty(design, args, settings)
    grid = _grid(design, pen, args, settings)
    pr = path(design, pen, grid, settings)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = pd.DataFrame(list(pr.rows()), columns=["xi", "term", "group", "coefficient"])
    _write_tsv(rows[["xi", "group", "term", "coefficient"]], out / "paths.tsv")
    return EXIT_OK if pr.converged.all() else EXIT_NONCONVERGED


def cmd_cv(args) -> int:
    dataset, model, _ = _load(args)
    settings = _settings(args)
    design = Design(dataset, model)
    pen = _penalty(design, args, settings)
    grid = _grid(design, pen, args, settings)
    cv = cross_validate(dataset, model, pen.weights, grid, K=args.K, seed=args.seed, settings=settings, c=pen.c)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_tsv(pd.DataFrame({"xi": cv.grid, "cv_error": cv.cv_error, "cv_se": cv.cv_se}), out / "cv.tsv")
    _write_json(
        {
            "xi_opt": cv.xi_opt,
            "xi_1se": cv.xi_1se,
            "K": args.K,
            "seed": args.seed,
            "weights": dict(zip(design.group_names, map(float, pen.weights))),
            "folds": {str(c): int(k) for c, k in sorted(cv.fold_assignment.items(), key=lambda kv: str(kv[0]))},
        },
        out / "cv.json",
    )
    return EXIT_OK


def replication(scenario: int, seed: int, n_subjects: int, xi, K: int, grid_length: int) -> list:
    """One simulation run; returns ``(estimator, metric, value)`` triples."""
    dataset, truth = generate(ScenarioSpec(scenario_id=scenario, n_subjects=n_subjects, seed=seed))
    model = ModelSpec(frailty=scenario in (2, 4))
    design = Design(dataset, model)
    weights = adaptive_weights(design)
    pen = design.penalty(0.0, weights=weights)
    if xi is None:
        grid = make_grid(design, pen, length=grid_length)
        xi = cross_validate(dataset, model, weights, grid, K=K, seed=seed).xi_opt
    res = fit(design, pen=pen.with_xi(xi))
    grid_T = evaluation_grid(dataset)
    rows = [("full", "xi", float(xi)), ("full", "converged", float(res.converged))]
    for name, rep in (("full", metrics(res, truth, grid_T)), ("breslow", metrics(breslow_fit(dataset), truth, grid_T))):
        for key, value in rep.runs[0].items():
            if value is not None:
                rows.append((name, key, float(value)))
    return rows


def cmd_simulate(args) -> int:
    seeds = [args.seed + r for r in range(args.replications)]
    job = dict(scenario=args.scenario, n_subjects=args.n_subjects, xi=args.xi, K=args.K, grid_length=args.grid_length)
    threads = _threads()
    if threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replication_job, [dict(job, seed=s) for s in seeds]))
    else:
        results = [replication(seed=s, **job) for s in seeds]

    records = [(r, s, est, key, val) for r, (s, rows) in enumerate(zip(seeds, results)) for est, key, val in rows]
    table = pd.DataFrame(records, columns=["replication", "seed", "estimator", "metric", "value"])
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_tsv(table, out / "metrics.tsv")

    summary = {"scenario": args.scenario, "replications": len(seeds), "seed": args.seed}
    for est in ("full", "breslow"):
        sub = table[table.estimator == est]
        runs = [dict(zip(g.metric, g.value)) for _, g in sub.groupby("replication", sort=True)]
        summary[est] = MetricReport(runs=runs).summary()
    summary["mean_tpr"] = summary["full"]["mean_tpr"]
    summary["mean_fdr"] = summary["full"]["mean_fdr"]
    _write_json(summary, out / "summary.json")
    if args.export_data:
        dataset, _ = generate(ScenarioSpec(scenario_id=args.scenario, n_subjects=args.n_subjects, seed=seeds[0]))
        dataset_to_frame(dataset).to_csv(out / "data.csv", index=False)
    return EXIT_OK


def _replication_job(kwargs):
    return replication(**kwargs)


def _load_fit(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _encode_newdata(frame: pd.DataFrame, model: dict, id_col: str) -> tuple:
    """Design rows ``(x, z)`` on the original covariate scale."""
    factors = model.get("factors", {})
    columns, tv = model["columns"], model["tv"]
    known = {id_col, "frailty"} | set(factors)
    known |= {c for c in columns + tv if "[" not in c or c.split("[", 1)[0] not in factors}
    unknown = [c for c in frame.columns if c not in known]
    if unknown:
        raise SchemaError(f"unknown covariate column(s): {', '.join(unknown)}")
    encoded = {}
    for name in columns + tv:
        base = name.split("[", 1)[0]
        if base in factors and name != base:
            if base not in frame.columns:
                raise SchemaError(f"missing covariate column: {base}")
            level = name[len(base) + 1 : -1]
            values = frame[base].astype(str)
            bad = sorted(set(values) - set(factors[base]))
            if bad:
                raise SchemaError(f"unknown level(s) of {base}: {', '.join(bad)}")
            encoded[name] = (values == level).to_numpy(dtype=float)
        else:
            if name not in frame.columns:
                raise SchemaError(f"missing covariate column: {name}")
            vals = pd.to_numeric(frame[name], errors="coerce")
            if vals.isna().any():
                raise DataError(f"covariate {name!r} must be numeric")
            encoded[name] = vals.to_numpy(dtype=float)
    n = len(frame)
    X = np.column_stack([encoded[c] for c in columns]) if columns else np.zeros((n, 0))
    Z = np.column_stack([encoded[c] for c in tv]) if tv else np.zeros((n, 0))
    return X, Z


def cmd_predict(args) -> int:
    model = _load_fit(args.fit)
    frame = _read_csv(args.newdata)
    basis = SplineBasis(model["M"], model["degree"], np.asarray(model["knots"]))
    alpha = np.asarray(model["alpha"], dtype=float)
    beta = np.array([model["coefficients"][c] for c in model["columns"]], dtype=float)
    X, Z = _encode_newdata(frame, model, args.id)
    ids = frame[args.id].tolist() if args.id in frame.columns else list(range(len(frame)))
    b = frame["frailty"].to_numpy(dtype=float) if "frailty" in frame.columns else np.zeros(len(frame))
    t = np.linspace(0.0, basis.t_max, args.points)
    records = []
    for i in range(len(frame)):
        surv = np.exp(-cumulative_hazard_curve(basis, alpha, beta, t, X[i], Z[i], b[i]))
        surv = np.minimum.accumulate(surv)
        records.append(pd.DataFrame({"id": ids[i], "t": t, "survival": surv}))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    table = pd.concat(records, ignore_index=True) if records else pd.DataFrame(columns=["id", "t", "survival"])
    _write_tsv(table, out / "survival.tsv")
    return EXIT_OK


def _data_args(p: argparse.ArgumentParser, with_xi: bool = False) -> None:
    p.add_argument("input", help="counting-process CSV (one row per covariate-constant interval)")
    p.add_argument("-o", "--output", default=".", help="output directory (created if needed)")
    p.add_argument("--pen", action="append", help="penalized terms, e.g. x1+x2 (default: all remaining)")
    p.add_argument("--unpen", action="append", help="unpenalized linear terms, e.g. age")
    p.add_argument("--tv", action="append", help="terms with time-varying coefficients")
    p.add_argument("--frailty", help="cluster column for Gaussian log-frailties")
    p.add_argument("--factor", action="append", help="categorical columns (group-lasso penalized)")
    p.add_argument("--id", default="id", help="subject id column [id]")
    p.add_argument("--start", default="start", help="interval start column [start]")
    p.add_argument("--stop", default="stop", help="interval stop column [stop]")
    p.add_argument("--event", default="event", help="event flag column [event]")
    p.add_argument("--M", type=int, default=6, help="number of B-spline basis functions [6]")
    p.add_argument("--degree", type=int, default=3, help="B-spline degree [3]")
    p.add_argument("--weights", choices=("adaptive", "unit"), default="adaptive", help="lasso weights [adaptive]")
    p.add_argument("--max-outer", type=int, default=FitSettings.max_outer, help="outer iterations")
    p.add_argument("--tol-params", type=float, default=FitSettings.tol_params, help="relative parameter change")
    p.add_argument("--tol-grad", type=float, default=FitSettings.tol_grad, help="score tolerance")
    if with_xi:
        p.add_argument("--xi", type=float, default=0.0, help="lasso strength [0]")


def _grid_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", help="explicit xi values, e.g. 10+1+0.1 (default: automatic)")
    p.add_argument("--grid-length", type=int, default=30, help="automatic grid length [30]")
    p.add_argument("--grid-ratio", type=float, default=1e-3, help="smallest / largest xi [1e-3]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pencox",
        description="Penalized full-likelihood Cox frailty models with a smooth baseline hazard.",
        epilog=(
            "Exit codes: 0 success, 1 unreadable input, 2 schema mismatch, 3 non-convergence. "
            f"Set {THREADS_ENV} to run simulation replications in parallel processes."
        ),
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit at a fixed xi; writes fit.json, baseline.tsv, tv_effects.tsv")
    _data_args(p, with_xi=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("path", help="regularization path; writes paths.tsv")
    _data_args(p)
    _grid_args(p)
    p.set_defaults(func=cmd_path)

    p = sub.add_parser("cv", help="cluster-wise K-fold cross-validation; writes cv.tsv, cv.json")
    _data_args(p)
    _grid_args(p)
    p.add_argument("--K", type=int, default=5, help="number of folds [5]")
    p.add_argument("--seed", type=int, default=0, help="fold assignment seed [0]")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("simulate", help="simulation study; writes metrics.tsv, summary.json")
    p.add_argument("--scenario", type=int, choices=(1, 2, 3, 4), required=True)
    p.add_argument("--replications", type=int, default=20, help="number of runs [20]")
    p.add_argument("--seed", type=int, default=0, help="seed of the first run; run r uses seed + r [0]")
    p.add_argument("--n-subjects", type=int, default=500, help="subjects per run [500]")
    p.add_argument("--xi", type=float, default=None, help="fixed xi instead of cross-validation")
    p.add_argument("--K", type=int, default=5, help="cross-validation folds [5]")
    p.add_argument("--grid-length", type=int, default=30, help="xi grid length [30]")
    p.add_argument("--export-data", action="store_true", help="also write the first run's data as data.csv")
    p.add_argument("-o", "--output", default=".", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict", help="survival curves for new covariate rows; writes survival.tsv")
    p.add_argument("fit", help="fit.json written by 'pencox fit'")
    p.add_argument("newdata", help="CSV with one row per subject: id, covariates, optional frailty")
    p.add_argument("-o", "--output", default=".", help="output directory")
    p.add_argument("--id", default="id", help="id column [id]")
    p.add_argument("--points", type=int, default=CURVE_POINTS, help="time points per curve [200]")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SchemaError, DataError, ConfigurationError, DomainError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
