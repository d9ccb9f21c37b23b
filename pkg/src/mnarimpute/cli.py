"""Command-line front end.

Subcommands: ``simulate`` runs a scenario config and writes a long-format
results CSV, a JSON summary and boxplot figures; ``impute`` completes a
numeric CSV with any method; ``grid`` writes lambda-sweep diagnostics;
``report`` re-renders figures from a results CSV; ``version`` prints the
package version.  The MNAR_LOG environment variable (off|info|debug)
controls log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .dataio import CsvFormatError, format_value, fully_missing_columns, read_matrix_csv, write_matrix_csv
from .mcem import McemConfig
from .mechanism import MechanismParams, MechanismSpec
from .simulation import (
    METHODS,
    Scenario,
    auto_lambda_grid,
    estimate_sigma2,
    fit_single,
    holdout_lambda_select,
    mean_impute,
    run_campaign,
    scenario_to_dict,
)

SCHEMA_VERSION = 1

log = logging.getLogger("mnarimpute")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario config parsing

_SCENARIO_KEYS = {
    "n", "p", "rank", "sigma2", "replications", "seed", "methods",
    "lambda_grid", "grid_size", "grid_span", "ns", "proposal_factor",
    "max_em_iters", "em_tau", "em_extra_iters", "solver_max_iters",
    "solver_rel_tol", "target_overall_missing_rate", "decorrelate_driver",
    "mcem_phi_sharing", "scale_columns", "mechanism",
}
_MECHANISM_KEYS = {"family", "target_columns", "driver_column", "phi_per_column", "phi_shared"}
_OUTPUT_KEYS = {"directory", "figures"}


def _reject_unknown(table: dict, allowed: set, where: str) -> None:
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}" if where else f"unknown key {key}")


def parse_scenario_config(path) -> tuple[Scenario, dict]:
    """Read and validate a TOML scenario config; returns (scenario, output options)."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    _reject_unknown(doc, {"schema_version", "scenario", "output"}, "")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}"
        )
    if "scenario" not in doc:
        raise ConfigError("missing [scenario] table")
    sc = dict(doc["scenario"])
    _reject_unknown(sc, _SCENARIO_KEYS, "scenario")
    if "mechanism" not in sc:
        raise ConfigError("missing [scenario.mechanism] table")
    mech = dict(sc.pop("mechanism"))
    _reject_unknown(mech, _MECHANISM_KEYS, "scenario.mechanism")

    params = None
    if "phi_per_column" in mech and "phi_shared" in mech:
        raise ConfigError("give either phi_per_column or phi_shared, not both")
    if "phi_per_column" in mech:
        pairs = {}
        for col, pair in mech.pop("phi_per_column").items():
            if len(pair) != 2:
                raise ConfigError(f"phi_per_column[{col}] must be [phi1, phi2]")
            pairs[int(col)] = (float(pair[0]), float(pair[1]))
        params = MechanismParams.per_column(pairs)
    elif "phi_shared" in mech:
        pair = mech.pop("phi_shared")
        if len(pair) != 2:
            raise ConfigError("phi_shared must be [phi1, phi2]")
        params = MechanismParams.shared((float(pair[0]), float(pair[1])))

    try:
        spec = MechanismSpec(
            family=mech["family"],
            target_columns=tuple(mech["target_columns"]),
            params=params,
            driver_column=mech.get("driver_column"),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"scenario.mechanism: {exc}") from None

    if "methods" in sc:
        sc["methods"] = tuple(sc["methods"])
    if "lambda_grid" in sc and sc["lambda_grid"] is not None:
        sc["lambda_grid"] = tuple(float(v) for v in sc["lambda_grid"])
    try:
        scenario = Scenario(mechanism=spec, **sc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from None

    output = dict(doc.get("output", {}))
    _reject_unknown(output, _OUTPUT_KEYS, "output")
    return scenario, output


# ---------------------------------------------------------------------------
# simulate

RESULT_COLUMNS = ("method", "replication", "prediction_error", "total_error", "lambda", "wall_time_s")


def _records_to_rows(records):
    rows = []
    for r in records:
        rows.append(
            {
                "method": r.method,
                "replication": r.replication,
                "prediction_error": r.prediction_error,
                "total_error": r.total_error,
                "lambda": r.lambda_selected,
                "wall_time_s": r.wall_time_s,
            }
        )
    return rows


def _write_results_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["method"],
                    row["replication"],
                    format_value(row["prediction_error"]),
                    format_value(row["total_error"]),
                    format_value(row["lambda"]),
                    format_value(row["wall_time_s"]),
                ]
            )


def cmd_simulate(args) -> int:
    try:
        scenario, output_opts = parse_scenario_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        from dataclasses import replace

        scenario = replace(scenario, seed=args.seed)
    out_dir = Path(args.output or output_opts.get("directory", "results"))
    out_dir.mkdir(parents=True, exist_ok=True)
    want_figures = output_opts.get("figures", True) and not args.no_figures

    log.info("running campaign: %d replications, methods=%s", scenario.replications, scenario.methods)
    result = run_campaign(scenario, n_jobs=args.threads)

    rows = _records_to_rows(result.records)
    results_csv = out_dir / "results.csv"
    _write_results_csv(results_csv, rows)

    summary = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "seed": scenario.seed,
        "scenario": scenario_to_dict(scenario),
        "mechanism_centers_solved": result.mechanism_centers,
        "summary": result.summary,
        "files": {"results_csv": str(results_csv)},
    }
    figures = []
    if want_figures:
        from .figures import render_error_boxplots

        figures = render_error_boxplots(rows, out_dir)
        summary["files"]["figures"] = figures
    summary_json = out_dir / "summary.json"
    with open(summary_json, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, allow_nan=True)
        fh.write("\n")
    print(f"wrote {results_csv}")
    print(f"wrote {summary_json}")
    for f in figures:
        print(f"wrote {f}")
    n_failed = sum(1 for r in result.records if r.error)
    if n_failed:
        print(f"note: {n_failed} method-replication fits failed (listed in summary.json)")
    return 0


# ---------------------------------------------------------------------------
# impute

def _resolve_sigma2(args, y, mask) -> tuple[float | None, dict]:
    info: dict = {}
    if args.sigma is not None:
        info["sigma2"] = args.sigma**2
        info["sigma2_source"] = "given"
        return args.sigma**2, info
    if args.estimate_sigma:
        if args.rank is None:
            raise ConfigError("--estimate-sigma requires --rank")
        completed = mean_impute(y, mask)
        filled = np.where(mask == 1.0, y, completed)
        sigma2 = estimate_sigma2(filled, args.rank)
        info["sigma2"] = sigma2
        info["sigma2_source"] = f"estimated (rank {args.rank}, mean-imputed)"
        return sigma2, info
    return None, info


def cmd_impute(args) -> int:
    try:
        header, y, mask = read_matrix_csv(args.input, na_token=args.na_token)
    except (CsvFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    bad = fully_missing_columns(mask)
    if bad:
        names = ", ".join(f"{header[j]!r} (column {j + 1})" for j in bad)
        print(f"error: fully missing columns: {names}", file=sys.stderr)
        return 2
    if args.method not in METHODS:
        print(f"error: unknown method {args.method!r} (choose from {', '.join(METHODS)})", file=sys.stderr)
        return 2

    rng = np.random.default_rng(args.seed)
    try:
        sigma2, meta = _resolve_sigma2(args, y, mask)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    needs_sigma = args.method in ("model_mcem", "mask_expfam")
    if needs_sigma and sigma2 is None:
        print("error: this method needs --sigma or --estimate-sigma --rank", file=sys.stderr)
        return 2

    mcem_cfg = None
    if args.method == "model_mcem":
        mcem_cfg = McemConfig(
            lam=1.0,
            sigma=math.sqrt(sigma2),
            ns=args.ns,
            max_em_iters=args.max_em_iters,
            scale_columns=args.scale_columns,
        )

    def fit(y_fit, mask_fit, lam):
        theta, _ = fit_single(
            args.method, y_fit, mask_fit, lam,
            sigma2=sigma2, rng=np.random.default_rng(args.seed), mcem_config=mcem_cfg,
        )
        return theta

    try:
        if args.method == "mean_impute":
            lam = float("nan")
        elif args.lam is not None:
            lam = args.lam
        else:
            design = np.hstack([mask * np.where(mask == 1.0, y, 0.0), mask]) \
                if args.method in ("mask_concat", "mask_expfam") else mask * np.where(mask == 1.0, y, 0.0)
            grid = auto_lambda_grid(design, args.grid_size)
            if not (mask == 0.0).any():
                lam = grid[len(grid) // 2]
                meta["lambda_note"] = "no missing cells; mid-grid lambda used"
            else:
                lam, score = holdout_lambda_select(fit, y, mask, grid, np.random.default_rng(args.seed))
                meta["lambda_grid"] = list(grid)
                meta["holdout_score"] = score
        theta_hat, fit_info = fit_single(
            args.method, y, mask, 0.0 if math.isnan(lam) else lam,
            sigma2=sigma2, rng=rng, mcem_config=mcem_cfg,
        )
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

    if args.method == "mean_impute":
        completed = theta_hat  # the baseline replaces every value by the column mean
    else:
        completed = np.where(mask == 1.0, y, theta_hat)
    write_matrix_csv(args.output, header, completed)

    meta.update(fit_info)
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "method": args.method,
        "lambda": None if math.isnan(lam) else lam,
        "seed": args.seed,
        "na_token": args.na_token,
        "input": str(args.input),
        "output": str(args.output),
        "rows": int(y.shape[0]),
        "cols": int(y.shape[1]),
        "missing_cells": int((mask == 0.0).sum()),
        "scale_columns": bool(args.scale_columns),
        **meta,
    }
    meta_path = str(args.output) + ".meta.json"
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.output}")
    print(f"wrote {meta_path}")
    return 0


# ---------------------------------------------------------------------------
# grid diagnostics

def cmd_grid(args) -> int:
    try:
        header, y, mask = read_matrix_csv(args.input, na_token=args.na_token)
    except (CsvFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.method == "mean_impute":
        print("error: mean_impute has no lambda to sweep", file=sys.stderr)
        return 2
    rng = np.random.default_rng(args.seed)
    try:
        sigma2, _ = _resolve_sigma2(args, y, mask)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.method in ("model_mcem", "mask_expfam") and sigma2 is None:
        print("error: this method needs --sigma or --estimate-sigma --rank", file=sys.stderr)
        return 2

    design = np.hstack([mask * np.where(mask == 1.0, y, 0.0), mask]) \
        if args.method in ("mask_concat", "mask_expfam") else mask * np.where(mask == 1.0, y, 0.0)
    grid = list(args.lambda_grid) if args.lambda_grid else list(auto_lambda_grid(design, args.grid_size))

    from .linalg import numerical_rank

    rows = []
    for lam in grid:
        try:
            theta_hat, info = fit_single(args.method, y, mask, lam, sigma2=sigma2, rng=rng)
            rows.append(
                {
                    "lambda": lam,
                    "rank": numerical_rank(theta_hat),
                    "iterations": info.get("iterations", info.get("em_iterations", "")),
                    "status": "ok",
                }
            )
        except Exception as exc:
            rows.append({"lambda": lam, "rank": "", "iterations": "", "status": f"{type(exc).__name__}: {exc}"})
    with open(args.output, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "rank", "iterations", "status"])
        for row in rows:
            writer.writerow([format_value(row["lambda"]), row["rank"], row["iterations"], row["status"]])
    print(f"wrote {args.output}")
    return 0


def cmd_report(args) -> int:
    try:
        with open(args.results, "r", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not rows:
        print("error: results file has no rows", file=sys.stderr)
        return 2
    from .figures import render_error_boxplots

    written = render_error_boxplots(rows, args.output or ".")
    for f in written:
        print(f"wrote {f}")
    return 0


# ---------------------------------------------------------------------------

def _setup_logging() -> None:
    level_name = os.environ.get("MNAR_LOG", "off").lower()
    if level_name == "off":
        logging.basicConfig(level=logging.WARNING)
    elif level_name == "info":
        logging.basicConfig(level=logging.INFO)
    elif level_name == "debug":
        logging.basicConfig(level=logging.DEBUG)
    else:
        logging.basicConfig(level=logging.WARNING)
        log.warning("unknown MNAR_LOG value %r (use off|info|debug)", level_name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mnarimpute",
        description="Low-rank estimation and imputation for informative missing data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a simulation campaign from a scenario config")
    sim.add_argument("--config", required=True, help="scenario config (TOML)")
    sim.add_argument("--output", help="output directory (overrides config)")
    sim.add_argument("--seed", type=int, help="override the scenario seed")
    sim.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                     help="parallel replication workers (default: available cores)")
    sim.add_argument("--no-figures", action="store_true", help="skip boxplot rendering")
    sim.set_defaults(func=cmd_simulate)

    imp = sub.add_parser("impute", help="complete a numeric CSV")
    imp.add_argument("--input", required=True)
    imp.add_argument("--output", required=True)
    imp.add_argument("--method", required=True, help=f"one of {', '.join(METHODS)}")
    imp.add_argument("--lambda", dest="lam", type=float,
                     help="penalty weight; omit for automatic selection on a held-out grid")
    imp.add_argument("--grid-size", type=int, default=15)
    imp.add_argument("--sigma", type=float, help="known noise standard deviation")
    imp.add_argument("--estimate-sigma", action="store_true",
                     help="estimate the noise level from a truncated SVD residual")
    imp.add_argument("--rank", type=int, help="rank for --estimate-sigma")
    imp.add_argument("--seed", type=int, default=0)
    imp.add_argument("--na-token", default="NA")
    imp.add_argument("--ns", type=int, default=1000, help="Monte-Carlo draws per missing cell")
    imp.add_argument("--max-em-iters", type=int, default=100)
    imp.add_argument("--scale-columns", action="store_true",
                     help="rescale columns to unit variance before each EM iteration")
    imp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    imp.set_defaults(func=cmd_impute)

    grd = sub.add_parser("grid", help="lambda sweep diagnostics on a CSV dataset")
    grd.add_argument("--input", required=True)
    grd.add_argument("--output", required=True)
    grd.add_argument("--method", required=True)
    grd.add_argument("--lambda-grid", type=float, nargs="*", help="explicit grid (descending)")
    grd.add_argument("--grid-size", type=int, default=15)
    grd.add_argument("--sigma", type=float)
    grd.add_argument("--estimate-sigma", action="store_true")
    grd.add_argument("--rank", type=int)
    grd.add_argument("--seed", type=int, default=0)
    grd.add_argument("--na-token", default="NA")
    grd.set_defaults(func=cmd_grid)

    rep = sub.add_parser("report", help="render boxplots from a results CSV")
    rep.add_argument("--results", required=True)
    rep.add_argument("--output", help="output directory (default: current)")
    rep.set_defaults(func=cmd_report)

    ver = sub.add_parser("version", help="print the package version")
    ver.set_defaults(func=lambda args: print(__version__) or 0)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    rc = args.func(args)
    return 0 if rc is None else rc


if __name__ == "__main__":
    sys.exit(main())
