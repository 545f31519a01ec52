"""Command-line front end: fit CSV data, tune penalties, simulate, benchmark.

Matrices come in as headerless CSV (``--header`` skips one header row) and
structured results go out as JSON documents; benchmark runs additionally
write one CSV row per replicate. Exit codes: 0 success, 2 input error,
3 numerical failure, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .exceptions import NumericalError
from .simulation import (
    CASE_PRESETS,
    case_scenario,
    generate,
    make_scenario,
    run_replicates,
)
from .solver import ArmijoConfig, SolverConfig, fit
from .tuning import TuningGrid, grid_search

SCHEMA_VERSION = 1

# Non-numeric note carried in benchmark documents: how estimated factor
# columns are aligned with true columns when ranks disagree.
ALIGNMENT_NOTE = (
    "support metrics compare estimated columns in retained order against "
    "true columns 1..r; missing columns count as all-zero"
)


def read_matrix_csv(path, has_header: bool = False) -> np.ndarray:
    """Read a dense numeric matrix from a comma-separated file.

    Rows must have equal length; scientific notation is accepted. Errors
    carry the offending line (and column) number.
    """
    rows: list[list[float]] = []
    expected: int | None = None
    skip_header = has_header
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if skip_header:
                skip_header = False
                continue
            cells = [c.strip() for c in stripped.split(",")]
            if expected is None:
                expected = len(cells)
            elif len(cells) != expected:
                raise ValueError(
                    f"{path}: line {lineno}: expected {expected} values, "
                    f"found {len(cells)}"
                )
            parsed = []
            for col, cell in enumerate(cells, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: line {lineno}, column {col}: "
                        f"could not parse {cell!r} as a number"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    return np.array(rows, dtype=float)


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=float), delimiter=",", fmt="%.17g")


def _factors_payload(factors) -> dict:
    return {
        "u": factors.u.tolist(),
        "d": factors.d.tolist(),
        "v": factors.v.tolist(),
        "rank": factors.rank,
    }


def _fit_payload(result) -> dict:
    return {
        "rank": result.factors.rank,
        "sse": result.sse,
        "df": result.df,
        "bic": result.bic,
        "iterations": result.iterations,
        "converged": result.converged,
        "primal_residuals": list(result.primal_residuals),
    }


def _document(command: str, options: dict, result: dict, factors, timing) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "options": options,
        "result": result,
        "factors": _factors_payload(factors) if factors is not None else None,
        "timing": timing,
    }


def write_document(path, document: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _solver_config(args, lambda1: float = 0.0, lambda2: float = 0.0) -> SolverConfig:
    rho = None if args.rho is None else (args.rho, args.rho, args.rho)
    return SolverConfig(
        lambda1=lambda1,
        lambda2=lambda2,
        alpha=args.alpha,
        rho=rho,
        max_iter=args.max_iter,
        primal_tol=args.primal_tol,
        objective_tol=args.objective_tol,
        armijo=ArmijoConfig(),
    )


def _tuning_grid(args) -> TuningGrid:
    return TuningGrid(
        lambda_max=args.lambda_max,
        lambda_min=args.lambda_min,
        points_per_axis=args.grid_points,
    )


def _grid_weights_gammas(args, x, y, rank):
    """Initialization-derived adaptive weights with the requested exponents."""
    from .solver import FactorTriple, initialize
    from .tuning import adaptive_weights

    init = initialize(x, y, rank)
    weights = adaptive_weights(
        FactorTriple(u=init.u, d=init.d, v=init.v, rank=rank),
        gamma_u=args.gamma_u,
        gamma_v=args.gamma_v,
        gamma_d=args.gamma_d,
    )
    return init, weights


def _load_xy(args) -> tuple[np.ndarray, np.ndarray]:
    x = read_matrix_csv(args.x, has_header=args.header)
    y = read_matrix_csv(args.y, has_header=args.header)
    if x.shape[0] != y.shape[0]:
        raise ValueError(
            f"X has {x.shape[0]} rows but Y has {y.shape[0]}; row counts must match"
        )
    return x, y


def _cells_payload(report) -> list[dict]:
    return [dataclasses.asdict(cell) for cell in report.cells]


def cmd_fit(args) -> int:
    x, y = _load_xy(args)
    start = time.monotonic()
    if args.tune:
        init, weights = _grid_weights_gammas(args, x, y, args.rank)
        report = grid_search(
            x, y, args.rank, _tuning_grid(args), _solver_config(args),
            init=init, weights=weights,
        )
        result = report.best_fit
        payload = {
            "fit": _fit_payload(result),
            "tuning": {
                "best_index": report.best_index,
                "lambda1": report.best_cell.lambda1,
                "lambda2": report.best_cell.lambda2,
                "cells": _cells_payload(report),
            },
        }
    else:
        if args.lambda1 is None or args.lambda2 is None:
            raise ValueError("provide --lambda1 and --lambda2, or pass --tune")
        init, weights = _grid_weights_gammas(args, x, y, args.rank)
        config = dataclasses.replace(
            _solver_config(args, args.lambda1, args.lambda2), weights=weights
        )
        result = fit(x, y, args.rank, config, init=init)
        payload = {"fit": _fit_payload(result)}
    elapsed = time.monotonic() - start

    print(f"rank: {result.factors.rank}")
    print(f"bic: {result.bic:.6g}")
    print(f"sse: {result.sse:.6g}")
    print(f"iterations: {result.iterations}")
    if args.out:
        document = _document(
            "fit",
            _echo_options(args),
            payload,
            result.factors,
            {"seconds": elapsed},
        )
        write_document(args.out, document)
    return 0


def cmd_tune(args) -> int:
    x, y = _load_xy(args)
    start = time.monotonic()
    init, weights = _grid_weights_gammas(args, x, y, args.rank)
    report = grid_search(
        x, y, args.rank, _tuning_grid(args), _solver_config(args),
        init=init, weights=weights,
    )
    elapsed = time.monotonic() - start
    best = report.best_fit
    print(f"best lambda1: {report.best_cell.lambda1:.6g}")
    print(f"best lambda2: {report.best_cell.lambda2:.6g}")
    print(f"rank: {best.factors.rank}")
    print(f"bic: {best.bic:.6g}")
    print(f"sse: {best.sse:.6g}")
    if args.out:
        document = _document(
            "tune",
            _echo_options(args),
            {
                "best_index": report.best_index,
                "best": _fit_payload(best),
                "cells": _cells_payload(report),
            },
            best.factors,
            {"seconds": elapsed},
        )
        write_document(args.out, document)
    return 0


def cmd_simulate(args) -> int:
    scenario = _scenario_from_args(args)
    data = generate(scenario)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out_dir / "x.csv", data.x)
    write_matrix_csv(out_dir / "y.csv", data.y)
    truth = scenario.truth
    document = _document(
        "simulate",
        _echo_options(args),
        {
            "sigma": data.scenario.sigma,
            "coefficient": truth.coefficient().tolist(),
            "x_path": str(out_dir / "x.csv"),
            "y_path": str(out_dir / "y.csv"),
        },
        truth,
        None,
    )
    write_document(out_dir / "truth.json", document)
    print(f"n: {scenario.n}  p: {scenario.p}  q: {scenario.q}  rank: {scenario.r}")
    print(f"sigma: {data.scenario.sigma:.6g}")
    print(f"wrote: {out_dir / 'x.csv'}, {out_dir / 'y.csv'}, {out_dir / 'truth.json'}")
    return 0


_BENCH_COLUMNS = [
    "replicate",
    "seed",
    "sigma",
    "er_xc",
    "rank_true",
    "rank_est",
    "rank_abs_err",
    "recall",
    "precision",
    "f_measure",
    "f_measure_halved",
    "lambda1",
    "lambda2",
    "bic",
    "sse",
    "df",
    "converged",
    "iterations",
    "error",
]


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_replicate_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_BENCH_COLUMNS)
        for row in rows:
            writer.writerow(_format_cell(row.get(col)) for col in _BENCH_COLUMNS)


def cmd_bench(args) -> int:
    scenario = _scenario_from_args(args)
    start = time.monotonic()
    summary, rows = run_replicates(
        scenario,
        args.replicates,
        _tuning_grid(args),
        _solver_config(args),
        threads=args.threads,
    )
    elapsed = time.monotonic() - start

    out = Path(args.out)
    csv_path = Path(args.out_csv) if args.out_csv else out.with_suffix(".csv")
    write_replicate_csv(csv_path, rows)
    # Benchmark documents must be byte-identical across reruns and thread
    # counts, so wall-clock timing stays out of them (reported on stdout).
    document = _document(
        "bench",
        _echo_options(args),
        {
            "summary": dataclasses.asdict(summary),
            "column_alignment_note": ALIGNMENT_NOTE,
        },
        None,
        None,
    )
    write_document(out, document)

    print(f"replicates: {summary.replicates}  failed: {summary.failed}")
    print(f"er_xc: {summary.er_xc:.6g}  (sd {summary.er_xc_sd:.6g})")
    print(f"er_rank: {summary.er_rank:.6g}")
    print(
        f"f_measure: {summary.f_measure:.6g}  "
        f"(halved {summary.f_measure_halved:.6g})"
    )
    print(f"elapsed_seconds: {elapsed:.1f}")
    return 0


def _scenario_from_args(args):
    if getattr(args, "case", None) is not None:
        return case_scenario(args.case, args.rank, snr=args.snr, seed=args.seed)
    missing = [
        name
        for name in ("n", "p", "q", "rho_noise")
        if getattr(args, name, None) is None
    ]
    if missing:
        raise ValueError(
            "provide --case or all of --n/--p/--q/--rho-noise "
            f"(missing: {', '.join(missing)})"
        )
    return make_scenario(
        args.n, args.p, args.q, args.rank, args.rho_noise, snr=args.snr, seed=args.seed
    )


def _echo_options(args) -> dict:
    # Execution-environment flags stay out of the echo: documents must be
    # byte-identical across reruns, output locations and thread counts.
    skip = {"func", "threads", "out", "out_csv", "out_dir"}
    return {
        key: value
        for key, value in sorted(vars(args).items())
        if key not in skip and not key.startswith("_")
    }


def _add_solver_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--alpha", type=float, default=0.5,
                        help="trade-off between elementwise and columnwise V penalties")
    parser.add_argument("--gamma-u", type=float, default=2.0, dest="gamma_u")
    parser.add_argument("--gamma-v", type=float, default=2.0, dest="gamma_v")
    parser.add_argument("--gamma-d", type=float, default=2.0, dest="gamma_d")
    parser.add_argument("--rho", type=float, default=None,
                        help="quadratic coupling parameter for all three blocks "
                        "(default: 5 * n, scaled with the sample size)")
    parser.add_argument("--max-iter", type=int, default=500, dest="max_iter")
    parser.add_argument("--primal-tol", type=float, default=1e-4, dest="primal_tol")
    parser.add_argument("--objective-tol", type=float, default=1e-6,
                        dest="objective_tol")


def _add_grid_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--grid-points", type=int, default=10, dest="grid_points")
    parser.add_argument("--lambda-max", type=float, default=1.0, dest="lambda_max")
    parser.add_argument("--lambda-min", type=float, default=1e-15, dest="lambda_min")


def _add_scenario_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--case", type=int, choices=sorted(CASE_PRESETS),
                        help="benchmark preset (overrides --n/--p/--q/--rho-noise)")
    parser.add_argument("--n", type=int)
    parser.add_argument("--p", type=int)
    parser.add_argument("--q", type=int)
    parser.add_argument("--rho-noise", type=float, dest="rho_noise",
                        help="AR(1) correlation of the noise covariance")
    parser.add_argument("--snr", type=float, default=0.5)
    parser.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srrr",
        description="Sparse reduced-rank regression with joint rank and "
        "variable selection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit one penalty setting (or --tune)")
    p_fit.add_argument("--x", required=True, help="predictor matrix CSV")
    p_fit.add_argument("--y", required=True, help="response matrix CSV")
    p_fit.add_argument("--rank", type=int, required=True)
    p_fit.add_argument("--lambda1", type=float, default=None)
    p_fit.add_argument("--lambda2", type=float, default=None)
    p_fit.add_argument("--tune", action="store_true",
                       help="select lambda1/lambda2 by BIC grid search")
    p_fit.add_argument("--header", action="store_true",
                       help="skip one header row in the CSV inputs")
    p_fit.add_argument("--out", default=None, help="result document path (JSON)")
    _add_solver_flags(p_fit)
    _add_grid_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_tune = sub.add_parser("tune", help="BIC grid search over penalties")
    p_tune.add_argument("--x", required=True)
    p_tune.add_argument("--y", required=True)
    p_tune.add_argument("--rank", type=int, required=True)
    p_tune.add_argument("--header", action="store_true")
    p_tune.add_argument("--out", default=None)
    _add_solver_flags(p_tune)
    _add_grid_flags(p_tune)
    p_tune.set_defaults(func=cmd_tune)

    p_sim = sub.add_parser("simulate", help="write one synthetic dataset to CSV")
    p_sim.add_argument("--rank", type=int, required=True)
    p_sim.add_argument("--out-dir", required=True, dest="out_dir")
    _add_scenario_flags(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_bench = sub.add_parser("bench", help="Monte Carlo benchmark over replicates")
    p_bench.add_argument("--rank", type=int, required=True)
    p_bench.add_argument("--replicates", type=int, required=True)
    p_bench.add_argument("--threads", type=int, default=1)
    p_bench.add_argument("--out", required=True, help="summary document path (JSON)")
    p_bench.add_argument("--out-csv", default=None, dest="out_csv",
                         help="per-replicate CSV path (default: --out with .csv)")
    _add_scenario_flags(p_bench)
    _add_solver_flags(p_bench)
    _add_grid_flags(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # internal invariant breach
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
