"""
Command-line entry point for gpsubspace

    python main.py fit DATA_DIR MODEL_DIR [--kernel kernel.json] [--beta B ...] [--jitter J]
    python main.py predict MODEL_DIR THETAS_CSV OUT [--t T] [--dump-bases DIR] [--interval]
    python main.py tune MODEL_DIR [--lower L --upper U] [--out TRACE_CSV] [--update]
    python main.py sample GRID_CSV OUT_DIR --n N --k K [--beta B ...] [--seed S]
    python main.py benchmark CONFIG_JSON OUT_CSV [--seed S] [--nr NR]
    python main.py loocv MODEL_DIR [--beta B ...]

Exit codes: 0 ok, 1 internal or numerical failure, 2 malformed input, 3 shape mismatch.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import Settings, load_settings
from error_handler import InputError, MalformedInputError, configure_logging, error_handler
from gps import GpsModel, predict_many, predictive_interval, sample_path
from kernel import KernelSpec
from matrix_io import MatrixStore, read_points, write_stiefel
from model_selection import (
    default_lengthscales,
    log_modified_marginal_likelihood,
    loocv_error,
    loocv_gradient,
    loocv_log_density,
    tune,
)
from prom import BenchmarkConfig, run_benchmark
from report_analyzer import ReportAnalyzer

logger = logging.getLogger("gpsubspace")


def _require(path: str, directory: bool = False) -> Path:
    p = Path(path)
    if not (p.is_dir() if directory else p.is_file()):
        kind = "directory" if directory else "file"
        raise MalformedInputError(f"input {kind} not found: {path}", context={"path": path})
    return p


def _emit(rows: List[Dict[str, Any]], fmt: str, out: Optional[str] = None) -> None:
    """Write rows as CSV or JSON, to a file when given, stdout otherwise"""
    if fmt == "json":
        text = json.dumps(rows if len(rows) != 1 else rows[0], indent=2, default=float)
        if out:
            Path(out).write_text(text + "\n")
        else:
            print(text)
        return
    frame = pd.DataFrame(rows)
    if out:
        frame.to_csv(out, index=False, float_format="%.17g")
    else:
        frame.to_csv(sys.stdout, index=False, float_format="%.17g")


def _kernel_from_args(args: argparse.Namespace, model_kernel: Optional[KernelSpec] = None) -> Optional[KernelSpec]:
    """Kernel from --kernel, then --beta/--jitter overrides; None when nothing was given"""
    spec = model_kernel
    if getattr(args, "kernel", None):
        spec = KernelSpec.from_json(_require(args.kernel).read_text())
    beta = getattr(args, "beta", None)
    if beta is not None:
        if spec is None:
            spec = KernelSpec(lengthscales=np.asarray(beta, dtype=float))
        else:
            spec = spec.with_lengthscales(beta)
    jitter = getattr(args, "jitter", None)
    if jitter is not None:
        if spec is None:
            raise InputError("--jitter needs --beta or --kernel")
        spec = replace(spec, jitter=float(jitter))
    return spec


def cmd_fit(args: argparse.Namespace, settings: Settings) -> int:
    store = MatrixStore()
    points, bases = store.load_dataset(_require(args.data_dir, directory=True))
    kernel = _kernel_from_args(args)
    if kernel is None:
        # Rule-of-thumb length-scales for the training design
        kernel = KernelSpec(lengthscales=np.ones(1 if args.shared else points.shape[1]), shared=args.shared)
        model = store.fit_dataset(args.data_dir, kernel)
        model = model.with_kernel(kernel.with_lengthscales(default_lengthscales(model)))
    else:
        model = store.fit_dataset(args.data_dir, kernel)
    store.save_model(args.model_dir, model)
    _emit([{"n": model.n, "k": model.k, "l": model.l, "r": model.rank}], args.format)
    return 0


def _load_model(args: argparse.Namespace) -> GpsModel:
    model = MatrixStore().load_model(_require(args.model_dir, directory=True))
    kernel = _kernel_from_args(args, model.kernel)
    if kernel is not model.kernel:
        model = model.with_kernel(kernel)
    return model


def cmd_predict(args: argparse.Namespace, settings: Settings) -> int:
    model = _load_model(args)
    thetas = read_points(_require(args.thetas))
    t = model.k if args.t is None else args.t
    preds = predict_many(model, thetas, t=t, num_threads=settings.num_threads)
    rng = np.random.default_rng(args.seed)

    if args.dump_bases:
        Path(args.dump_bases).mkdir(parents=True, exist_ok=True)

    rows = []
    for i, (theta, pred) in enumerate(zip(thetas, preds)):
        row: Dict[str, Any] = {f"theta_{j + 1}": float(v) for j, v in enumerate(theta)}
        row["epsilon2"] = float(pred.noise_variance)
        for j, lam in enumerate(pred.variances):
            row[f"lambda_{j + 1}"] = float(lam)
        row["prior_dominated"] = bool(pred.prior_dominated)
        if args.interval:
            row["interval_95"] = predictive_interval(pred, rng, level=0.95, draws=args.draws)
        rows.append(row)
        if args.dump_bases:
            write_stiefel(Path(args.dump_bases) / f"basis_{i}.csv", pred.mean_basis())

    _emit(rows, args.format, args.out)
    logger.info(f"Wrote {len(rows)} predictions to {args.out}")
    return 0


def cmd_tune(args: argparse.Namespace, settings: Settings) -> int:
    model = _load_model(args)
    bounds = None
    if args.lower is not None or args.upper is not None:
        if args.lower is None or args.upper is None:
            raise InputError("--lower and --upper must be given together")
        bounds = (args.lower, args.upper)
    result = tune(model, bounds=bounds, init=args.init, max_iters=args.max_iters,
                  threshold=args.threshold, num_threads=settings.num_threads)
    if args.update:
        tuned = model.with_kernel(model.kernel.with_lengthscales(result.beta_star))
        MatrixStore().save_model(args.model_dir, tuned)

    payload = result.to_dict()
    payload.pop("trace")
    if args.format == "json":
        if args.out:
            result.trace_frame().to_csv(args.out, index=False, float_format="%.17g")
        print(json.dumps(payload, indent=2))
        return 0

    # Trace goes to --out or stdout; the summary row only accompanies a trace file
    result.trace_frame().to_csv(args.out or sys.stdout, index=False, float_format="%.17g")
    if args.out:
        _emit([{**{f"beta_{j + 1}": b for j, b in enumerate(payload["beta_star"])},
                "epsilon2": payload["best_error"], "converged": payload["converged"]}], "csv")
    return 0


def cmd_sample(args: argparse.Namespace, settings: Settings) -> int:
    grid = read_points(_require(args.grid))
    kernel = _kernel_from_args(args)
    if kernel is None:
        kernel = KernelSpec(lengthscales=np.ones(grid.shape[1]))
    rng = np.random.default_rng(args.seed)
    draws = sample_path(grid, kernel, args.n, args.k, rng)
    MatrixStore().save_dataset(args.out_dir, grid, draws)
    logger.info(f"Sampled {len(draws)} subspaces into {args.out_dir}")
    return 0


def cmd_benchmark(args: argparse.Namespace, settings: Settings) -> int:
    config = BenchmarkConfig.from_json(_require(args.config).read_text())
    if args.seed is not None:
        config = replace(config, train_seed=args.seed, test_seed=args.seed + 1)
    if args.nr is not None:
        config = replace(config, interp={**config.interp, "n_r": args.nr})
    report = run_benchmark(config, args.out, num_threads=settings.num_threads)

    analyzer = ReportAnalyzer()
    for line in analyzer.generate_insights(report.rows):
        logger.info(line)
    summary = {"rows": len(report.rows), "rank": report.rank,
               "beta": report.beta.tolist(), "fit_seconds": report.fit_seconds}
    print(json.dumps(summary, indent=2))
    return 0


def cmd_loocv(args: argparse.Namespace, settings: Settings) -> int:
    model = _load_model(args)
    workers = settings.num_threads
    report = loocv_error(model, num_threads=workers)
    report.gradient = loocv_gradient(model, num_threads=workers)
    payload = report.to_dict()
    payload["log_marginal_likelihood"] = log_modified_marginal_likelihood(model)
    payload["loocv_log_density"] = loocv_log_density(model, num_threads=workers)
    print(json.dumps(payload, indent=2))
    return 0


def _add_format_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--format", choices=("csv", "json"), default="csv")


def _add_kernel_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--kernel", help="Kernel JSON file")
    parser.add_argument("--beta", type=float, nargs="+", help="Length-scales")
    parser.add_argument("--jitter", type=float, help="Diagonal jitter of the correlation matrix")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpsubspace",
                                     description="Gaussian process subspace regression")
    parser.add_argument("--threads", type=int, help="Worker cap (GPS_NUM_THREADS otherwise)")
    parser.add_argument("--log-level", help="Logging level (GPS_LOG_LEVEL otherwise)")
    parser.add_argument("--log-file", help="Log file (GPS_LOG_FILE otherwise)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="Fit a model to a dataset directory")
    p.add_argument("data_dir")
    p.add_argument("model_dir")
    p.add_argument("--shared", action="store_true", help="One length-scale for every dimension")
    _add_format_flag(p)
    _add_kernel_flags(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("predict", help="Predict subspaces at target parameters")
    p.add_argument("model_dir")
    p.add_argument("thetas")
    p.add_argument("out")
    p.add_argument("--t", type=int, help="Truncation, k <= t <= r")
    p.add_argument("--dump-bases", help="Directory for mean bases, one basis_<i>.csv per target")
    p.add_argument("--interval", action="store_true", help="Add the 95%% predictive radius")
    p.add_argument("--draws", type=int, default=1000)
    _add_format_flag(p)
    p.add_argument("--seed", type=int, default=0)
    _add_kernel_flags(p)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("tune", help="Select length-scales by leave-one-out error")
    p.add_argument("model_dir")
    p.add_argument("--lower", type=float, nargs="+")
    p.add_argument("--upper", type=float, nargs="+")
    p.add_argument("--init", type=float, nargs="+")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--out", help="Evaluation trace CSV")
    p.add_argument("--update", action="store_true", help="Store the tuned kernel in the model")
    _add_format_flag(p)
    _add_kernel_flags(p)
    p.set_defaults(handler=cmd_tune)

    p = sub.add_parser("sample", help="Draw a random subspace path on a parameter grid")
    p.add_argument("grid")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_kernel_flags(p)
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("benchmark", help="Run the reduced-order-model comparison")
    p.add_argument("config")
    p.add_argument("out")
    p.add_argument("--seed", type=int)
    p.add_argument("--nr", type=int, help="Neighbors of the interpolation baseline")
    p.set_defaults(handler=cmd_benchmark)

    p = sub.add_parser("loocv", help="Leave-one-out diagnostics of a model")
    p.add_argument("model_dir")
    _add_kernel_flags(p)
    p.set_defaults(handler=cmd_loocv)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code"""
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(num_threads=args.threads, log_level=args.log_level,
                                 log_file=args.log_file)
        configure_logging(settings.log_level, settings.log_file)
        handler: Callable[[argparse.Namespace, Settings], int] = args.handler
        return handler(args, settings)
    except Exception as e:
        response, code = error_handler.format_cli_error(e)
        print(json.dumps(response), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
