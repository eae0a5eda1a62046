"""Command-line interface.

Subcommands: simulate, fit, predict, evaluate, benchmark. Exit status is 0
on success, 2 for configuration errors, 3 for data errors and 4 when the
solver fails. The default thread count comes from ``TENSORMIX_THREADS``;
``--threads`` overrides it.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from . import io
from .benchmark import METRICS, BenchSettings, evaluate, run_benchmark, summarize
from .em_solver import PenaltySpec, SolverConfig, fit, fit_separate_results, stack_separate
from .exceptions import ConfigError, DataError, DimensionError, NumericError, SolverError
from .model import Dataset, MixtureParams, log_likelihood, predict_map_batch, prob_tensors
from .simgen import SimScenario, simulate
from .tensor_core import ProbTensor
from .tuning import PathSpec, solve_path

log = logging.getLogger("tensormix")

ENV_THREADS = "TENSORMIX_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4
PENALTIES = {"global": "global", "local": "local",
             "sep-group": "separate_group", "sep-l1": "separate_l1"}


class _Run(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FitRun(_Run):
    train: Path
    val: Path | None = None
    out: Path
    R: tuple[int, ...] = (1,)
    penalty: Literal["global", "local", "separate_group", "separate_l1"] = "global"
    lam: float | None = Field(None, ge=0)
    n_lambda: int = Field(25, ge=1)
    lambda_min_ratio: float = Field(0.01, gt=0, lt=1)
    early_stop: int | None = Field(None, ge=1)
    intercept: bool = True
    max_em_iters: int = Field(1000, ge=1)
    objective_tol: float = Field(1e-8, gt=0)
    seed: int = 0
    threads: int = Field(1, ge=1)

    @field_validator("R")
    @classmethod
    def _positive(cls, v):
        if not v or min(v) < 1:
            raise ValueError("R values must be positive")
        return v


class BenchGrid(_Run):
    """Benchmark grid file; ``vary`` expands every listed scenario."""

    scenarios: list[dict] = [{}]
    vary: dict[str, list] = {}
    methods: list[str] | None = None
    reps: int | None = Field(None, ge=1)
    n_lambda: int | None = Field(None, ge=1)
    lambda_min_ratio: float | None = Field(None, gt=0, lt=1)
    early_stop: int | None = Field(None, ge=1)
    max_em_iters: int | None = Field(None, ge=1)
    objective_tol: float | None = Field(None, gt=0)


def _validated(cls, **kw):
    try:
        return cls(**kw)
    except ValidationError as exc:
        raise ConfigError(_pyd_message(exc)) from None


def _pyd_message(exc: ValidationError) -> str:
    parts = []
    for e in exc.errors():
        loc = ".".join(str(v) for v in e["loc"])
        parts.append(f"{loc}: {e['msg']}" if loc else e["msg"])
    return "; ".join(parts)


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        value, source = flag, "--threads"
    else:
        raw = os.environ.get(ENV_THREADS)
        if raw is None or not raw.strip():
            return 1
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{ENV_THREADS}={raw!r} is not an integer") from None
        source = ENV_THREADS
    if value < 1:
        raise ConfigError(f"{source} must be >= 1, got {value}")
    return value


def _parse_R(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--R expects integers like 2 or 1,2,3; got {text!r}")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=1, allow_nan=False)
        fh.write("\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _outdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{path}: cannot create output directory ({exc.strerror})") from None
    return path


def _provenance(command: str, **extra) -> dict:
    return {"tool": "tensormix", "version": __version__, "command": command, **extra}


# simulate


def cmd_simulate(args) -> int:
    record = io.load_json_config(args.scenario) if args.scenario else {}
    if not isinstance(record, dict):
        raise ConfigError("scenario file must hold a JSON object")
    if args.seed is not None:
        record = {**record, "seed": args.seed}
    try:
        scenario = SimScenario(**record)
    except ValidationError as exc:
        raise ConfigError(_pyd_message(exc)) from None
    out = _outdir(Path(args.out))
    sim = simulate(scenario)
    files = {}
    for name, data in (("train", sim.train), ("val", sim.val), ("test", sim.test)):
        path = out / f"{name}.csv"
        io.write_dataset(path, data, include_z=scenario.keep_z)
        files[name] = path.name
    truth_path = out / "truth.json"
    io.save_model(truth_path, sim.truth.theta,
                  {"source": "simulate", "active_set": sim.truth.active_set.tolist()})
    files["truth"] = truth_path.name
    manifest = _provenance(
        "simulate", scenario=scenario.model_dump(), seed=scenario.seed, files=files,
        sha256={k: _sha256(out / v) for k, v in files.items()},
    )
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %s", ", ".join(files.values()))
    return EXIT_OK


# fit


def _fit_single(run: FitRun, train: Dataset, R: int, config: SolverConfig):
    penalty = PenaltySpec(run.penalty, run.lam)
    if run.penalty in ("separate_group", "separate_l1") and R == 1:
        results = fit_separate_results(train, run.penalty, run.lam, config)
        theta = stack_separate(results, train)
        meta = dict(lambda_=run.lam, iterations=[r.iterations for r in results],
                    objective=[r.objective for r in results],
                    converged=all(r.converged for r in results))
        return theta, meta
    res = fit(train, R, penalty, config)
    return res.theta, dict(lambda_=run.lam, iterations=res.iterations, objective=res.objective,
                           converged=res.converged, trace=res.records)


def cmd_fit(args) -> int:
    run = _validated(
        FitRun, train=args.train, val=args.val, out=args.out, R=args.R,
        penalty=PENALTIES[args.penalty], lam=args.lam, n_lambda=args.n_lambda,
        lambda_min_ratio=args.lambda_min_ratio, early_stop=args.early_stop,
        intercept=not args.no_intercept, max_em_iters=args.max_iter, objective_tol=args.tol,
        seed=args.seed if args.seed is not None else 0, threads=resolve_threads(args.threads),
    )
    if run.lam is None and run.val is None:
        raise ConfigError("a lambda path needs --val; pass --lambda for a single fit")
    if run.lam is not None and len(run.R) > 1:
        raise ConfigError("--lambda fits one model; give a single --R")
    config = SolverConfig(max_em_iters=run.max_em_iters, objective_tol=run.objective_tol,
                          seed=run.seed, threads=run.threads)
    train = io.load_dataset(run.train, run.intercept)
    val = (io.load_dataset(run.val, run.intercept, dims=train.shape.dims)
           if run.val is not None else None)
    out = _outdir(run.out)
    meta = dict(_provenance("fit"), penalty=run.penalty, seed=run.seed,
                R_candidates=list(run.R), train=str(run.train),
                val=str(run.val) if run.val else None)
    if run.lam is not None:
        R = run.R[0]
        theta, extra = _fit_single(run, train, R, config)
        meta.update(extra)
        if val is not None:
            meta["val_negloglik"] = -log_likelihood(theta, val)
    else:
        spec = PathSpec(n_lambda=run.n_lambda, lambda_min_ratio=run.lambda_min_ratio,
                        early_stop=run.early_stop)
        paths = {R: solve_path(train, val, R, run.penalty, spec, config) for R in run.R}
        R = min(paths, key=lambda r: (paths[r].best_metric, r))
        best = paths[R]
        theta = best.theta
        lam = best.selected_lambda
        if best.selected_per_response is not None:
            lam = [float(best.lambdas[k, m]) for m, k in enumerate(best.selected_per_response)]
        meta.update(selected_R=R, lambda_=lam, n_lambda=run.n_lambda,
                    lambda_min_ratio=run.lambda_min_ratio, early_stop=run.early_stop,
                    val_negloglik=best.best_metric,
                    iterations=int(best.iterations[best.selected]))
        io.write_path_report(out / "path.csv", paths)
    io.save_model(out / "model.json", theta, _clean(meta))
    return EXIT_OK


# predict / evaluate


def _design(theta: MixtureParams, X_raw: np.ndarray, path) -> np.ndarray:
    X = io.with_intercept(X_raw, theta.intercept)
    if X.shape[1] != theta.p:
        raise DimensionError(f"{path}: {X_raw.shape[1]} predictors, model expects "
                             f"{theta.p - int(theta.intercept)}")
    return X


def _tensor_records(theta: MixtureParams, X: np.ndarray):
    T = prob_tensors(theta, X)
    return [ProbTensor(theta.shape, t, check=False) for t in T]


def cmd_predict(args) -> int:
    theta, _ = io.load_model(args.model)
    table = io.read_table(args.data)
    X = _design(theta, table["X"], args.data)
    pred = predict_map_batch(theta, X)
    names = table["names"]["y"] if table["Y"] is not None else []
    if len(names) != theta.M:
        names = [f"Y{m + 1}" for m in range(theta.M)]
    out = Path(args.out)
    io.write_rows(out, [f"y:{n}[{c}]" for n, c in zip(names, theta.shape.dims)],
                  (pred + 1).tolist())
    if args.tensors:
        io.write_tensor_records(args.tensors, _tensor_records(theta, X))
    return EXIT_OK


def evaluate_model(theta: MixtureParams, X_raw, Y, truth: MixtureParams | None = None,
                   path="data") -> dict:
    """Metrics from raw predictors; each model gets its own design matrix."""
    X = _design(theta, X_raw, path)
    Xt = _design(truth, X_raw, path) if truth is not None else None
    if truth is not None and truth.shape.dims != theta.shape.dims:
        raise DimensionError("truth and model have different response dimensions")
    return evaluate(theta, Dataset(X, Y, theta.shape, theta.intercept), truth, X_truth=Xt)


def cmd_evaluate(args) -> int:
    theta, _ = io.load_model(args.model)
    truth = io.load_model(args.truth)[0] if args.truth else None
    table = io.read_table(args.test)
    if table["Y"] is None:
        raise DataError(f"{args.test}: evaluation needs y: response columns")
    if table["Y"].shape[1] != theta.M:
        raise DimensionError(f"{args.test}: {table['Y'].shape[1]} responses, model has {theta.M}")
    for m, c in enumerate(theta.shape.dims):
        if table["Y"][:, m].max() >= c:
            raise DataError(f"{args.test}: response {m + 1} has labels above {c}")
    metrics = evaluate_model(theta, table["X"], table["Y"], truth, args.test)
    report = _provenance("evaluate", model=str(args.model), test=str(args.test),
                         truth=str(args.truth) if args.truth else None,
                         n=int(table["X"].shape[0]), metrics=metrics)
    _write_json(Path(args.out), report)
    if args.tensors:
        io.write_tensor_records(args.tensors,
                                _tensor_records(theta, _design(theta, table["X"], args.test)))
    return EXIT_OK


# benchmark


def _expand(grid: BenchGrid) -> list[SimScenario]:
    keys = sorted(grid.vary)
    combos = list(itertools.product(*(grid.vary[k] for k in keys))) if keys else [()]
    out = []
    for base in grid.scenarios:
        for combo in combos:
            rec = {**base, **dict(zip(keys, combo))}
            try:
                out.append(SimScenario(**rec))
            except ValidationError as exc:
                raise ConfigError(f"scenario {rec}: {_pyd_message(exc)}") from None
    return out


SUMMARY_HEADER = ["scenario", "method", "metric", "n_ok", "n_failed", "mean", "median", "se"]


def cmd_benchmark(args) -> int:
    raw = io.load_json_config(args.grid) if args.grid else {}
    if not isinstance(raw, dict):
        raise ConfigError("grid file must hold a JSON object")
    grid = _validated(BenchGrid, **raw)
    scenarios = _expand(grid)
    d = BenchSettings()
    methods = (tuple(args.methods.split(",")) if args.methods
               else tuple(grid.methods) if grid.methods else d.methods)

    def pick(flag, key, default):
        if flag is not None:
            return flag
        v = getattr(grid, key)
        return default if v is None else v

    spec = PathSpec(n_lambda=pick(args.n_lambda, "n_lambda", d.spec.n_lambda),
                    lambda_min_ratio=pick(args.lambda_min_ratio, "lambda_min_ratio",
                                          d.spec.lambda_min_ratio),
                    early_stop=pick(args.early_stop, "early_stop", d.spec.early_stop))
    config = SolverConfig(max_em_iters=pick(args.max_iter, "max_em_iters", d.config.max_em_iters),
                          objective_tol=pick(args.tol, "objective_tol", d.config.objective_tol))
    settings = BenchSettings(methods=methods, reps=pick(args.reps, "reps", d.reps),
                             seed=args.seed if args.seed is not None else 0,
                             spec=spec, config=config, threads=resolve_threads(args.threads))
    out = _outdir(Path(args.out))
    rows = run_benchmark(scenarios, settings)
    rep_header = ["scenario", "method", "rep", "data_seed", "failed", *METRICS,
                  "effective_R", "selected_index"]
    io.write_rows(out / "replicates.csv", rep_header,
                  [[r.get(k, "") for k in rep_header] for r in rows])
    summary = summarize(rows)
    io.write_rows(out / "summary.csv", SUMMARY_HEADER,
                  [[r[k] for k in SUMMARY_HEADER] for r in summary])
    report = _provenance(
        "benchmark", seed=settings.seed, reps=settings.reps, methods=list(methods),
        path=dict(n_lambda=spec.n_lambda, lambda_min_ratio=spec.lambda_min_ratio,
                  early_stop=spec.early_stop),
        solver=dict(max_em_iters=config.max_em_iters, objective_tol=config.objective_tol),
        scenarios=[s.model_dump() for s in scenarios], summary=summary,
    )
    _write_json(out / "report.json", report)
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="tensormix", description=__doc__.split("\n")[0])
    top.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    top.add_argument("-v", "--verbose", action="count", default=0)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None,
                        help=f"parallel fits (default ${ENV_THREADS} or 1)")
    common.add_argument("--out", required=True)

    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--n-lambda", type=int, default=None)
    solver.add_argument("--lambda-min-ratio", type=float, default=None)
    solver.add_argument("--early-stop", type=int, default=None,
                        help="stop a path after this many non-improving lambdas")
    solver.add_argument("--max-iter", type=int, default=None)
    solver.add_argument("--tol", type=float, default=None)

    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate train/val/test data")
    p.add_argument("--scenario", help="JSON scenario file (defaults otherwise)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common, solver], help="fit a model or a lambda path")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--R", type=_parse_R, default=(1,), help="rank, or a comma list to select")
    p.add_argument("--penalty", choices=sorted(PENALTIES), default="global")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="fit a single lambda instead of a path")
    p.add_argument("--no-intercept", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="MAP category vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tensors", help="also write probability tensors (JSON lines)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="deviance, error rate, KL")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--truth")
    p.add_argument("--tensors", help="also write probability tensors (JSON lines)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", parents=[common, solver], help="replicated simulation study")
    p.add_argument("--grid", help="JSON grid file")
    p.add_argument("--methods", help="comma list, e.g. Mix-1,Mix-2,Sep-Group")
    p.add_argument("--reps", type=int, default=None)
    p.set_defaults(func=cmd_benchmark)
    return top


_FIT_DEFAULTS = dict(n_lambda=25, lambda_min_ratio=0.01, max_iter=1000, tol=1e-8)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "fit":
        for k, v in _FIT_DEFAULTS.items():
            if getattr(args, k) is None:
                setattr(args, k, v)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"tensormix: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"tensormix: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"tensormix: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, NumericError) as exc:
        print(f"tensormix: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
