"""Replicated simulation benchmark: scenarios x methods x replications.

Method names are ``Mix-k`` (rank-k mixture, global penalty, tuned on the
validation set), ``Sep-Group`` and ``Sep-L1`` (separate per-response
multinomial fits).
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .em_solver import SolverConfig, effective_R
from .exceptions import ConfigError, NumericError, SolverError
from .model import Dataset, MixtureParams, log_likelihood, predict_map_batch
from .simgen import SimData, SimScenario, avg_hellinger, simulate, sqrt_avg_kl_test
from .tuning import EFFECTIVE_FLOOR, PathSpec, derive_seed, solve_path

log = logging.getLogger(__name__)

METRICS = ("sqrt_avg_kl", "sqrt_avg_kl_clamped", "hellinger_avg", "deviance", "joint_error_rate")
KL_FLOOR = 1e-12
_MIX = re.compile(r"^Mix-(\d+)$")


def parse_method(name: str) -> tuple[int, str]:
    """``(R, penalty kind)`` for a method name."""
    mt = _MIX.match(name)
    if mt:
        R = int(mt[1])
        if R < 1:
            raise ConfigError(f"bad method {name!r}")
        return R, "global"
    if name == "Sep-Group":
        return 1, "separate_group"
    if name == "Sep-L1":
        return 1, "separate_l1"
    raise ConfigError(f"unknown method {name!r}; use Mix-<k>, Sep-Group or Sep-L1")


@dataclass(frozen=True)
class BenchSettings:
    methods: tuple[str, ...] = ("Mix-1", "Mix-2", "Sep-Group")
    reps: int = 20
    seed: int = 0
    spec: PathSpec = PathSpec(n_lambda=12, lambda_min_ratio=0.05, early_stop=2)
    config: SolverConfig = SolverConfig(objective_tol=3e-4, max_em_iters=300)
    threads: int = 1

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if not self.methods:
            raise ConfigError("need at least one method")
        for m in self.methods:
            parse_method(m)


def evaluate(theta: MixtureParams, data: Dataset, truth: MixtureParams | None = None,
             X_truth=None) -> dict:
    """Deviance and joint error rate always; KL and Hellinger given the truth.

    ``X_truth`` is the truth's design matrix when it differs from ``data.X``.
    """
    out = {}
    if truth is not None:
        out["sqrt_avg_kl"] = sqrt_avg_kl_test(theta, truth, data.X, X_truth=X_truth)
        out["sqrt_avg_kl_clamped"] = sqrt_avg_kl_test(theta, truth, data.X, KL_FLOOR, X_truth)
        out["hellinger_avg"] = avg_hellinger(theta, truth, data.X, X_truth)
    out["deviance"] = -2.0 * log_likelihood(theta, data)
    pred = predict_map_batch(theta, data.X)
    out["joint_error_rate"] = float(np.mean(np.any(pred != data.Y, axis=1)))
    return out


def run_method(method: str, sim: SimData, settings: BenchSettings, seed: int) -> dict:
    R, kind = parse_method(method)
    cfg = replace(settings.config, seed=seed, threads=1)
    path = solve_path(sim.train, sim.val, R, kind, settings.spec, cfg)
    row = evaluate(path.theta, sim.test, sim.truth.theta)
    row["effective_R"] = effective_R(path.theta, EFFECTIVE_FLOOR)
    row["selected_index"] = (";".join(map(str, path.selected_per_response))
                             if path.selected_per_response is not None else path.selected)
    return row


def _replicate(args) -> list[dict]:
    s_idx, scenario, rep, settings = args
    data_seed = derive_seed(settings.seed, s_idx, rep)
    fit_seed = derive_seed(settings.seed, s_idx, rep, 1)
    sim = simulate(scenario, seed=data_seed)
    rows = []
    for method in settings.methods:
        base = dict(scenario=s_idx, method=method, rep=rep, data_seed=data_seed)
        try:
            rows.append({**base, "failed": 0, **run_method(method, sim, settings, fit_seed)})
        except (SolverError, NumericError) as exc:
            log.warning("scenario %d rep %d %s failed: %s", s_idx, rep, method, exc)
            rows.append({**base, "failed": 1})
    return rows


def run_benchmark(scenarios: list[SimScenario], settings: BenchSettings) -> list[dict]:
    """One row per (scenario, method, replication), in that order."""
    jobs = [(s, sc, rep, settings) for s, sc in enumerate(scenarios) for rep in range(settings.reps)]
    if settings.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=settings.threads) as ex:
            chunks = list(ex.map(_replicate, jobs))
    else:
        chunks = [_replicate(j) for j in jobs]
    rows = [r for c in chunks for r in c]
    order = {m: k for k, m in enumerate(settings.methods)}
    return sorted(rows, key=lambda r: (r["scenario"], order[r["method"]], r["rep"]))


def summarize(rows: list[dict], metrics=METRICS + ("effective_R",)) -> list[dict]:
    """Mean, median and standard error (sd / sqrt(reps)) per scenario and method."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["scenario"], r["method"]), []).append(r)
    out = []
    for (s, method), rs in groups.items():
        ok = [r for r in rs if not r["failed"]]
        for metric in metrics:
            vals = np.array([r[metric] for r in ok if metric in r], dtype=float)
            if vals.size == 0:
                continue
            finite = np.all(np.isfinite(vals))
            se = (float(np.std(vals, ddof=1) / math.sqrt(vals.size))
                  if vals.size > 1 and finite else math.nan)
            out.append(dict(scenario=s, method=method, metric=metric, n_ok=len(ok),
                            n_failed=len(rs) - len(ok), mean=float(np.mean(vals)),
                            median=float(np.median(vals)), se=se))
    return out


def median_of(summary: list[dict], method: str, metric: str = "sqrt_avg_kl",
              scenario: int = 0) -> float:
    for r in summary:
        if r["scenario"] == scenario and r["method"] == method and r["metric"] == metric:
            return r["median"]
    raise KeyError((scenario, method, metric))
