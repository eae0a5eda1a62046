"""Solution paths over lambda and validation-based model selection."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .em_solver import (
    PenaltySpec,
    SolverConfig,
    effective_R,
    fit,
    stack_separate,
    support_of,
)
from .exceptions import ConfigError, DimensionError, NumericError, SolverError
from .model import Dataset, MixtureParams, log_likelihood

log = logging.getLogger(__name__)

EFFECTIVE_FLOOR = 1e-8


@dataclass(frozen=True)
class PathSpec:
    n_lambda: int = 25
    lambda_min_ratio: float = 0.01
    grid: tuple[float, ...] | None = None
    metric: str = "val_negloglik"
    # stop after this many consecutive lambdas fail to improve the best
    # validation metric; None runs the whole grid
    early_stop: int | None = None

    def __post_init__(self):
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=float)
            if g.size == 0 or np.any(g <= 0) or np.any(np.diff(g) >= 0):
                raise ConfigError("explicit grid must be positive and strictly decreasing")
        if self.n_lambda < 1:
            raise ConfigError("n_lambda must be >= 1")
        if not 0 < self.lambda_min_ratio < 1:
            raise ConfigError("lambda_min_ratio must lie in (0, 1)")
        if self.metric not in ("val_negloglik", "val_deviance"):
            raise ConfigError(f"unknown selection metric {self.metric!r}")
        if self.early_stop is not None and self.early_stop < 1:
            raise ConfigError("early_stop must be >= 1")

    def lambdas(self, lam_max: float) -> np.ndarray:
        if self.grid is not None:
            return np.asarray(self.grid, dtype=float)
        if self.n_lambda == 1:
            return np.array([lam_max])
        return np.geomspace(lam_max, lam_max * self.lambda_min_ratio, self.n_lambda)


@dataclass(eq=False)
class PathResult:
    lambdas: np.ndarray
    fits: list  # FitResult, or list of FitResult for separate kinds; None if failed
    metric: np.ndarray
    effective_R: np.ndarray
    support_size: np.ndarray
    iterations: np.ndarray
    failed: np.ndarray
    selected: int
    theta: MixtureParams = field(repr=False)
    # separate kinds only: each response's own selected index
    selected_per_response: list[int] | None = None
    combined_metric: float | None = None

    @property
    def selected_lambda(self):
        return self.lambdas[self.selected]

    @property
    def best_metric(self) -> float:
        if self.combined_metric is not None:
            return self.combined_metric
        return float(self.metric[self.selected])

    def records(self) -> list[dict]:
        return [
            dict(lambda_=float(lam) if np.ndim(lam) == 0 else [float(v) for v in lam],
                 val_metric=float(v), effective_R=int(e), support_size=int(s),
                 iterations=int(it), failed=bool(f))
            for lam, v, e, s, it, f in zip(self.lambdas, self.metric, self.effective_R,
                                           self.support_size, self.iterations, self.failed)
        ]


def _null_gradients(data: Dataset) -> list[np.ndarray]:
    """Per-response ``(p, c_m)`` gradients of the mean log-likelihood at B = 0.

    With an intercept the null model uses the empirical class frequencies.
    """
    out = []
    n = data.n
    for m, c in enumerate(data.shape.dims):
        onehot = np.zeros((n, c))
        onehot[np.arange(n), data.Y[:, m]] = 1.0
        prob = onehot.mean(axis=0) if data.intercept else np.full(c, 1.0 / c)
        out.append(data.X.T @ (onehot - prob) / n)
    return out


def lambda_max(data: Dataset, R: int = 1, kind: str = "global"):
    """Smallest penalty for which zero penalized coefficients are stationary.

    Taken as the supremum over mixture weights, so that all-zero rows are a
    fixed point of the algorithm no matter where the weights drift. The
    separate kinds return one value per response.
    """
    grads = _null_gradients(data)
    rows = slice(1, None) if data.intercept else slice(None)
    if kind in ("global", "local"):
        full = np.concatenate(grads, axis=1)[rows]
        return float(np.max(np.linalg.norm(full, axis=1), initial=0.0))
    if kind == "separate_group":
        return np.array([np.max(np.linalg.norm(g[rows], axis=1), initial=0.0) for g in grads])
    if kind == "separate_l1":
        return np.array([np.max(np.abs(g[rows]), initial=0.0) for g in grads])
    raise ConfigError(f"unknown penalty kind {kind!r}")


def derive_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(base), *map(int, keys)]).generate_state(1)[0])


def _metric(theta: MixtureParams, val: Dataset, metric: str) -> float:
    nll = -log_likelihood(theta, val)
    return 2.0 * nll if metric == "val_deviance" else nll


def _fit_one(args):
    data, R, penalty, config = args
    try:
        return fit(data, R, penalty, config)
    except (SolverError, NumericError) as exc:
        log.warning("fit at lambda=%s failed: %s", penalty.lam, exc)
        return None


def _run_fits(jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [_fit_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(_fit_one, jobs))


def _run_path(lams, job, val, spec: PathSpec, threads: int):
    """Fit the grid in order, optionally stopping once validation stalls."""
    if spec.early_stop is None:
        return lams, _run_fits([job(k) for k in range(lams.size)], threads)
    fits, best, stale = [], math.inf, 0
    for k in range(lams.size):
        res = _fit_one(job(k))
        fits.append(res)
        v = math.inf if res is None else _metric(res.theta, val, spec.metric)
        if v < best:
            best, stale = v, 0
        else:
            stale += 1
            if stale >= spec.early_stop:
                break
    return lams[:len(fits)], fits


def _select(metric: np.ndarray, failed: np.ndarray) -> int:
    ok = np.where(failed, np.inf, metric)
    if not np.any(np.isfinite(ok)):
        raise SolverError("every fit on the path failed")
    return int(np.argmin(ok))  # first minimizer == largest lambda on ties


def _check_pair(data: Dataset, val: Dataset):
    if val.p != data.p or val.shape.dims != data.shape.dims:
        raise DimensionError("training and validation data have different dimensions")


def solve_path(data: Dataset, val: Dataset, R: int, penalty_kind: str = "global",
               spec: PathSpec | None = None, config: SolverConfig | None = None,
               seed_key: int = 0) -> PathResult:
    """Fit every lambda from a fresh random start and pick the best on ``val``.

    With R = 1 the separate kinds delegate to :func:`solve_separate_path`.
    Each grid point gets its own seed derived from ``config.seed`` and its
    index; nothing is warm-started.
    """
    spec = spec or PathSpec()
    config = config or SolverConfig()
    _check_pair(data, val)
    if penalty_kind in ("separate_group", "separate_l1") and R == 1:
        return solve_separate_path(data, val, penalty_kind, spec, config)
    # a mixture with a separate penalty shares one lambda across responses
    lmax = np.max(lambda_max(data, R, penalty_kind))
    lams = spec.lambdas(float(lmax) if lmax > 0 else 1e-12)

    def job(k):
        cfg = replace(config, seed=derive_seed(config.seed, seed_key, R, k))
        return (data, R, PenaltySpec(penalty_kind, float(lams[k])), cfg)

    lams, fits = _run_path(lams, job, val, spec, config.threads)
    return _summarize(lams, fits, val, spec, [f.theta if f else None for f in fits])


def _summarize(lams, fits, val, spec, thetas, support=None) -> PathResult:
    failed = np.array([t is None for t in thetas])
    metric = np.array([math.inf if t is None else _metric(t, val, spec.metric) for t in thetas])
    eff = np.array([0 if t is None else effective_R(t, EFFECTIVE_FLOOR) for t in thetas])
    if support is None:
        support = [0 if f is None else int(np.sum(f.support)) for f in fits]
    iters = [0 if f is None else (sum(x.iterations for x in f) if isinstance(f, list)
                                  else f.iterations) for f in fits]
    sel = _select(metric, failed)
    return PathResult(np.asarray(lams), fits, metric, eff, np.asarray(support),
                      np.asarray(iters), failed, sel, thetas[sel])


def solve_separate_path(data: Dataset, val: Dataset, kind: str = "separate_group",
                        spec: PathSpec | None = None,
                        config: SolverConfig | None = None) -> PathResult:
    """Separate per-response paths; each response picks its own lambda.

    The returned path is indexed by grid position (the k-th entry holds the
    k-th lambda of every response); ``theta`` combines the per-response
    selections, which need not share an index.
    """
    spec = spec or PathSpec()
    config = config or SolverConfig()
    _check_pair(data, val)
    lmax = lambda_max(data, 1, kind)
    M = data.shape.M
    per_resp = [
        _single_response_path(data.subset_responses([m]), val.subset_responses([m]),
                              kind, spec, config, float(lmax[m]), m)
        for m in range(M)
    ]
    K = min(p.lambdas.size for p in per_resp)
    lams = np.array([[p.lambdas[k] for p in per_resp] for k in range(K)])
    fits = [[p.fits[k] for p in per_resp] for k in range(K)]
    thetas = []
    for row in fits:
        thetas.append(None if any(f is None for f in row) else stack_separate(row, data))
    chosen = [p.fits[p.selected] for p in per_resp]
    combined = stack_separate(chosen, data)
    res = _summarize(lams, fits, val, spec, thetas,
                     support=[0 if t is None else int(np.sum(_sep_support(t))) for t in thetas])
    return replace(res, theta=combined, selected_per_response=[p.selected for p in per_resp],
                   combined_metric=_metric(combined, val, spec.metric))


def _sep_support(theta: MixtureParams) -> np.ndarray:
    return support_of(theta, "separate_group")


def _single_response_path(sub, vsub, kind, spec, config, lmax, m) -> PathResult:
    lams = spec.lambdas(lmax if lmax > 0 else 1e-12)

    def job(k):
        cfg = replace(config, seed=derive_seed(config.seed, 10_000 + m, 1, k))
        return (sub, 1, PenaltySpec(kind, float(lams[k])), cfg)

    lams, fits = _run_path(lams, job, vsub, spec, config.threads)
    return _summarize(lams, fits, vsub, spec, [f.theta if f else None for f in fits])


def select_R_by_validation(data: Dataset, val: Dataset, R_candidates: Sequence[int],
                           penalty_kind: str = "global", spec: PathSpec | None = None,
                           config: SolverConfig | None = None):
    """Run one path per candidate R and return ``(best_R, {R: PathResult})``."""
    if not R_candidates:
        raise ConfigError("need at least one candidate R")
    paths = {int(R): solve_path(data, val, int(R), penalty_kind, spec, config)
             for R in R_candidates}
    best = min(paths, key=lambda R: (paths[R].best_metric, R))
    return best, paths
