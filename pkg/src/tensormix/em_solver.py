"""Penalized EM for the low-rank mixture model.

The objective is the per-observation penalized log-likelihood

    F(theta) / n - P_lambda(B)

which has the same maximizers as the summed version with ``lambda``
rescaled by ``n``. Each EM iteration computes responsibilities, sweeps the
predictor rows of ``B`` once in a random order with one proximal gradient
step per row, then updates the mixture weights.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import _kernels as K
from .exceptions import ConfigError, InvalidInputError, NumericError, SolverError
from .model import Dataset, MixtureParams, OracleLabels, category_offsets

KINDS = ("global", "local", "separate_group", "separate_l1")
LS_SLACK = 1e-13


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family and strength.

    ``lam`` is a scalar for ``global``/``local``; the separate kinds accept
    either a scalar or one value per response.
    """

    kind: str = "global"
    lam: float | Sequence[float] = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown penalty kind {self.kind!r}; expected one of {KINDS}")
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if np.any(~np.isfinite(lam)) or np.any(lam < 0):
            raise ConfigError(f"penalty strength must be finite and >= 0, got {self.lam}")
        if self.kind in ("global", "local") and lam.size != 1:
            raise ConfigError(f"{self.kind} penalty takes a single lambda")

    def per_response(self, M: int) -> np.ndarray:
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if lam.size == 1:
            return np.full(M, lam[0])
        if lam.size != M:
            raise ConfigError(f"{lam.size} lambdas given for {M} responses")
        return lam

    @property
    def is_zero(self) -> bool:
        return bool(np.all(np.asarray(self.lam) == 0))


@dataclass(frozen=True)
class SolverConfig:
    max_em_iters: int = 1000
    objective_tol: float = 1e-8  # on the summed log-likelihood
    delta_floor: float = 1e-8
    init_step: float = 1.0
    shrink: float = 0.5
    max_halvings: int = 60
    init_sd: float = 0.1
    step_rule: str = "backtrack"  # or "theory": fixed minorization step, no search
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.objective_tol <= 0 or self.delta_floor <= 0 or self.init_step <= 0:
            raise ConfigError("tolerances and the initial step must be positive")
        if not 0 < self.shrink < 1:
            raise ConfigError("shrink factor must lie in (0, 1)")
        if self.max_em_iters < 1 or self.max_halvings < 0:
            raise ConfigError("iteration limits must be positive")
        if self.init_sd < 0:
            raise ConfigError("init_sd must be >= 0")
        if self.step_rule not in ("backtrack", "theory"):
            raise ConfigError(f"unknown step rule {self.step_rule!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass(frozen=True, eq=False)
class Posterior:
    """Responsibilities ``pi[i, r]``; each row sums to one."""

    pi: np.ndarray


@dataclass(eq=False)
class FitResult:
    theta: MixtureParams
    penalty: PenaltySpec
    trace: list[float]
    records: list[dict]
    iterations: int
    converged: bool
    delta_floor: float = 1e-8
    support: np.ndarray = field(init=False)

    def __post_init__(self):
        self.support = support_of(self.theta, self.penalty.kind)

    @property
    def objective(self) -> float:
        return self.trace[-1]

    @property
    def active_components(self) -> int:
        return int(np.sum(self.theta.delta > self.delta_floor))


def support_of(theta: MixtureParams, kind: str = "global") -> np.ndarray:
    """Selection indicators of the penalized coefficients.

    Shape ``(p,)`` for the global penalty, ``(p, R)`` for the local one and
    ``(p, M)`` for the separate kinds. The intercept row is never selected.
    """
    coef = np.asarray(theta.coef)
    nz = coef != 0
    if kind == "global":
        out = nz.any(axis=(1, 2))
    elif kind == "local":
        out = nz.any(axis=2)
    else:
        off = theta.offsets
        out = np.column_stack(
            [nz[:, :, off[m]:off[m + 1]].any(axis=(1, 2)) for m in range(theta.M)]
        )
    out = out.copy()
    if theta.intercept:
        out[0] = False
    return out


def effective_R(theta: MixtureParams, floor: float = 1e-8) -> int:
    return int(np.sum(theta.delta > floor))


# ----------------------------------------------------------------------------
# penalties and the proximal map


def row_penalty(b: np.ndarray, lam, kind: str, offsets=None) -> float:
    """Penalty contribution of one ``(R, C)`` row block."""
    b = np.asarray(b, dtype=float)
    if kind == "global":
        return float(np.asarray(lam).ravel()[0] * np.sqrt(np.sum(b * b)))
    b = np.atleast_2d(b)
    if kind == "local":
        return float(np.asarray(lam).ravel()[0] * np.sum(np.sqrt(np.sum(b * b, axis=1))))
    lam = np.atleast_1d(lam)
    total = 0.0
    for m in range(len(offsets) - 1):
        blk = b[:, offsets[m]:offsets[m + 1]]
        lm = lam[m] if lam.size > 1 else lam[0]
        if kind == "separate_group":
            total += lm * np.sum(np.sqrt(np.sum(blk * blk, axis=1)))
        else:
            total += lm * np.sum(np.abs(blk))
    return float(total)


def penalty_value(theta: MixtureParams, penalty: PenaltySpec) -> float:
    lam = _lam_array(penalty, theta.M)
    rows = np.flatnonzero(theta.penalized_rows())
    return float(sum(row_penalty(theta.coef[j], lam, penalty.kind, theta.offsets) for j in rows))


def _lam_array(penalty: PenaltySpec, M: int) -> np.ndarray:
    if penalty.kind in ("global", "local"):
        return np.atleast_1d(np.asarray(penalty.lam, dtype=float))
    return penalty.per_response(M)


def _group_shrink(v: np.ndarray, thresh: float) -> np.ndarray:
    norm = math.sqrt(float(np.sum(v * v)))
    if norm <= thresh:
        return np.zeros_like(v)
    return (1.0 - thresh / norm) * v


def prox_row_update(u, lam, tau: float, kind: str = "global", offsets=None) -> np.ndarray:
    """Closed-form maximizer of the penalized quadratic minorizer for one row.

    ``global`` shrinks the whole row as a group; ``local`` shrinks each
    component's sub-block; ``separate_group`` shrinks each (component,
    response) block with its own lambda; ``separate_l1`` soft-thresholds
    entrywise. ``u`` is ``(R, C)`` (a flat vector is accepted for global).
    """
    u = np.asarray(u, dtype=float)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if tau <= 0:
        raise ConfigError("step size must be positive")
    if np.all(lam == 0):
        return u.copy()
    if kind == "global":
        return _group_shrink(u, lam[0] * tau)
    u2 = np.atleast_2d(u)
    out = np.empty_like(u2)
    if kind == "local":
        for r in range(u2.shape[0]):
            out[r] = _group_shrink(u2[r], lam[0] * tau)
        return out.reshape(u.shape)
    if offsets is None:
        raise ConfigError(f"{kind} penalty needs category offsets")
    for m in range(len(offsets) - 1):
        lo, hi = offsets[m], offsets[m + 1]
        t = (lam[m] if lam.size > 1 else lam[0]) * tau
        if kind == "separate_group":
            for r in range(u2.shape[0]):
                out[r, lo:hi] = _group_shrink(u2[r, lo:hi], t)
        elif kind == "separate_l1":
            blk = u2[:, lo:hi]
            out[:, lo:hi] = np.sign(blk) * np.maximum(np.abs(blk) - t, 0.0)
        else:
            raise ConfigError(f"unknown penalty kind {kind!r}")
    return out.reshape(u.shape)


def theory_step(x_col: np.ndarray, R: int, dims: Sequence[int], n: int | None = None) -> float:
    """Largest step guaranteed by the minorization bound for one predictor.

    The bound is stated for the per-observation objective; ``n`` is unused
    and kept only for call-site readability.
    """
    norm = float(np.linalg.norm(x_col))
    if norm == 0:
        return math.inf
    return 1.0 / (R * len(dims) * norm * math.sqrt(max(dims)))


# ----------------------------------------------------------------------------
# likelihood pieces


def q_weighted_loglik(beta_mr, data: Dataset, m: int, weights) -> float:
    """``sum_i w_i log Pr(Y_mi | x_i, beta_mr)``."""
    scores = data.X @ np.asarray(beta_mr, dtype=float)
    logp = scores - logsumexp(scores, axis=1, keepdims=True)
    w = np.asarray(weights, dtype=float)
    return float(np.sum(w * logp[np.arange(data.n), data.Y[:, m]]))


def q_gradient_row(coef, j: int, data: Dataset, posterior: Posterior | np.ndarray) -> np.ndarray:
    """Gradient of ``sum_{m,r} ell_mr`` with respect to row ``coef[j]``.

    Returns an ``(R, C)`` array; ``.ravel()`` gives the vec ordering. Entry
    ``(r, k)`` of block m is ``sum_i pi_ir x_ij (1{Y_mi = k} - Pr_k)``.
    No 1/n scaling is applied here.
    """
    coef = np.asarray(coef, dtype=float)
    if not 0 <= j < coef.shape[0]:
        raise IndexError(f"predictor index {j} out of range")
    pi = posterior.pi if isinstance(posterior, Posterior) else np.asarray(posterior)
    off = category_offsets(data.shape.dims)
    xj = data.X[:, j]
    scores = np.einsum("ip,prc->irc", data.X, coef)
    G = np.zeros(coef.shape[1:])
    for m in range(data.shape.M):
        lo, hi = off[m], off[m + 1]
        blk = scores[:, :, lo:hi]
        prob = np.exp(blk - logsumexp(blk, axis=2, keepdims=True))
        onehot = np.zeros((data.n, hi - lo))
        onehot[np.arange(data.n), data.Y[:, m]] = 1.0
        resid = onehot[:, None, :] - prob
        G[:, lo:hi] = np.einsum("i,ir,irk->rk", xj, pi, resid)
    return G


def posterior_from_logdens(logf: np.ndarray, delta: np.ndarray):
    """Responsibilities and per-observation log mixture density."""
    with np.errstate(divide="ignore"):
        joint = logf + np.log(delta)
    lmix = logsumexp(joint, axis=1)
    bad = np.flatnonzero(~np.isfinite(lmix))
    if bad.size:
        raise NumericError(f"observation {bad[0]} has zero density under every component")
    pi = np.exp(joint - lmix[:, None])
    pi /= pi.sum(axis=1, keepdims=True)
    return pi, lmix


def e_step(theta: MixtureParams, data: Dataset) -> Posterior:
    """Posterior component probabilities given the current parameters."""
    from .model import component_log_densities

    if np.all(theta.delta <= 0):
        raise InvalidInputError("at least one mixture weight must be positive")
    logf = component_log_densities(theta, data.X, data.Y)
    pi, _ = posterior_from_logdens(logf, theta.delta)
    return Posterior(pi)


def delta_update(posterior: Posterior | np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Column means of the responsibilities; weights below ``floor`` become 0."""
    pi = posterior.pi if isinstance(posterior, Posterior) else np.asarray(posterior)
    delta = pi.mean(axis=0)
    delta[delta < floor] = 0.0
    total = delta.sum()
    if total <= 0:
        raise NumericError("all mixture weights fell below the floor")
    return delta / total


def penalized_objective(theta: MixtureParams, data: Dataset, penalty: PenaltySpec) -> float:
    """``loglik / n - penalty``, the quantity every iteration increases."""
    from .model import log_likelihood

    return log_likelihood(theta, data) / data.n - penalty_value(theta, penalty)


# ----------------------------------------------------------------------------
# the cached sweep machinery


class _Workspace:
    """Scores ``X @ B`` and their block softmaxes, updated one row at a time."""

    def __init__(self, data: Dataset, coef: np.ndarray, active: np.ndarray):
        self.X = np.ascontiguousarray(data.X, dtype=float)
        self.XT = np.ascontiguousarray(self.X.T)
        self.dims = data.shape.dims
        self.offsets = category_offsets(self.dims)
        self.yidx = np.ascontiguousarray(data.Y + self.offsets[:-1], dtype=np.int64)
        self.coef = np.array(coef, dtype=float)
        self.active = np.array(active, dtype=np.bool_)
        n, R, C = data.n, self.coef.shape[1], self.coef.shape[2]
        self.P = np.zeros((n, R, C))
        self.LF = np.zeros((n, R))
        self.S2 = np.empty((n, R, C))
        self.P2 = np.empty((n, R, C))
        self.LF2 = np.empty((n, R))
        self.G = np.empty((R, C))
        self.reset()

    def reset(self):
        self.S = np.ascontiguousarray(np.einsum("ip,prc->irc", self.X, self.coef))
        if not np.all(np.isfinite(self.S)):
            raise NumericError("non-finite linear scores")
        K.refresh(self.S, self.offsets, self.yidx, self.active, self.P, self.LF)

    def log_densities(self) -> np.ndarray:
        return self.LF.copy()

    def weighted_loglik(self, W) -> float:
        return K.weighted_loglik(self.LF, W, self.active)

    def gradient(self, j: int, W) -> np.ndarray:
        K.row_gradient(self.P, self.XT[j], self.yidx, W, self.active, self.G)
        return self.G.copy()


_KIND_CODES = {"global": K.GLOBAL, "local": K.LOCAL,
               "separate_group": K.SEP_GROUP, "separate_l1": K.SEP_L1}


def _sweep(ws: _Workspace, W: np.ndarray, lam: np.ndarray, kind: str, penalized: np.ndarray,
           config: SolverConfig, rng: np.random.Generator, taus: np.ndarray):
    """Visit every row once in a random order. Returns (loglik, rejections)."""
    perm = rng.permutation(ws.coef.shape[0]).astype(np.int64)
    lam_m = np.ascontiguousarray(np.broadcast_to(lam, (len(ws.dims),)) if lam.size == 1
                                 else lam, dtype=float)
    ll0 = ws.weighted_loglik(W)
    ll, rejections, status, j, swaps = K.sweep(
        ws.S, ws.P, ws.LF, ws.S2, ws.P2, ws.LF2, ws.XT, ws.coef, W, ws.yidx,
        ws.offsets, ws.active, perm, penalized, lam_m, _KIND_CODES[kind], taus,
        config.init_step, config.shrink, config.max_halvings,
        config.step_rule == "theory", LS_SLACK, ll0,
    )
    if swaps % 2:
        ws.S, ws.S2 = ws.S2, ws.S
        ws.P, ws.P2 = ws.P2, ws.P
        ws.LF, ws.LF2 = ws.LF2, ws.LF
    if status == 1:
        raise SolverError(
            f"line search for predictor {j} exceeded {config.max_halvings} halvings"
        )
    if status == 2:
        raise NumericError(f"non-finite objective while updating predictor {j}")
    return ll, int(rejections)


def _theory_steps(X: np.ndarray, R: int, dims) -> np.ndarray:
    return np.array([theory_step(X[:, j], R, dims) for j in range(X.shape[1])])


def m_step_sweep(coef, data: Dataset, posterior: Posterior | np.ndarray,
                 penalty: PenaltySpec, config: SolverConfig | None = None,
                 rng: np.random.Generator | None = None, intercept: bool | None = None):
    """One randomized pass of proximal row updates with fixed responsibilities.

    Returns the updated ``(p, R, C)`` coefficient array. Components whose
    responsibility column is identically zero are left untouched.
    """
    config = config or SolverConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    pi = posterior.pi if isinstance(posterior, Posterior) else np.asarray(posterior)
    coef = np.asarray(coef, dtype=float)
    active = pi.sum(axis=0) > 0
    ws = _Workspace(data, coef, active)
    W = np.ascontiguousarray(pi / data.n)
    penalized = np.ones(data.p, dtype=bool)
    if data.intercept if intercept is None else intercept:
        penalized[0] = False
    lam = _lam_array(penalty, data.shape.M)
    taus = _theory_steps(ws.X, coef.shape[1], data.shape.dims)
    _sweep(ws, W, lam, penalty.kind, penalized, config, rng, taus)
    return ws.coef


# ----------------------------------------------------------------------------
# drivers


def _check_lambda_zero(data: Dataset, penalty: PenaltySpec):
    if not penalty.is_zero:
        return
    for m, c in enumerate(data.shape.dims):
        counts = np.bincount(data.Y[:, m], minlength=c)
        if np.any(counts == 0):
            raise InvalidInputError(
                f"lambda = 0 with an unobserved category in response {m}; "
                "coefficients would diverge"
            )


def init_params(data: Dataset, R: int, config: SolverConfig,
                rng: np.random.Generator) -> MixtureParams:
    C = sum(data.shape.dims)
    coef = rng.normal(0.0, config.init_sd, size=(data.p, R, C))
    return MixtureParams(np.full(R, 1.0 / R), coef, data.shape, data.intercept)


def _merge_duplicates(coef: np.ndarray, delta: np.ndarray, active: np.ndarray) -> bool:
    """Fold components with identical coefficients into the first of them."""
    merged = False
    idx = np.flatnonzero(active)
    for a_pos, a in enumerate(idx):
        if not active[a]:
            continue
        for b in idx[a_pos + 1:]:
            if active[b] and np.array_equal(coef[:, a, :], coef[:, b, :]):
                delta[a] += delta[b]
                delta[b] = 0.0
                active[b] = False
                coef[:, b, :] = 0.0
                merged = True
    return merged


def fit(data: Dataset, R: int, penalty: PenaltySpec, config: SolverConfig | None = None,
        init: MixtureParams | None = None) -> FitResult:
    """Maximize the penalized observed-data log-likelihood by penalized EM.

    Parameters
    ----------
    data : Dataset
    R : int
        Number of mixture components.
    penalty : PenaltySpec
    config : SolverConfig, optional
    init : MixtureParams, optional
        Starting point. Defaults to ``delta = 1/R`` and Gaussian
        coefficients with standard deviation ``config.init_sd``.

    Returns
    -------
    FitResult
        ``trace[t]`` is the objective after iteration t (``trace[0]`` at the
        starting point).
    """
    config = config or SolverConfig()
    if R < 1:
        raise ConfigError("R must be >= 1")
    _check_lambda_zero(data, penalty)
    rng = np.random.default_rng(config.seed)
    theta0 = init if init is not None else init_params(data, R, config, rng)
    if theta0.R != R or theta0.p != data.p or theta0.shape.dims != data.shape.dims:
        raise ConfigError("initial parameters do not match data and R")

    delta = np.array(theta0.delta, dtype=float)
    active = delta > 0
    coef = np.array(theta0.coef, dtype=float)
    coef[:, ~active, :] = 0.0
    ws = _Workspace(data, coef, active)
    lam = _lam_array(penalty, data.shape.M)
    penalized = np.ones(data.p, dtype=bool)
    if data.intercept:
        penalized[0] = False
    taus = _theory_steps(ws.X, R, data.shape.dims)
    n = data.n

    def objective():
        pi, lmix = posterior_from_logdens(ws.log_densities(), delta)
        pen = sum(row_penalty(ws.coef[j], lam, penalty.kind, ws.offsets)
                  for j in np.flatnonzero(penalized))
        return pi, float(lmix.sum()) / n - pen

    pi, obj = objective()
    trace = [obj]
    records = [dict(iter=0, objective=obj, active_components=int(active.sum()),
                    step_rejections=0)]
    converged = False
    it = stalls = 0
    for it in range(1, config.max_em_iters + 1):
        W = np.ascontiguousarray(pi / n)
        _, rejections = _sweep(ws, W, lam, penalty.kind, penalized, config, rng, taus)
        delta = delta_update(pi, config.delta_floor)
        structural = False
        newly_off = active & (delta == 0)
        if newly_off.any():
            active &= ~newly_off
            ws.coef[:, newly_off, :] = 0.0
            structural = True
        structural |= _merge_duplicates(ws.coef, delta, active)
        if structural:
            ws.active = active.copy()
            ws.reset()
        pi, obj = objective()
        if not np.isfinite(obj):
            raise SolverError(f"non-finite objective at iteration {it}")
        records.append(dict(iter=it, objective=obj, active_components=int(active.sum()),
                            step_rejections=int(rejections)))
        prev = trace[-1]
        trace.append(obj)
        # the tolerance applies to the unscaled log-likelihood, twice running
        stalls = stalls + 1 if n * abs(obj - prev) < config.objective_tol else 0
        if stalls >= 2:
            converged = True
            break

    theta = MixtureParams(delta, ws.coef, data.shape, data.intercept)
    return FitResult(theta, penalty, trace, records, it, converged, config.delta_floor)


def oracle_objective(coef, data: Dataset, labels: OracleLabels, lam: float) -> float:
    """Negative known-label log-likelihood per observation plus the global penalty."""
    Zi = labels.indicators()
    theta = MixtureParams(np.full(labels.R, 1.0 / labels.R), coef, data.shape, data.intercept)
    from .model import component_log_densities

    logf = component_log_densities(theta, data.X, data.Y)
    return float(-np.sum(Zi * logf) / data.n + penalty_value(theta, PenaltySpec("global", lam)))


def fit_oracle_z(data: Dataset, labels: OracleLabels, lam: float,
                 config: SolverConfig | None = None) -> MixtureParams:
    """Penalized fit with the latent labels known (responsibilities fixed at Z).

    The problem is convex, so the sweep starts from zero coefficients and
    repeats until the objective stalls. Components without observations are
    dropped (zero weight, zero coefficients) with a warning.
    """
    config = config or SolverConfig()
    R = labels.R
    Zi = labels.indicators()
    counts = Zi.sum(axis=0)
    active = counts > 0
    if not active.all():
        warnings.warn(f"components {np.flatnonzero(~active).tolist()} have no observations; "
                      "dropping them", RuntimeWarning, stacklevel=2)
    penalty = PenaltySpec("global", lam)
    rng = np.random.default_rng(config.seed)
    C = sum(data.shape.dims)
    ws = _Workspace(data, np.zeros((data.p, R, C)), active)
    W = np.ascontiguousarray(Zi / data.n)
    lamv = _lam_array(penalty, data.shape.M)
    penalized = np.ones(data.p, dtype=bool)
    if data.intercept:
        penalized[0] = False
    taus = _theory_steps(ws.X, R, data.shape.dims)

    def objective():
        pen = sum(row_penalty(ws.coef[j], lamv, "global") for j in np.flatnonzero(penalized))
        return ws.weighted_loglik(W) - pen

    prev = objective()
    for _ in range(config.max_em_iters):
        _sweep(ws, W, lamv, "global", penalized, config, rng, taus)
        obj = objective()
        if data.n * abs(obj - prev) < config.objective_tol:
            break
        prev = obj
    delta = counts / counts.sum()
    return MixtureParams(delta, ws.coef, data.shape, data.intercept)


def fit_separate_results(data: Dataset, kind: str, lambdas,
                         config: SolverConfig | None = None) -> list[FitResult]:
    """Independent single-response fits, one FitResult per response."""
    if kind not in ("separate_group", "separate_l1"):
        raise ConfigError(f"separate fits need separate_group or separate_l1, got {kind!r}")
    config = config or SolverConfig()
    lam = PenaltySpec(kind, lambdas).per_response(data.shape.M)
    out = []
    for m in range(data.shape.M):
        sub = data.subset_responses([m])
        out.append(fit(sub, 1, PenaltySpec(kind, float(lam[m])), config))
    return out


def stack_separate(results: Sequence[FitResult], data: Dataset) -> MixtureParams:
    coef = np.concatenate([np.asarray(r.theta.coef) for r in results], axis=2)
    return MixtureParams(np.ones(1), coef, data.shape, data.intercept)


def fit_separate(data: Dataset, kind: str, lambdas,
                 config: SolverConfig | None = None) -> MixtureParams:
    """Separate penalized multinomial regressions, stacked into an R = 1 model."""
    return stack_separate(fit_separate_results(data, kind, lambdas, config), data)


def with_seed(config: SolverConfig, seed: int) -> SolverConfig:
    return replace(config, seed=int(seed))
