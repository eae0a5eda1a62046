"""Synthetic data from the low-rank mixture model.

Predictors are Gaussian with AR(1) correlation 0.5; a handful of
predictors drive every coefficient matrix and the rest are exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .exceptions import ConfigError
from .model import Dataset, MixtureParams, prob_tensors
from .tensor_core import Shape

AR_RHO = 0.5


class SimScenario(BaseModel):
    """One data-generating configuration; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    R_true: int = Field(2, ge=1)
    n_train: int = Field(300, ge=1)
    n_val: int = Field(200, ge=1)
    n_test: int = Field(1000, ge=1)
    p: int = Field(100, ge=1)
    M: int = Field(4, ge=1)
    c: int = Field(4, ge=2)
    delta1: float = 0.5
    sigma_beta: float = Field(2.0, ge=0)
    n_active: int = Field(5, ge=0)
    intercept: bool = False
    keep_z: bool = True
    seed: int = 0

    @field_validator("R_true")
    @classmethod
    def _supported_R(cls, v):
        if v not in (1, 2, 3):
            raise ValueError("R_true must be 1, 2 or 3")
        return v

    @model_validator(mode="after")
    def _check(self):
        if self.n_active > self.p:
            raise ValueError("n_active cannot exceed p")
        self.weights()
        return self

    def weights(self) -> np.ndarray:
        d1 = self.delta1
        if self.R_true == 1:
            w = np.array([1.0])
        elif self.R_true == 2:
            w = np.array([d1, 1.0 - d1])
        else:
            w = np.array([d1, 2.0 / 3.0 - d1, 1.0 / 3.0])
        if np.any(w <= 0):
            raise ValueError(f"delta1={d1} gives non-positive mixture weights {w.tolist()}")
        return w

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.c,) * self.M


def load_scenario(record: dict) -> SimScenario:
    from pydantic import ValidationError

    try:
        return SimScenario(**record)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True, eq=False)
class SimTruth:
    theta: MixtureParams
    active_set: np.ndarray


@dataclass(frozen=True, eq=False)
class SimData:
    truth: SimTruth
    train: Dataset
    val: Dataset
    test: Dataset


def gen_predictors(n: int, p: int, seed) -> np.ndarray:
    """Rows i.i.d. N(0, Sigma) with ``Sigma[j, k] = 0.5 ** |j - k|``."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, p))
    X = np.empty((n, p))
    X[:, 0] = eps[:, 0]
    scale = math.sqrt(1.0 - AR_RHO**2)
    for j in range(1, p):
        X[:, j] = AR_RHO * X[:, j - 1] + scale * eps[:, j]
    return X


def gen_truth(scenario: SimScenario, seed=None) -> SimTruth:
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    p_total = scenario.p + int(scenario.intercept)
    first = int(scenario.intercept)
    active = np.sort(rng.choice(scenario.p, size=scenario.n_active, replace=False)) + first
    C = scenario.M * scenario.c
    coef = np.zeros((p_total, scenario.R_true, C))
    coef[active] = rng.normal(0.0, scenario.sigma_beta, size=(active.size, scenario.R_true, C))
    theta = MixtureParams(scenario.weights(), coef, Shape(scenario.dims), scenario.intercept)
    return SimTruth(theta, active)


def gen_responses(truth: SimTruth | MixtureParams, X, seed, return_z: bool = False):
    """Draw ``Z ~ Categorical(delta)`` then each ``Y_m`` from its component."""
    theta = truth.theta if isinstance(truth, SimTruth) else truth
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    z = rng.choice(theta.R, size=n, p=theta.delta)
    scores = np.einsum("ip,prc->irc", X, theta.coef)[np.arange(n), z]
    off = theta.offsets
    Y = np.empty((n, theta.M), dtype=np.int64)
    for m in range(theta.M):
        blk = scores[:, off[m]:off[m + 1]]
        prob = np.exp(blk - blk.max(axis=1, keepdims=True))
        prob /= prob.sum(axis=1, keepdims=True)
        u = rng.random(n)
        Y[:, m] = np.minimum((prob.cumsum(axis=1) < u[:, None]).sum(axis=1), blk.shape[1] - 1)
    return (Y, z) if return_z else Y


def _with_intercept(X: np.ndarray, intercept: bool) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X]) if intercept else X


def simulate(scenario: SimScenario, seed=None) -> SimData:
    """Truth plus train / validation / test sets, reproducible from the seed."""
    base = scenario.seed if seed is None else seed
    ss = np.random.SeedSequence(base)
    s_truth, s_xtr, s_ytr, s_xva, s_yva, s_xte, s_yte = ss.spawn(7)
    truth = gen_truth(scenario, s_truth)
    shape = Shape(scenario.dims)

    def make(n, sx, sy):
        X = _with_intercept(gen_predictors(n, scenario.p, sx), scenario.intercept)
        Y, z = gen_responses(truth, X, sy, return_z=True)
        return Dataset(X, Y, shape, scenario.intercept, z if scenario.keep_z else None)

    return SimData(truth,
                   make(scenario.n_train, s_xtr, s_ytr),
                   make(scenario.n_val, s_xva, s_yva),
                   make(scenario.n_test, s_xte, s_yte))


def _paired_tensors(theta_hat, truth, X_test, X_truth):
    theta = truth.theta if isinstance(truth, SimTruth) else truth
    X_truth = X_test if X_truth is None else X_truth
    n = len(X_test)
    return (prob_tensors(theta_hat, X_test).reshape(n, -1),
            prob_tensors(theta, X_truth).reshape(n, -1))


def sqrt_avg_kl_test(theta_hat: MixtureParams, truth: SimTruth | MixtureParams, X_test,
                     floor: float | None = None, X_truth=None) -> float:
    """Root of the test-set mean of ``sum P_hat * log(P_hat / P)``.

    A truth cell that is exactly zero under a positive estimate makes the
    result infinite; ``floor`` clamps the truth from below instead.
    ``X_truth`` is the truth's design for the same rows when it differs
    (for example, when only the estimate has an intercept column).
    """
    est, ref = _paired_tensors(theta_hat, truth, X_test, X_truth)
    if floor is not None:
        ref = np.maximum(ref, floor)
    pos = est > 0
    if np.any(ref[pos] == 0):
        return math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        cell = np.where(pos, est * (np.log(est) - np.log(ref)), 0.0)
    return math.sqrt(max(float(cell.sum(axis=1).mean()), 0.0))


def avg_hellinger(theta_hat: MixtureParams, truth: SimTruth | MixtureParams, X_test,
                  X_truth=None) -> float:
    est, ref = _paired_tensors(theta_hat, truth, X_test, X_truth)
    h = np.sqrt(0.5 * np.sum((np.sqrt(est) - np.sqrt(ref)) ** 2, axis=1))
    return float(np.minimum(h, 1.0).mean())
