"""Mixture of multinomial-logistic regressions for M categorical responses.

Coefficients for every (response, component) pair live in one array
``coef`` of shape ``(p, R, C)`` with ``C = sum(c_m)``; response m occupies
columns ``offsets[m]:offsets[m + 1]`` of the last axis. Row ``coef[j]`` is
the block updated together by the solver for predictor j, and its
row-major flattening is ``vec`` order (component-major, then response,
then category).

Category labels are 0-based throughout the library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .exceptions import DimensionError, InvalidInputError, NumericError
from .tensor_core import ProbTensor, RankRDecomposition, Shape, compose

SIMPLEX_TOL = 1e-12


def category_offsets(dims: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(dims)]).astype(np.int64)


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """Mixture weights ``delta`` and stacked coefficients ``coef``.

    ``intercept`` marks predictor 0 as an all-ones column that is left out
    of every penalty.
    """

    delta: np.ndarray
    coef: np.ndarray
    shape: Shape
    intercept: bool = False

    def __post_init__(self):
        shape = self.shape if isinstance(self.shape, Shape) else Shape(tuple(self.shape))
        delta = _frozen(np.atleast_1d(self.delta))
        coef = _frozen(self.coef)
        if delta.ndim != 1:
            raise DimensionError("delta must be a vector")
        if coef.ndim != 3 or coef.shape[1] != delta.size or coef.shape[2] != sum(shape.dims):
            raise DimensionError(
                f"coef shape {coef.shape} inconsistent with R={delta.size}, "
                f"C={sum(shape.dims)}"
            )
        if np.any(delta < 0) or abs(delta.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidInputError(f"delta {delta} is not on the simplex")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "coef", coef)

    @classmethod
    def from_betas(cls, delta, betas, intercept: bool = False) -> "MixtureParams":
        """Build from nested ``betas[m][r]``, each a ``(p, c_m)`` matrix."""
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        R = delta.size
        dims = tuple(np.shape(betas[m][0])[1] for m in range(len(betas)))
        p = np.shape(betas[0][0])[0]
        coef = np.empty((p, R, sum(dims)))
        off = category_offsets(dims)
        for m in range(len(dims)):
            if len(betas[m]) != R:
                raise DimensionError(f"response {m} has {len(betas[m])} components, expected {R}")
            for r in range(R):
                coef[:, r, off[m]:off[m + 1]] = betas[m][r]
        return cls(delta, coef, Shape(dims), intercept)

    @property
    def R(self) -> int:
        return self.delta.size

    @property
    def p(self) -> int:
        return self.coef.shape[0]

    @property
    def M(self) -> int:
        return self.shape.M

    @property
    def offsets(self) -> np.ndarray:
        return category_offsets(self.shape.dims)

    def beta(self, m: int, r: int) -> np.ndarray:
        off = self.offsets
        return self.coef[:, r, off[m]:off[m + 1]]

    def replace(self, **changes) -> "MixtureParams":
        kw = dict(delta=self.delta, coef=self.coef, shape=self.shape, intercept=self.intercept)
        kw.update(changes)
        return MixtureParams(**kw)

    def penalized_rows(self) -> np.ndarray:
        mask = np.ones(self.p, dtype=bool)
        if self.intercept:
            mask[0] = False
        return mask


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations ``(Y_i, x_i)``; ``Y`` holds 0-based category labels.

    ``z`` optionally carries the latent component labels of simulated data.
    ``names`` keeps the external column names for round-tripping files.
    """

    X: np.ndarray
    Y: np.ndarray
    shape: Shape
    intercept: bool = False
    z: np.ndarray | None = None
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = self.shape if isinstance(self.shape, Shape) else Shape(tuple(self.shape))
        X = _frozen(np.atleast_2d(self.X))
        Y = _frozen(self.Y, dtype=np.int64)
        if Y.ndim == 1:
            Y = _frozen(Y[:, None], dtype=np.int64)
        if X.shape[0] != Y.shape[0]:
            raise DimensionError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if Y.shape[1] != shape.M:
            raise DimensionError(f"Y has {Y.shape[1]} columns, shape has M={shape.M}")
        if not np.all(np.isfinite(X)):
            raise InvalidInputError("X contains non-finite values")
        for m, c in enumerate(shape.dims):
            if Y.shape[0] and (Y[:, m].min() < 0 or Y[:, m].max() >= c):
                raise InvalidInputError(f"response {m} has labels outside [0, {c})")
        if self.intercept and not np.all(X[:, 0] == 1.0):
            raise InvalidInputError("intercept flagged but column 0 is not all ones")
        z = None if self.z is None else _frozen(self.z, dtype=np.int64)
        if z is not None and z.shape != (X.shape[0],):
            raise DimensionError("z must have one label per observation")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset_responses(self, ms: Sequence[int]) -> "Dataset":
        ms = list(ms)
        return Dataset(self.X, self.Y[:, ms], Shape(tuple(self.shape.dims[m] for m in ms)),
                       self.intercept, self.z)


@dataclass(frozen=True, eq=False)
class OracleLabels:
    """Known latent component labels ``z_i`` in ``[0, R)``."""

    z: np.ndarray
    R: int

    def __post_init__(self):
        z = _frozen(self.z, dtype=np.int64)
        if z.ndim != 1 or (z.size and (z.min() < 0 or z.max() >= self.R)):
            raise InvalidInputError(f"labels must lie in [0, {self.R})")
        object.__setattr__(self, "z", z)

    def indicators(self) -> np.ndarray:
        out = np.zeros((self.z.size, self.R))
        out[np.arange(self.z.size), self.z] = 1.0
        return out


def class_probs(beta_mr, x) -> np.ndarray:
    """Multinomial-logistic probabilities ``softmax(beta_mr.T @ x)``."""
    scores = np.asarray(x, dtype=float) @ np.asarray(beta_mr, dtype=float)
    bad = np.flatnonzero(~np.isfinite(scores))
    if bad.size:
        raise NumericError(f"non-finite linear score for category {bad[0]}")
    e = np.exp(scores - scores.max())
    return e / e.sum()


def _log_softmax_blocks(scores: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Log-softmax applied independently within each response block."""
    out = np.empty_like(scores)
    for m in range(len(offsets) - 1):
        blk = scores[..., offsets[m]:offsets[m + 1]]
        out[..., offsets[m]:offsets[m + 1]] = blk - logsumexp(blk, axis=-1, keepdims=True)
    return out


def component_log_densities(theta: MixtureParams, X, Y) -> np.ndarray:
    """``log f_r(Y_i | x_i)`` for every observation and component, shape (n, R)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.int64))
    scores = np.einsum("ip,prc->irc", X, theta.coef)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite linear scores")
    logp = _log_softmax_blocks(scores, theta.offsets)
    cols = Y + theta.offsets[:-1]
    return np.take_along_axis(logp, cols[:, None, :], axis=2).sum(axis=2)


def _log_mix(theta: MixtureParams, logf: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logd = np.log(theta.delta)
    return logsumexp(logf + logd, axis=1)


def mixture_pmf(theta: MixtureParams, x, y) -> float:
    """``Pr(Y = y | X = x)`` under the mixture."""
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (theta.M,) or np.any(y < 0) or np.any(y >= np.array(theta.shape.dims)):
        raise InvalidInputError(f"category vector {y} out of range")
    logf = component_log_densities(theta, np.asarray(x)[None, :], y[None, :])
    return float(np.exp(_log_mix(theta, logf)[0]))


def component_probs(theta: MixtureParams, x) -> list[np.ndarray]:
    """Per-response ``(c_m, R)`` matrices of class probabilities at ``x``."""
    return [
        np.column_stack([class_probs(theta.beta(m, r), x) for r in range(theta.R)])
        for m in range(theta.M)
    ]


def prob_tensor_at(theta: MixtureParams, x) -> ProbTensor:
    return compose(RankRDecomposition(theta.delta, tuple(component_probs(theta, x))))


def prob_tensors(theta: MixtureParams, X) -> np.ndarray:
    """Probability tensors for many predictor rows at once, shape (n, *dims)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    probs = np.exp(_log_softmax_blocks(np.einsum("ip,prc->irc", X, theta.coef), theta.offsets))
    off = theta.offsets
    out = np.zeros((n,) + theta.shape.dims)
    for r in range(theta.R):
        if theta.delta[r] == 0:
            continue
        term = np.full(n, theta.delta[r])
        for m in range(theta.M):
            term = term[..., None] * probs[:, r, off[m]:off[m + 1]].reshape(
                (n,) + (1,) * m + (-1,)
            )
        out += term
    return out


def log_likelihood(theta: MixtureParams, data: Dataset) -> float:
    """Observed-data conditional log-likelihood (may be ``-inf``)."""
    _check_compatible(theta, data)
    logf = component_log_densities(theta, data.X, data.Y)
    return float(np.sum(_log_mix(theta, logf)))


def _check_compatible(theta: MixtureParams, data: Dataset):
    if theta.p != data.p or theta.shape.dims != data.shape.dims:
        raise DimensionError(
            f"model (p={theta.p}, dims={theta.shape.dims}) does not match data "
            f"(p={data.p}, dims={data.shape.dims})"
        )


def predict_map(theta: MixtureParams, x) -> tuple[int, ...]:
    """Most probable category vector; ties go to the lexicographically smallest."""
    t = prob_tensor_at(theta, x)
    return tuple(int(k) for k in np.unravel_index(int(np.argmax(t.values)), t.shape.dims))


def predict_map_batch(theta: MixtureParams, X) -> np.ndarray:
    T = prob_tensors(theta, X)
    flat = T.reshape(T.shape[0], -1).argmax(axis=1)
    return np.column_stack(np.unravel_index(flat, theta.shape.dims)).astype(np.int64)


def free_param_count(p: int, dims: Sequence[int] | Shape, R: int = 1,
                     vectorized: bool = False) -> int:
    """Free parameters of the joint multinomial or of the rank-R mixture."""
    dims = dims.dims if isinstance(dims, Shape) else tuple(dims)
    if vectorized:
        return p * (math.prod(dims) - 1)
    return (R - 1) + p * R * sum(c - 1 for c in dims)
