"""Dense conditional probability tensors and their rank-structured form.

Tensors are stored row-major with the first response varying slowest, so
``values.ravel()`` is the canonical serialization order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from .exceptions import DimensionError, InvalidInputError

MAX_CELLS = 2**26
SUM_TOL = 1e-10


@dataclass(frozen=True)
class Shape:
    """Category counts ``(c_1, ..., c_M)`` of the M responses."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(c) for c in self.dims)
        if len(dims) < 1:
            raise DimensionError("need at least one response")
        if any(c < 2 for c in dims):
            raise DimensionError(f"every response needs >= 2 categories, got {dims}")
        if math.prod(dims) > MAX_CELLS:
            raise DimensionError(
                f"tensor with {math.prod(dims)} cells exceeds the {MAX_CELLS} cell cap"
            )
        object.__setattr__(self, "dims", dims)

    @property
    def M(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return math.prod(self.dims)


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ProbTensor:
    """Joint pmf of ``(Y_1, ..., Y_M)`` given one predictor value.

    Parameters
    ----------
    shape : Shape
    values : array_like
        Either the full M-way array or its row-major flattening.
    check : bool
        Validate nonnegativity and unit mass. Turned off only for
        intermediate results (e.g. composing an unnormalized decomposition).
    """

    shape: Shape
    values: np.ndarray
    check: bool = True

    def __post_init__(self):
        if np.size(self.values) != self.shape.size:
            raise DimensionError(
                f"{np.size(self.values)} values given for shape {self.shape.dims}"
            )
        vals = _readonly(np.reshape(self.values, self.shape.dims))
        object.__setattr__(self, "values", vals)
        if self.check:
            if not np.all(np.isfinite(vals)):
                raise InvalidInputError("tensor has non-finite entries")
            if vals.min() < 0:
                raise InvalidInputError("tensor has negative entries")
            total = vals.sum()
            if abs(total - 1.0) > SUM_TOL:
                raise InvalidInputError(f"tensor entries sum to {total!r}, not 1")

    @classmethod
    def from_array(cls, values, check: bool = True) -> "ProbTensor":
        values = np.asarray(values, dtype=float)
        return cls(Shape(values.shape), values, check=check)

    def to_record(self) -> dict:
        return {"dims": list(self.shape.dims), "values": self.values.ravel().tolist()}

    @classmethod
    def from_record(cls, record: dict) -> "ProbTensor":
        try:
            return cls(Shape(tuple(record["dims"])), np.asarray(record["values"], dtype=float))
        except KeyError as exc:
            raise InvalidInputError(f"tensor record missing key {exc}") from None


@dataclass(frozen=True, eq=False)
class RankRDecomposition:
    """Weighted sum of R outer products.

    ``factors[m]`` is a ``(c_m, R)`` matrix whose column r is the factor
    vector of response m in component r.
    """

    weights: np.ndarray
    factors: tuple[np.ndarray, ...]

    def __post_init__(self):
        w = _readonly(np.atleast_1d(self.weights))
        if w.ndim != 1:
            raise DimensionError("weights must be a vector")
        facs = tuple(_readonly(f) for f in self.factors)
        for m, f in enumerate(facs):
            if f.ndim != 2 or f.shape[1] != w.size:
                raise DimensionError(
                    f"factor {m} has shape {f.shape}, expected (c_{m}, {w.size})"
                )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "factors", facs)

    @property
    def R(self) -> int:
        return self.weights.size

    @property
    def shape(self) -> Shape:
        return Shape(tuple(f.shape[0] for f in self.factors))


def compose(d: RankRDecomposition) -> ProbTensor:
    """Materialize ``sum_r w_r * p_1r (x) ... (x) p_Mr``.

    The result is only validated as a probability tensor when it actually
    is one; composing an unnormalized decomposition is allowed.
    """
    shape = d.shape
    out = np.zeros(shape.dims)
    for r in range(d.R):
        out += d.weights[r] * reduce(np.multiply.outer, [f[:, r] for f in d.factors])
    valid = (
        np.all(out >= 0)
        and abs(out.sum() - 1.0) <= SUM_TOL
    )
    return ProbTensor(shape, out, check=bool(valid))


def marginals(t: ProbTensor, m: int) -> np.ndarray:
    """Distribution of response ``m`` (0-based) obtained by summing out the rest."""
    M = t.shape.M
    if not 0 <= m < M:
        raise IndexError(f"response index {m} out of range for M={M}")
    axes = tuple(k for k in range(M) if k != m)
    return t.values.sum(axis=axes) if axes else t.values.copy()


def rank_one_check(t: ProbTensor, tol: float = 1e-8):
    """Test whether ``t`` equals the outer product of its marginals.

    Returns
    -------
    is_rank_one : bool
    decomposition : RankRDecomposition or None
        The marginal factorization when the check passes.
    """
    margs = [marginals(t, m) for m in range(t.shape.M)]
    outer = reduce(np.multiply.outer, margs)
    if np.max(np.abs(outer - t.values)) <= tol:
        return True, RankRDecomposition(np.ones(1), tuple(p[:, None] for p in margs))
    return False, None


def normalize(d: RankRDecomposition) -> RankRDecomposition:
    """Rescale to simplex weights with L1-normalized nonnegative factors.

    Factor norms (and signs, for sign-consistent factors) are absorbed into
    the weights; components with zero weight or a zero factor are dropped.
    Each rank-one term must itself be entrywise nonnegative.
    """
    t = compose(d)
    if not t.check:
        raise InvalidInputError("decomposition does not compose to a probability tensor")
    weights, factors = [], [[] for _ in d.factors]
    for r in range(d.R):
        w = d.weights[r]
        if w == 0:
            continue
        cols = []
        for f in d.factors:
            col = f[:, r]
            norm = np.abs(col).sum()
            if norm == 0:
                w = 0.0
                break
            if np.all(col >= 0):
                sign = 1.0
            elif np.all(col <= 0):
                sign = -1.0
            else:
                raise InvalidInputError(f"component {r} has a mixed-sign factor")
            w *= sign * norm
            cols.append(np.abs(col) / norm)
        if w < 0:
            raise InvalidInputError(f"component {r} composes to a negative term")
        if w == 0:
            continue
        weights.append(w)
        for m, col in enumerate(cols):
            factors[m].append(col)
    if not weights:
        raise InvalidInputError("no component with positive weight")
    return RankRDecomposition(
        np.array(weights), tuple(np.column_stack(cols) for cols in factors)
    )


def rank_upper_bound(shape: Shape | Sequence[int]) -> int:
    """Largest rank ever needed for a probability tensor of this shape."""
    dims = shape.dims if isinstance(shape, Shape) else Shape(tuple(shape)).dims
    return math.prod(dims) // max(dims)


def _check_same_shape(p: ProbTensor, q: ProbTensor):
    if p.shape.dims != q.shape.dims:
        raise DimensionError(f"shape mismatch: {p.shape.dims} vs {q.shape.dims}")


def kl_divergence(p: ProbTensor, q: ProbTensor, floor: float | None = None) -> float:
    """``sum q * log(q / p)`` with ``p`` the truth and ``q`` the estimate.

    Cells where ``q == 0`` contribute nothing. A cell with ``p == 0 < q``
    makes the divergence infinite unless ``floor`` is given, in which case
    ``p`` is clamped from below by ``floor`` (plotting variant).
    """
    _check_same_shape(p, q)
    pv, qv = p.values.ravel(), q.values.ravel()
    if floor is not None:
        pv = np.maximum(pv, floor)
    pos = qv > 0
    if np.any(pv[pos] == 0):
        return math.inf
    return float(max(np.sum(qv[pos] * (np.log(qv[pos]) - np.log(pv[pos]))), 0.0))


def hellinger(p: ProbTensor, q: ProbTensor) -> float:
    _check_same_shape(p, q)
    diff = np.sqrt(p.values) - np.sqrt(q.values)
    return float(min(math.sqrt(0.5 * np.sum(diff * diff)), 1.0))
