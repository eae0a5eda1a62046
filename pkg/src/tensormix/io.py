"""File formats: datasets, fitted models, tensor records and path reports.

Dataset files are comma-delimited with a header row. Response columns are
named ``y:<name>`` (optionally ``y:<name>[c]`` to fix the number of
categories), predictors ``x:<name>`` and an optional latent label column
``z:<name>``. Labels in files are 1-based.

Models are JSON documents tagged with a format name and version.
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataError, DimensionError
from .model import Dataset, MixtureParams
from .tensor_core import ProbTensor, Shape

MODEL_FORMAT = "tensormix-model"
MODEL_VERSION = 1
_Y_COL = re.compile(r"^y:(?P<name>[^\[\]]+)(\[(?P<c>\d+)\])?$")


def _fmt(v: float) -> str:
    return repr(float(v))


def with_intercept(X: np.ndarray, intercept: bool) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.column_stack([np.ones(X.shape[0]), X]) if intercept else X


def read_table(path) -> dict:
    """Parse a dataset file into raw columns.

    Returns a dict with keys ``X`` (n, p), ``Y`` (n, M) 0-based or None,
    ``z`` 0-based or None, ``dims`` (declared or None per response) and
    ``names``. Malformed content raises :class:`DataError` with the
    offending line number.
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise DataError(f"{path}:1: empty file, expected a header row") from None
        ycols, xcols, zcol, dims, ynames, xnames = [], [], None, [], [], []
        for k, name in enumerate(h.strip() for h in header):
            if name.startswith("y:"):
                mt = _Y_COL.match(name)
                if mt is None:
                    raise DataError(f"{path}:1: bad response column name {name!r}")
                ycols.append(k)
                ynames.append(mt["name"])
                dims.append(int(mt["c"]) if mt["c"] else None)
            elif name.startswith("x:"):
                xcols.append(k)
                xnames.append(name[2:])
            elif name.startswith("z:"):
                if zcol is not None:
                    raise DataError(f"{path}:1: more than one z: column")
                zcol = k
            else:
                raise DataError(f"{path}:1: column {name!r} lacks a y:/x:/z: prefix")
        X, Y, Z = [], [], []
        for lineno, row in enumerate(rows, start=2):
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                X.append([float(row[k]) for k in xcols])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric predictor value") from None
            if not all(math.isfinite(v) for v in X[-1]):
                raise DataError(f"{path}:{lineno}: missing or non-finite predictor value")
            try:
                Y.append([int(row[k]) - 1 for k in ycols])
                if zcol is not None:
                    Z.append(int(row[zcol]) - 1)
            except ValueError:
                raise DataError(f"{path}:{lineno}: labels must be positive integers") from None
            if any(v < 0 for v in Y[-1]) or (Z and Z[-1] < 0):
                raise DataError(f"{path}:{lineno}: labels are 1-based; found a value below 1")
            for m, c in enumerate(dims):
                if c is not None and Y[-1][m] >= c:
                    raise DataError(f"{path}:{lineno}: label {Y[-1][m] + 1} exceeds the "
                                    f"declared {c} categories of y:{ynames[m]}")
    if not X:
        raise DataError(f"{path}: no data rows")
    Yarr = np.array(Y, dtype=np.int64).reshape(len(X), len(ycols)) if ycols else None
    return dict(X=np.array(X, dtype=float).reshape(len(X), len(xcols)), Y=Yarr,
                z=np.array(Z, dtype=np.int64) if zcol is not None else None,
                dims=dims, names=dict(y=ynames, x=xnames))


def load_dataset(path, intercept: bool = True, dims=None) -> Dataset:
    """Read a dataset file; an all-ones intercept column is prepended if asked.

    Category counts come from ``dims``, then from the header, then from the
    largest observed label.
    """
    t = read_table(path)
    if t["Y"] is None:
        raise DataError(f"{path}: no y: response columns")
    Y = t["Y"]
    if dims is None:
        dims = tuple(c if c is not None else max(int(Y[:, m].max()) + 1, 2)
                     for m, c in enumerate(t["dims"]))
    try:
        return Dataset(with_intercept(t["X"], intercept), Y, Shape(tuple(dims)), intercept,
                       t["z"], t["names"])
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_dataset(path, data: Dataset, include_z: bool = True) -> None:
    """Write raw predictors (intercept column dropped) and 1-based labels."""
    X = data.X[:, 1:] if data.intercept else data.X
    ynames = data.names.get("y") or [f"Y{m + 1}" for m in range(data.shape.M)]
    xnames = data.names.get("x") or [f"X{j + 1}" for j in range(X.shape[1])]
    header = [f"y:{nm}[{c}]" for nm, c in zip(ynames, data.shape.dims)]
    header += [f"x:{nm}" for nm in xnames]
    z = data.z if include_z else None
    if z is not None:
        header.append("z:Z")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [str(int(v) + 1) for v in data.Y[i]] + [_fmt(v) for v in X[i]]
            if z is not None:
                row.append(str(int(z[i]) + 1))
            w.writerow(row)


def model_to_record(theta: MixtureParams, meta: dict | None = None) -> dict:
    off = theta.offsets
    betas = [[theta.coef[:, r, off[m]:off[m + 1]].tolist() for r in range(theta.R)]
             for m in range(theta.M)]
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "R": theta.R,
        "dims": list(theta.shape.dims),
        "p": theta.p,
        "intercept": bool(theta.intercept),
        "delta": theta.delta.tolist(),
        "beta": betas,
        "fit": meta or {},
    }


def model_from_record(rec: dict) -> tuple[MixtureParams, dict]:
    if not isinstance(rec, dict) or rec.get("format") != MODEL_FORMAT:
        raise DataError("not a model document")
    if rec.get("version") != MODEL_VERSION:
        raise DataError(f"unsupported model version {rec.get('version')!r}")
    try:
        theta = MixtureParams.from_betas(rec["delta"], [[np.asarray(b, dtype=float) for b in bm]
                                                        for bm in rec["beta"]],
                                         bool(rec["intercept"]))
    except KeyError as exc:
        raise DataError(f"model document lacks field {exc}") from None
    except (TypeError, IndexError) as exc:
        raise DataError(f"malformed model document: {exc}") from None
    if theta.R != rec["R"] or list(theta.shape.dims) != list(rec["dims"]) or theta.p != rec["p"]:
        raise DimensionError("model header disagrees with its coefficients")
    return theta, rec.get("fit", {})


def _dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def save_model(path, theta: MixtureParams, meta: dict | None = None) -> None:
    _dump(model_to_record(theta, meta), path)


def load_model(path) -> tuple[MixtureParams, dict]:
    try:
        with open(path) as fh:
            rec = json.load(fh)
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    try:
        return model_from_record(rec)
    except DataError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def load_json_config(path) -> dict:
    try:
        with open(path) as fh:
            out = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot open ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(out, (dict, list)):
        raise ConfigError(f"{path}: expected a JSON object")
    return out


def write_tensor_records(path, tensors) -> None:
    """One ``{dims, values}`` JSON record per line."""
    with open(path, "w") as fh:
        for t in tensors:
            rec = t.to_record() if isinstance(t, ProbTensor) else t
            fh.write(json.dumps(rec) + "\n")


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


PATH_HEADER = ["R", "index", "lambda", "val_metric", "effective_R", "support_size",
               "iterations", "failed", "selected"]


def write_path_report(path, results: dict) -> None:
    """Path table for ``{R: PathResult}``.

    Per-response lambdas and selection flags of the separate kinds are
    ';'-joined.
    """
    rows = []
    for R, result in results.items():
        for k, rec in enumerate(result.records()):
            lam = rec["lambda_"]
            lam = ";".join(_fmt(v) for v in lam) if isinstance(lam, list) else _fmt(lam)
            if result.selected_per_response is not None:
                sel = ";".join("1" if s == k else "0" for s in result.selected_per_response)
            else:
                sel = int(k == result.selected)
            rows.append([R, k, lam, _fmt(rec["val_metric"]), rec["effective_R"],
                         rec["support_size"], rec["iterations"], int(rec["failed"]), sel])
    write_rows(path, PATH_HEADER, rows)
