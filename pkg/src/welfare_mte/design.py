"""Regressor construction shared by the first and second stages.

A *term* is a string naming one regressor:

* a dataset column (``age``, ``black``, ...);
* ``const``;
* a derived budget term: ``log_w`` (log wage), ``log_w_net`` (log net wage
  on welfare, ``log_wage + log(1 - t)``), ``log_g`` (log guarantee),
  ``log_n10`` (``log(nonlabor_income + 10)``);
* ``log_<col>`` for any positive column;
* ``zindex``, the combined instrument index (see :func:`instrument_index`);
* a product ``a*b`` of any of the above.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import linalg

from .dataset import Dataset
from .errors import InvalidInputError, RankDeficiencyError, SchemaError

INDEX_TERM = "zindex"


def instrument_index(columns: Sequence, weighting: str = "inverse-variance", names=None, clusters=None):
    """Weighted average of logged barrier columns.

    Parameters
    ----------
    columns : sequence of 1-d arrays
        Positive barrier measures.
    weighting : {"inverse-variance", "simple"}
    names : optional column names used in error messages.
    clusters : optional cluster ids; when given, each column's variance is
        computed across cluster means (the barriers vary by state).

    Returns
    -------
    index : ndarray
    weights : ndarray
        Nonnegative and summing to one.
    """
    if len(columns) == 0:
        raise InvalidInputError("instrument index needs at least one column")
    names = list(names) if names is not None else [f"column {j}" for j in range(len(columns))]
    logs = []
    for name, col in zip(names, columns):
        col = np.asarray(col, dtype=np.float64)
        if np.any(~(col > 0)):
            raise InvalidInputError(f"instrument column {name!r} has zero or negative entries; logs undefined")
        logs.append(np.log(col))
    weights = index_weights(logs, weighting, names, clusters)
    return combine_index(logs, weights), weights


def index_weights(logs, weighting="inverse-variance", names=None, clusters=None) -> np.ndarray:
    k = len(logs)
    if weighting == "simple" or k == 1:
        return np.full(k, 1.0 / k)
    if weighting != "inverse-variance":
        raise InvalidInputError(f"unknown weighting {weighting!r}")
    var = np.empty(k)
    for j, lg in enumerate(logs):
        if clusters is not None:
            _, inv = np.unique(clusters, return_inverse=True)
            lg = np.bincount(inv, weights=lg) / np.bincount(inv)
        var[j] = np.var(lg, ddof=1) if lg.shape[0] > 1 else 0.0
    if np.any(var <= 0):
        bad = [names[j] if names else j for j in np.flatnonzero(var <= 0)]
        raise InvalidInputError(f"instrument columns {bad} have no variation; inverse-variance weights undefined")
    w = 1.0 / var
    return w / w.sum()


def combine_index(logs, weights) -> np.ndarray:
    out = np.zeros_like(np.asarray(logs[0], dtype=np.float64))
    for w, lg in zip(weights, logs):
        out = out + w * lg
    return out


def add_index(data: Dataset, columns, weights) -> Dataset:
    """Attach ``zindex`` computed with fixed ``weights``."""
    logs = []
    for c in columns:
        col = data[c]
        if np.any(~(col > 0)):
            raise InvalidInputError(f"instrument column {c!r} has zero or negative entries; logs undefined")
        logs.append(np.log(col))
    return data.with_columns({INDEX_TERM: combine_index(logs, weights)})


def _log_positive(x, label):
    if np.any(~(x > 0)):
        raise InvalidInputError(f"{label} must be > 0 to take logs")
    return np.log(x)


def term_values(data: Dataset, term: str) -> np.ndarray:
    if "*" in term:
        out = np.ones(data.n)
        for part in term.split("*"):
            out = out * term_values(data, part.strip())
        return out
    if term == "const":
        return np.ones(data.n)
    if term in data:
        return data[term]
    if term == "log_w":
        return data["log_wage"]
    if term == "log_w_net":
        t = data["tax_t"]
        if np.any(t >= 1):
            raise InvalidInputError("log_w_net undefined when tax_t = 1")
        return data["log_wage"] + np.log1p(-t)
    if term == "log_g":
        return _log_positive(data["guarantee"], "guarantee")
    if term == "log_n10":
        return np.log(data["nonlabor_income"] + 10.0)
    if term.startswith("log_") and term[4:] in data:
        return _log_positive(data[term[4:]], term[4:])
    raise SchemaError(f"unknown regressor term {term!r}: no such column or derived term")


def design_matrix(data: Dataset, terms: Sequence[str]) -> np.ndarray:
    if len(terms) == 0:
        return np.empty((data.n, 0))
    X = np.column_stack([term_values(data, t) for t in terms])
    if not np.all(np.isfinite(X)):
        bad = [t for j, t in enumerate(terms) if not np.all(np.isfinite(X[:, j]))]
        raise InvalidInputError(f"non-finite values in regressors {bad} (missing wages not imputed?)")
    return X


def check_rank(X: np.ndarray, names: Sequence[str], what: str = "design", blocks=None) -> None:
    """Raise :class:`RankDeficiencyError` naming collinear columns.

    ``blocks`` optionally maps each column to a block label reported in the
    message.
    """
    n, p = X.shape
    if p == 0:
        return
    if n < p:
        raise RankDeficiencyError(f"{what} has {p} columns but only {n} rows", columns=list(names))
    scale = np.sqrt(np.mean(X * X, axis=0))
    scale[scale == 0] = 1.0
    _, sv, vt = linalg.svd(X / scale, full_matrices=False)
    tol = max(n, p) * np.finfo(float).eps * 1e3 * sv[0]
    null = vt[sv <= tol]
    if null.shape[0]:
        involved = np.flatnonzero(np.any(np.abs(null) > 1e-6, axis=0))
        cols = [names[j] for j in involved]
        msg = f"{what} is rank deficient (rank {p - null.shape[0]} < {p}); collinear columns: {cols}"
        if blocks is not None:
            msg += f" in blocks {sorted({blocks[j] for j in involved})}"
        raise RankDeficiencyError(msg, columns=cols)
