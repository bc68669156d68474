"""Rectangular micro data shared by the simulator and the estimators.

A :class:`Dataset` is an ordered mapping of column name to 1-d float array.
Columns whose name starts with ``oracle_`` carry simulator ground truth and
are never read by the estimators.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ParseError, SchemaError

COVARIATE_COLUMNS = (
    "age",
    "black",
    "family_size",
    "kids_under6",
    "unemp_rate",
    "region1",
    "region2",
    "region3",
    "fs_guarantee",
)
BUDGET_COLUMNS = ("log_wage", "nonlabor_income", "guarantee", "tax_t", "tax_r")
REQUIRED_COLUMNS = ("hours", "participates") + BUDGET_COLUMNS + COVARIATE_COLUMNS
ORACLE_PREFIX = "oracle_"
# columns allowed to hold missing values
NULLABLE_COLUMNS = frozenset({"log_wage"})

_INSTRUMENT_RE = re.compile(r"^z\d+$")


def instrument_names(names: Iterable[str]) -> list[str]:
    """Raw instrument columns (``z1``, ``z2``, ...) in numeric order."""
    found = [c for c in names if _INSTRUMENT_RE.match(c)]
    return sorted(found, key=lambda c: int(c[1:]))


@dataclass
class Dataset:
    """Column store with a fixed row count."""

    columns: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        cols = {}
        n = None
        for name, values in self.columns.items():
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim != 1:
                raise SchemaError(f"column {name!r} must be 1-d, got shape {arr.shape}")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise SchemaError(f"column {name!r} has {arr.shape[0]} rows, expected {n}")
            cols[name] = arr
        self.columns = cols

    @property
    def n(self) -> int:
        for arr in self.columns.values():
            return int(arr.shape[0])
        return 0

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    @property
    def oracle_names(self) -> list[str]:
        return [c for c in self.columns if c.startswith(ORACLE_PREFIX)]

    @property
    def instrument_names(self) -> list[str]:
        return instrument_names(self.columns)

    def __contains__(self, name) -> bool:
        return name in self.columns

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"missing column {name!r}") from None

    def __len__(self) -> int:
        return self.n

    def require(self, names: Iterable[str]) -> None:
        missing = [c for c in names if c not in self.columns]
        if missing:
            raise SchemaError(f"missing columns: {', '.join(missing)}")

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset({k: v[index] for k, v in self.columns.items()})

    def with_columns(self, values: Mapping[str, np.ndarray] | None = None, **kw) -> "Dataset":
        cols = dict(self.columns)
        cols.update(values or {})
        cols.update(kw)
        return Dataset(cols)

    def without_oracle(self) -> "Dataset":
        return Dataset({k: v for k, v in self.columns.items() if not k.startswith(ORACLE_PREFIX)})

    def cluster_ids(self) -> np.ndarray:
        return self["cluster_id"]

    def validate(self) -> "Dataset":
        """Check the full estimator schema; returns ``self`` for chaining."""
        self.require(REQUIRED_COLUMNS + ("cluster_id",))
        if not self.instrument_names:
            raise SchemaError("dataset needs at least one instrument column z1, z2, ...")
        if self.n < 1:
            raise SchemaError("dataset has no rows")
        for name, arr in self.columns.items():
            if name.startswith(ORACLE_PREFIX):
                continue
            bad = ~np.isfinite(arr)
            if name in NULLABLE_COLUMNS:
                bad &= ~np.isnan(arr)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise SchemaError(f"non-finite value in column {name!r} at row {row}")
        p = self["participates"]
        if not np.all((p == 0.0) | (p == 1.0)):
            row = int(np.flatnonzero((p != 0.0) & (p != 1.0))[0])
            raise SchemaError(f"participates must be 0 or 1 (row {row} has {p[row]!r})")
        if np.any(self["hours"] < 0):
            raise SchemaError("hours must be nonnegative")
        return self

    @classmethod
    def concat(cls, parts: Iterable["Dataset"]) -> "Dataset":
        parts = list(parts)
        if not parts:
            return cls({})
        names = parts[0].names
        for p in parts[1:]:
            if p.names != names:
                raise SchemaError("cannot concatenate datasets with different columns")
        return cls({c: np.concatenate([p[c] for p in parts]) for c in names})


def _format(x: float) -> str:
    if math.isnan(x):
        return ""
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def dataset_text(data: Dataset) -> str:
    """CSV text of ``data``; missing values become empty cells."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = data.names
    writer.writerow(names)
    cols = [data[c] for c in names]
    for i in range(data.n):
        writer.writerow([_format(c[i]) for c in cols])
    return buf.getvalue()


def write_dataset(data: Dataset, path) -> None:
    """Write ``data`` as CSV; missing values become empty cells."""
    with open(path, "w", newline="") as fh:
        fh.write(dataset_text(data))


def read_dataset(path, validate: bool = True) -> Dataset:
    """Read a CSV dataset.

    Empty ``log_wage`` cells are missing wages; every other cell must be
    numeric. Errors carry the offending row (1-based, header is row 1) and
    column.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", row=1) from None
        header = [h.strip() for h in header]
        seen = set()
        for j, h in enumerate(header):
            if h in seen:
                raise ParseError(f"{path}: duplicate header {h!r}", row=1, column=h)
            seen.add(h)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(
                    f"{path}: row {lineno} has {len(rec)} fields, expected {len(header)}",
                    row=lineno,
                )
            vals = []
            for name, cell in zip(header, rec):
                cell = cell.strip()
                if cell == "":
                    if name in NULLABLE_COLUMNS or name.startswith(ORACLE_PREFIX):
                        vals.append(math.nan)
                        continue
                    raise ParseError(
                        f"{path}: empty cell at row {lineno}, column {name!r}", row=lineno, column=name
                    )
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric value {cell!r} at row {lineno}, column {name!r}",
                        row=lineno,
                        column=name,
                    ) from None
            rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    data = Dataset({h: arr[:, j].copy() for j, h in enumerate(header)})
    if validate:
        data.validate()
    return data
