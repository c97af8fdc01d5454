"""Tabular data loading, fold plans, response transforms and the simulation design."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from dgbm.errors import DataError, InvalidInputError, InvalidParameterError

SIM_COLUMNS = ["x"] + [f"X{i}" for i in range(1, 11)] + ["y"]


@dataclass
class TabularData:
    """Feature matrix plus response read from one table.

    Attributes:
        feature_names: Column names of ``X`` in order.
        X: Float matrix; NaN marks a missing cell.
        y: Finite response vector.
        response_name: Name of the response column.
    """

    feature_names: list[str]
    X: np.ndarray
    y: np.ndarray
    response_name: str = "y"

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[1] < 1:
            raise InvalidInputError("need at least one feature column")
        if self.X.shape[0] != self.y.shape[0]:
            raise InvalidInputError("feature and response row counts differ")
        if not np.all(np.isfinite(self.y)):
            raise InvalidInputError("response must be finite")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "TabularData":
        return TabularData(list(self.feature_names), self.X[idx], self.y[idx], self.response_name)


def load_csv(path, response_column: str) -> TabularData:
    """Read a comma-separated file with a header row.

    Empty feature cells become NaN. Errors name the offending line number
    (the header is line 1).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if response_column not in header:
            raise DataError(
                f"{path}: response column {response_column!r} not found; columns are {header}"
            )
        r = header.index(response_column)
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line_no} has {len(row)} fields, expected {len(header)}")
            values = []
            for col, cell in enumerate(row):
                cell = cell.strip()
                if cell == "":
                    if col == r:
                        raise DataError(f"{path}: line {line_no}: response cell is empty")
                    values.append(math.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    what = "response" if col == r else f"column {header[col]!r}"
                    raise DataError(f"{path}: line {line_no}: non-numeric {what} value {cell!r}") from None
            if not math.isfinite(values[r]):
                raise DataError(f"{path}: line {line_no}: response value is not finite")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    if arr.shape[1] < 2:
        raise DataError(f"{path}: no feature columns besides the response")
    names = [h for i, h in enumerate(header) if i != r]
    return TabularData(names, np.delete(arr, r, axis=1), arr[:, r], response_column)


def load_features(path, feature_names) -> np.ndarray:
    """Read the named columns of a CSV in the given order; other columns are ignored."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        missing = [n for n in feature_names if n not in header]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        cols = [header.index(n) for n in feature_names]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line_no} has {len(row)} fields, expected {len(header)}")
            values = []
            for c in cols:
                cell = row[c].strip()
                try:
                    values.append(math.nan if cell == "" else float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: line {line_no}: non-numeric column {header[c]!r} value {cell!r}"
                    ) from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    X = np.array(rows, dtype=np.float64)
    if np.any(np.isinf(X)):
        raise DataError(f"{path}: infinite feature values")
    return X


def write_csv(path, data: TabularData) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(data.feature_names) + [data.response_name])
        for row, yv in zip(data.X, data.y):
            w.writerow(["" if np.isnan(v) else repr(float(v)) for v in row] + [repr(float(yv))])


@dataclass(frozen=True)
class FoldPlan:
    n_rows: int
    seed: int
    folds: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def n_folds(self) -> int:
        return len(self.folds)


def n_test_rows(n_rows: int) -> int:
    """10% of the rows, rounded half up."""
    return int(math.floor(0.1 * n_rows + 0.5))


def make_folds(n_rows: int, n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Independent 90/10 shuffles; fold ``k`` uses seed ``seed + k``."""
    if n_rows < 10:
        raise InvalidParameterError(f"need at least 10 rows for a 10% test split, got {n_rows}")
    if n_folds < 1:
        raise InvalidParameterError(f"n_folds must be >= 1, got {n_folds}")
    n_test = n_test_rows(n_rows)
    folds = []
    for k in range(n_folds):
        perm = np.random.default_rng(seed + k).permutation(n_rows)
        folds.append((np.sort(perm[:-n_test]), np.sort(perm[-n_test:])))
    return FoldPlan(n_rows=n_rows, seed=seed, folds=tuple(folds))


@dataclass(frozen=True)
class ResponseTransform:
    """``y' = scale * (log(y) if log else y)`` and its inverse."""

    log: bool = False
    scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidParameterError(f"transform scale must be finite and > 0, got {self.scale!r}")

    @property
    def is_identity(self) -> bool:
        return not self.log and self.scale == 1.0

    def forward(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if self.log:
            bad = np.flatnonzero(~(y > 0))
            if bad.size:
                raise InvalidInputError(
                    f"log transform needs positive responses; offending rows: {bad[:10].tolist()}"
                )
            y = np.log(y)
        return self.scale * y

    def inverse(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64) / self.scale
        return np.exp(y) if self.log else y

    def log_abs_jacobian(self, y) -> np.ndarray:
        """``log |dy'/dy|`` at original-scale ``y`` (for density back-transforms)."""
        y = np.asarray(y, dtype=np.float64)
        out = np.full(y.shape, np.log(self.scale))
        return out - np.log(y) if self.log else out

    def to_dict(self) -> dict:
        return {"log": self.log, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict | None) -> "ResponseTransform":
        d = d or {}
        return cls(log=bool(d.get("log", False)), scale=float(d.get("scale", 1.0)))


def transform_response(y, log: bool = False, scale: float = 1.0):
    """Apply ``scale * (log y)``; returns ``(y_transformed, transform)``."""
    t = ResponseTransform(log=log, scale=scale)
    return t.forward(y), t


def sim_sd(x) -> np.ndarray:
    """Standard deviation of the simulated response as a function of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    return 1.0 + 4.0 * ((x > 0.3) & (x < 0.5)) + 2.0 * (x > 0.7)


def simulate_heteroskedastic(n: int, seed=0) -> TabularData:
    """``y ~ N(10, sd(x)^2)`` with one informative ``x`` and ten uniform noise columns."""
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    noise = rng.uniform(0.0, 1.0, (n, 10))
    y = 10.0 + sim_sd(x) * rng.standard_normal(n)
    return TabularData(SIM_COLUMNS[:-1], np.column_stack([x, noise]), y, "y")
