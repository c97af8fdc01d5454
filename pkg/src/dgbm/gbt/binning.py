"""Quantile binning of raw feature matrices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dgbm.errors import InvalidInputError, InvalidParameterError

BIN_DTYPE = np.int32


@dataclass(frozen=True)
class BinMapper:
    """Per-feature bin boundaries.

    Bin ``i`` of feature ``f`` holds the values ``v`` with
    ``boundaries[f][i-1] < v <= boundaries[f][i]``; the first and last bins are
    open towards -inf and +inf. Missing values (NaN) go to the reserved bin
    whose index equals ``n_bins[f]``.

    Attributes:
        boundaries: One strictly increasing float array per feature.
        max_bin: Upper limit on value bins plus the missing bin.
    """

    boundaries: tuple[np.ndarray, ...]
    max_bin: int = 64

    @property
    def n_features(self) -> int:
        return len(self.boundaries)

    @property
    def n_bins(self) -> np.ndarray:
        """Number of value bins per feature (the missing bin excluded)."""
        return np.array([len(b) + 1 for b in self.boundaries], dtype=np.int64)

    def missing_bin(self, feature: int) -> int:
        return len(self.boundaries[feature]) + 1

    def transform(self, X) -> np.ndarray:
        """Map raw values to bin indices, shape ``(n_rows, n_features)``."""
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise InvalidInputError(
                f"expected {self.n_features} features, got {X.shape[1]}"
            )
        out = np.empty(X.shape, dtype=BIN_DTYPE)
        for f, bounds in enumerate(self.boundaries):
            col = X[:, f]
            idx = np.searchsorted(bounds, col, side="left").astype(BIN_DTYPE)
            idx[np.isnan(col)] = len(bounds) + 1
            out[:, f] = idx
        return out


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InvalidInputError(f"feature matrix must be 2-D, got shape {X.shape}")
    return X


def _feature_boundaries(col: np.ndarray, max_bin: int) -> np.ndarray:
    values = col[~np.isnan(col)]
    if values.size == 0:
        return np.empty(0)
    distinct = np.unique(values)
    n_value_bins = max_bin - 1
    if distinct.size <= n_value_bins:
        return distinct[:-1] + np.diff(distinct) / 2.0
    levels = np.arange(1, n_value_bins) / n_value_bins
    cuts = np.unique(np.quantile(values, levels))
    # a cut at the maximum would leave the top bin empty
    return cuts[cuts < distinct[-1]]


def build_bins(X, max_bin: int = 64) -> BinMapper:
    """Build quantile bin boundaries for every feature column.

    Features with at most ``max_bin - 1`` distinct finite values get one bin
    per value (boundaries at midpoints); otherwise the boundaries are the
    empirical quantiles at levels ``k / (max_bin - 1)``. NaN marks a missing
    value.
    """
    if int(max_bin) != max_bin or max_bin < 2:
        raise InvalidParameterError(f"max_bin must be an integer >= 2, got {max_bin}")
    X = _as_matrix(X)
    if X.shape[0] < 1:
        raise InvalidInputError("cannot build bins from an empty matrix")
    bounds = tuple(_feature_boundaries(X[:, f], int(max_bin)) for f in range(X.shape[1]))
    return BinMapper(boundaries=bounds, max_bin=int(max_bin))


@dataclass
class BinnedDataset:
    """Binned features plus the raw matrix and response.

    Attributes:
        bins: Bin indices, shape ``(n_rows, n_features)``.
        features: The raw feature matrix, kept for prediction-time routing.
        y: Response vector.
        mapper: The :class:`BinMapper` that produced ``bins``.
    """

    bins: np.ndarray
    features: np.ndarray
    y: np.ndarray
    mapper: BinMapper
    _stride: int = field(init=False, repr=False)

    def __post_init__(self):
        if self.bins.shape[0] == 0:
            raise InvalidInputError("dataset has no rows")
        if self.bins.shape != self.features.shape:
            raise InvalidInputError("bin matrix and feature matrix shapes differ")
        if self.y.shape[0] != self.bins.shape[0]:
            raise InvalidInputError("response length does not match row count")
        self._stride = int(self.mapper.n_bins.max()) + 1

    @classmethod
    def from_arrays(cls, X, y=None, mapper: BinMapper | None = None, max_bin: int = 64):
        X = _as_matrix(X)
        if mapper is None:
            mapper = build_bins(X, max_bin)
        y = np.zeros(X.shape[0]) if y is None else np.asarray(y, dtype=np.float64)
        return cls(bins=mapper.transform(X), features=X, y=y, mapper=mapper)

    @property
    def n_rows(self) -> int:
        return self.bins.shape[0]

    @property
    def n_features(self) -> int:
        return self.bins.shape[1]

    @property
    def stride(self) -> int:
        """Histogram width shared by all features (largest bin count + missing)."""
        return self._stride
