"""Interface shared by the distribution heads.

A head owns the link functions between raw scores ``eta`` (what the trees
fit, one column per distributional parameter) and the distribution itself.
All per-row methods take ``eta`` with shape ``(n_rows, n_params)``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from dgbm.errors import InvalidInputError, InvalidParameterError


class DistributionHead(ABC):
    name: str = ""
    param_names: tuple[str, ...] = ()

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def descriptor(self) -> dict:
        """JSON-able description used in model and config files."""
        return {"name": self.name}

    @abstractmethod
    def nll(self, y, eta) -> np.ndarray:
        """Per-row negative log-likelihood."""

    @abstractmethod
    def grad_hess(self, y, eta) -> tuple[np.ndarray, np.ndarray]:
        """Per-row gradients and diagonal hessians of :meth:`nll` w.r.t. ``eta``."""

    @abstractmethod
    def cdf(self, y, eta) -> np.ndarray: ...

    @abstractmethod
    def pdf(self, y, eta) -> np.ndarray: ...

    @abstractmethod
    def quantile(self, alpha, eta, strict: bool = True) -> np.ndarray:
        """Quantiles per row.

        A scalar ``alpha`` gives shape ``(n_rows,)``; a 1-D array gives
        ``(n_rows, len(alpha))``.
        """

    @abstractmethod
    def sample(self, eta, n: int, seed=None) -> np.ndarray:
        """Draws of shape ``(n_rows, n)``."""

    @abstractmethod
    def unconditional_fit(self, y) -> np.ndarray:
        """Raw-scale parameters maximising the likelihood of ``y`` alone."""

    def diagnostics(self, y, eta) -> dict:
        return {}

    def check_eta(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=np.float64)
        if eta.ndim == 1:
            eta = eta[None, :]
        if eta.ndim != 2 or eta.shape[1] != self.n_params:
            raise InvalidInputError(
                f"{self.name} expects raw parameters of shape (n, {self.n_params}), got {eta.shape}"
            )
        return eta


def align_rows(y, eta) -> tuple[np.ndarray, np.ndarray]:
    """Pair responses with parameter rows; a single row is shared by every response."""
    y = np.asarray(y, dtype=np.float64)
    if eta.shape[0] == 1 and y.ndim == 1 and y.shape[0] != 1:
        eta = np.broadcast_to(eta, (y.shape[0], eta.shape[1]))
    return broadcast_rows(y, eta.shape[0]), eta


def check_alpha(alpha) -> tuple[np.ndarray, bool]:
    """Validate quantile levels; returns (levels as 1-D array, was_scalar)."""
    a = np.asarray(alpha, dtype=np.float64)
    scalar = a.ndim == 0
    a = np.atleast_1d(a)
    if a.ndim != 1 or not np.all((a > 0) & (a < 1)):
        raise InvalidParameterError(f"quantile levels must lie in (0, 1), got {alpha!r}")
    return a, scalar


def broadcast_rows(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 0:
        return np.full(n_rows, float(y))
    if y.shape != (n_rows,):
        raise InvalidInputError(f"expected {n_rows} responses, got shape {y.shape}")
    return y
