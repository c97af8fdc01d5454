"""Gaussian location-scale head (identity link for mu, log link for sigma)."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

from dgbm.heads.base import DistributionHead, align_rows, check_alpha

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
SIGMA_FLOOR = 1e-6


class GaussianHead(DistributionHead):
    """Normal distribution with raw parameters ``(mu, log sigma)``."""

    name = "gaussian"
    param_names = ("mu", "log_sigma")

    def __init__(self, sigma_floor: float = SIGMA_FLOOR):
        self.sigma_floor = sigma_floor

    def _split(self, eta):
        eta = self.check_eta(eta)
        return self._params(eta)

    def _params(self, eta):
        mu = eta[:, 0]
        sigma = np.maximum(np.exp(eta[:, 1]), self.sigma_floor)
        return mu, sigma

    def mean_sigma(self, eta):
        """Location and (floored) scale per row."""
        return self._split(eta)

    def nll(self, y, eta):
        y, eta = align_rows(y, self.check_eta(eta))
        mu, sigma = self._params(eta)
        r = (y - mu) / sigma
        return HALF_LOG_2PI + np.log(sigma) + 0.5 * r * r

    def grad_hess(self, y, eta):
        y, eta = align_rows(y, self.check_eta(eta))
        mu, sigma = self._params(eta)
        r = (y - mu) / sigma
        inv_var = 1.0 / (sigma * sigma)
        grad = np.column_stack([(mu - y) * inv_var, 1.0 - r * r])
        hess = np.column_stack([inv_var, 2.0 * r * r])
        return grad, hess

    def cdf(self, y, eta):
        y, eta = align_rows(y, self.check_eta(eta))
        mu, sigma = self._params(eta)
        return ndtr((y - mu) / sigma)

    def pdf(self, y, eta):
        return np.exp(-self.nll(y, eta))

    def quantile(self, alpha, eta, strict=True):
        levels, scalar = check_alpha(alpha)
        mu, sigma = self._split(eta)
        q = mu[:, None] + sigma[:, None] * ndtri(levels)[None, :]
        return q[:, 0] if scalar else q

    def sample(self, eta, n, seed=None):
        mu, sigma = self._split(eta)
        rng = np.random.default_rng(seed)
        return mu[:, None] + sigma[:, None] * rng.standard_normal((mu.shape[0], int(n)))

    def unconditional_fit(self, y):
        y = np.asarray(y, dtype=np.float64)
        sigma = max(float(np.std(y)), self.sigma_floor)
        return np.array([float(np.mean(y)), np.log(sigma)])

    def crps_closed_form(self, y, eta):
        """Exact CRPS of the predicted normal at ``y``."""
        y, eta = align_rows(y, self.check_eta(eta))
        mu, sigma = self._params(eta)
        z = (y - mu) / sigma
        pdf = np.exp(-0.5 * z * z - HALF_LOG_2PI)
        return sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - 1.0 / np.sqrt(np.pi))
