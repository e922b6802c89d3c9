"""Dense-covariance reference computations on raw pooled data.

Everything here works directly on per-site (y, X) by materializing each
site's n x n covariance block Sigma_k = sigma2*I + tau2*11' and doing
plain dense linear algebra.  It is deliberately independent of the
summary-based kernels: benchmarks and tests compare the two routes.

Log-likelihoods follow the same convention as the summary route: the
additive Gaussian constant -(N/2) log(2 pi) is omitted.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import SingularDesignError, ValidationError
from .summaries import SiteData


def _sigma_block(n: int, sigma2: float, tau2: float) -> np.ndarray:
    return sigma2 * np.eye(n) + tau2 * np.ones((n, n))


def loglik_ml(
    beta: np.ndarray, sigma2: float, tau2: float, sites: Sequence[SiteData]
) -> float:
    """Pooled ML log-likelihood via dense per-site covariance blocks."""
    if sigma2 <= 0:
        raise ValidationError("sigma2 must be positive")
    if tau2 < 0:
        raise ValidationError("tau2 must be nonnegative")
    beta = np.asarray(beta, dtype=float)
    total = 0.0
    for s in sites:
        sig = _sigma_block(s.n, sigma2, tau2)
        sign, logdet = np.linalg.slogdet(sig)
        resid = s.y - s.X @ beta
        quad = resid @ np.linalg.solve(sig, resid)
        total += -0.5 * (logdet + quad)
    return float(total)


def gls_information(
    sigma2: float, tau2: float, sites: Sequence[SiteData]
) -> tuple[np.ndarray, np.ndarray]:
    """Return (X' Sigma^-1 X, X' Sigma^-1 y) accumulated over sites."""
    p = sites[0].p
    info = np.zeros((p, p))
    score = np.zeros(p)
    for s in sites:
        sig = _sigma_block(s.n, sigma2, tau2)
        six = np.linalg.solve(sig, s.X)
        info += s.X.T @ six
        score += six.T @ s.y
    return info, score


def gls_beta(sigma2: float, tau2: float, sites: Sequence[SiteData]) -> np.ndarray:
    """Generalized least squares coefficients at fixed variance components."""
    info, score = gls_information(sigma2, tau2, sites)
    cond = np.linalg.cond(info)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularDesignError(
            f"X' Sigma^-1 X is numerically singular (cond ~ {cond:.3e})", cond
        )
    return np.linalg.solve(info, score)


def loglik_reml(sigma2: float, tau2: float, sites: Sequence[SiteData]) -> float:
    """REML log-likelihood: profile ML minus half log det of the information."""
    beta = gls_beta(sigma2, tau2, sites)
    info, _ = gls_information(sigma2, tau2, sites)
    sign, logdet = np.linalg.slogdet(info)
    if sign <= 0:
        raise SingularDesignError("X' Sigma^-1 X has nonpositive determinant")
    return loglik_ml(beta, sigma2, tau2, sites) - 0.5 * logdet


def cr0_sandwich(
    beta: np.ndarray, sigma2: float, tau2: float, sites: Sequence[SiteData]
) -> np.ndarray:
    """Cluster-robust CR0 variance from raw residuals.

    (X' Sigma^-1 X)^-1 (sum_k X_k' Sigma_k^-1 e_k e_k' Sigma_k^-1 X_k)
    (X' Sigma^-1 X)^-1 with e_k the site residual vector.
    """
    beta = np.asarray(beta, dtype=float)
    p = sites[0].p
    bread_inv = np.zeros((p, p))
    meat = np.zeros((p, p))
    for s in sites:
        sig = _sigma_block(s.n, sigma2, tau2)
        six = np.linalg.solve(sig, s.X)
        bread_inv += s.X.T @ six
        g = six.T @ (s.y - s.X @ beta)
        meat += np.outer(g, g)
    bread = np.linalg.inv(bread_inv)
    V = bread @ meat @ bread
    return (V + V.T) / 2.0
