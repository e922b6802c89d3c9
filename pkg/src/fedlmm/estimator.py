"""Pooled ML/REML estimation of the random-intercept model from summaries.

The model is y = X beta + Z b + e with per-site covariance
Sigma_k = sigma2*I + tau2*11'.  For that structure the pooled
log-likelihood is an exact function of the site summaries (S_k, T_k, n_k):

    l(beta, sigma2, tau2) = -1/2 sum_k [ log{(sigma2)^(n_k-1)(sigma2 + n_k tau2)}
        + (1, -beta)' {S_k - tau2/(sigma2 + n_k tau2) T_k} (1, -beta) / sigma2 ]

so no information is lost relative to pooled raw data.  beta is profiled
out in closed form through the per-site weights

    W_k = S_k[XX]/sigma2 - tau2/(sigma2 (sigma2 + n_k tau2)) T_k[XX]
    Q_k = S_k[Xy]/sigma2 - tau2/(sigma2 (sigma2 + n_k tau2)) T_k[Xy]

and (sigma2, tau2) is maximized by derivative-free Nelder-Mead on
(log sigma2, softplus^-1 tau2), with an explicit scan of the tau2 = 0 edge.

The additive Gaussian constant -(N/2) log(2 pi) is omitted throughout,
matching :mod:`fedlmm.ipd`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import SingularDesignError, ValidationError
from .summaries import FederatedSummarySet


@dataclass(frozen=True)
class Theta:
    """Model parameters (beta, sigma2, tau2)."""

    beta: np.ndarray
    sigma2: float
    tau2: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if beta.size < 1 or not np.isfinite(beta).all():
            raise ValidationError("beta must be a finite vector")
        if not (self.sigma2 > 0 and np.isfinite(self.sigma2)):
            raise ValidationError("sigma2 must be positive")
        if not (self.tau2 >= 0 and np.isfinite(self.tau2)):
            raise ValidationError("tau2 must be nonnegative")
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class OptimizerConfig:
    """Search box and stopping rules for the profile optimization.

    The box is relative to the pooled outcome scale: sigma2 in
    [sigma2_min_factor, sigma2_max_factor] * scale and tau2 in
    [0, tau2_max_factor * scale].
    """

    sigma2_min_factor: float = 1e-8
    sigma2_max_factor: float = 1e8
    tau2_max_factor: float = 1e8
    objective_tol: float = 1e-10
    param_tol: float = 1e-8
    max_evals: int = 2000
    n_starts: int = 3
    cond_limit: float = 1e12
    fix_tau2: float | None = None


@dataclass
class FitResult:
    """Outcome of a summary-based fit, with cached per-site weights."""

    theta_hat: Theta
    objective: float
    method: str  # "ML" | "REML"
    converged: bool
    iterations: int
    boundary_tau: bool
    per_site_weights: dict = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.theta_hat.beta],
            "sigma2": float(self.theta_hat.sigma2),
            "tau2": float(self.theta_hat.tau2),
            "objective": float(self.objective),
            "method": self.method,
            "converged": self.converged,
            "iterations": self.iterations,
            "boundary_tau": self.boundary_tau,
        }


class _Kernel:
    """Stacked-array evaluation of the summary likelihood and its profile."""

    def __init__(self, summaries: FederatedSummarySet, cond_limit: float = 1e12):
        st = summaries.stacked()
        self.n = st["n"]
        self.S_full = st["S"]
        self.T_full = st["T"]
        self.K = summaries.K
        self.p = summaries.p
        self.N = float(self.n.sum())
        self.cond_limit = cond_limit

        self.S_sum = self.S_full.sum(axis=0)
        self.sxx_sum = self.S_sum[1:, 1:]
        self.sxy_sum = self.S_sum[1:, 0]
        self.syy_sum = self.S_sum[0, 0]
        self.txx = self.T_full[:, 1:, 1:]
        self.txy = self.T_full[:, 1:, 0]
        self.tyy = self.T_full[:, 0, 0]
        self.sum_nm1 = float((self.n - 1.0).sum())

    def scale(self) -> float:
        s = self.syy_sum / self.N
        return float(s) if np.isfinite(s) and s > 0 else 1.0

    def _shrink(self, sigma2: float, tau2: float) -> np.ndarray:
        return tau2 / (sigma2 + self.n * tau2)

    def logdet_term(self, sigma2: float, tau2: float) -> float:
        return self.sum_nm1 * np.log(sigma2) + float(np.log(sigma2 + self.n * tau2).sum())

    def loglik(self, beta: np.ndarray, sigma2: float, tau2: float) -> float:
        c = self._shrink(sigma2, tau2)
        M = self.S_sum - np.tensordot(c, self.T_full, axes=([0], [0]))
        v = np.concatenate(([1.0], -np.asarray(beta, dtype=float)))
        quad = float(v @ M @ v) / sigma2
        return -0.5 * (self.logdet_term(sigma2, tau2) + quad)

    def weight_sums(self, sigma2: float, tau2: float) -> tuple[np.ndarray, np.ndarray]:
        c = self._shrink(sigma2, tau2)
        W_sum = (self.sxx_sum - np.tensordot(c, self.txx, axes=([0], [0]))) / sigma2
        Q_sum = (self.sxy_sum - c @ self.txy) / sigma2
        return W_sum, Q_sum

    def per_site_weights(self, sigma2: float, tau2: float) -> tuple[np.ndarray, np.ndarray]:
        c = self._shrink(sigma2, tau2)
        W = (self.S_full[:, 1:, 1:] - c[:, None, None] * self.txx) / sigma2
        Q = (self.S_full[:, 1:, 0] - c[:, None] * self.txy) / sigma2
        return W, Q

    def profile_beta(self, sigma2: float, tau2: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        W_sum, Q_sum = self.weight_sums(sigma2, tau2)
        cond = np.linalg.cond(W_sum)
        if not np.isfinite(cond) or cond > self.cond_limit:
            raise SingularDesignError(
                f"aggregated weight matrix is numerically singular (cond ~ {cond:.3e})", cond
            )
        beta = np.linalg.solve(W_sum, Q_sum)
        return beta, W_sum, Q_sum

    def profile_value(self, sigma2: float, tau2: float) -> tuple[float, np.ndarray]:
        """Profile objective g(sigma2, tau2) = loglik at the profiled beta."""
        beta, W_sum, Q_sum = self.profile_beta(sigma2, tau2)
        c = self._shrink(sigma2, tau2)
        syy_c = (self.syy_sum - float(c @ self.tyy)) / sigma2
        # quadratic form at the profile solution: v'Mv/s2 = syy_c - beta'Q_sum
        quad = syy_c - float(beta @ Q_sum)
        g = -0.5 * (self.logdet_term(sigma2, tau2) + quad)
        return g, beta

    def reml_value(self, sigma2: float, tau2: float) -> tuple[float, np.ndarray]:
        """Profile ML value minus half the log determinant of sum_k W_k."""
        g, beta = self.profile_value(sigma2, tau2)
        W_sum, _ = self.weight_sums(sigma2, tau2)
        sign, logdet = np.linalg.slogdet(W_sum)
        if sign <= 0:
            raise SingularDesignError("REML determinant argument is not positive definite")
        return g - 0.5 * logdet, beta


def _check_theta_domain(sigma2: float, tau2: float) -> None:
    if not (sigma2 > 0 and np.isfinite(sigma2)):
        raise ValidationError("sigma2 must be positive")
    if not (tau2 >= 0 and np.isfinite(tau2)):
        raise ValidationError("tau2 must be nonnegative")


def loglik_ml(theta: Theta, summaries: FederatedSummarySet) -> float:
    """Pooled ML log-likelihood reconstructed from summaries."""
    _check_theta_domain(theta.sigma2, theta.tau2)
    if theta.beta.shape[0] != summaries.p:
        raise ValidationError(
            f"beta has length {theta.beta.shape[0]} but summaries have p={summaries.p}"
        )
    return _Kernel(summaries).loglik(theta.beta, theta.sigma2, theta.tau2)


def loglik_reml(sigma2: float, tau2: float, summaries: FederatedSummarySet) -> float:
    """REML objective from summaries at the profiled beta."""
    _check_theta_domain(sigma2, tau2)
    value, _ = _Kernel(summaries).reml_value(sigma2, tau2)
    return value


def profile_beta(
    sigma2: float, tau2: float, summaries: FederatedSummarySet
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form GLS coefficients at fixed variance components.

    Returns (beta_hat, W_sum, Q_sum) where beta_hat solves
    W_sum beta = Q_sum.
    """
    _check_theta_domain(sigma2, tau2)
    return _Kernel(summaries).profile_beta(sigma2, tau2)


def _softplus(u: float) -> float:
    return float(np.logaddexp(0.0, u))


def _softplus_inv(t: float) -> float:
    if t <= 0:
        raise ValueError("softplus inverse needs t > 0")
    if t > 30.0:
        return t  # log(e^t - 1) == t to double precision
    return float(t + np.log1p(-np.exp(-t)))


_PENALTY = 1e300


@dataclass
class _SearchSpace:
    sigma2_lo: float
    sigma2_hi: float
    tau2_hi: float

    def decode(self, u: np.ndarray) -> tuple[float, float] | None:
        with np.errstate(over="ignore"):
            sigma2 = float(np.exp(u[0]))
            tau2 = _softplus(u[1]) if u.shape[0] > 1 else 0.0
        if not (self.sigma2_lo <= sigma2 <= self.sigma2_hi) or tau2 > self.tau2_hi:
            return None
        return sigma2, tau2


def _minimize_nm(fun, x0: np.ndarray, config: OptimizerConfig):
    return optimize.minimize(
        fun,
        x0,
        method="Nelder-Mead",
        options={
            "xatol": config.param_tol,
            "fatol": config.objective_tol,
            "maxfev": config.max_evals,
            "disp": False,
        },
    )


def _run_profile_search(
    kernel: _Kernel, config: OptimizerConfig, objective: str
) -> tuple[float, float, float, bool, int, bool]:
    """Maximize the profile objective over the (sigma2, tau2) box.

    Returns (sigma2_hat, tau2_hat, value, converged, n_evals, boundary_tau).
    """
    scale = kernel.scale()
    space = _SearchSpace(
        sigma2_lo=config.sigma2_min_factor * scale,
        sigma2_hi=config.sigma2_max_factor * scale,
        tau2_hi=config.tau2_max_factor * scale,
    )

    value_of = kernel.profile_value if objective == "ml" else kernel.reml_value

    def neg(u: np.ndarray, tau2_fixed: float | None = None) -> float:
        decoded = space.decode(u if tau2_fixed is None else u[:1])
        if decoded is None:
            return _PENALTY
        sigma2, tau2 = decoded
        if tau2_fixed is not None:
            tau2 = tau2_fixed
        try:
            g, _ = value_of(sigma2, tau2)
        except (SingularDesignError, np.linalg.LinAlgError):
            return _PENALTY
        return -g if np.isfinite(g) else _PENALTY

    # Moment-flavored spread of starting points around the OLS residual scale.
    try:
        beta0, _, _ = kernel.profile_beta(1.0, 0.0)
        rss = kernel.syy_sum - float(beta0 @ kernel.sxy_sum)
        s2_start = rss / kernel.N if rss > 0 else scale
    except SingularDesignError:
        s2_start = scale
    s2_start = float(np.clip(s2_start, space.sigma2_lo, space.sigma2_hi))
    starts = [
        (0.5 * s2_start, 0.5 * s2_start),
        (0.9 * s2_start, 0.1 * s2_start),
        (0.3 * s2_start, min(1.0 * s2_start, space.tau2_hi)),
    ][: config.n_starts]

    n_evals = 0
    best = None  # (value, sigma2, tau2, success)

    if config.fix_tau2 is None:
        for s2, t2 in starts:
            t2 = max(t2, 1e-8 * scale)
            u0 = np.array([np.log(s2), _softplus_inv(t2)])
            res = _minimize_nm(neg, u0, config)
            n_evals += res.nfev
            decoded = space.decode(res.x)
            if decoded is None or res.fun >= _PENALTY:
                continue
            sigma2, tau2 = decoded
            if best is None or -res.fun > best[0]:
                best = (-res.fun, sigma2, tau2, bool(res.success))

    # Explicit tau2 edge (or a caller-fixed tau2): 1-D search in log sigma2.
    tau2_fixed = 0.0 if config.fix_tau2 is None else float(config.fix_tau2)
    res = _minimize_nm(lambda u: neg(u, tau2_fixed=tau2_fixed), np.array([np.log(s2_start)]), config)
    n_evals += res.nfev
    edge = None
    if res.fun < _PENALTY:
        decoded = space.decode(res.x[:1])
        if decoded is not None:
            edge = (-res.fun, decoded[0], tau2_fixed, bool(res.success))

    if config.fix_tau2 is not None:
        if edge is None:
            raise SingularDesignError("profile objective unusable over the whole search box")
        value, sigma2, tau2, success = edge
        return sigma2, tau2, value, success, n_evals, tau2 == 0.0

    boundary = False
    if best is None and edge is None:
        raise SingularDesignError("profile objective unusable over the whole search box")
    if best is None:
        chosen = edge
        boundary = True
    elif edge is not None and edge[0] >= best[0] - 1e-10 * (1.0 + abs(edge[0])):
        chosen = edge
        boundary = True
    else:
        chosen = best
    value, sigma2, tau2, success = chosen
    return sigma2, tau2, value, success, n_evals, boundary


def _finalize(
    kernel: _Kernel, sigma2: float, tau2: float, value: float, method: str,
    converged: bool, n_evals: int, boundary: bool,
) -> FitResult:
    beta, W_sum, Q_sum = kernel.profile_beta(sigma2, tau2)
    W, Q = kernel.per_site_weights(sigma2, tau2)
    theta = Theta(beta=beta, sigma2=sigma2, tau2=tau2)
    return FitResult(
        theta_hat=theta,
        objective=float(value),
        method=method,
        converged=bool(converged and np.isfinite(value)),
        iterations=int(n_evals),
        boundary_tau=bool(boundary),
        per_site_weights={"W": W, "Q": Q, "W_sum": W_sum, "Q_sum": Q_sum},
    )


def evaluate_fit(
    summaries: FederatedSummarySet, theta: Theta, cond_limit: float = 1e12
) -> FitResult:
    """Package a caller-chosen theta as a FitResult with cached weights.

    No optimization happens; beta is taken as-is.  Useful for computing
    sandwich variances at externally fixed parameters.
    """
    if theta.beta.shape[0] != summaries.p:
        raise ValidationError(
            f"beta has length {theta.beta.shape[0]} but summaries have p={summaries.p}"
        )
    kernel = _Kernel(summaries, cond_limit=cond_limit)
    W, Q = kernel.per_site_weights(theta.sigma2, theta.tau2)
    W_sum, Q_sum = kernel.weight_sums(theta.sigma2, theta.tau2)
    return FitResult(
        theta_hat=theta,
        objective=kernel.loglik(theta.beta, theta.sigma2, theta.tau2),
        method="ML",
        converged=True,
        iterations=0,
        boundary_tau=theta.tau2 == 0.0,
        per_site_weights={"W": W, "Q": Q, "W_sum": W_sum, "Q_sum": Q_sum},
    )


def fit_ml(
    summaries: FederatedSummarySet, config: OptimizerConfig = OptimizerConfig()
) -> FitResult:
    """Maximize the summary-based ML objective over (beta, sigma2, tau2)."""
    if summaries.K < 2 and config.fix_tau2 is None:
        raise ValidationError("ML fit needs at least 2 sites unless tau2 is fixed")
    kernel = _Kernel(summaries, cond_limit=config.cond_limit)
    sigma2, tau2, value, converged, n_evals, boundary = _run_profile_search(
        kernel, config, objective="ml"
    )
    return _finalize(kernel, sigma2, tau2, value, "ML", converged, n_evals, boundary)


def fit_reml(
    summaries: FederatedSummarySet, config: OptimizerConfig = OptimizerConfig()
) -> FitResult:
    """Maximize the summary-based REML objective.

    Refuses privatized inputs: the extra determinant term aggregates
    cross-site information and amplifies injected noise, so the REML route
    is supported only without perturbation.
    """
    if summaries.any_privatized:
        raise ValidationError(
            "REML is not supported on privatized summaries: the log-determinant "
            "term suffers determinant amplification under additive noise; use ML"
        )
    if summaries.K < 2 and config.fix_tau2 is None:
        raise ValidationError("REML fit needs at least 2 sites unless tau2 is fixed")
    kernel = _Kernel(summaries, cond_limit=config.cond_limit)
    sigma2, tau2, value, converged, n_evals, boundary = _run_profile_search(
        kernel, config, objective="reml"
    )
    return _finalize(kernel, sigma2, tau2, value, "REML", converged, n_evals, boundary)
