"""Replicated multi-site experiments: data generation, arms, and metrics.

Two study drivers mirror the experimental designs this package is built
around: an estimation study comparing a no-noise arm against privatized
arms over a grid of privacy levels, and a reconstruction study measuring
how often a binary design survives the release -> round -> solve attack.

Replicates are independent work units.  Every random stream derives from
(base seed, replicate index), so results are identical whether replicates
run serially, in parallel, or in any order.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import attack as attack_mod
from .errors import FedLMMError, ValidationError
from .estimator import OptimizerConfig, fit_ml
from .privacy import CalibrationRule, calibrate, privatize
from .summaries import SiteData, compute_summary, merge_summaries, standardize
from .variance import apply_correction, cr0

ARMS = ("ipd", "dp", "dp2")

_BETA0 = (1.0, 0.5, 0.5, -1.0, -0.5, 1.0, -1.0)
_BERNOULLI_P = {1: 0.5, 3: 0.3, 4: 0.7, 5: 0.5}
_NORMAL_SD = {2: 1.0, 6: 0.5}
_SENSITIVE_COVARIATES = (4, 5, 6)  # x4, x5, x6 carry the privacy-sensitive values


@dataclass(frozen=True)
class Scenario:
    """One cell of the estimation experiment.

    The generator draws six covariates (four Bernoulli, two Gaussian) and a
    site-level random intercept, optionally plus a random slope on x1; the
    analysis model either matches the full mean structure or underfits with
    (x1, x2) only.  Site sizes come from a small/large mixture.
    """

    name: str
    generator: str = "random-intercept"  # | "random-intercept-slope"
    analysis: str = "full"  # | "underfit"
    K: int = 20
    beta0: tuple[float, ...] = _BETA0
    sigma2: float = 1.0
    tau2: float = 1.0
    p_small: float = 0.8
    small_sizes: tuple[int, int] = (2, 10)
    large_sizes: tuple[int, int] = (50, 100)

    def __post_init__(self):
        if self.generator not in ("random-intercept", "random-intercept-slope"):
            raise ValidationError(f"unknown generator {self.generator!r}")
        if self.analysis not in ("full", "underfit"):
            raise ValidationError(f"unknown analysis {self.analysis!r}")
        if not (0.0 <= self.p_small <= 1.0):
            raise ValidationError("p_small must be a probability")
        if self.K < 1:
            raise ValidationError("K must be >= 1")

    @classmethod
    def from_name(cls, name: str, K: int) -> "Scenario":
        presets = {
            "ri-correct": ("random-intercept", "full"),
            "ri-mis": ("random-intercept", "underfit"),
            "ris-correct": ("random-intercept-slope", "full"),
            "ris-mis": ("random-intercept-slope", "underfit"),
        }
        if name not in presets:
            raise ValidationError(f"unknown scenario {name!r}; choose from {sorted(presets)}")
        generator, analysis = presets[name]
        return cls(name=name, generator=generator, analysis=analysis, K=K)

    @property
    def design_columns(self) -> list[str]:
        if self.analysis == "full":
            return ["intercept"] + [f"x{m}" for m in range(1, 7)]
        return ["intercept", "x1", "x2"]

    @property
    def beta0_analysis(self) -> np.ndarray:
        beta = np.asarray(self.beta0)
        return beta if self.analysis == "full" else beta[:3]

    @property
    def sensitive_design_blocks(self) -> frozenset[int]:
        """Sensitive covariates as 1-based analysis-design column indices."""
        cols = self.design_columns
        return frozenset(
            cols.index(f"x{m}") + 1 for m in _SENSITIVE_COVARIATES if f"x{m}" in cols
        )


def draw_site_sizes(rng: np.random.Generator, scenario: Scenario) -> np.ndarray:
    """Mixture of small and large site sizes (inclusive uniform ranges)."""
    small = rng.integers(scenario.small_sizes[0], scenario.small_sizes[1] + 1, scenario.K)
    large = rng.integers(scenario.large_sizes[0], scenario.large_sizes[1] + 1, scenario.K)
    pick_small = rng.random(scenario.K) < scenario.p_small
    return np.where(pick_small, small, large)


def _rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def generate(scenario: Scenario, seed) -> list[SiteData]:
    """Draw the full-design data of all sites (intercept + six covariates)."""
    rng = _rng_from(seed)
    sizes = draw_site_sizes(rng, scenario)
    beta = np.asarray(scenario.beta0)
    sites = []
    for k, n in enumerate(sizes):
        n = int(n)
        cols = [np.ones(n)]
        for m in range(1, 7):
            if m in _BERNOULLI_P:
                cols.append(rng.binomial(1, _BERNOULLI_P[m], n).astype(float))
            else:
                cols.append(rng.normal(0.0, _NORMAL_SD[m], n))
        X = np.column_stack(cols)
        b0 = rng.normal(0.0, math.sqrt(scenario.tau2))
        y = X @ beta + b0
        if scenario.generator == "random-intercept-slope":
            b1 = rng.normal(0.0, math.sqrt(scenario.tau2))
            y = y + b1 * X[:, 1]
        y = y + rng.normal(0.0, math.sqrt(scenario.sigma2), n)
        sites.append(SiteData(site_id=f"site{k:04d}", y=y, X=X))
    return sites


def analysis_design(sites: Sequence[SiteData], scenario: Scenario) -> list[SiteData]:
    """Restrict the generated full design to the analysis model's columns."""
    if scenario.analysis == "full":
        return list(sites)
    return [SiteData(site_id=s.site_id, y=s.y, X=s.X[:, :3]) for s in sites]


@dataclass(frozen=True)
class MetricRow:
    """One (replicate, arm, epsilon0) record of the estimation study."""

    scenario: str
    arm: str
    epsilon0: float | None
    K: int
    replicate: int
    failed: bool
    correction: str
    l2_error: float | None = None
    l2_privacy_cost: float | None = None
    se_inflation: float | None = None
    beta_hat: tuple[float, ...] | None = None
    se_hat: tuple[float, ...] | None = None


def _derived_seed(parts: Sequence[int]) -> int:
    return int(np.random.SeedSequence(entropy=list(parts)).generate_state(1, np.uint64)[0])


def _fit_arm(summaries, record, config):
    fit = fit_ml(summaries, config)
    beta = record.beta_to_original(fit.theta_hat.beta)
    v = cr0(summaries, fit)
    return fit, beta, v


def one_replicate(
    scenario: Scenario,
    epsilon0_grid: Sequence[float],
    seed: int,
    replicate: int,
    correction: str = "cr0",
    arms: Sequence[str] = ARMS,
    config: OptimizerConfig = OptimizerConfig(),
) -> list[MetricRow]:
    """All arms of one replicate on common generated data."""
    rows: list[MetricRow] = []

    def failed_row(arm, eps):
        return MetricRow(
            scenario=scenario.name, arm=arm, epsilon0=eps, K=scenario.K,
            replicate=replicate, failed=True, correction=correction,
        )

    def all_failed():
        out = [failed_row("ipd", None)] if "ipd" in arms else []
        for arm in ("dp", "dp2"):
            if arm in arms:
                out.extend(failed_row(arm, eps) for eps in epsilon0_grid)
        return out

    data_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=[int(seed), int(replicate), 0])
    )
    try:
        sites = analysis_design(generate(scenario, data_rng), scenario)
        sites_std, record = standardize(sites, intercept=True, names=scenario.design_columns)
        summaries = merge_summaries([compute_summary(s) for s in sites_std])
    except FedLMMError:
        return all_failed()

    beta0 = scenario.beta0_analysis
    try:
        ipd_fit, ipd_beta, ipd_v = _fit_arm(summaries, record, config)
    except (FedLMMError, np.linalg.LinAlgError):
        return all_failed()
    ipd_vc = apply_correction(ipd_v, correction)
    ipd_V = record.variance_to_original(ipd_vc.V)
    ipd_se = np.sqrt(np.clip(np.diag(ipd_V), 0.0, None))
    ipd_se_norm = float(np.linalg.norm(ipd_se))
    ipd_failed = not ipd_fit.converged
    if "ipd" in arms:
        rows.append(
            MetricRow(
                scenario=scenario.name, arm="ipd", epsilon0=None, K=scenario.K,
                replicate=replicate, failed=ipd_failed, correction=correction,
                l2_error=float(np.linalg.norm(ipd_beta - beta0)),
                l2_privacy_cost=0.0, se_inflation=1.0,
                beta_hat=tuple(ipd_beta), se_hat=tuple(ipd_se),
            )
        )

    p_design = summaries.p
    delta = 1.0 / summaries.N
    for arm in ("dp", "dp2"):
        if arm not in arms:
            continue
        scope = "full" if arm == "dp" else "subset"
        sensitive = frozenset() if arm == "dp" else scenario.sensitive_design_blocks
        for eps_idx, eps in enumerate(epsilon0_grid):
            budget = calibrate(
                CalibrationRule(mode="dimension-adjusted", epsilon0=float(eps)),
                delta=delta, p=p_design,
            )
            arm_seed = _derived_seed(
                [seed, replicate, 1, ("dp", "dp2").index(arm), eps_idx]
            )
            try:
                noisy = merge_summaries(
                    [
                        privatize(s, budget, scope=scope, sensitive=sensitive, rng_seed=arm_seed)
                        for s in summaries
                    ]
                )
                fit, beta, v = _fit_arm(noisy, record, config)
            except (FedLMMError, np.linalg.LinAlgError):
                rows.append(failed_row(arm, float(eps)))
                continue
            vc = apply_correction(v, correction)
            V = record.variance_to_original(vc.V)
            se = np.sqrt(np.clip(np.diag(V), 0.0, None))
            rows.append(
                MetricRow(
                    scenario=scenario.name, arm=arm, epsilon0=float(eps), K=scenario.K,
                    replicate=replicate, failed=ipd_failed or not fit.converged,
                    correction=correction,
                    l2_error=float(np.linalg.norm(beta - beta0)),
                    l2_privacy_cost=float(np.linalg.norm(beta - ipd_beta)),
                    se_inflation=(
                        float(np.linalg.norm(se)) / ipd_se_norm if ipd_se_norm > 0 else None
                    ),
                    beta_hat=tuple(beta), se_hat=tuple(se),
                )
            )
    return rows


def _replicate_batch(args) -> list[MetricRow]:
    scenario, grid, seed, reps, correction, arms = args
    out = []
    for r in reps:
        out.extend(one_replicate(scenario, grid, seed, r, correction, arms))
    return out


def run_estimation_study(
    scenario: Scenario,
    epsilon0_grid: Sequence[float],
    reps: int,
    seed: int,
    correction: str = "cr0",
    arms: Sequence[str] = ARMS,
    workers: int = 1,
) -> list[MetricRow]:
    """Replicated arms on common random numbers; failures never abort the study."""
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    bad = [a for a in arms if a not in ARMS]
    if bad:
        raise ValidationError(f"unknown arms {bad}")
    indices = list(range(reps))
    if workers <= 1:
        rows = _replicate_batch((scenario, tuple(epsilon0_grid), seed, indices, correction, tuple(arms)))
    else:
        chunks = [indices[i::workers] for i in range(workers)]
        args = [
            (scenario, tuple(epsilon0_grid), seed, chunk, correction, tuple(arms))
            for chunk in chunks if chunk
        ]
        rows = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for batch in pool.map(_replicate_batch, args):
                rows.extend(batch)
    rows.sort(key=lambda r: (r.replicate, ARMS.index(r.arm), r.epsilon0 if r.epsilon0 is not None else -1.0))
    return rows


# -- aggregation -------------------------------------------------------------


def se_calibration(
    rows: Sequence[MetricRow],
    keys: Sequence[str] = ("scenario", "arm", "epsilon0", "K", "correction"),
) -> list[dict]:
    """Mean estimated SE over the empirical SD of beta-hat, per coefficient.

    Failed replicates are excluded.  Groups need at least two usable
    replicates; a zero empirical SD flags the row as degenerate.
    """
    groups: dict[tuple, list[MetricRow]] = {}
    for row in rows:
        if row.failed or row.beta_hat is None or row.se_hat is None:
            continue
        groups.setdefault(tuple(getattr(row, k) for k in keys), []).append(row)
    if not groups:
        raise ValidationError("no usable rows to aggregate")
    out = []
    for key, members in sorted(groups.items(), key=lambda kv: str(kv[0])):
        if len(members) < 2:
            raise ValidationError(f"group {key} has fewer than 2 usable replicates")
        betas = np.array([m.beta_hat for m in members])
        ses = np.array([m.se_hat for m in members])
        sd = betas.std(axis=0, ddof=1)
        mean_se = ses.mean(axis=0)
        for j in range(betas.shape[1]):
            degenerate = sd[j] == 0.0
            out.append(
                dict(zip(keys, key))
                | {
                    "coefficient": j,
                    "mean_se": float(mean_se[j]),
                    "sd_beta": float(sd[j]),
                    "ratio": float(mean_se[j] / sd[j]) if not degenerate else None,
                    "n_used": len(members),
                    "degenerate": bool(degenerate),
                }
            )
    return out


def privacy_cost_slope(
    rows: Sequence[MetricRow],
    versus: str = "inv_K",
    arm: str = "dp",
    statistic: str = "mean",
) -> tuple[float, float]:
    """Log-log slope of the squared privacy cost across levels.

    ``versus="inv_K"`` regresses log(statistic of cost^2) on log(1/K)
    pooling rows at a common privacy level; ``versus="epsilon0"``
    regresses on log(epsilon0) at a common K.  The mean is the default
    per-level statistic; heavy privacy noise occasionally produces wild
    fits whose squared cost dominates a finite-sample mean, and
    ``statistic="median"`` gives an outlier-robust view of the same law.
    Returns (slope, standard error).
    """
    if versus not in ("inv_K", "epsilon0"):
        raise ValidationError(f"unknown axis {versus!r}")
    if statistic not in ("mean", "median"):
        raise ValidationError(f"unknown statistic {statistic!r}")
    usable = [
        r for r in rows
        if r.arm == arm and not r.failed and r.l2_privacy_cost is not None
    ]
    levels: dict[float, list[float]] = {}
    for r in usable:
        level = float(r.K) if versus == "inv_K" else float(r.epsilon0)
        levels.setdefault(level, []).append(r.l2_privacy_cost**2)
    if len(levels) < 3:
        raise ValidationError(f"need >= 3 distinct levels of {versus}, got {len(levels)}")
    agg = np.mean if statistic == "mean" else np.median
    xs, ys = [], []
    for level, costs in sorted(levels.items()):
        value = float(agg(costs))
        if value <= 0:
            raise ValidationError("degenerate zero privacy cost; slope undefined")
        xs.append(np.log(1.0 / level) if versus == "inv_K" else np.log(level))
        ys.append(np.log(value))
    x = np.array(xs)
    y = np.array(ys)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = max(len(x) - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(coef[0]), float(np.sqrt(cov[0, 0]))


# -- reconstruction study ----------------------------------------------------


def run_reconstruction_cell(
    n: int,
    p: int,
    epsilon0: float | None,
    reps: int,
    seed: int,
    delta: float = 0.01,
    config: attack_mod.AttackConfig = attack_mod.AttackConfig(),
    level_key: int = 0,
) -> dict:
    """Attack replicates for one (n, p, privacy level) cell.

    Matrix-level rate counts failed solves as non-recoveries; the
    element-level rate averages over solved replicates only, with the
    failure count reported alongside.
    """
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    budget = None
    if epsilon0 is not None:
        budget = calibrate(
            CalibrationRule(mode="dimension-adjusted", epsilon0=float(epsilon0)),
            delta=delta, p=p,
        )
    matrix_hits = 0
    element_rates = []
    failed = 0
    for rep in range(reps):
        ss = np.random.SeedSequence(entropy=[int(seed), n, p, level_key, rep])
        x_state, noise_state = ss.generate_state(2, np.uint64)
        rng = np.random.default_rng(int(x_state))
        X = (rng.random((n, p)) < 0.5).astype(np.int8)
        result = attack_mod.attack_pipeline(X, budget, rng_seed=int(noise_state), config=config)
        if result.status == "failed":
            failed += 1
            continue
        matrix_hits += result.matrix_rate
        element_rates.append(result.element_rate)
    return {
        "n": n,
        "p": p,
        "epsilon0": epsilon0,
        "matrix_rate": matrix_hits / reps,
        "element_rate": float(np.mean(element_rates)) if element_rates else 0.0,
        "reps": reps,
        "failed": failed,
    }


def run_reconstruction_study(
    n_values: Sequence[int],
    p_values: Sequence[int],
    epsilon0_values: Sequence[float | None],
    reps: int,
    seed: int,
    delta: float = 0.01,
    config: attack_mod.AttackConfig = attack_mod.AttackConfig(),
) -> list[dict]:
    rows = []
    for p in p_values:
        for n in n_values:
            for idx, eps in enumerate(epsilon0_values):
                rows.append(
                    run_reconstruction_cell(
                        n, p, eps, reps, seed, delta=delta, config=config, level_key=idx
                    )
                )
    return rows


# -- CSV emission ------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))  # plain float repr even for numpy scalars
    if isinstance(value, tuple):
        return ";".join(repr(float(v)) for v in value)
    return str(value)


METRIC_FIELDS = (
    "scenario", "arm", "epsilon0", "K", "replicate", "failed", "correction",
    "l2_error", "l2_privacy_cost", "se_inflation", "beta_hat", "se_hat",
)


def write_metric_rows(rows: Sequence[MetricRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, f)) for f in METRIC_FIELDS])


def write_rate_rows(rows: Sequence[dict], path, fields: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row.get(f)) for f in fields])
