import itertools
import math

import numpy as np
import pytest

from fedlmm import (
    CalibrationRule,
    ModelSpec,
    PrivacyBudget,
    SiteData,
    ValidationError,
    calibrate,
    compute_summary,
    privatize,
    sensitivity_binary_gram,
    sensitivity_bounded,
)
from fedlmm.privacy import gaussian_sigma


class TestSensitivityBinaryGram:
    def test_bound_at_p3(self):
        assert sensitivity_binary_gram(3) == 6.0

    def test_p1(self):
        assert sensitivity_binary_gram(1) == 2.0

    def test_exhaustive_small_case(self):
        # all pairs of 2x2 binary designs differing in exactly one row
        p, n = 2, 2
        worst = 0.0
        designs = [np.array(bits).reshape(n, p) for bits in itertools.product((0, 1), repeat=n * p)]
        for A in designs:
            for B in designs:
                differ = (A != B).any(axis=1).sum()
                if differ != 1:
                    continue
                diff = A.T @ A - B.T @ B
                worst = max(worst, float(np.sqrt((diff**2).sum())))
        # The 2p value is a valid triangle-inequality bound; brute force shows
        # the true supremum is p (one all-ones row swapped against zeros), so
        # the bound is conservative by a factor of two.
        assert worst <= sensitivity_binary_gram(p)
        assert worst == pytest.approx(p)

    def test_rejects_bad_p(self):
        with pytest.raises(ValidationError):
            sensitivity_binary_gram(0)


class TestSensitivityBounded:
    def test_binary_s_only_reduces_to_2p(self):
        spec = ModelSpec(
            covariates=("a", "b", "c"),
            x_bounds=((0, 1), (0, 1), (0, 1)),
            y_bounds=(0.0, 0.0),
        )
        assert sensitivity_bounded(spec, n_k=5, include_t=False) == pytest.approx(6.0)

    def test_single_record_unit_box(self):
        # p=1, x and y in [0,1], n=1: direct corner maximization gives r2=2,
        # so the joint bound is sqrt((2*2)^2 + (2*1*2)^2) = 4*sqrt(2)
        spec = ModelSpec(covariates=("x",), x_bounds=((0, 1),), y_bounds=(0, 1))
        got = sensitivity_bounded(spec, n_k=1)
        corners = [(y, x) for y in (0, 1) for x in (0, 1)]
        r2 = max(y**2 + x**2 for y, x in corners)
        assert got == pytest.approx(2 * r2 * math.sqrt(2))
        assert got == pytest.approx(2 * math.sqrt(2) * 2)

    def test_t_block_scales_linearly_in_n(self):
        spec = ModelSpec(covariates=("x",), x_bounds=((-1, 2),), y_bounds=(-3, 1))
        d1 = sensitivity_bounded(spec, n_k=10)
        d2 = sensitivity_bounded(spec, n_k=20)
        r2 = 9 + 4
        t1 = math.sqrt(d1**2 - (2 * r2) ** 2)
        t2 = math.sqrt(d2**2 - (2 * r2) ** 2)
        assert t2 / t1 == pytest.approx(2.0)

    def test_missing_bounds(self):
        spec = ModelSpec(covariates=("x",))
        with pytest.raises(ValidationError, match="bounds"):
            sensitivity_bounded(spec, n_k=3)


class TestCalibrate:
    def test_reference_noise_scale(self):
        budget = calibrate(CalibrationRule(mode="dimension-adjusted", epsilon0=2.0), 0.01, p=4)
        assert budget.sigma_dp == pytest.approx(math.sqrt(2 * math.log(125)) / 2)
        assert budget.epsilon == 2 * 4 * 2.0
        assert budget.delta_f == 2 * 4

    def test_sigma_independent_of_p(self):
        rule = CalibrationRule(mode="dimension-adjusted", epsilon0=4.0)
        sigmas = {calibrate(rule, 0.01, p).sigma_dp for p in (1, 3, 7)}
        assert len(sigmas) == 1

    def test_monotone_in_epsilon0(self):
        sigmas = [
            calibrate(CalibrationRule(mode="dimension-adjusted", epsilon0=e), 0.01, 3).sigma_dp
            for e in (1, 2, 4, 8, 16)
        ]
        assert all(a > b for a, b in zip(sigmas, sigmas[1:]))

    def test_fixed_mode_reproduces_dimension_adjusted(self):
        # (2p c)/(2p eps0) cancels to c/eps0; the two code paths agree to the
        # last floating-point digit
        p, eps0, delta = 5, 3.0, 1e-4
        adjusted = calibrate(CalibrationRule(mode="dimension-adjusted", epsilon0=eps0), delta, p)
        fixed = calibrate(
            CalibrationRule(mode="fixed", epsilon=2 * p * eps0, delta_f=2.0 * p), delta, p
        )
        assert fixed.sigma_dp == pytest.approx(adjusted.sigma_dp, rel=1e-15)
        assert fixed.epsilon == adjusted.epsilon

    def test_delta_domain(self):
        rule = CalibrationRule(mode="dimension-adjusted", epsilon0=2.0)
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValidationError):
                calibrate(rule, bad, 3)

    def test_budget_consistency_enforced(self):
        with pytest.raises(ValidationError, match="inconsistent"):
            PrivacyBudget(epsilon=2.0, delta=0.01, delta_f=4.0, sigma_dp=1.0)
        ok = PrivacyBudget.from_params(2.0, 0.01, 4.0)
        assert ok.sigma_dp == gaussian_sigma(4.0, 2.0, 0.01)


@pytest.fixture
def base_summary(rng):
    X = np.column_stack([np.ones(8), rng.binomial(1, 0.5, (8, 5)).astype(float)])
    y = rng.normal(size=8)
    return compute_summary(SiteData(site_id="clinic-a", y=y, X=X))


def _budget(eps0=2.0, delta=0.01, p=6):
    return calibrate(CalibrationRule(mode="dimension-adjusted", epsilon0=eps0), delta, p)


class TestPrivatize:
    def test_near_zero_noise_limit(self, base_summary):
        noisy = privatize(base_summary, _budget(eps0=1e9), rng_seed=4)
        assert np.abs(noisy.S - base_summary.S).max() < 1e-6
        assert np.abs(noisy.T - base_summary.T).max() < 1e-6
        assert noisy.privatized and noisy.budget_used is not None

    def test_deterministic_per_seed(self, base_summary):
        a = privatize(base_summary, _budget(), rng_seed=11)
        b = privatize(base_summary, _budget(), rng_seed=11)
        c = privatize(base_summary, _budget(), rng_seed=12)
        assert np.array_equal(a.S, b.S) and np.array_equal(a.T, b.T)
        assert not np.array_equal(a.S, c.S)

    def test_distinct_sites_get_distinct_noise(self, base_summary, rng):
        other = compute_summary(
            SiteData(site_id="clinic-b", y=np.zeros(8), X=np.zeros((8, 6)) + 1.0)
        )
        a = privatize(base_summary, _budget(), rng_seed=11)
        b = privatize(other, _budget(), rng_seed=11)
        assert not np.array_equal(a.S - base_summary.S, b.S - other.S)

    def test_exact_symmetry(self, base_summary):
        noisy = privatize(base_summary, _budget(), rng_seed=0)
        assert np.array_equal(noisy.S, noisy.S.T)
        assert np.array_equal(noisy.T, noisy.T.T)

    def test_double_privatization_rejected(self, base_summary):
        noisy = privatize(base_summary, _budget(), rng_seed=0)
        with pytest.raises(ValidationError, match="already privatized"):
            privatize(noisy, _budget(), rng_seed=1)

    def test_subset_scope_masks_exactly(self, base_summary):
        sensitive = frozenset({4, 5, 6})
        noisy = privatize(
            base_summary, _budget(), scope="subset", sensitive=sensitive, rng_seed=3
        )
        untouched = [(0, 0), (0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3),
                     (1, 1), (2, 2), (3, 3)]
        for i, j in untouched:
            assert noisy.S[i, j] == base_summary.S[i, j]
            assert noisy.T[i, j] == base_summary.T[i, j]
        touched = [(0, 4), (4, 4), (1, 5), (6, 6), (2, 6)]
        for i, j in touched:
            assert noisy.S[i, j] != base_summary.S[i, j]

    def test_subset_rejects_out_of_range(self, base_summary):
        with pytest.raises(ValidationError, match="sensitive"):
            privatize(base_summary, _budget(), scope="subset", sensitive=frozenset({7}), rng_seed=0)

    def test_noise_scale_moderate_sample(self, base_summary):
        budget = _budget(eps0=2.0)
        diag, off = [], []
        for seed in range(4000):
            noisy = privatize(base_summary, budget, rng_seed=seed)
            delta = noisy.S - base_summary.S
            diag.append(delta[2, 2])
            off.append(delta[0, 3])
        assert np.std(diag) == pytest.approx(budget.sigma_dp, rel=0.05)
        assert np.std(off) == pytest.approx(budget.sigma_dp / math.sqrt(2), rel=0.05)
        assert abs(np.mean(diag)) < 4 * budget.sigma_dp / math.sqrt(4000)
