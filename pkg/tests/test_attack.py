import itertools

import numpy as np
import pytest

from fedlmm import (
    AttackConfig,
    CalibrationRule,
    CapacityError,
    FeasibilityInstance,
    ValidationError,
    attack_pipeline,
    calibrate,
    enumerate_reconstructions,
    hamming_sorted,
    reconstruct,
)

from oracles import gram_fibers


def _row_multiset(X):
    return tuple(sorted(map(tuple, np.asarray(X))))


class TestReconstruct:
    def test_three_patient_clinic_unique(self):
        instance = FeasibilityInstance(
            gram=np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0]]), n=3
        )
        result = reconstruct(instance)
        assert result.status == "unique"
        assert result.violation == 0
        truth = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
        assert hamming_sorted(result.X_hat, truth) == 0

    def test_zero_gram_unique_all_zero(self):
        result = reconstruct(FeasibilityInstance(gram=np.zeros((3, 3), dtype=int), n=5))
        assert result.status == "unique"
        assert not result.X_hat.any()
        assert result.X_hat.shape == (5, 3)

    def test_soundness_random_instances(self, rng):
        for _ in range(60):
            n = int(rng.integers(1, 7))
            p = int(rng.integers(1, 5))
            X = (rng.random((n, p)) < 0.5).astype(np.int64)
            result = reconstruct(FeasibilityInstance(gram=X.T @ X, n=n))
            assert result.status in ("unique", "feasible-multiple")
            assert result.violation == 0
            G = result.X_hat.astype(np.int64)
            assert np.array_equal(G.T @ G, X.T @ X)

    def test_fiber_agreement_with_exhaustive_oracle(self):
        for n, p in [(1, 1), (2, 2), (3, 2), (2, 3)]:
            for key, mats in gram_fibers(n, p).items():
                gram = np.array(key, dtype=np.int64).reshape(p, p)
                sols = enumerate_reconstructions(FeasibilityInstance(gram=gram, n=n))
                assert {_row_multiset(s) for s in sols} == mats
                result = reconstruct(FeasibilityInstance(gram=gram, n=n))
                expected = "unique" if len(mats) == 1 else "feasible-multiple"
                assert result.status == expected
                if len(mats) == 1:
                    truth = np.array(next(iter(mats)))
                    assert hamming_sorted(result.X_hat, truth) == 0

    def test_min_violation_repair_matches_brute_force(self):
        # off-diagonal exceeds a diagonal entry: infeasible by construction
        gram = np.array([[2, 2], [2, 1]], dtype=np.int64)
        n = 2
        best = min(
            int(np.abs(np.triu(np.array(bits).reshape(n, 2).T @ np.array(bits).reshape(n, 2) - gram)).sum())
            for bits in itertools.product((0, 1), repeat=n * 2)
        )
        result = reconstruct(FeasibilityInstance(gram=gram, n=n))
        assert result.status == "infeasible-repaired"
        assert result.violation == best
        G = result.X_hat.astype(np.int64)
        got = int(np.abs(np.triu(G.T @ G - gram)).sum())
        assert got == result.violation

    def test_capacity_error(self):
        with pytest.raises(CapacityError):
            reconstruct(FeasibilityInstance(gram=np.zeros((13, 13), dtype=int), n=3))

    def test_timeout_gives_failed(self, rng):
        p, n = 10, 40
        gram = np.zeros((p, p), dtype=np.int64)
        iu = np.triu_indices(p, 1)
        vals = rng.integers(0, n // 2, size=len(iu[0]))
        gram[iu] = vals
        gram[(iu[1], iu[0])] = vals
        np.fill_diagonal(gram, rng.integers(n // 2, n, size=p))
        result = reconstruct(
            FeasibilityInstance(gram=gram, n=n), AttackConfig(timeout_s=0.01)
        )
        assert result.status == "failed"
        assert result.X_hat is None

    def test_asymmetric_gram_rejected(self):
        with pytest.raises(ValidationError, match="symmetric"):
            FeasibilityInstance(gram=np.array([[1, 2], [0, 1]]), n=2)


class TestHammingSorted:
    def test_identical(self):
        A = np.array([[0, 1], [1, 0]])
        assert hamming_sorted(A, A) == 0

    def test_row_order_ignored(self):
        A = np.array([[0, 0], [1, 1]])
        B = np.array([[1, 1], [0, 0]])
        assert hamming_sorted(A, B) == 0

    def test_single_disagreement(self):
        A = np.array([[0, 0], [1, 1]])
        B = np.array([[0, 1], [1, 1]])
        assert hamming_sorted(A, B) == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            hamming_sorted(np.zeros((2, 2)), np.zeros((3, 2)))


class TestPipeline:
    def test_exact_recovery_without_noise(self, rng):
        hits = 0
        for rep in range(40):
            X = (rng.random((3, 3)) < 0.5).astype(np.int8)
            result = attack_pipeline(X, budget=None, rng_seed=rep)
            assert result.status in ("unique", "feasible-multiple")
            assert result.element_rate == 1.0 - result.hamming / 9
            hits += result.matrix_rate
        assert hits >= 30  # high recovery without noise

    def test_strong_noise_blocks_recovery(self, rng):
        budget = calibrate(CalibrationRule(mode="dimension-adjusted", epsilon0=2.0), 0.01, 3)
        hits = 0
        for rep in range(40):
            X = (rng.random((3, 3)) < 0.5).astype(np.int8)
            result = attack_pipeline(X, budget=budget, rng_seed=rep)
            if result.status != "failed":
                hits += result.matrix_rate
        assert hits <= 5

    def test_row_permutation_invariant_metrics(self, rng):
        X = (rng.random((4, 3)) < 0.5).astype(np.int8)
        perm = rng.permutation(4)
        budget = calibrate(CalibrationRule(mode="dimension-adjusted", epsilon0=8.0), 0.01, 3)
        a = attack_pipeline(X, budget=budget, rng_seed=9)
        b = attack_pipeline(X[perm], budget=budget, rng_seed=9)
        assert a.hamming == b.hamming
        assert a.matrix_rate == b.matrix_rate
        assert a.element_rate == b.element_rate

    def test_rejects_nonbinary(self):
        with pytest.raises(ValidationError, match="binary"):
            attack_pipeline(np.array([[0.5, 1.0]]))

    def test_released_gram_symmetric_and_integer(self, rng):
        from fedlmm.attack import released_rounded_gram

        budget = calibrate(CalibrationRule(mode="dimension-adjusted", epsilon0=1.0), 0.01, 3)
        for rep in range(20):
            X = (rng.random((3, 3)) < 0.5).astype(np.int8)
            g = released_rounded_gram(X, budget, rng_seed=rep)
            assert g.dtype == np.int64
            assert np.array_equal(g, g.T)

    def test_clamp_gram_ranges(self, rng):
        from fedlmm.attack import clamp_gram

        for rep in range(30):
            raw = rng.integers(-4, 9, size=(3, 3))
            raw = np.triu(raw) + np.triu(raw, 1).T
            g = clamp_gram(raw, n=3)
            assert np.array_equal(g, g.T)
            d = np.diag(g)
            assert (d >= 0).all() and (d <= 3).all()
            for j in range(3):
                for k in range(3):
                    if j != k:
                        assert 0 <= g[j, k] <= min(d[j], d[k])

    def test_repaired_never_counts_matrix_level(self, rng):
        budget = calibrate(CalibrationRule(mode="dimension-adjusted", epsilon0=4.0), 0.01, 3)
        seen_repair = False
        for rep in range(60):
            X = (rng.random((3, 3)) < 0.5).astype(np.int8)
            result = attack_pipeline(X, budget=budget, rng_seed=rep)
            if result.status == "infeasible-repaired":
                seen_repair = True
                assert result.matrix_rate == 0
                assert result.element_rate is not None
        assert seen_repair
