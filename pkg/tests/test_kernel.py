"""Kernel construction, relevance conditioning, and log-determinant scores."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icsel.errors import IndefiniteKernelError, KernelError
from icsel.kernel import (
    SubsetIndex,
    build_base_kernel,
    condition_kernel,
    dpp_prob_normalized,
    logdet_subset,
    normalize_rows,
    relevance_scores,
    set_score,
)


def random_unit_rows(n: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return normalize_rows(rng.normal(size=(n, d)))


class TestNormalizeRows:
    def test_three_four_five_triangle(self):
        out = normalize_rows(np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(out[0], [0.6, 0.8], atol=1e-12)

    def test_unit_row_unchanged(self):
        row = np.array([[0.0, 1.0]])
        np.testing.assert_allclose(normalize_rows(row), row, atol=1e-15)

    def test_zero_row_rejected(self):
        with pytest.raises(KernelError):
            normalize_rows(np.array([[0.0, 0.0]]))


class TestBuildBaseKernel:
    def test_orthonormal_rows_give_identity(self):
        L = build_base_kernel(np.eye(4))
        np.testing.assert_allclose(L, np.eye(4), atol=1e-12)

    def test_duplicated_row_gives_unit_off_diagonal(self):
        rows = normalize_rows(np.array([[1.0, 2.0], [1.0, 2.0]]))
        L = build_base_kernel(rows)
        assert L[0, 1] == pytest.approx(1.0)

    def test_off_diagonal_is_dot_product(self):
        L = build_base_kernel(np.array([[1.0, 0.0], [0.6, 0.8]]))
        assert L[0, 1] == pytest.approx(0.6)


class TestRelevanceScores:
    def test_self_match_is_one(self):
        rows = random_unit_rows(3, 4, seed=0)
        r = relevance_scores(rows[0], rows)
        assert r[0] == pytest.approx(1.0)

    def test_orthogonal_is_zero(self):
        rows = np.eye(3)
        r = relevance_scores(np.array([1.0, 0.0, 0.0]), rows)
        assert r[1] == pytest.approx(0.0)

    def test_plain_dot_product(self):
        r = relevance_scores(np.array([1.0, 0.0]), np.array([[0.6, 0.8]]))
        assert r[0] == pytest.approx(0.6)


class TestConditionKernel:
    def test_zero_relevance_leaves_kernel_unchanged(self):
        rows = random_unit_rows(5, 6, seed=1)
        L = build_base_kernel(rows)
        kern = condition_kernel(L, np.zeros(5), 0.05)
        np.testing.assert_array_equal(kern.Lp, L)

    def test_identity_kernel_full_relevance(self):
        kern = condition_kernel(np.eye(2), np.array([1.0, 1.0]), 0.5)
        np.testing.assert_allclose(np.diag(kern.Lp), [7.3890560989, 7.3890560989],
                                   atol=1e-4)

    def test_off_diagonal_scaling(self):
        rows = normalize_rows(np.array([[1.0, 0.0], [0.5, math.sqrt(0.75)]]))
        L = build_base_kernel(rows)
        L[0, 1] = L[1, 0] = 0.5
        kern = condition_kernel(L, np.array([0.2, 0.4]), 0.1)
        assert kern.Lp[0, 1] == pytest.approx(0.5 * math.exp(3.0), abs=1e-4)
        assert kern.Lp[0, 1] == pytest.approx(10.0428, abs=1e-3)

    def test_infinite_lambda_is_pure_diversity(self):
        rows = random_unit_rows(4, 5, seed=2)
        L = build_base_kernel(rows)
        kern = condition_kernel(L, relevance_scores(rows[0], rows), math.inf)
        np.testing.assert_array_equal(kern.Lp, L)

    def test_validation_rejects_bad_inputs(self):
        L = build_base_kernel(random_unit_rows(3, 4, seed=3))
        r = np.zeros(3)
        with pytest.raises(KernelError):
            condition_kernel(L * 2.0, r, 0.1)        # non-unit diagonal
        with pytest.raises(KernelError):
            condition_kernel(L, np.array([0.0, 0.0, 1.5]), 0.1)  # |r| > 1
        with pytest.raises(KernelError):
            condition_kernel(L, r, 0.0)              # lambda must be positive
        asym = L.copy()
        asym[0, 1] += 1e-6
        with pytest.raises(KernelError):
            condition_kernel(asym, r, 0.1)


class TestLogdetSubset:
    def test_identity_restriction_is_zero(self):
        assert logdet_subset(np.eye(5), [0, 2, 4]) == pytest.approx(0.0)

    def test_diagonal_restriction(self):
        L = np.diag([2.0, 3.0, 5.0])
        assert logdet_subset(L, [0, 1]) == pytest.approx(math.log(6.0), abs=1e-5)
        assert logdet_subset(L, [0, 1]) == pytest.approx(1.79176, abs=1e-5)

    def test_identical_rows_give_negative_infinity(self):
        rows = normalize_rows(np.array([[1.0, 2.0], [1.0, 2.0]]))
        L = build_base_kernel(rows)
        assert logdet_subset(L, [0, 1]) == -math.inf

    def test_indefinite_restriction_rejected(self):
        L = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3 and -1
        with pytest.raises(IndefiniteKernelError):
            logdet_subset(L, [0, 1])


class TestSetScore:
    def test_identity_kernel_singleton(self):
        kern = condition_kernel(np.eye(3), np.array([0.3, 0.9, 0.5]), 0.1)
        assert set_score(kern, [1]) == pytest.approx(9.0)

    def test_identity_kernel_pair(self):
        kern = condition_kernel(np.eye(2), np.array([0.3, 0.9]), 0.1)
        assert set_score(kern, [0, 1]) == pytest.approx(12.0)

    def test_zero_relevance_reduces_to_logdet(self):
        rows = random_unit_rows(4, 5, seed=4)
        L = build_base_kernel(rows)
        kern = condition_kernel(L, np.zeros(4), 0.05)
        subset = [0, 2]
        assert set_score(kern, subset) == pytest.approx(logdet_subset(L, subset))


class TestDppProbNormalized:
    def test_identity_singleton(self):
        assert dpp_prob_normalized(np.eye(2), [0]) == pytest.approx(0.25)

    def test_identity_empty_set(self):
        assert dpp_prob_normalized(np.eye(2), []) == pytest.approx(0.25)

    def test_correlated_pair(self):
        L = np.array([[1.0, 0.5], [0.5, 1.0]])
        assert dpp_prob_normalized(L, [0, 1]) == pytest.approx(0.2)


class TestSubsetIndex:
    def test_duplicate_members_rejected(self):
        with pytest.raises(KernelError):
            SubsetIndex(members=(1, 1))

    def test_negative_member_rejected(self):
        with pytest.raises(KernelError):
            SubsetIndex(members=(-1, 2))


small_case = st.tuples(
    st.integers(min_value=2, max_value=8),
    st.integers(min_value=0, max_value=10_000),
    st.sampled_from([0.01, 0.05, 0.1, 1.0]),
)


class TestProperties:
    @given(case=small_case)
    @settings(max_examples=40, deadline=None)
    def test_conditioning_matches_elementwise_formula(self, case):
        n, seed, lam = case
        rows = random_unit_rows(n, n + 2, seed)
        L = build_base_kernel(rows)
        r = np.clip(relevance_scores(rows[0], rows), -1.0, 1.0)
        kern = condition_kernel(L, r, lam)
        expected = L * np.exp((r[:, None] + r[None, :]) / (2.0 * lam))
        np.testing.assert_allclose(kern.Lp, expected, rtol=1e-10, atol=1e-10)

    @given(case=small_case)
    @settings(max_examples=40, deadline=None)
    def test_set_score_decomposes(self, case):
        n, seed, lam = case
        rows = random_unit_rows(n, n + 2, seed)
        L = build_base_kernel(rows)
        r = np.clip(relevance_scores(rows[0], rows), -1.0, 1.0)
        kern = condition_kernel(L, r, lam)
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, n + 1))
        subset = sorted(rng.choice(n, size=k, replace=False).tolist())
        expected = float(np.sum(r[subset])) / lam + logdet_subset(L, subset)
        got = set_score(kern, subset)
        if math.isfinite(expected):
            assert got == pytest.approx(expected, abs=1e-8)

    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=20, deadline=None)
    def test_subset_probabilities_sum_to_one(self, seed):
        from itertools import combinations
        rows = random_unit_rows(4, 6, seed)
        L = build_base_kernel(rows)
        total = 0.0
        for k in range(0, 5):
            for subset in combinations(range(4), k):
                total += dpp_prob_normalized(L, list(subset))
        assert total == pytest.approx(1.0, abs=1e-10)
