"""Rank primitives checked against brute-force pair-count oracles."""

import math

import numpy as np
import pytest

from ulv.ranks import (
    PIEstimate,
    logit_pi,
    mann_whitney_u,
    midranks,
    probabilistic_index,
)


def brute_force_u(case, control):
    """O(K1*K0) double loop over all pairs, with half weight for ties."""
    case = np.asarray(case, dtype=float)
    control = np.asarray(control, dtype=float)
    gt = (case[:, None] > control[None, :]).sum()
    eq = (case[:, None] == control[None, :]).sum()
    return float(gt) + 0.5 * float(eq)


def random_sample(rng, max_len=50):
    """Length 1..max_len with deliberate ties and occasional outliers."""
    k = int(rng.integers(1, max_len + 1))
    vals = rng.integers(0, 6, k).astype(float)  # heavy ties
    noise_idx = rng.random(k) < 0.3
    vals[noise_idx] += rng.normal(0, 1, int(noise_idx.sum()))
    outlier_idx = rng.random(k) < 0.05
    vals[outlier_idx] *= 1e6
    return vals


class TestMidranks:
    def test_distinct_values(self):
        np.testing.assert_array_equal(midranks([3, 1, 2]), [3, 1, 2])

    def test_tied_pair(self):
        # brute-force average of the spanned ranks 1 and 2
        np.testing.assert_array_equal(midranks([1, 1, 2]), [1.5, 1.5, 3])

    def test_all_tied(self):
        np.testing.assert_array_equal(midranks([5, 5, 5]), [2, 2, 2])

    def test_rank_sum_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            vals = random_sample(rng)
            ranks = midranks(vals)
            assert ranks.sum() == pytest.approx(len(vals) * (len(vals) + 1) / 2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            midranks([])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            midranks([1.0, math.nan])
        with pytest.raises(ValueError):
            midranks([1.0, math.inf])


class TestMannWhitneyU:
    def test_worked_example_with_rank_sum_identity(self):
        case, control = [2, 4], [1, 3]
        u = mann_whitney_u(case, control)
        assert u == 3.0
        m = len(case)
        w = midranks(np.concatenate([case, control]))[:m].sum()
        assert w == 6.0
        assert w == m * (m + 1) / 2 + u

    def test_tied_pairs_counted_half(self):
        # pairs contribute 0.5 + 0 + 1 + 0.5
        assert mann_whitney_u([1, 2], [1, 2]) == 2.0

    def test_complete_reversal_is_zero(self):
        assert mann_whitney_u([1, 2, 3], [10, 11, 12]) == 0.0

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            case = random_sample(rng, max_len=20)
            control = random_sample(rng, max_len=20)
            assert mann_whitney_u(case, control) == pytest.approx(
                brute_force_u(case, control), abs=1e-12
            )

    def test_rank_sum_identity_exact_without_ties(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            m = int(rng.integers(1, 30))
            n = int(rng.integers(1, 30))
            pooled = rng.permutation(np.arange(m + n, dtype=float) * 1.37 + 0.1)
            case, control = pooled[:m], pooled[m:]
            u = mann_whitney_u(case, control)
            w = midranks(np.concatenate([case, control]))[:m].sum()
            assert w - m * (m + 1) / 2 == u

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mann_whitney_u([], [1.0])


class TestProbabilisticIndex:
    def test_identical_samples_give_half(self):
        assert probabilistic_index([1, 2], [1, 2]).value == 0.5

    def test_single_tie_example(self):
        # brute force over all 9 pairs with one tied pair
        pi = probabilistic_index([3, 5, 7], [2, 5, 6])
        assert pi.value == pytest.approx(11 / 18, abs=1e-12)

    def test_complete_separation(self):
        assert probabilistic_index([10, 11], [1, 2]).value == 1.0

    def test_complement_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            x = random_sample(rng, 15)
            y = random_sample(rng, 15)
            assert probabilistic_index(x, y).value + probabilistic_index(
                y, x
            ).value == pytest.approx(1.0, abs=0)

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            x = rng.normal(0, 2, int(rng.integers(1, 20)))
            y = rng.normal(0, 2, int(rng.integers(1, 20)))
            direct = probabilistic_index(x, y).value
            warped = probabilistic_index(np.arctan(x), np.arctan(y)).value
            assert direct == warped

    def test_value_on_resolution_grid(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            x = random_sample(rng, 12)
            y = random_sample(rng, 12)
            pi = probabilistic_index(x, y)
            steps = pi.value / pi.resolution
            assert steps == pytest.approx(round(steps), abs=1e-9)

    def test_estimate_validation(self):
        with pytest.raises(ValueError):
            PIEstimate(value=1.5, n_case_cells=2, n_control_cells=2)
        with pytest.raises(ValueError):
            PIEstimate(value=0.5, n_case_cells=0, n_control_cells=2)


class TestLogitPI:
    def test_half_maps_to_zero(self):
        assert logit_pi(probabilistic_index([1, 2], [1, 2])) == 0.0

    def test_default_clamp_at_one(self):
        # K1 = K0 = 10 gives epsilon 1/200, so logit(1) -> log(199)
        pi = PIEstimate(value=1.0, n_case_cells=10, n_control_cells=10)
        assert logit_pi(pi) == pytest.approx(math.log(199), abs=1e-12)
        assert logit_pi(pi) == pytest.approx(5.2933, abs=1e-4)

    def test_odd_symmetry(self):
        for p in (0.12, 0.3, 0.5, 0.77, 1.0):
            a = PIEstimate(p, 10, 10)
            b = PIEstimate(1.0 - p, 10, 10)
            assert logit_pi(a) == pytest.approx(-logit_pi(b), abs=1e-12)

    def test_clamp_epsilon_validated(self):
        pi = PIEstimate(0.5, 3, 3)
        with pytest.raises(ValueError):
            logit_pi(pi, clamp_epsilon=0.6)
        with pytest.raises(ValueError):
            logit_pi(pi, clamp_epsilon=0.0)
