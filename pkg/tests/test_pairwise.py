"""Difference-matrix construction for all metrics."""

import numpy as np
import pytest

from ulv.pairwise import DifferenceMatrix, DifferenceMetric, build_difference_matrix
from ulv.ranks import logit_pi, probabilistic_index


def study(rng, m=3, n=3, cells=20):
    values = {}
    case_ids = [f"case{i}" for i in range(m)]
    control_ids = [f"ctrl{j}" for j in range(n)]
    for s in case_ids + control_ids:
        values[s] = rng.poisson(5, cells).astype(float)
    return values, case_ids, control_ids


class TestBuildDifferenceMatrix:
    def test_identical_cell_vectors_give_half(self):
        cells = np.array([1.0, 3.0, 5.0, 5.0])
        values = {s: cells for s in ("a1", "a2", "b1", "b2")}
        D = build_difference_matrix(values, ["a1", "a2"], ["b1", "b2"], DifferenceMetric.PI)
        np.testing.assert_array_equal(D.values, 0.5)
        assert D.null_center == 0.5

    def test_mean_diff_example(self):
        values = {
            "a1": [3.0, 3.0],
            "a2": [5.0, 5.0],
            "b1": [1.0, 1.0],
            "b2": [2.0, 2.0],
        }
        D = build_difference_matrix(values, ["a1", "a2"], ["b1", "b2"], DifferenceMetric.MEAN_DIFF)
        np.testing.assert_allclose(D.values, [[2.0, 1.0], [4.0, 3.0]])
        assert D.null_center == 0.0

    def test_pi_entry_matches_rank_module(self):
        values = {
            "a1": [3.0, 5.0, 7.0],
            "a2": [3.0, 5.0, 7.0],
            "b1": [2.0, 5.0, 6.0],
            "b2": [2.0, 5.0, 6.0],
        }
        D = build_difference_matrix(values, ["a1", "a2"], ["b1", "b2"], DifferenceMetric.PI)
        np.testing.assert_allclose(D.values, 11 / 18)

    def test_logit_metric_is_logit_of_pi(self):
        rng = np.random.default_rng(0)
        values, case_ids, control_ids = study(rng)
        D_pi = build_difference_matrix(values, case_ids, control_ids, DifferenceMetric.PI)
        D_lo = build_difference_matrix(values, case_ids, control_ids, DifferenceMetric.LOGIT_PI)
        for i, ci in enumerate(case_ids):
            for j, gj in enumerate(control_ids):
                pi = probabilistic_index(values[ci], values[gj])
                assert D_lo.values[i, j] == pytest.approx(logit_pi(pi), abs=1e-12)
        assert D_lo.null_center == 0.0
        assert D_pi.values.min() >= 0 and D_pi.values.max() <= 1

    def test_mean_greater_indicator_with_tie(self):
        values = {
            "a1": [4.0, 6.0],  # mean 5
            "a2": [1.0, 1.0],  # mean 1
            "b1": [5.0, 5.0],  # mean 5, ties a1
            "b2": [0.0, 2.0],  # mean 1, ties a2
        }
        D = build_difference_matrix(
            values, ["a1", "a2"], ["b1", "b2"], DifferenceMetric.MEAN_GREATER_INDICATOR
        )
        np.testing.assert_allclose(D.values, [[0.5, 1.0], [0.0, 0.5]])
        assert D.null_center == 0.5

    def test_swap_groups_complements_pi(self):
        rng = np.random.default_rng(1)
        values, case_ids, control_ids = study(rng)
        D = build_difference_matrix(values, case_ids, control_ids, DifferenceMetric.PI)
        D_swapped = build_difference_matrix(values, control_ids, case_ids, DifferenceMetric.PI)
        np.testing.assert_allclose(D_swapped.values, 1.0 - D.values.T, atol=0)

    def test_swap_groups_negates_mean_diff(self):
        rng = np.random.default_rng(2)
        values, case_ids, control_ids = study(rng)
        D = build_difference_matrix(values, case_ids, control_ids, DifferenceMetric.MEAN_DIFF)
        D_swapped = build_difference_matrix(
            values, control_ids, case_ids, DifferenceMetric.MEAN_DIFF
        )
        np.testing.assert_allclose(D_swapped.values, -D.values.T, atol=0)

    @pytest.mark.parametrize("metric", [DifferenceMetric.MEAN_DIFF, DifferenceMetric.MEDIAN_DIFF])
    def test_separable_metrics_have_rank_one_differences(self, metric):
        # 16 cells of integer counts make every subject summary an exact
        # dyadic rational, so the rank-1 structure holds without rounding
        rng = np.random.default_rng(3)
        values, case_ids, control_ids = study(rng, m=4, n=5, cells=16)
        D = build_difference_matrix(values, case_ids, control_ids, metric)
        # values[i][j] - values[i][j'] must not depend on i, exactly
        col_diff = D.values[:, :, None] - D.values[:, None, :]
        np.testing.assert_array_equal(
            col_diff, np.broadcast_to(col_diff[0], col_diff.shape)
        )
        assert metric.separable

    def test_u_cluster_diagnostic(self):
        rng = np.random.default_rng(4)
        values, case_ids, control_ids = study(rng)
        D = build_difference_matrix(values, case_ids, control_ids, DifferenceMetric.PI)
        assert D.u_cluster() == pytest.approx(D.values.sum(), abs=0)
        # rescaling by cell-pair counts recovers raw pair counts
        raw = 0.0
        for ci in case_ids:
            for gj in control_ids:
                a, b = values[ci], values[gj]
                raw += (a[:, None] > b[None, :]).sum() + 0.5 * (a[:, None] == b[None, :]).sum()
        scaled = (D.values * np.outer(D.case_sizes, D.control_sizes)).sum()
        assert scaled == pytest.approx(raw, abs=1e-9)

    def test_insufficient_subjects_rejected(self):
        values = {"a1": [1.0], "b1": [2.0], "b2": [3.0]}
        with pytest.raises(ValueError, match="insufficient subjects"):
            build_difference_matrix(values, ["a1"], ["b1", "b2"], DifferenceMetric.PI)

    def test_empty_subject_rejected(self):
        values = {"a1": [1.0], "a2": [], "b1": [2.0], "b2": [3.0]}
        with pytest.raises(ValueError, match="0 cells"):
            build_difference_matrix(values, ["a1", "a2"], ["b1", "b2"], DifferenceMetric.PI)

    def test_unknown_subject_rejected(self):
        values = {"a1": [1.0], "a2": [2.0], "b1": [2.0]}
        with pytest.raises(ValueError, match="b2"):
            build_difference_matrix(values, ["a1", "a2"], ["b1", "b2"], DifferenceMetric.PI)


class TestDifferenceMatrixType:
    def test_pi_range_validated(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            DifferenceMatrix(
                values=np.array([[0.5, 1.2], [0.3, 0.4]]),
                case_ids=("a", "b"),
                control_ids=("c", "d"),
                case_sizes=np.array([3, 3]),
                control_sizes=np.array([3, 3]),
                metric=DifferenceMetric.PI,
                null_center=0.5,
            )

    def test_minimum_group_sizes_validated(self):
        with pytest.raises(ValueError, match="insufficient subjects"):
            DifferenceMatrix(
                values=np.array([[0.5, 0.5]]),
                case_ids=("a",),
                control_ids=("c", "d"),
                case_sizes=np.array([3]),
                control_sizes=np.array([3, 3]),
                metric=DifferenceMetric.PI,
                null_center=0.5,
            )
