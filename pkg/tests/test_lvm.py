"""Latent-model stage: closed form, least squares, ML fits, multi-group LRT."""

import math

import numpy as np
import pytest

from conftest import matrix_from, random_latent_matrix

from ulv.lvm import (
    LatentModelConfig,
    LseConstraint,
    closed_form_test,
    fit_latent_model,
    lse_solution,
    multi_group_test,
    wald_test,
)
from ulv.pairwise import DifferenceMetric

WORKED = [[0.6, 0.7], [0.8, 0.9]]


def t2_two_sided_p(t):
    """Closed-form two-sided p for the t distribution with 2 df."""
    return 2.0 * (1.0 - 0.5 * (1.0 + t / math.sqrt(t * t + 2.0)))


class TestClosedForm:
    def test_worked_example(self):
        res = closed_form_test(matrix_from(WORKED))
        assert res.effect == pytest.approx(0.75, abs=1e-12)
        assert res.statistic == pytest.approx(0.25 / math.sqrt(0.0125), abs=1e-9)
        assert res.statistic == pytest.approx(2.23607, abs=1e-5)
        assert res.df == 2
        # independent oracle: exact CDF of t with 2 df
        assert res.p_value == pytest.approx(t2_two_sided_p(res.statistic), abs=1e-12)
        assert res.p_value == pytest.approx(0.15485, abs=1e-4)

    def test_constant_at_null_center_degenerates_to_one(self):
        res = closed_form_test(matrix_from(np.full((3, 3), 0.5)))
        assert res.p_value == 1.0
        assert res.statistic == 0.0
        assert res.degenerate

    def test_constant_off_null_center_degenerates_to_zero(self):
        res = closed_form_test(matrix_from(np.full((3, 3), 0.8)))
        assert res.p_value == 0.0
        assert math.isinf(res.statistic) and res.statistic > 0
        assert res.degenerate

    def test_location_shift_equivariance(self):
        rng = np.random.default_rng(10)
        base = rng.normal(0.5, 0.1, (4, 6))
        shift = 0.17
        r1 = closed_form_test(matrix_from(base), null_center=0.5)
        r2 = closed_form_test(
            matrix_from(base + shift, metric=DifferenceMetric.MEAN_DIFF),
            null_center=0.5 + shift,
        )
        assert r1.statistic == pytest.approx(r2.statistic, abs=1e-12)

    def test_invariant_under_row_and_column_permutations(self):
        rng = np.random.default_rng(11)
        vals = rng.normal(0.55, 0.1, (5, 4))
        base = closed_form_test(matrix_from(vals))
        for _ in range(10):
            perm = vals[rng.permutation(5)][:, rng.permutation(4)]
            res = closed_form_test(matrix_from(perm))
            assert res.p_value == pytest.approx(base.p_value, abs=1e-12)

    def test_one_sided_and_normal_options(self):
        D = matrix_from(WORKED)
        greater = closed_form_test(D, alternative="greater")
        less = closed_form_test(D, alternative="less")
        assert greater.p_value + less.p_value == pytest.approx(1.0, abs=1e-12)
        normal = closed_form_test(D, normal_approx=True)
        assert normal.p_value < closed_form_test(D).p_value  # t is conservative


class TestLseSolution:
    def test_zero_mean_control_solution(self):
        a, b = lse_solution(matrix_from(WORKED))
        np.testing.assert_allclose(a, [0.65, 0.85], atol=1e-12)
        # column means are (0.7, 0.8), so b = grand - column means
        np.testing.assert_allclose(b, [0.05, -0.05], atol=1e-12)
        assert b.sum() == pytest.approx(0.0, abs=1e-12)

    def test_constant_matrix(self):
        a, b = lse_solution(matrix_from(np.full((3, 4), 0.7)))
        np.testing.assert_allclose(a, 0.7, atol=1e-12)
        np.testing.assert_allclose(b, 0.0, atol=1e-12)

    def test_constraints_share_fitted_values(self):
        rng = np.random.default_rng(12)
        D = matrix_from(rng.normal(0.5, 0.2, (4, 6)))
        a1, b1 = lse_solution(D, LseConstraint.ZERO_MEAN_CONTROL)
        a2, b2 = lse_solution(D, LseConstraint.MIN_NORM)
        f1 = a1[:, None] - b1[None, :]
        f2 = a2[:, None] - b2[None, :]
        np.testing.assert_allclose(f1, f2, atol=1e-12)

    def test_min_norm_matches_pseudoinverse_oracle(self):
        # design matrix rows map (a, b) to a_i - b_j, in (i, j) order
        rng = np.random.default_rng(13)
        for m, n in [(2, 2), (3, 2), (4, 5)]:
            vals = rng.normal(0.5, 0.3, (m, n))
            D = matrix_from(np.clip(vals, 0, 1))
            design = np.zeros((m * n, m + n))
            for i in range(m):
                for j in range(n):
                    design[i * n + j, i] = 1.0
                    design[i * n + j, m + j] = -1.0
            oracle = np.linalg.pinv(design) @ D.values.ravel()
            a, b = lse_solution(D, LseConstraint.MIN_NORM)
            np.testing.assert_allclose(np.concatenate([a, b]), oracle, atol=1e-10)
            # and it really is the norm minimizer within the solution family
            a0, b0 = lse_solution(D)
            norms = [
                ((a0 + c) ** 2).sum() + ((b0 + c) ** 2).sum()
                for c in np.linspace(-1, 1, 2001)
            ]
            assert (a**2).sum() + (b**2).sum() <= min(norms) + 1e-9

    def test_separable_metric_residuals_are_zero(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            g_case = rng.normal(3, 1, 4)
            g_ctrl = rng.normal(1, 1, 5)
            D = matrix_from(
                g_case[:, None] - g_ctrl[None, :], metric=DifferenceMetric.MEAN_DIFF
            )
            a, b = lse_solution(D)
            resid = D.values - (a[:, None] - b[None, :])
            assert np.abs(resid).max() < 1e-10


class TestFitLatentModel:
    def test_mle_is_grand_mean(self):
        fit = fit_latent_model(matrix_from([[0.7, 0.5], [0.9, 0.7]]))
        assert fit.mu_hat == pytest.approx(0.7, abs=1e-10)

    def test_mle_equals_grand_mean_on_random_matrices(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            D = random_latent_matrix(rng, m=int(rng.integers(2, 7)), n=int(rng.integers(2, 7)))
            fit = fit_latent_model(D)
            assert fit.mu_hat == pytest.approx(D.values.mean(), abs=1e-8)
            assert fit.converged

    def test_weighted_equal_sizes_reduces_to_unweighted(self):
        rng = np.random.default_rng(16)
        for _ in range(10):
            D = random_latent_matrix(rng)
            fw = fit_latent_model(D, LatentModelConfig(weighted=True))
            fu = fit_latent_model(D)
            assert fw.mu_hat == pytest.approx(fu.mu_hat, abs=1e-8)
            assert wald_test(fw).statistic == pytest.approx(
                wald_test(fu).statistic, abs=1e-8
            )
            # reported case variance rescales by the cluster size
            assert fw.var_case == pytest.approx(100 * fu.var_case, rel=1e-9)

    def test_constant_covariate_rejected(self):
        D = random_latent_matrix(np.random.default_rng(17))
        x = np.full((10, 1), 3.3)
        with pytest.raises(ValueError, match="collinear covariates"):
            fit_latent_model(D, LatentModelConfig(covariates=x))

    def test_covariate_column_shift_leaves_fit_unchanged(self):
        rng = np.random.default_rng(18)
        D = random_latent_matrix(rng)
        x = rng.normal(0, 1, (10, 2))
        f1 = fit_latent_model(D, LatentModelConfig(covariates=x))
        shifted = x.copy()
        shifted[:, 0] += 11.0
        f2 = fit_latent_model(D, LatentModelConfig(covariates=shifted))
        assert f1.mu_hat == pytest.approx(f2.mu_hat, abs=1e-8)
        np.testing.assert_allclose(f1.beta_hat, f2.beta_hat, atol=1e-8)

    def test_optimum_beats_random_restarts(self):
        from ulv.lvm import _Layout, _nelder_mead, _two_group_layout

        rng = np.random.default_rng(19)
        for _ in range(5):
            D = random_latent_matrix(rng, m=4, n=4)
            fit = fit_latent_model(D)
            layout, _ = _two_group_layout(D, LatentModelConfig())

            def neg_ll(theta):
                return -layout.profile(np.asarray(theta))[0]

            best_restart = math.inf
            for _ in range(20):
                x0 = list(rng.uniform(-12, 1, 3))
                best_restart = min(best_restart, _nelder_mead(neg_ll, x0, 500, 1e-10)[1])
            assert -best_restart <= fit.loglik + 1e-6

    def test_weighted_unequal_sizes_runs(self):
        rng = np.random.default_rng(20)
        sizes = (rng.integers(50, 400, 5), rng.integers(50, 400, 5))
        D = random_latent_matrix(rng)
        D = matrix_from(D.values, sizes=sizes)
        fit = fit_latent_model(D, LatentModelConfig(weighted=True))
        assert fit.converged
        assert fit.var_case >= 0 and fit.var_control >= 0 and fit.var_resid >= 0

    def test_degenerate_constant_matrix(self):
        fit = fit_latent_model(matrix_from(np.full((3, 3), 0.5)))
        assert fit.mu_hat == 0.5
        assert fit.mu_se == 0.0
        res = wald_test(fit)
        assert res.p_value == 1.0 and res.degenerate


class TestWaldTest:
    def test_exact_null_gives_unit_p(self):
        fit = fit_latent_model(matrix_from([[0.7, 0.5], [0.9, 0.7]]))
        res = wald_test(fit, null_center=fit.mu_hat)
        assert res.statistic == 0.0
        assert res.p_value == 1.0

    def test_scale_equivariance_of_offset(self):
        rng = np.random.default_rng(21)
        base = rng.normal(0.6, 0.08, (5, 5))
        D1 = matrix_from(base, metric=DifferenceMetric.MEAN_DIFF, null_center=0.5)
        D2 = matrix_from(
            0.5 + 2.0 * (base - 0.5), metric=DifferenceMetric.MEAN_DIFF, null_center=0.5
        )
        f1, f2 = fit_latent_model(D1), fit_latent_model(D2)
        assert (f2.mu_hat - 0.5) == pytest.approx(2 * (f1.mu_hat - 0.5), abs=1e-8)
        t1, t2 = wald_test(f1), wald_test(f2)
        assert np.sign(t1.statistic) == np.sign(t2.statistic)

    def test_agreement_with_closed_form(self, null_pi_matrices):
        # same data, two routes: grand means agree exactly; the statistics
        # differ only through the small residual-variance term and the ML
        # divisor, so the typical gap stays small
        gaps = []
        for D in null_pi_matrices:
            c = closed_form_test(D)
            w = wald_test(fit_latent_model(D))
            assert w.effect == pytest.approx(c.effect, abs=1e-8)
            gaps.append(abs(w.statistic - c.statistic))
        assert float(np.median(gaps)) <= 0.05
        assert float(np.mean(gaps)) <= 0.10


class TestMultiGroup:
    @staticmethod
    def _paired_matrices(rng, nm=8, n0=8, shift=(0.0, 0.0)):
        a = np.concatenate(
            [rng.normal(0.5 + shift[0], 0.1, nm), rng.normal(0.5 + shift[1], 0.1, nm)]
        )
        b = rng.normal(0.0, 0.1, n0)
        d = np.clip(a[:, None] - b[None, :] + rng.normal(0, 0.05, (2 * nm, n0)), 0, 1)
        ids = tuple(f"s{i}" for i in range(2 * nm))
        cids = tuple(f"c{j}" for j in range(n0))
        from ulv.pairwise import DifferenceMatrix

        D1 = DifferenceMatrix(
            d[:nm], ids[:nm], cids, np.full(nm, 50), np.full(n0, 50), DifferenceMetric.PI, 0.5
        )
        D2 = DifferenceMatrix(
            d[nm:], ids[nm:], cids, np.full(nm, 50), np.full(n0, 50), DifferenceMetric.PI, 0.5
        )
        return {"condA": D1, "condB": D2}

    def test_single_condition_matches_wald_decisions(self):
        # LRT and Wald should reject the same way at alpha = 0.05 nearly
        # always on reasonably sized designs
        rng = np.random.default_rng(22)
        agree = 0
        total = 200
        for k in range(total):
            shift = 0.0 if k % 2 == 0 else float(rng.uniform(0.03, 0.2))
            D = random_latent_matrix(rng, m=8, n=8, mu=0.5 + shift)
            lrt = multi_group_test({"only": D})
            wald = wald_test(fit_latent_model(D))
            agree += (lrt.p_value <= 0.05) == (wald.p_value <= 0.05)
        assert agree / total >= 0.95

    def test_null_calibration(self):
        rng = np.random.default_rng(23)
        rejections = 0
        n_sim = 400
        for _ in range(n_sim):
            mats = self._paired_matrices(rng)
            res = multi_group_test(mats)
            assert res.statistic >= 0.0
            rejections += res.p_value <= 0.05
        assert 0.02 <= rejections / n_sim <= 0.09

    def test_detects_one_shifted_condition(self):
        rng = np.random.default_rng(24)
        mats = self._paired_matrices(rng, shift=(0.0, 0.3))
        res = multi_group_test(mats)
        assert res.p_value < 0.01
        assert res.condition_effects is not None
        assert res.condition_effects["condB"] > res.condition_effects["condA"]
        assert res.effect == pytest.approx(res.condition_effects["condB"], abs=1e-12)
        assert res.df == 2

    def test_single_subject_condition_rejected(self):
        rng = np.random.default_rng(25)
        mats = self._paired_matrices(rng, nm=3)
        bad = mats["condA"]
        from ulv.pairwise import DifferenceMatrix

        with pytest.raises(ValueError, match="insufficient subjects"):
            DifferenceMatrix(
                bad.values[:1],
                bad.case_ids[:1],
                bad.control_ids,
                bad.case_sizes[:1],
                bad.control_sizes,
                bad.metric,
                0.5,
            )

    def test_mismatched_controls_rejected(self):
        rng = np.random.default_rng(26)
        mats = self._paired_matrices(rng)
        other = random_latent_matrix(rng, m=8, n=8)
        with pytest.raises(ValueError, match="same reference"):
            multi_group_test({"condA": mats["condA"], "condB": other})
