"""Sandwich variance machinery: t quantiles, numeric Jacobians, stacked
estimating systems, the small-sample correction, and the cross-fit
covariance.

Frozen quantile targets were generated with an independent statistics
library and pinned here; structural identities (bread blocks, zero score
means at the fit) are asserted directly.
"""

import math

import numpy as np
import pytest
from scipy import stats

from crtdr.data import expand_missing_indicators
from crtdr.estimator import dr_cluster_average, ipw_estimate
from crtdr.nuisance import NuisancePredictions, fit_parametric_nuisances
from crtdr.variance import (
    EstimatingSystem,
    NumericalError,
    assemble_dr_system,
    build_dr_system,
    build_ipw_system,
    build_mean_system,
    ci_tdist,
    crossfit_variance,
    delta_method_variance,
    effect_variance_sandwich,
    numeric_jacobian,
    regularized_incomplete_beta,
    sandwich_covariance,
    small_sample_factor,
    t_cdf,
    t_quantile,
)
from conftest import make_dataset


class TestTQuantile:
    @pytest.mark.parametrize("df,expected", [
        (1, 12.706204736432095),
        (10, 2.2281388519649385),
        (23, 2.0686576104190406),
        (93, 1.9858018143458234),
    ])
    def test_frozen_values(self, df, expected):
        assert t_quantile(0.975, df) == pytest.approx(expected, abs=1e-8)

    def test_infinite_df_gives_normal(self):
        assert t_quantile(0.975, None) == pytest.approx(1.959963984540054,
                                                        abs=1e-12)
        assert t_quantile(0.975, math.inf) == pytest.approx(1.959963984540054,
                                                            abs=1e-12)

    def test_symmetry_and_median(self):
        assert t_quantile(0.5, 7) == 0.0
        assert t_quantile(0.025, 7) == pytest.approx(-t_quantile(0.975, 7),
                                                     abs=1e-12)

    def test_matches_reference_library_on_grid(self):
        for df in (2, 5, 29, 120):
            for p in (0.6, 0.9, 0.975, 0.995):
                assert t_quantile(p, df) == pytest.approx(
                    float(stats.t.ppf(p, df)), abs=1e-8)

    def test_validation(self):
        with pytest.raises(ValueError, match="quantile level"):
            t_quantile(0.0, 5)
        with pytest.raises(ValueError, match="quantile level"):
            t_quantile(1.0, 5)
        with pytest.raises(ValueError, match="degrees of freedom"):
            t_quantile(0.975, 0)

    def test_cdf_values(self):
        assert t_cdf(0.0, 9) == pytest.approx(0.5, abs=1e-14)
        assert t_cdf(1.5, 7) == pytest.approx(0.911350756505015, abs=1e-12)
        assert t_cdf(-1.5, 7) == pytest.approx(1.0 - 0.911350756505015,
                                               abs=1e-12)

    def test_incomplete_beta(self):
        assert regularized_incomplete_beta(0.5, 0.5, 0.5) == pytest.approx(
            0.5, abs=1e-12)
        assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
        assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0
        # I_x(1, b) = 1 - (1-x)^b
        assert regularized_incomplete_beta(1.0, 4.0, 0.3) == pytest.approx(
            1.0 - 0.7**4, abs=1e-12)


class TestNumericJacobian:
    def test_linear_map_recovered(self):
        A = np.array([[2.0, -1.0], [0.5, 3.0]])
        b = np.array([1.0, -2.0])
        jac = numeric_jacobian(lambda th: A @ th + b, np.array([0.3, -0.7]))
        np.testing.assert_allclose(jac, A, atol=1e-9)

    def test_logistic_derivative(self):
        theta = np.array([0.4])
        jac = numeric_jacobian(lambda th: 1.0 / (1.0 + np.exp(-th)), theta)
        p = 1.0 / (1.0 + math.exp(-0.4))
        assert jac[0, 0] == pytest.approx(p * (1.0 - p), rel=1e-8)

    def test_step_scales_with_magnitude(self):
        # quadratic with a huge coordinate still differentiates cleanly
        theta = np.array([1e6])
        jac = numeric_jacobian(lambda th: th**2 / 1e6, theta)
        assert jac[0, 0] == pytest.approx(2.0, rel=1e-6)


def _mean_system(y):
    y = np.asarray(y, dtype=float)
    return EstimatingSystem(
        theta=np.array([y.mean()]), blocks=(("mu", 1),),
        psi=lambda th: (y - th[0])[:, None])


class TestSandwich:
    def test_scalar_mean_equals_population_variance_over_m(self):
        y = np.array([1.0, 4.0, 2.0, 7.0, 1.5])
        sand = sandwich_covariance(_mean_system(y))
        # the numeric bread sits ~1e-10 relative away from the exact -1
        assert sand.covariance[0, 0] == pytest.approx(np.var(y) / 5, rel=1e-9)
        assert sand.bread[0, 0] == pytest.approx(-1.0, abs=1e-9)

    def test_orthogonal_blocks_have_zero_cross_term(self):
        y = np.array([0.0, 2.0, 0.0, 2.0])
        z = np.array([0.0, 0.0, 2.0, 2.0])

        def psi(th):
            return np.column_stack([y - th[0], z - th[1]])

        system = EstimatingSystem(theta=np.array([1.0, 1.0]),
                                  blocks=(("a", 1), ("b", 1)), psi=psi)
        sand = sandwich_covariance(system)
        assert abs(sand.covariance[0, 1]) < 1e-10
        assert sand.covariance[0, 0] == pytest.approx(0.25, abs=1e-9)

    def test_two_arm_mean_system_closed_form(self):
        rng = np.random.default_rng(0)
        percluster = rng.normal(size=(12, 2))
        mu1, mu0 = percluster.mean(axis=0)
        system = build_mean_system(percluster, mu1, mu0)
        sand = sandwich_covariance(system)
        centered = percluster - percluster.mean(axis=0)
        expected = centered.T @ centered / 12 / 12
        np.testing.assert_allclose(sand.covariance, expected, atol=1e-8)

    def test_singular_bread_rejected(self):
        system = EstimatingSystem(
            theta=np.array([1.0]), blocks=(("a", 1),),
            psi=lambda th: np.ones((4, 1)))
        with pytest.raises(NumericalError, match="bread"):
            sandwich_covariance(system)

    def test_block_slice(self):
        system = EstimatingSystem(
            theta=np.zeros(5), blocks=(("mu", 2), ("missingness", 3)),
            psi=lambda th: np.zeros((3, 5)))
        assert system.block_slice("mu") == slice(0, 2)
        assert system.block_slice("missingness") == slice(2, 5)
        with pytest.raises(KeyError):
            system.block_slice("treatment")


class TestSmallSampleCorrection:
    def test_factors(self):
        assert small_sample_factor(30, 7) == pytest.approx(30 / 23)
        assert small_sample_factor(100, 7) == pytest.approx(100 / 93)
        assert small_sample_factor(50, 0) == 1.0

    def test_undefined_when_saturated(self):
        with pytest.raises(NumericalError, match="small-sample"):
            small_sample_factor(7, 7)

    def test_ci_arithmetic(self):
        res = ci_tdist(2.0, variance=0.04, m=30, n_covariate_columns=7)
        assert res.df == 23
        assert res.correction == pytest.approx(30 / 23)
        se = math.sqrt(0.04 * 30 / 23)
        assert res.se == pytest.approx(se, rel=1e-12)
        tcrit = 2.0686576104190406
        assert res.lower == pytest.approx(2.0 - tcrit * se, rel=1e-10)
        assert res.upper == pytest.approx(2.0 + tcrit * se, rel=1e-10)

    def test_ci_level_passthrough(self):
        res = ci_tdist(0.0, variance=1.0, m=40, n_covariate_columns=0,
                       level=0.9)
        tcrit = float(stats.t.ppf(0.95, 40))
        assert res.upper == pytest.approx(tcrit, rel=1e-8)

    def test_ci_validation(self):
        with pytest.raises(NumericalError, match="finite"):
            ci_tdist(0.0, variance=-1.0, m=30, n_covariate_columns=0)
        with pytest.raises(NumericalError, match="finite"):
            ci_tdist(0.0, variance=float("nan"), m=30, n_covariate_columns=0)
        with pytest.raises(NumericalError, match="zero"):
            ci_tdist(0.0, variance=0.0, m=30, n_covariate_columns=0)


def _simulated_dataset(seed=0, m=40):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(2, 7, size=m)
    n = int(sizes.sum())
    idx = np.repeat(np.arange(m), sizes)
    trt = (np.arange(m) % 2).astype(int)
    x = rng.normal(size=n)
    y = 1.0 + 2.0 * trt[idx] + x + rng.normal(size=m)[idx] + rng.normal(size=n)
    y[rng.random(n) < 0.2] = np.nan
    return make_dataset(sizes, trt, y, x={"x_1": x})


class TestAssembledSystems:
    def test_fixed_nuisance_system_matches_mean_system(self):
        ds = _simulated_dataset(1)
        n = ds.n_individuals
        preds = NuisancePredictions(
            kappa=np.full(n, 0.8), eta1=np.zeros(n), eta0=np.zeros(n),
            pi_cluster=np.full(ds.m, ds.pi))
        res = dr_cluster_average(ds, preds)
        fixed = assemble_dr_system(ds, (res.mu1, res.mu0),
                                   kappa_fixed=preds.kappa,
                                   eta_fixed=(preds.eta1, preds.eta0))
        mean_sys = build_mean_system(res.percluster, res.mu1, res.mu0)
        cov_a = sandwich_covariance(fixed).covariance
        cov_b = sandwich_covariance(mean_sys).covariance
        np.testing.assert_allclose(cov_a, cov_b, atol=1e-9)

    def test_stacked_system_solves_to_zero_at_fit(self):
        ds = _simulated_dataset(2)
        exp = expand_missing_indicators(ds)
        fit = fit_parametric_nuisances(exp, ds.outcome_observed,
                                       model_treatment=True,
                                       treatment_columns=())
        res = dr_cluster_average(ds, fit.predictions)
        system = build_dr_system(ds, fit, res)
        mean_psi = np.asarray(system.psi(system.theta)).mean(axis=0)
        np.testing.assert_allclose(mean_psi, 0.0, atol=1e-6)
        names = [b[0] for b in system.blocks]
        assert names == ["mu", "outcome", "missingness", "treatment"]

    def test_bread_mu_block_is_minus_identity(self):
        ds = _simulated_dataset(3)
        exp = expand_missing_indicators(ds)
        fit = fit_parametric_nuisances(exp, ds.outcome_observed)
        res = dr_cluster_average(ds, fit.predictions)
        system = build_dr_system(ds, fit, res)
        sand = sandwich_covariance(system)
        np.testing.assert_allclose(sand.bread[:2, :2], -np.eye(2), atol=1e-9)
        # nuisance scores do not involve the arm means
        np.testing.assert_allclose(sand.bread[2:, :2], 0.0, atol=1e-9)

    def test_estimation_effect_changes_variance(self):
        # stacking the fitted missingness block must move the variance
        # relative to treating kappa as known
        ds = _simulated_dataset(4, m=60)
        exp = expand_missing_indicators(ds)
        fit = fit_parametric_nuisances(exp, ds.outcome_observed)
        res = dr_cluster_average(ds, fit.predictions)
        stacked = build_dr_system(ds, fit, res)
        fixed = assemble_dr_system(
            ds, (res.mu1, res.mu0), kappa_fixed=fit.predictions.kappa,
            eta_fixed=(fit.predictions.eta1, fit.predictions.eta0))
        grad = np.array([1.0, -1.0])
        v_stacked, _ = effect_variance_sandwich(stacked, grad)
        v_fixed, _ = effect_variance_sandwich(fixed, grad)
        assert v_stacked > 0 and v_fixed > 0
        assert v_stacked != pytest.approx(v_fixed, rel=1e-3)

    def test_ipw_system_zero_at_fit(self):
        ds = _simulated_dataset(5)
        exp = expand_missing_indicators(ds)
        fit = fit_parametric_nuisances(exp, ds.outcome_observed)
        kappa = fit.predictions.kappa
        res = ipw_estimate(ds, kappa)
        system = build_ipw_system(ds, fit.kappa_fit, fit.kappa_design, res,
                                  fit.propensity_floor)
        mean_psi = np.asarray(system.psi(system.theta)).mean(axis=0)
        np.testing.assert_allclose(mean_psi, 0.0, atol=1e-6)
        grad = np.array([1.0, -1.0])
        v, sand = effect_variance_sandwich(system, grad)
        assert v > 0
        assert np.isfinite(sand.covariance).all()

    def test_delta_method(self):
        cov = np.array([[0.04, 0.01], [0.01, 0.09]])
        grad = np.array([1.0, -1.0])
        assert delta_method_variance(cov, grad) == pytest.approx(
            0.04 - 2 * 0.01 + 0.09)


class TestCrossfitVariance:
    def test_hand_case_two_folds(self):
        percluster = np.array([[1.0, 0.0], [3.0, 0.0], [2.0, 0.0], [4.0, 0.0]])
        fold_ids = np.array([0, 0, 1, 1])
        var, cov_mu = crossfit_variance(percluster, fold_ids,
                                        np.array([1.0, -1.0]))
        # each fold has population variance 1 in arm 1, 0 in arm 0
        assert cov_mu[0, 0] == pytest.approx(1.0 / 4.0)
        assert var == pytest.approx(0.25)

    def test_single_fold_reduces_to_plain_covariance(self):
        rng = np.random.default_rng(1)
        percluster = rng.normal(size=(20, 2))
        grad = np.array([1.0, -1.0])
        var, cov_mu = crossfit_variance(percluster, np.zeros(20, dtype=int),
                                        grad)
        centered = percluster - percluster.mean(axis=0)
        expected = centered.T @ centered / 20 / 20
        np.testing.assert_allclose(cov_mu, expected, rtol=1e-12)
        assert var == pytest.approx(grad @ expected @ grad, rel=1e-12)

    def test_identical_contributions_warn(self):
        percluster = np.ones((6, 2))
        with pytest.warns(UserWarning, match="identical"):
            var, _ = crossfit_variance(percluster, np.zeros(6, dtype=int),
                                       np.array([1.0, -1.0]))
        assert var == 0.0

    def test_fold_means_absorbed(self):
        # shifting one fold's contributions by a constant must not
        # change the within-fold covariance estimate
        rng = np.random.default_rng(2)
        percluster = rng.normal(size=(12, 2))
        fold_ids = np.repeat([0, 1, 2], 4)
        grad = np.array([1.0, -1.0])
        base, _ = crossfit_variance(percluster, fold_ids, grad)
        shifted = percluster.copy()
        shifted[fold_ids == 1] += np.array([5.0, -3.0])
        after, _ = crossfit_variance(shifted, fold_ids, grad)
        assert after == pytest.approx(base, rel=1e-12)
