"""Effect scales, within-cluster weighting, the doubly robust
contribution arithmetic, and the comparator estimators.

Hand targets are worked per-cluster sums; the optimal-weights check
inverts the exchangeable covariance explicitly as the independent route.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crtdr.estimator import (
    DomainError,
    dr_cluster_average,
    dr_percluster,
    effect_scale,
    individual_average_reweight,
    ipw_estimate,
    optimal_exchangeable_weights,
    scaled_weights,
    unadjusted_estimate,
)
from crtdr.nuisance import NuisancePredictions
from conftest import make_dataset


class TestEffectScales:
    def test_values(self):
        f_d, _, _ = effect_scale("difference")
        f_r, _, _ = effect_scale("ratio")
        f_o, _, _ = effect_scale("odds-ratio")
        assert f_d(3.0, 1.0) == 2.0
        assert f_r(3.0, 1.5) == 2.0
        # 0.4/0.6 over 0.2/0.8 = 8/3
        assert f_o(0.4, 0.2) == pytest.approx(8.0 / 3.0, rel=1e-12)

    @pytest.mark.parametrize("name,m1,m0", [
        ("difference", 1.3, -0.4),
        ("ratio", 2.0, 0.7),
        ("odds-ratio", 0.55, 0.3),
    ])
    def test_gradients_match_finite_differences(self, name, m1, m0):
        f, grad, _ = effect_scale(name)
        h = 1e-6
        fd = np.array([
            (f(m1 + h, m0) - f(m1 - h, m0)) / (2 * h),
            (f(m1, m0 + h) - f(m1, m0 - h)) / (2 * h),
        ])
        np.testing.assert_allclose(grad(m1, m0), fd, rtol=1e-6)

    def test_domain_checks(self):
        _, _, check_r = effect_scale("ratio")
        _, _, check_o = effect_scale("odds-ratio")
        with pytest.raises(DomainError, match="positive"):
            check_r(1.0, 0.0)
        with pytest.raises(DomainError, match="positive"):
            check_r(-1.0, 1.0)
        with pytest.raises(DomainError):
            check_o(1.2, 0.5)
        with pytest.raises(DomainError):
            check_o(0.5, 0.0)
        assert check_r(1.0, 2.0) is None

    def test_unknown_scale(self):
        with pytest.raises(ValueError, match="unknown effect scale"):
            effect_scale("hazard")


class TestScaledWeights:
    def _ds(self, sizes=(2, 3)):
        n = sum(sizes)
        return make_dataset(list(sizes), [1, 0], [1.0] * n)

    def test_constant_scheme(self):
        w = scaled_weights(self._ds())
        np.testing.assert_allclose(w, [0.5, 0.5, 1 / 3, 1 / 3, 1 / 3])

    def test_exchangeable_equals_constant_exactly(self):
        ds = self._ds((3, 4))
        base = scaled_weights(ds, "constant")
        assert np.array_equal(scaled_weights(ds, "exchangeable"), base)
        assert np.array_equal(scaled_weights(ds, ("exchangeable", 0.0)), base)
        assert np.array_equal(scaled_weights(ds, ("exchangeable", 0.73)), base)

    def test_exchangeable_correlation_validated(self):
        ds = self._ds()
        with pytest.raises(ValueError, match="exchangeable correlation"):
            scaled_weights(ds, ("exchangeable", 1.0))
        with pytest.raises(ValueError, match="exchangeable correlation"):
            scaled_weights(ds, ("exchangeable", -0.1))

    def test_raw_vector_scaled_within_cluster(self):
        ds = self._ds()
        w = scaled_weights(ds, np.array([1.0, 3.0, 2.0, 2.0, 4.0]))
        np.testing.assert_allclose(w, [0.25, 0.75, 0.25, 0.25, 0.5])

    def test_power_of_two_rescaling_is_bit_exact(self):
        ds = self._ds((4, 3))
        rng = np.random.default_rng(1)
        raw = rng.uniform(0.5, 2.0, ds.n_individuals)
        base = scaled_weights(ds, raw)
        cluster_factor = np.array([0.25, 8.0])[ds.cluster_index]
        assert np.array_equal(scaled_weights(ds, raw * cluster_factor), base)

    def test_general_rescaling_invariance(self):
        ds = self._ds((4, 3))
        rng = np.random.default_rng(2)
        raw = rng.uniform(0.5, 2.0, ds.n_individuals)
        base = scaled_weights(ds, raw)
        cluster_factor = np.array([1.7, 0.3])[ds.cluster_index]
        np.testing.assert_allclose(scaled_weights(ds, raw * cluster_factor),
                                   base, rtol=1e-12)

    @given(st.lists(st.floats(0.1, 10.0), min_size=5, max_size=5))
    def test_weights_sum_to_one_per_cluster(self, raw):
        ds = self._ds()
        w = scaled_weights(ds, np.array(raw))
        sums = np.bincount(ds.cluster_index, weights=w)
        np.testing.assert_allclose(sums, 1.0, rtol=1e-12)

    def test_validation(self):
        ds = self._ds()
        with pytest.raises(ValueError, match="length"):
            scaled_weights(ds, np.ones(3))
        with pytest.raises(ValueError, match="positive"):
            scaled_weights(ds, np.array([1.0, -1.0, 1.0, 1.0, 1.0]))
        with pytest.raises(ValueError, match="unknown weight scheme"):
            scaled_weights(ds, "kernel")


class TestOptimalWeights:
    def test_uniform_for_any_correlation(self):
        w = optimal_exchangeable_weights(5, rho=0.4, sigma2=2.0)
        np.testing.assert_allclose(w, 0.2, rtol=1e-15)

    def test_matches_explicit_covariance_inverse(self):
        n, rho, s2 = 5, 0.4, 2.0
        cov = s2 * ((1 - rho) * np.eye(n) + rho * np.ones((n, n)))
        raw = np.linalg.solve(cov, np.ones(n))
        np.testing.assert_allclose(optimal_exchangeable_weights(n, rho, s2),
                                   raw / raw.sum(), rtol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            optimal_exchangeable_weights(0, 0.1)
        with pytest.raises(ValueError):
            optimal_exchangeable_weights(4, 1.0)
        with pytest.raises(ValueError):
            optimal_exchangeable_weights(4, -0.5)
        with pytest.raises(ValueError):
            optimal_exchangeable_weights(4, 0.1, sigma2=0.0)


def _preds(n, m, kappa=1.0, eta1=0.0, eta0=0.0, pi=0.5):
    return NuisancePredictions(
        kappa=np.full(n, kappa),
        eta1=np.full(n, eta1),
        eta0=np.full(n, eta0),
        pi_cluster=np.full(m, pi),
    )


class TestDrEstimator:
    def test_zero_residual_case(self):
        # outcomes equal the regression: only the regression term remains
        ds = make_dataset([1, 1], [1, 0], [2.0, 2.0])
        res = dr_cluster_average(ds, _preds(2, 2, eta1=2.0, eta0=2.0))
        assert res.mu1 == 2.0
        assert res.mu0 == 2.0
        assert res.effect == 0.0

    def test_hand_worked_contributions(self):
        # treated cluster: y=3, eta1=2, kappa=1, pi=0.5
        #   arm-1 cell: (3-2)/1/0.5 + 2 = 4 ; arm-0 cell: eta0 = 2
        # control cluster: y=2=eta0 -> both cells 2
        ds = make_dataset([1, 1], [1, 0], [3.0, 2.0])
        res = dr_cluster_average(ds, _preds(2, 2, eta1=2.0, eta0=2.0))
        np.testing.assert_allclose(res.percluster, [[4.0, 2.0], [2.0, 2.0]])
        assert res.mu1 == 3.0
        assert res.mu0 == 2.0
        assert res.effect == 1.0

    def test_inverse_weighting_arithmetic(self):
        # single treated individual, kappa=0.5 doubles the residual
        ds = make_dataset([1, 1], [1, 0], [3.0, 0.0])
        res = dr_cluster_average(ds, _preds(2, 2, kappa=0.5, eta1=1.0))
        # (3-1)/0.5/0.5 + 1 = 9
        assert res.percluster[0, 0] == pytest.approx(9.0)

    def test_missing_outcome_contributes_regression_only(self):
        ds = make_dataset([2, 1], [1, 0], [3.0, np.nan, 0.0])
        res = dr_cluster_average(ds, _preds(3, 2, eta1=2.0, eta0=1.0))
        # cluster 0, arm 1: 0.5*[(3-2)/0.5 + 2] + 0.5*[2] = 0.5*4 + 1 = 3
        assert res.percluster[0, 0] == pytest.approx(3.0)
        # arm 0 cell of the treated cluster is pure regression: eta0 = 1
        assert res.percluster[0, 1] == pytest.approx(1.0)

    def test_row_order_invariance(self):
        rng = np.random.default_rng(3)
        sizes = [3, 2, 4]
        n = 9
        y = rng.normal(size=n)
        y[2] = np.nan
        ds = make_dataset(sizes, [1, 0, 1], y)
        kappa = rng.uniform(0.5, 1.0, n)
        eta1 = rng.normal(size=n)
        eta0 = rng.normal(size=n)
        preds = NuisancePredictions(kappa=kappa, eta1=eta1, eta0=eta0,
                                    pi_cluster=np.full(3, 0.5))
        base = dr_cluster_average(ds, preds)
        perm = rng.permutation(n)
        ds_p = make_dataset(sizes, [1, 0, 1], y[perm])
        ds_p = ds_p.__class__(**{**ds_p.__dict__,
                                 "cluster_index": ds.cluster_index[perm]})
        preds_p = NuisancePredictions(kappa=kappa[perm], eta1=eta1[perm],
                                      eta0=eta0[perm],
                                      pi_cluster=np.full(3, 0.5))
        res_p = dr_cluster_average(ds_p, preds_p)
        np.testing.assert_allclose(res_p.percluster, base.percluster,
                                   rtol=1e-12)
        assert res_p.effect == pytest.approx(base.effect, rel=1e-12)

    def test_oracle_nuisances_recover_truth_in_expectation(self):
        # eta set to the true arm means per individual: the estimator
        # averages the truth exactly when every outcome is observed and
        # kappa is correct, because residuals cancel within arms
        rng = np.random.default_rng(8)
        m = 60
        sizes = rng.integers(2, 6, size=m)
        n = int(sizes.sum())
        trt = (np.arange(m) % 2).astype(int)
        idx = np.repeat(np.arange(m), sizes)
        mu1_i = rng.normal(size=n) + 3.0
        mu0_i = mu1_i - 2.0
        a_i = trt[idx]
        y = np.where(a_i == 1, mu1_i, mu0_i)
        ds = make_dataset(sizes, trt, y)
        preds = NuisancePredictions(kappa=np.ones(n), eta1=mu1_i, eta0=mu0_i,
                                    pi_cluster=np.full(m, 0.5))
        res = dr_cluster_average(ds, preds)
        w = scaled_weights(ds)
        exp_mu1 = float(np.mean(np.bincount(idx, weights=w * mu1_i, minlength=m)))
        exp_mu0 = float(np.mean(np.bincount(idx, weights=w * mu0_i, minlength=m)))
        assert res.mu1 == pytest.approx(exp_mu1, rel=1e-12)
        assert res.mu0 == pytest.approx(exp_mu0, rel=1e-12)
        assert res.effect == pytest.approx(2.0, rel=1e-12)

    def test_percluster_mean_equals_arm_means(self):
        rng = np.random.default_rng(5)
        sizes = [2, 3, 1, 4]
        n = 10
        y = rng.normal(size=n)
        ds = make_dataset(sizes, [1, 0, 0, 1], y)
        preds = NuisancePredictions(kappa=rng.uniform(0.5, 1, n),
                                    eta1=rng.normal(size=n),
                                    eta0=rng.normal(size=n),
                                    pi_cluster=np.full(4, 0.5))
        res = dr_cluster_average(ds, preds)
        np.testing.assert_allclose(res.percluster.mean(axis=0),
                                   [res.mu1, res.mu0], rtol=1e-12)

    def test_scale_passthrough(self):
        ds = make_dataset([1, 1], [1, 0], [4.0, 2.0])
        res = dr_cluster_average(ds, _preds(2, 2, eta1=4.0, eta0=2.0),
                                 scale="ratio")
        assert res.effect == pytest.approx(2.0)
        ds_neg = make_dataset([1, 1], [1, 0], [4.0, -2.0])
        with pytest.raises(DomainError):
            dr_cluster_average(ds_neg, _preds(2, 2, eta1=4.0, eta0=-2.0),
                               scale="ratio")


class TestIndividualReweight:
    def test_population_size_factors(self):
        ds = make_dataset([1, 1], [1, 0], [2.0, 4.0],
                          n_population=[1.0, 3.0], full_enrollment=False)
        base = dr_cluster_average(ds, _preds(2, 2, eta1=2.0, eta0=4.0))
        np.testing.assert_allclose(base.percluster, [[2.0, 4.0], [2.0, 4.0]])
        shifted = individual_average_reweight(ds, base)
        # factors: N / mean(N) = (0.5, 1.5)
        np.testing.assert_allclose(shifted.percluster,
                                   [[1.0, 2.0], [3.0, 6.0]])
        assert shifted.mu1 == pytest.approx(2.0)
        assert shifted.mu0 == pytest.approx(4.0)
        assert shifted.estimator == "dr-individual"

    def test_equal_sizes_change_nothing(self):
        ds = make_dataset([2, 2], [1, 0], [1.0, 2.0, 3.0, 4.0])
        base = dr_cluster_average(ds, _preds(4, 2))
        shifted = individual_average_reweight(ds, base)
        np.testing.assert_allclose(shifted.percluster, base.percluster)

    def test_requires_population_sizes(self):
        ds = make_dataset([1, 1], [1, 0], [1.0, 2.0],
                          n_population=[np.nan, 3.0], full_enrollment=False)
        base = dr_cluster_average(ds, _preds(2, 2))
        with pytest.raises(ValueError, match="population sizes"):
            individual_average_reweight(ds, base)


class TestIpw:
    def test_individual_pooling_targets_individual_average(self):
        # unequal cluster sizes separate the two estimands
        ds = make_dataset([1, 3, 1, 3], [1, 1, 0, 0],
                          [10.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
        res = ipw_estimate(ds, kappa=np.ones(8))
        assert res.mu1 == pytest.approx((10.0 + 3.0) / 4.0)
        assert res.mu0 == 0.0
        cluster_route = unadjusted_estimate(ds)
        assert cluster_route.mu1 == pytest.approx(5.5)

    def test_inverse_propensity_reweights_observed(self):
        # kappa=0.5 rows count double among observed
        ds = make_dataset([2, 1], [1, 0], [3.0, 1.0, 0.0])
        kappa = np.array([0.5, 1.0, 1.0])
        res = ipw_estimate(ds, kappa)
        assert res.mu1 == pytest.approx((3.0 / 0.5 + 1.0) / (1 / 0.5 + 1))

    def test_missing_rows_drop_from_pool(self):
        ds = make_dataset([2, 1], [1, 0], [3.0, np.nan, 2.0])
        res = ipw_estimate(ds, kappa=np.ones(3))
        assert res.mu1 == 3.0
        assert res.mu0 == 2.0

    def test_cluster_pooling_is_dr_with_zero_regression(self):
        rng = np.random.default_rng(4)
        sizes = [2, 3, 2, 3]
        n = 10
        y = rng.normal(size=n)
        y[3] = np.nan
        ds = make_dataset(sizes, [1, 0, 0, 1], y)
        kappa = rng.uniform(0.4, 1.0, n)
        res = ipw_estimate(ds, kappa, pooling="cluster")
        z = np.zeros(n)
        preds = NuisancePredictions(kappa=kappa, eta1=z, eta0=z,
                                    pi_cluster=np.full(4, 0.5))
        direct = dr_cluster_average(ds, preds)
        np.testing.assert_allclose(res.percluster, direct.percluster)
        assert res.effect == direct.effect
        assert res.estimator == "ipw-cluster"

    def test_percluster_mean_recovers_arm_means(self):
        rng = np.random.default_rng(6)
        ds = make_dataset([3, 2, 4, 1], [1, 0, 1, 0], rng.normal(size=10))
        kappa = rng.uniform(0.5, 1.0, 10)
        res = ipw_estimate(ds, kappa)
        np.testing.assert_allclose(res.percluster.mean(axis=0),
                                   [res.mu1, res.mu0], rtol=1e-12)

    def test_empty_arm_rejected(self):
        ds = make_dataset([1, 1], [1, 0], [1.0, np.nan])
        with pytest.raises(ValueError, match="no observed outcomes"):
            ipw_estimate(ds, kappa=np.ones(2))

    def test_unknown_pooling(self):
        ds = make_dataset([1, 1], [1, 0], [1.0, 2.0])
        with pytest.raises(ValueError, match="unknown pooling"):
            ipw_estimate(ds, np.ones(2), pooling="stratified")


class TestUnadjusted:
    def test_arm_means_of_cluster_averages(self):
        ds = make_dataset([2, 2], [1, 0], [1.0, 3.0, 0.0, 2.0])
        res = unadjusted_estimate(ds)
        assert res.mu1 == 2.0
        assert res.mu0 == 1.0
        assert res.effect == 1.0

    def test_missing_outcomes_reduce_cluster_mean_basis(self):
        ds = make_dataset([2, 1], [1, 0], [1.0, np.nan, 5.0])
        res = unadjusted_estimate(ds)
        assert res.mu1 == 1.0
        assert res.mu0 == 5.0

    def test_empty_cluster_excluded_with_warning(self):
        ds = make_dataset([2, 1, 1], [1, 1, 0], [1.0, np.nan, np.nan, 5.0],
                          cluster_ids=["a", "b", "c"])
        with pytest.warns(UserWarning, match="b"):
            res = unadjusted_estimate(ds)
        assert res.mu1 == 1.0

    def test_arm_without_observed_clusters_rejected(self):
        ds = make_dataset([1, 1], [1, 0], [np.nan, 5.0])
        with pytest.warns(UserWarning):
            with pytest.raises(ValueError, match="no clusters"):
                unadjusted_estimate(ds)

    def test_percluster_mean_recovers_arm_means(self):
        rng = np.random.default_rng(7)
        ds = make_dataset([2, 3, 1, 2], [1, 0, 1, 0], rng.normal(size=8))
        res = unadjusted_estimate(ds)
        np.testing.assert_allclose(res.percluster.mean(axis=0),
                                   [res.mu1, res.mu0], rtol=1e-12)
