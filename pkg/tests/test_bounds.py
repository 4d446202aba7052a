import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaloc.adaptation import param_distance
from adaloc.bounds import (
    BoundConstants,
    VarianceProfile,
    activation_ordering,
    distance_threshold,
    estimate_constants,
    gradient_ordering_check,
    mc_output_variance,
    ordering_statistics,
    slack_ratio,
    slack_report,
    spectral_norm,
    subgaussian_proxy,
    variance_bound,
    variance_recursion,
)
from adaloc.data import Dataset, gen_blobs
from adaloc.errors import ContractError, DimensionError
from adaloc.network import NetworkSpec, ParameterStore, init_network, loss_and_gradient

from oracles import jacobi_singular_values, linear_output_variance


class TestVarianceBound:
    def test_single_unit(self):
        profile = VarianceProfile.uniform(1, 1, 0.25, 0.01)
        assert variance_bound(profile, 2.0) == pytest.approx(1.01, abs=1e-15)

    def test_zero_variances(self):
        assert variance_bound(VarianceProfile.uniform(3, 8, 0.0, 0.0), 5.0) == 0.0

    def test_two_layers_width_four(self):
        assert variance_bound(VarianceProfile.uniform(2, 4, 0.1, 0.0), 1.0) == pytest.approx(0.16, abs=1e-15)

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.integers(1, 20), st.floats(0, 2), st.floats(0, 2)), min_size=1, max_size=5),
           st.floats(0, 10), st.floats(0.1, 2))
    def test_closed_form_equals_recursion(self, layers, x_norm, lip):
        widths, var_w, var_b = zip(*layers)
        profile = VarianceProfile(var_w, var_b, widths, lip)
        assert variance_bound(profile, x_norm) == pytest.approx(variance_recursion(profile, x_norm), rel=1e-12)

    def test_invalid_profiles(self):
        with pytest.raises(DimensionError):
            VarianceProfile((0.1,), (0.1, 0.1), (2,))
        with pytest.raises(ContractError):
            VarianceProfile((-0.1,), (0.1,), (2,))

    def test_profile_from_params(self):
        spec = NetworkSpec.mlp(3, [4], 2)
        params = ParameterStore.from_layers(spec, [np.full((4, 3), 2.0), np.ones((2, 4))], [np.zeros(4), np.ones(2)])
        profile = VarianceProfile.from_params(params)
        assert profile.var_w == (4.0, 1.0)
        assert profile.var_b == (0.0, 1.0)
        assert profile.widths == (4, 2)


class TestMonteCarlo:
    def test_zero_profile(self):
        assert mc_output_variance(VarianceProfile.uniform(2, 4, 0.0, 0.0), np.ones(3), trials=200) == 0.0

    @pytest.mark.parametrize("law", ["gaussian", "uniform"])
    def test_linear_layer_matches_analytic(self, law):
        x = np.array([0.3, -1.2, 0.8, 2.0])
        profile = VarianceProfile.uniform(1, 6, 0.2, 0.05)
        est, se = mc_output_variance(profile, x, trials=10_000, seed=3, activation="identity", law=law,
                                     return_stderr=True)
        expected = linear_output_variance(float(np.linalg.norm(x)), 0.2, 0.05, 6)
        assert abs(est - expected) <= 3 * se

    def test_too_few_trials(self):
        with pytest.raises(ContractError):
            mc_output_variance(VarianceProfile.uniform(1, 2, 0.1, 0.1), np.ones(2), trials=99)

    def test_unknown_law(self):
        with pytest.raises(ContractError):
            mc_output_variance(VarianceProfile.uniform(1, 2, 0.1, 0.1), np.ones(2), trials=100, law="cauchy")

    def test_seeded(self):
        profile = VarianceProfile.uniform(2, 5, 0.3, 0.1)
        a = mc_output_variance(profile, np.ones(3), trials=500, seed=8)
        assert a == mc_output_variance(profile, np.ones(3), trials=500, seed=8)

    @pytest.mark.parametrize("seed", range(10))
    def test_relu_below_ceiling(self, seed):
        rng = np.random.default_rng(seed)
        depth, width = int(rng.integers(1, 4)), int(rng.integers(1, 17))
        profile = VarianceProfile(rng.uniform(0, 0.5, depth), rng.uniform(0, 0.2, depth), (width,) * depth)
        x = rng.normal(size=int(rng.integers(1, 9)))
        est, se = mc_output_variance(profile, x, trials=10_000, seed=seed, return_stderr=True)
        assert est <= variance_bound(profile, float(np.linalg.norm(x))) + 3 * se


class TestDistanceThreshold:
    def test_worked_threshold(self):
        th = distance_threshold(BoundConstants(L=3, B_sigma=1.0, B_theta=0.9, B_x=1.0, epsilon=1.0))
        assert th.threshold == pytest.approx(1 / 0.729 - 0.9, rel=1e-14)
        assert abs(th.threshold - 0.4717) <= 1e-4
        assert not th.vacuous

    def test_worked_probability(self):
        th = distance_threshold(BoundConstants(L=3, B_sigma=1.0, B_theta=0.9, B_x=1.0, t=2.0))
        assert abs(th.success_probability - 0.894) <= 1e-3
        assert th.std_success_probability == pytest.approx((1 - 2 * math.exp(-4)) ** 4)

    def test_vacuous(self):
        th = distance_threshold(BoundConstants(L=3, B_sigma=1.0, B_theta=3.0, B_x=1.0))
        assert th.threshold < 0 and th.vacuous
        assert slack_ratio(1.0, th.threshold) is None

    def test_std_threshold(self):
        th = distance_threshold(BoundConstants(L=1, B_sigma=1.0, B_theta=0.5, B_x=1.0, C=2.0, t=1.0, d=16))
        assert th.std_threshold == pytest.approx((1 / 0.5 - 0.5) / (2.0 * (4 + 1)))

    @settings(max_examples=100)
    @given(st.integers(1, 6), st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0.01, 10), st.floats(1.01, 2))
    def test_monotone(self, L, b_theta, b_x, eps, factor):
        base = distance_threshold(BoundConstants(L, 1.0, b_theta, b_x, epsilon=eps)).threshold
        assert distance_threshold(BoundConstants(L, 1.0, b_theta, b_x, epsilon=eps * factor)).threshold > base
        assert distance_threshold(BoundConstants(L, 1.0, b_theta * factor, b_x, epsilon=eps)).threshold < base
        if b_theta >= 1:
            assert distance_threshold(BoundConstants(L + 1, 1.0, b_theta, b_x, epsilon=eps)).threshold < base

    @settings(max_examples=100)
    @given(st.integers(1, 10), st.floats(math.sqrt(math.log(2)) + 1e-3, 6))
    def test_probabilities(self, L, t):
        th = distance_threshold(BoundConstants(L, 1.0, 1.0, 1.0, t=t))
        assert 0 < th.success_probability < 1 or th.success_probability == 1.0
        assert th.std_success_probability <= th.success_probability

    def test_positive_constants(self):
        with pytest.raises(ContractError):
            BoundConstants(0, 1.0, 1.0, 1.0)
        with pytest.raises(ContractError):
            BoundConstants(2, 1.0, 0.0, 1.0)


class TestSlackRatio:
    def test_worked_ratio(self):
        assert abs(slack_ratio(0.51, 0.96) - 0.53) <= 1e-2

    def test_identical_models(self):
        params = init_network(NetworkSpec.mlp(4, [5], 3), 0)
        report = slack_report(params, params, BoundConstants(2, 1.0, 0.5, 1.0))
        assert report.empirical_distance == 0.0 and report.slack_ratio == 0.0

    def test_ratio_recomputes_bitwise(self, rng):
        spec = NetworkSpec.mlp(4, [5], 3)
        a = init_network(spec, 0)
        b = a.with_flat(a.flat + rng.normal(0, 0.01, a.d))
        report = slack_report(b, a, BoundConstants(2, 1.0, 0.5, 1.0))
        assert report.slack_ratio == param_distance(b, a) / report.threshold
        assert report.layer_distance_sum >= report.empirical_distance
        d = report.to_dict()
        assert d["slack_ratio"] == d["empirical_distance"] / d["threshold"]

    def test_unit_slack_epsilon(self, rng):
        spec = NetworkSpec.mlp(4, [5], 3)
        a = init_network(spec, 0)
        b = a.with_flat(a.flat + rng.normal(0, 0.5, a.d))
        c = BoundConstants(2, 1.0, 1.5, 2.0)
        report = slack_report(b, a, c)
        scaled = BoundConstants(2, 1.0, 1.5, 2.0, epsilon=report.epsilon_for_unit_slack)
        assert slack_report(b, a, scaled).slack_ratio == pytest.approx(1.0, rel=1e-12)

    def test_spec_mismatch(self):
        with pytest.raises(DimensionError):
            slack_report(init_network(NetworkSpec.mlp(4, [5], 3), 0), init_network(NetworkSpec.mlp(4, [6], 3), 0),
                         BoundConstants(2, 1.0, 1.0, 1.0))


class TestSpectralNorm:
    def test_diagonal(self):
        assert spectral_norm([[3.0, 0.0], [0.0, 4.0]]) == pytest.approx(4.0, rel=1e-8)

    def test_zero(self):
        assert spectral_norm(np.zeros((2, 2))) == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_jacobi_oracle(self, seed):
        m = np.random.default_rng(seed).normal(size=(8, 8))
        assert spectral_norm(m) == pytest.approx(jacobi_singular_values(m)[0], rel=1e-6)

    def test_rectangular_and_conv(self, rng):
        m = rng.normal(size=(5, 2, 3, 3))
        assert spectral_norm(m) == pytest.approx(jacobi_singular_values(m.reshape(5, -1))[0], rel=1e-6)

    def test_oracle_against_known_values(self):
        np.testing.assert_allclose(jacobi_singular_values([[2.0, 0.0], [0.0, -5.0], [0.0, 0.0]]), [5.0, 2.0])

    def test_iterations(self):
        with pytest.raises(ContractError):
            spectral_norm(np.eye(2), iterations=0)


class TestEstimateConstants:
    def test_normalised_inputs(self):
        data = gen_blobs(3, 6, per_class=20, spread=0.3, seed=0, max_norm=1.0)
        spec = NetworkSpec.mlp(6, [5], 3)
        c = estimate_constants(spec, init_network(spec, 0), data)
        assert c.B_x <= 1.0
        assert c.B_sigma == 1.0 and c.L == 2 and c.d == spec.param_count

    def test_identity_weights(self):
        spec = NetworkSpec.mlp(3, [], 3)
        params = ParameterStore.from_layers(spec, [np.eye(3)], [np.zeros(3)])
        c = estimate_constants(spec, params, Dataset(np.ones((2, 3)), np.array([0, 1]), 3))
        assert c.B_theta == pytest.approx(1.0, rel=1e-12)

    def test_subgaussian_proxy(self):
        values = np.random.default_rng(0).normal(0, 0.1, 100_000)
        assert subgaussian_proxy(values) == pytest.approx(0.1 / math.sqrt(math.log(2)), rel=0.02)
        assert 0.1 / math.sqrt(math.log(2)) == pytest.approx(0.1201, abs=1e-4)


class TestGradientOrdering:
    def test_dead_unit_gets_smallest_gradient(self, rng):
        spec = NetworkSpec.mlp(4, [5], 3)
        params = init_network(spec, 1)
        w0 = params.weight(0).copy()
        w0[2] = 0.0
        params = ParameterStore.from_layers(spec, [w0, params.weight(1)], [params.bias(0), params.bias(1)])
        _, grad = loss_and_gradient(spec, params, rng.uniform(size=(1, 4)), np.array([0]))
        w1, b1, _ = spec.offsets(1)
        np.testing.assert_array_equal(grad[w1:b1].reshape(3, 5)[:, 2], 0.0)
        # distinct norms give one ordered pair per unordered pair, for each of the 3 rows
        report = gradient_ordering_check(spec, params, rng.uniform(size=4), 0, 1)
        assert report.pairs == 3 * 10

    def test_identical_units_respect(self, rng):
        spec = NetworkSpec.mlp(3, [2], 2)
        w0 = np.abs(rng.normal(size=(1, 3))).repeat(2, axis=0)
        w1 = np.abs(rng.normal(size=(2, 1))).repeat(2, axis=1)
        params = ParameterStore.from_layers(spec, [w0, w1], [np.zeros(2), np.zeros(2)])
        report = gradient_ordering_check(spec, params, np.ones(3), 1, 1)
        # equal norms give both ordered pairs, and equal gradients satisfy both
        assert report.pairs == 2 * 2 and report.respected == 4 and report.fraction == 1.0

    def test_nonnegative_network_ordered(self, rng):
        spec = NetworkSpec.mlp(6, [8], 3)
        params = init_network(spec, 0)
        params = params.with_flat(np.abs(params.flat))
        x = rng.uniform(size=6)
        assert activation_ordering(spec, params, x, 0) >= 0.5
        assert 0.0 <= gradient_ordering_check(spec, params, x, 0, 1).fraction <= 1.0

    def test_layer_guard(self):
        spec = NetworkSpec.mlp(3, [4], 2)
        with pytest.raises(ContractError):
            gradient_ordering_check(spec, init_network(spec, 0), np.ones(3), 0, 0)

    def test_statistics_shape(self):
        stats = ordering_statistics(models=5, input_dim=6, hidden=(6, 6), class_count=3)
        assert stats["models"] == 5 and 0 <= stats["min_fraction"] <= stats["mean_fraction"] <= 1

    def test_nonnegative_weights_raise_agreement(self):
        he = ordering_statistics(models=30, seed=1)["mean_fraction"]
        nonneg = ordering_statistics(models=30, seed=1, nonnegative_weights=True)["mean_fraction"]
        assert nonneg > he
