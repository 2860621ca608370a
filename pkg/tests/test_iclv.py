import math

import numpy as np
import pytest

from latentchoice import iclv, mnl
from latentchoice.errors import ConfigError
from latentchoice.latent_fn import LatentSpec
from latentchoice.optimize import OptimizerConfig
from latentchoice.synth import SynthConfig, generate, random_truth


def specs(noise_std=0.0):
    latents = [
        LatentSpec(name="comfort", function="sigmoid", inputs=["x1", "x2"], noise_std=noise_std),
        LatentSpec(name="safety", function="linear", inputs=["x3", "x4"]),
    ]
    measurements = [
        iclv.MeasurementSpec(indicator="comfort_car", latent="comfort"),
        iclv.MeasurementSpec(indicator="comfort_train", latent="comfort", negate=False),
        iclv.MeasurementSpec(indicator="safety_bus", latent="safety", estimate_intercept=False),
        iclv.MeasurementSpec(indicator="safety_train", latent="safety"),
    ]
    return latents, measurements


def random_params(catalog, seed, noise_std=0.0):
    latents, measurements = specs(noise_std)
    base = iclv.ICLVParams.build(catalog, latents, measurements, ["x1"])
    rng = np.random.default_rng(seed)
    return base.with_free_vector(rng.normal(0.0, 0.7, base.n_free))


def test_measurement_probability():
    assert iclv.measurement_prob(0.0, 3.0) == 0.5
    assert iclv.measurement_prob(2.0, 1.0, -1.0) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)))


def test_indicator_cross_entropy_sums_independent_terms():
    m = [
        iclv.MeasurementSpec(indicator="a", latent="comfort", loading=1.0),
        iclv.MeasurementSpec(indicator="b", latent="comfort", loading=2.0, negate=False),
        iclv.MeasurementSpec(indicator="c", latent="comfort", loading=2.0),
    ]
    p_a = 1.0 / (1.0 + math.exp(0.5))
    p_b = 1.0 / (1.0 + math.exp(-1.0))
    expected = math.log(p_a) + math.log(1.0 - p_b)
    value = iclv.indicator_cross_entropy([1.0, 0.0, float("nan")], {"comfort": 0.5}, m)
    assert value == pytest.approx(expected)


def test_indicator_cross_entropy_is_finite_at_saturation():
    m = [iclv.MeasurementSpec(indicator="a", latent="comfort", loading=1e6, negate=False)]
    value = iclv.indicator_cross_entropy([0.0], {"comfort": 1.0}, m)
    assert value == pytest.approx(math.log(iclv.PROBABILITY_FLOOR), abs=1e-3)


def test_build_blocks_and_fixed_intercepts(small_catalog):
    latents, measurements = specs()
    params = iclv.ICLVParams.build(small_catalog, latents, measurements)
    assert list(params) == [
        "asc", "beta_attr", "beta_generic", "beta_latent",
        "struct_intercept", "struct_loadings", "meas_intercept", "meas_loading",
    ]
    assert params["meas_intercept"].fixed.tolist() == [False, False, True, False]
    assert params.loading_offsets == (0, 2, 4)
    assert params["struct_loadings"].labels == ("comfort:x1", "comfort:x2", "safety:x3", "safety:x4")


def test_build_rejects_unknown_references(small_catalog):
    latents, _ = specs()
    with pytest.raises(ConfigError):
        iclv.ICLVParams.build(small_catalog, latents, [iclv.MeasurementSpec(indicator="comfort_car", latent="price")])
    with pytest.raises(ConfigError):
        iclv.ICLVParams.build(small_catalog, [latents[0], latents[0]])


def test_joint_likelihood_is_mnl_plus_cross_entropy(small_catalog, small_dataset):
    params = random_params(small_catalog, 1)
    xs = params.latent_values(small_dataset)
    choice_ll = mnl.log_likelihood(params.choice_params(), small_dataset, xs)
    _, measurements = params.to_specs()
    names = list(params.latent_names)
    columns = [small_catalog.indicator_index(m.indicator) for m in measurements]
    indicator_ll = sum(
        iclv.indicator_cross_entropy(small_dataset.indicators[n, columns], dict(zip(names, xs[n])), measurements)
        for n in range(small_dataset.n_obs)
    )
    assert iclv.joint_log_likelihood(params, small_dataset) == pytest.approx(choice_ll + indicator_ll, rel=1e-10)


def test_rows_without_indicators_contribute_choice_term_only(small_catalog, make_dataset):
    dataset = make_dataset(small_catalog, 50, seed=9, with_indicators=False)
    params = random_params(small_catalog, 2)
    xs = params.latent_values(dataset)
    expected = mnl.log_likelihood(params.choice_params(), dataset, xs)
    assert iclv.joint_log_likelihood(params, dataset) == pytest.approx(expected)


@pytest.mark.slow
@pytest.mark.parametrize("noise_std", [0.0, 0.8])
def test_joint_gradient_matches_finite_differences(small_catalog, small_dataset, noise_std):
    for seed in range(100):
        params = random_params(small_catalog, seed, noise_std)
        free = params.free_mask()
        analytic = iclv.joint_gradient(params, small_dataset, n_draws=20, seed=3)[free]
        x = params.free_vector()
        numeric = np.zeros_like(x)
        h = 1e-6
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = h
            up = iclv.joint_log_likelihood(params.with_free_vector(x + e), small_dataset, 20, 3)
            down = iclv.joint_log_likelihood(params.with_free_vector(x - e), small_dataset, 20, 3)
            numeric[k] = (up - down) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-5)


def test_simulated_likelihood_is_deterministic_for_a_seed(small_catalog, small_dataset):
    params = random_params(small_catalog, 4, noise_std=1.0)
    first = iclv.joint_log_likelihood(params, small_dataset, n_draws=30, seed=8)
    assert iclv.joint_log_likelihood(params, small_dataset, n_draws=30, seed=8) == first
    assert iclv.joint_log_likelihood(params, small_dataset, n_draws=30, seed=9) != first
    assert iclv.simulation_draws(random_params(small_catalog, 4), 10).shape == (1, 10, 2)


def test_cold_start_keeps_fixed_entries(small_catalog):
    params = random_params(small_catalog, 5)
    start = iclv.cold_start(params, scale=0.1, seed=2)
    assert np.all(start.value("asc") == 0.0)
    assert np.all(start.value("beta_attr") == 0.0)
    assert start.value("meas_intercept")[2] == params.value("meas_intercept")[2]
    assert np.all(start.value("beta_latent")[0] == 0.0)
    assert np.any(start.value("struct_loadings") != 0.0)
    np.testing.assert_array_equal(start.vector(), iclv.cold_start(params, 0.1, 2).vector())


def test_fixed_structural_intercept_is_not_estimated(small_catalog):
    latent = LatentSpec(name="comfort", inputs=["x1", "x2"], intercept=0.0, fix_intercept=True)
    params = iclv.ICLVParams.build(small_catalog, [latent], [])
    assert params["struct_intercept"].fixed.all()
    start = iclv.cold_start(params, scale=0.5, seed=1)
    assert start.value("struct_intercept")[0] == 0.0
    assert "comfort:intercept" not in [label for label, free in zip(start.labels(), start.free_mask()) if free]


def test_estimate_iclv_improves_and_reports(small_catalog):
    latents, measurements = specs()
    truth = random_truth(
        "iclv", small_catalog, SynthConfig(n_obs=1500), latents, measurements, seed=21
    )
    dataset = generate(truth)
    init = iclv.cold_start(iclv.ICLVParams.build(small_catalog, latents, measurements), 0.1, 0)
    result = iclv.estimate_iclv(
        dataset, latents, measurements, init, OptimizerConfig(method="bfgs", tolerance=1e-4, max_iter=2000)
    )
    assert result.history[0] == pytest.approx(iclv.joint_log_likelihood(init, dataset))
    assert result.statistics.final_ll > result.history[0]
    zero = init.with_vector(np.zeros(init.size))
    assert result.statistics.null_ll == pytest.approx(iclv.joint_log_likelihood(zero, dataset))
    assert len(result.parameter_stats) == init.size
    assert isinstance(result.params, iclv.ICLVParams)


def test_pinned_measurement_loading_is_not_estimated(small_catalog, small_dataset):
    latent = LatentSpec(name="comfort", function="linear", inputs=["x1", "x2"], fix_intercept=True)
    measurements = [
        iclv.MeasurementSpec(indicator="comfort_car", latent="comfort", loading=1.0, estimate_loading=False),
        iclv.MeasurementSpec(indicator="comfort_train", latent="comfort"),
    ]
    params = iclv.ICLVParams.build(small_catalog, [latent], measurements)
    assert params["meas_loading"].fixed.tolist() == [True, False]
    start = iclv.cold_start(params, scale=0.5, seed=3)
    assert start.value("meas_loading")[0] == 1.0
    result = iclv.estimate_iclv(
        small_dataset,
        [latent],
        measurements,
        start,
        OptimizerConfig(method="bfgs", tolerance=1e-4, max_iter=500),
        with_std_errors=False,
    )
    assert result.params.value("meas_loading")[0] == 1.0
