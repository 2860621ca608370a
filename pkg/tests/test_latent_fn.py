import numpy as np
import pytest

from latentchoice.data_model import SurveyDataset
from latentchoice.errors import DimensionError
from latentchoice.latent_fn import (
    LatentSpec,
    apply_function,
    eval_latent,
    eval_latent_batch,
    latent_derivative,
    noise_draws,
)

FAMILIES = ["linear", "sigmoid", "relu", "softplus"]


def test_loadings_default_to_zero_per_input():
    spec = LatentSpec(name="comfort", inputs=["x1", "x2"])
    assert spec.loadings == [0.0, 0.0]
    with pytest.raises(ValueError):
        LatentSpec(name="comfort", inputs=["x1"], loadings=[1.0, 2.0])
    with pytest.raises(ValueError):
        LatentSpec(name="comfort", inputs=["x1", "x1"])


def test_eval_latent_sigmoid():
    spec = LatentSpec(name="comfort", function="sigmoid", inputs=["x1", "x2"], loadings=[1.0, -2.0], intercept=0.5)
    value = eval_latent(spec, {"x1": 1.0, "x2": 1.0, "x3": 0.0})
    assert value == pytest.approx(1.0 / (1.0 + np.exp(0.5)))
    assert eval_latent(spec, {"x1": 0.0, "x2": 0.0}) == pytest.approx(1.0 / (1.0 + np.exp(-0.5)))


def test_eval_latent_missing_input():
    spec = LatentSpec(name="comfort", inputs=["x1", "x2"])
    with pytest.raises(DimensionError):
        eval_latent(spec, {"x1": 1.0})


def test_relu_and_softplus_values():
    assert apply_function("relu", np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert apply_function("softplus", np.array(0.0)) == pytest.approx(np.log(2.0))
    assert apply_function("softplus", np.array(1000.0)) == pytest.approx(1000.0)
    assert apply_function("sigmoid", np.array(-1000.0)) == 0.0


@pytest.mark.parametrize("function", FAMILIES)
def test_families_are_non_decreasing(function):
    z = np.linspace(-10, 10, 201)
    assert np.all(np.diff(apply_function(function, z)) >= 0)


@pytest.mark.parametrize("function", FAMILIES)
def test_derivative_matches_finite_differences(function):
    z = np.array([-3.0, -0.7, 0.4, 2.5])
    h = 1e-6
    numeric = (apply_function(function, z + h) - apply_function(function, z - h)) / (2 * h)
    np.testing.assert_allclose(latent_derivative(function, z), numeric, rtol=1e-6, atol=1e-8)


def test_relu_subgradient_at_kink():
    assert latent_derivative("relu", np.array([0.0]))[0] == 0.0


def test_noise_is_reproducible_and_row_stable():
    spec = LatentSpec(name="comfort", function="linear", inputs=["x1"], loadings=[1.0], noise_std=0.5)
    generic = {"x1": 1.0}
    assert eval_latent(spec, generic, noise_draw=0.2) == pytest.approx(1.1)
    assert eval_latent(spec.model_copy(update={"noise_std": 0.0}), generic, noise_draw=0.2) == pytest.approx(1.0)
    long = noise_draws(4, 1, 50)
    short = noise_draws(4, 1, 10)
    np.testing.assert_array_equal(long[0, :10], short[0])
    np.testing.assert_array_equal(noise_draws(4, 1, 10), short)


def test_eval_latent_batch_matches_rowwise(small_catalog, small_dataset):
    spec = LatentSpec(name="comfort", function="softplus", inputs=["x2", "x4"], loadings=[0.3, -1.2], intercept=0.1)
    batch = eval_latent_batch(spec, small_dataset)
    names = small_catalog.generic_vars
    for n in (0, 7, 199):
        generic = dict(zip(names, small_dataset.generic[n]))
        assert batch[n] == pytest.approx(eval_latent(spec, generic))


def test_noisy_latent_averages_to_deterministic_value(small_catalog):
    n = 100_000
    dataset = SurveyDataset.from_arrays(
        small_catalog,
        np.zeros((n, small_catalog.n_alternatives, len(small_catalog.alt_specific_vars))),
        np.zeros(n, dtype=int),
        generic=np.tile([1.0, 0.0, 1.0, 0.0], (n, 1)),
    )
    spec = LatentSpec(
        name="comfort", function="linear", inputs=["x1", "x3"], loadings=[0.8, -0.4], intercept=0.3, noise_std=0.7
    )
    expected = eval_latent(spec, dict(zip(small_catalog.generic_vars, dataset.generic[0])))
    assert expected == pytest.approx(0.7)
    values = eval_latent_batch(spec, dataset, seed=5)
    assert values.std() > 0.5
    assert abs(values.mean() - expected) < 3 * spec.noise_std / np.sqrt(n)
