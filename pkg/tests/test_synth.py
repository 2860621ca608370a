from dataclasses import replace

import numpy as np
import pytest

from latentchoice.data_model import validate
from latentchoice.errors import ConfigError
from latentchoice.iclv import MeasurementSpec
from latentchoice.latent_fn import LatentSpec
from latentchoice.mnl import ChoiceModelParams
from latentchoice.optimize import OptimizerConfig
from latentchoice.services.crbm import CRBMParams
from latentchoice.synth import (
    GroundTruth,
    RecoveryConfig,
    RecoveryReport,
    Replication,
    SynthConfig,
    default_catalog,
    default_specs,
    generate,
    generate_with_latents,
    random_truth,
    recovery_experiment,
    recovery_summary,
)


def test_default_catalog_matches_case_study_shape():
    catalog = default_catalog()
    assert catalog.alternatives == ["train", "bus", "car", "plane", "car_rental", "train_hotel"]
    assert catalog.reference == "train"
    assert len(catalog.generic_vars) == 12
    assert len(catalog.indicators) == 12
    assert "safety_train" in catalog.indicator_names
    with pytest.raises(ConfigError):
        default_catalog(n_alternatives=7)


def test_default_specs_assign_indicators_by_prefix():
    catalog = default_catalog()
    latents, measurements = default_specs(catalog)
    assert [spec.name for spec in latents] == ["environmental", "safety", "comfort"]
    assert sum(len(spec.inputs) for spec in latents) == 12
    assert len(measurements) == 12
    for m in measurements:
        assert m.indicator.startswith(m.latent + "_")


def test_same_seed_same_dataset(small_catalog):
    truth = random_truth("mnl", small_catalog, SynthConfig(model="mnl", n_obs=300, availability_prob=0.7), seed=5)
    first = generate(truth)
    second = generate(truth)
    np.testing.assert_array_equal(first.alt_attributes, second.alt_attributes)
    np.testing.assert_array_equal(first.choice, second.choice)
    np.testing.assert_array_equal(first.availability, second.availability)
    other = generate(GroundTruth(truth.model, truth.params, truth.catalog, truth.config, truth.n_obs, seed=6))
    assert not np.array_equal(first.choice, other.choice)


def test_generated_iclv_data_passes_validation():
    catalog = default_catalog()
    config = SynthConfig(model="iclv", n_obs=500, availability_prob=0.6, indicator_missing=0.1)
    truth = random_truth("iclv", catalog, config, seed=2)
    dataset, latents = generate_with_latents(truth)
    report = validate(dataset)
    assert report.passed, report.failures()
    assert latents.shape == (500, 3)
    missing = np.isnan(dataset.indicators).all(axis=1)
    assert 0 < missing.sum() < 500
    observed = dataset.indicators[~missing]
    assert set(np.unique(observed)) <= {0.0, 1.0}


def test_zero_truth_gives_uniform_shares(small_catalog):
    truth = GroundTruth("mnl", ChoiceModelParams.zeros(small_catalog), small_catalog, SynthConfig(model="mnl"), 6000, 1)
    dataset = generate(truth)
    shares = np.bincount(dataset.choice, minlength=3) / dataset.n_obs
    bound = 4 * np.sqrt((1 / 3) * (2 / 3) / dataset.n_obs)
    assert np.all(np.abs(shares - 1 / 3) < bound)


def test_crbm_truth_samples_binary_latents(small_catalog):
    truth = random_truth("crbm", small_catalog, SynthConfig(model="crbm", n_obs=200, n_latent=3), seed=4)
    dataset, latents = generate_with_latents(truth)
    assert latents.shape == (200, 3)
    assert set(np.unique(latents)) <= {0.0, 1.0}
    assert dataset.availability[np.arange(200), dataset.choice].all()


def test_truth_family_must_match_parameters(small_catalog):
    with pytest.raises(ConfigError):
        GroundTruth("crbm", ChoiceModelParams.zeros(small_catalog), small_catalog)
    with pytest.raises(ConfigError):
        GroundTruth("mnl", CRBMParams.initial(small_catalog, 2), small_catalog)


def test_recovery_experiment_summarises_replications(small_catalog):
    truth = random_truth("mnl", small_catalog, SynthConfig(model="mnl", n_obs=800), seed=9)
    config = RecoveryConfig(
        n_replications=4,
        optimizer=OptimizerConfig(method="bfgs", tolerance=1e-5),
        n_jobs=1,
        seed=3,
    )
    report = recovery_experiment(truth, "mnl", config)
    assert report.n_failed == 0
    assert len(report.replications) == 4
    assert len(report.parameters) == truth.params.n_free
    for p in report.parameters:
        assert 0.0 <= p.coverage <= 1.0
        assert p.rmse >= abs(p.bias)
    summary = recovery_summary(report)
    assert summary["n_failed"] == 0.0
    assert np.isnan(summary["improvement_rate"])
    again = recovery_experiment(truth, "mnl", config)
    assert [r.final_ll for r in again.replications] == [r.final_ll for r in report.replications]


def test_recovery_rejects_incompatible_estimator(small_catalog):
    truth = random_truth("mnl", small_catalog, SynthConfig(model="mnl", n_obs=50))
    with pytest.raises(ConfigError):
        recovery_experiment(truth, "crbm")


def identified_iclv_specs():
    # fixed intercepts and one pinned loading per latent fix location and scale
    latents = [
        LatentSpec(name="comfort", function="linear", inputs=["x1", "x2"], fix_intercept=True),
        LatentSpec(name="safety", function="linear", inputs=["x3", "x4"], fix_intercept=True),
    ]
    measurements = [
        MeasurementSpec(indicator="comfort_car", latent="comfort", loading=1.0, estimate_loading=False),
        MeasurementSpec(indicator="comfort_train", latent="comfort"),
        MeasurementSpec(indicator="safety_bus", latent="safety", loading=1.0, estimate_loading=False),
        MeasurementSpec(indicator="safety_train", latent="safety"),
    ]
    return latents, measurements


@pytest.mark.slow
@pytest.mark.parametrize("family", ["mnl", "iclv"])
def test_estimators_recover_their_own_truth(small_catalog, family):
    latents, measurements = identified_iclv_specs() if family == "iclv" else ([], [])
    truth = random_truth(family, small_catalog, SynthConfig(model=family, n_obs=5000), latents, measurements, seed=31)
    config = RecoveryConfig(
        n_replications=20,
        start="cold" if family == "mnl" else "truth",
        optimizer=OptimizerConfig(method="bfgs", tolerance=1e-6, max_iter=2000),
        seed=4,
    )
    large = recovery_experiment(truth, family, config)
    small = recovery_experiment(replace(truth, n_obs=1000), family, config)
    assert large.n_failed == 0
    assert len(large.parameters) == truth.params.n_free
    assert large.mean_coverage >= 0.90
    assert recovery_summary(large)["mean_rmse"] < recovery_summary(small)["mean_rmse"]


def test_improvement_rate_treats_ties_as_matches():
    replications = [
        Replication(1, False, "ok", final_ll=-100.0, baseline_ll=-100.00001),
        Replication(2, False, "ok", final_ll=-100.0, baseline_ll=-99.99995),
        Replication(3, False, "ok", final_ll=-100.0, baseline_ll=-90.0),
        Replication(4, True, "diverged"),
    ]
    report = RecoveryReport("two-stage", [], replications)
    assert report.improvement_rate() == pytest.approx(2 / 3)
    assert report.improvement_rate(tolerance=0.0) == pytest.approx(1 / 3)
