import json
from pathlib import Path

import numpy as np
import pytest

from latentchoice import pipeline
from latentchoice.data_model import categorize_continuous
from latentchoice.errors import ConfigError, PipelineError
from latentchoice.iclv import joint_log_likelihood
from latentchoice.latent_fn import LatentSpec
from latentchoice.optimize import OptimizerConfig
from latentchoice.paramfile import save_params
from latentchoice.services.crbm import CRBMParams, LatentReport, LatentSummary
from latentchoice.synth import RecoveryConfig, generate, random_truth, recovery_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run_mapping(**overrides):
    data = {
        "seed": 11,
        "catalog": {
            "alternatives": ["car", "bus", "train"],
            "reference": "car",
            "alt_specific_vars": ["cost", "duration"],
            "generic_vars": ["x1", "x2", "x3", "x4"],
            "indicators": [
                {"name": "comfort_car", "alternative": "car"},
                {"name": "comfort_train", "alternative": "train"},
                {"name": "safety_bus", "alternative": "bus"},
                {"name": "safety_train", "alternative": "train"},
            ],
        },
        "latents": [
            {"name": "comfort", "inputs": ["x1", "x2"]},
            {"name": "safety", "inputs": ["x3", "x4"]},
        ],
        "measurements": [
            {"indicator": "comfort_car", "latent": "comfort"},
            {"indicator": "comfort_train", "latent": "comfort"},
            {"indicator": "safety_bus", "latent": "safety"},
            {"indicator": "safety_train", "latent": "safety"},
        ],
        "model": {"n_draws": 20},
        "optimizer": {"method": "bfgs", "tolerance": 1e-4, "max_iter": 300},
        "crbm": {"n_latent": 2, "batch_size": 50, "learning_rate": 0.05, "epochs": 5},
        "synth": {"model": "iclv", "n_obs": 300},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return data


@pytest.fixture
def run_config():
    return pipeline.RunConfig.from_mapping(run_mapping())


@pytest.fixture
def survey(run_config):
    truth = random_truth(
        "iclv", run_config.catalog, run_config.synth, run_config.latents, run_config.measurements, seed=run_config.seed
    )
    return generate(truth)


def test_config_rejects_unknown_names():
    with pytest.raises(ConfigError):
        pipeline.RunConfig.from_mapping(run_mapping(latents=[{"name": "comfort", "inputs": ["x9"]}], measurements=[]))
    with pytest.raises(ConfigError):
        pipeline.RunConfig.from_mapping(run_mapping(measurements=[{"indicator": "comfort_car", "latent": "speed"}]))
    with pytest.raises(ConfigError):
        pipeline.RunConfig.from_mapping(run_mapping(model={"utility_generic": ["income"]}))
    with pytest.raises(ConfigError):
        pipeline.RunConfig.from_mapping(run_mapping(crbm={"n_latent": 2, "fixed_g_rows": [2]}))


def test_config_rejects_indicator_on_two_latents():
    measurements = run_mapping()["measurements"] + [{"indicator": "comfort_car", "latent": "safety"}]
    with pytest.raises(ConfigError):
        pipeline.RunConfig.from_mapping(run_mapping(measurements=measurements))


def test_config_seed_flows_into_stages(run_config):
    assert run_config.crbm_config().seed == 11
    assert run_config.optimizer_config().seed == 11
    other = run_config.model_copy(update={"seed": 12})
    assert other.digest() != run_config.digest()
    assert run_config.digest() == pipeline.RunConfig.from_mapping(run_mapping()).digest()


def test_config_file_resolves_data_path(tmp_path):
    (tmp_path / "runs").mkdir()
    (tmp_path / "runs" / "run.toml").write_text(
        'seed = 1\n[data]\npath = "data.csv"\n[catalog]\nalternatives = ["a", "b"]\nreference = "a"\n',
        encoding="utf-8",
    )
    config = pipeline.RunConfig.from_file(tmp_path / "runs" / "run.toml")
    assert config.data.path == str((tmp_path / "runs" / "data.csv").resolve())
    with pytest.raises(ConfigError):
        pipeline.load_run_dataset(config.model_copy(update={"data": pipeline.DataConfig()}))


def test_case_study_config_declares_the_survey_structure():
    config = pipeline.RunConfig.from_file(CONFIGS / "quebec_case_study.toml")
    assert config.catalog.alternatives == ["bus", "car_rental", "car", "plane", "train_hotel", "train"]
    assert config.catalog.reference == "train"
    assert config.catalog.alt_specific_vars == ["cost", "duration", "reliability"]
    inputs = {spec.name: spec.inputs for spec in config.latents}
    assert inputs["environmental"] == [
        "driving_licence", "age_25_45", "ft_worker", "hs_education",
        "hh_vehicles_0", "children_0_or_2", "income_60k_plus",
    ]
    assert inputs["safety"] == ["transit_pass", "age_25_45", "hh_vehicles_1", "children_0_or_1", "income_20k_60k"]
    assert inputs["comfort"] == [
        "age_45_plus", "male", "tertiary_education", "hh_vehicles_1_plus",
        "income_20k_or_less", "income_60k_plus",
    ]
    mode_of = {ind.name: ind.alternative for ind in config.catalog.indicators}
    measured = {}
    for m in config.measurements:
        measured.setdefault(m.latent, set()).add(mode_of[m.indicator])
    assert measured == {name: {"bus", "car", "train", "plane"} for name in inputs}

    income = next(c for c in config.catalog.categorized if c.source == "income")
    bins = [int(np.argmax(categorize_continuous(v, income.edges))) for v in (20000, 20001, 60000)]
    assert bins == [0, 1, 2]


def summary(name, loading_t, keep=True):
    return LatentSummary(
        name=name,
        loadings={},
        choice_weights={},
        loading_t=loading_t,
        choice_t={"bus": 3.0},
        keep=keep,
    )


def test_match_latents_maximises_total_significance():
    specs = [LatentSpec(name="comfort", inputs=["x1", "x2"]), LatentSpec(name="safety", inputs=["x3", "x4"])]
    report = LatentReport(
        latents=[
            summary("h1", {"x1": 0.5, "x2": 0.1, "x3": 5.0, "x4": 4.0}),
            summary("h2", {"x1": 3.0, "x2": -2.5, "x3": 2.1, "x4": None}),
            summary("h3", {"x1": 9.0, "x2": 9.0, "x3": 9.0, "x4": 9.0}, keep=False),
        ],
        method="exact",
        t_threshold=1.96,
        parameter_stats=[],
    )
    assert pipeline.match_latents(report, specs, 1.96) == {"comfort": "h2", "safety": "h1"}


def test_match_latents_leaves_insignificant_pairs_unmatched():
    specs = [LatentSpec(name="comfort", inputs=["x1"]), LatentSpec(name="safety", inputs=["x3"])]
    report = LatentReport([summary("h1", {"x1": 1.0, "x3": 2.5})], "exact", 1.96, [])
    assert pipeline.match_latents(report, specs, 1.96) == {"safety": "h1"}
    assert pipeline.match_latents(LatentReport([], "exact", 1.96, []), specs, 1.96) == {}


def test_prefit_measurement_recovers_logit():
    rng = np.random.default_rng(0)
    latent = rng.random(4000)
    indicator = (rng.random(4000) < 1 / (1 + np.exp(-(-1.0 - 2.0 * latent)))).astype(float)
    indicator[:100] = np.nan
    a, b = pipeline.prefit_measurement(indicator, latent, sign=-1.0)
    assert a == pytest.approx(-1.0, abs=0.25)
    assert b == pytest.approx(2.0, abs=0.4)
    assert pipeline.prefit_measurement(np.full(5, np.nan), latent[:5], 1.0) == (0.0, 0.0)


def test_two_stage_hands_over_without_loss(run_config, survey):
    result = pipeline.estimate_two_stage(survey, run_config)
    assert [c.label for c in result.report.columns] == ["ICLV", "C-RBM"]
    assert result.trace.rows[0].epoch == 0
    # optimizer starts exactly at the handed-over values
    start_ll = joint_log_likelihood(result.initial, survey, run_config.model.n_draws, run_config.seed)
    assert result.two_stage.history[0] == pytest.approx(start_ll, rel=1e-12)
    np.testing.assert_array_equal(result.initial.value("asc"), result.crbm_params.value("c_alt"))
    np.testing.assert_array_equal(result.initial.value("beta_attr"), result.mnl_prefit.params.value("beta_attr"))
    assert result.two_stage.statistics.final_ll >= start_ll - 1e-6
    for spec_name, latent in result.matching.items():
        h = [s.name for s in run_config.latents].index(spec_name)
        j = list(result.crbm_params.latent_names).index(latent)
        np.testing.assert_array_equal(result.initial.value("beta_latent")[:, h], result.crbm_params.value("D")[:, j])


def test_two_stage_is_deterministic(run_config, survey):
    first = pipeline.estimate_two_stage(survey, run_config)
    second = pipeline.estimate_two_stage(survey, run_config)
    np.testing.assert_array_equal(first.two_stage.params.vector(), second.two_stage.params.vector())
    assert first.report.model_dump_json() == second.report.model_dump_json()


def test_two_stage_needs_latents(survey):
    config = pipeline.RunConfig.from_mapping(run_mapping(latents=[], measurements=[]))
    with pytest.raises(ConfigError):
        pipeline.estimate_two_stage(survey, config)


def test_divergence_keeps_written_artifacts(tmp_path, run_config, survey):
    config = run_config.model_copy(
        update={"crbm": run_config.crbm.model_copy(update={"learning_rate": 100.0, "max_param_norm": 1.0})}
    )
    writer = pipeline.ArtifactWriter(tmp_path)
    with pytest.raises(PipelineError) as exc:
        pipeline.estimate_two_stage(survey, config, writer)
    assert exc.value.stage == "crbm"
    assert exc.value.artifacts == ["mnl_prefit.params", "crbm_trace.csv"]
    assert (tmp_path / "mnl_prefit.params").is_file()
    assert (tmp_path / "crbm_trace.csv").is_file()
    assert not (tmp_path / "two_stage.params").exists()


def test_run_two_stage_writes_artifacts(tmp_path, run_config):
    data_dir = tmp_path / "data"
    config = run_config.model_copy(update={"data": pipeline.DataConfig(path=str(data_dir / "data.csv"))})
    pipeline.run_generate(config, data_dir)
    assert (data_dir / "truth.params").is_file()

    result = pipeline.run_two_stage(config, tmp_path / "run")
    expected = {
        "mnl_prefit.params",
        "crbm.params",
        "crbm_trace.csv",
        "latents.json",
        "two_stage.params",
        "iclv.params",
        "report.txt",
        "report.csv",
        "report.json",
        "manifest.json",
    }
    assert set(result.artifacts) == expected
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["command"] == "two-stage"
    assert manifest["seed"] == 11
    assert manifest["artifacts"] == sorted(expected - {"manifest.json"}) + ["manifest.json"]
    latents = json.loads((tmp_path / "run" / "latents.json").read_text())
    assert [entry["name"] for entry in latents["latents"]] == ["h1", "h2"]


def test_report_from_params_reevaluates_saved_fits(tmp_path, run_config):
    data_dir = tmp_path / "data"
    config = run_config.model_copy(update={"data": pipeline.DataConfig(path=str(data_dir / "data.csv"))})
    pipeline.run_generate(config, data_dir)
    mnl = pipeline.run_estimate_mnl(config, tmp_path / "mnl")
    report = pipeline.report_from_params(config, [tmp_path / "mnl" / "mnl.params"], ["plain"])
    assert [c.label for c in report.columns] == ["plain"]
    assert report.columns[0].statistics.final_ll == pytest.approx(mnl.statistics.final_ll, rel=1e-9)
    save_params(CRBMParams.initial(config.catalog, 2), tmp_path / "crbm.params")
    with pytest.raises(ConfigError):
        pipeline.report_from_params(config, [tmp_path / "crbm.params"])


@pytest.mark.slow
def test_crbm_start_matches_or_beats_cold_start(run_config):
    truth = random_truth(
        "iclv", run_config.catalog, run_config.synth, run_config.latents, run_config.measurements, seed=7
    )
    config = run_config.model_copy(update={"optimizer": OptimizerConfig(method="bfgs", tolerance=1e-6, max_iter=2000)})
    report = recovery_experiment(truth, "two-stage", RecoveryConfig(n_replications=20, seed=2), run_config=config)
    assert len(report.replications) == 20
    assert sum(not r.failed for r in report.replications) >= 18
    assert report.improvement_rate() >= 0.8
