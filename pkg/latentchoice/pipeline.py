"""Two-stage estimation pipeline and run orchestration.

The two-stage procedure:

1. a plain MNL pre-fit supplies attribute and covariate coefficients;
2. a C-RBM is trained on the choices and its significant latents are
   extracted;
3. kept C-RBM latents are matched to the configured latents (Hungarian
   assignment on the significance of their covariate weights);
4. an ICLV model is initialised from the C-RBM (constants from ``c_alt``,
   latent coefficients from the columns of ``D``, structural equations from
   the rows of ``G`` and ``c_lat``, measurement loadings from binary-logit
   pre-fits on the C-RBM latent probabilities) and estimated;
5. the same ICLV model is estimated from a cold start as the baseline.

Both fits end up side by side in a :class:`~latentchoice.report.ComparisonReport`.
The remaining ``run_*`` functions back the other CLI subcommands.  Each
stage writes its artifacts as soon as it finishes; a failing stage raises
:class:`~latentchoice.errors.PipelineError` and leaves earlier artifacts in
place.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
import pandas as pd
import pydantic
import scipy
import torch
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from . import __version__
from .config import read_config_file
from .data_model import DiagnosticsReport, SurveyDataset, VariableCatalog, load_dataset, save_dataset, validate
from .errors import ConfigError, DivergenceError, LatentChoiceError, PipelineError
from .iclv import ICLVParams, MeasurementSpec, cold_start, estimate_iclv, joint_gradient, joint_log_likelihood
from .inference import hessian_statistics
from .latent_fn import LatentSpec
from .mnl import (
    ChoiceModelParams,
    EstimationResult,
    estimate,
    fit_statistics,
    gradient,
    log_likelihood,
    null_log_likelihood,
)
from .optimize import OptimizerConfig, maximize
from .parameters import ParameterSet
from .paramfile import load_params, save_params
from .report import EXTENSIONS, ComparisonReport, ModelColumn, ReportConfig, render_report
from .services import crbm
from .services.crbm import CRBMConfig
from .synth import SynthConfig, default_specs, generate, random_truth

logger = logging.getLogger(__name__)


class DataConfig(BaseModel):
    path: Optional[str] = None


class ModelConfig(BaseModel):
    # Generic covariates entering the utilities directly
    utility_generic: List[str] = Field(default_factory=list)
    # Simulation draws when a latent has noise
    n_draws: int = Field(200, ge=1)


class PipelineConfig(BaseModel):
    cold_start_scale: float = Field(0.1, ge=0)
    run_baseline: bool = True
    prefit_measurements: bool = True


class RunConfig(BaseModel):
    """Declarative description of a run, read from a TOML file."""

    seed: int = 0
    data: DataConfig = Field(default_factory=DataConfig)
    catalog: VariableCatalog
    latents: List[LatentSpec] = Field(default_factory=list)
    measurements: List[MeasurementSpec] = Field(default_factory=list)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    crbm: CRBMConfig = Field(default_factory=CRBMConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check_names(self) -> "RunConfig":
        generic = set(self.catalog.generic_vars)
        indicators = set(self.catalog.indicator_names)
        latent_names = [spec.name for spec in self.latents]
        if len(set(latent_names)) != len(latent_names):
            raise ValueError("latent names must be unique")
        for spec in self.latents:
            unknown = [v for v in spec.inputs if v not in generic]
            if unknown:
                raise ValueError(f"latent '{spec.name}' uses unknown generic variables {unknown}")
        for m in self.measurements:
            if m.indicator not in indicators:
                raise ValueError(f"measurement refers to unknown indicator '{m.indicator}'")
            if m.latent not in latent_names:
                raise ValueError(f"indicator '{m.indicator}' loads on unknown latent '{m.latent}'")
        counts: Dict[str, int] = {}
        for m in self.measurements:
            counts[m.indicator] = counts.get(m.indicator, 0) + 1
        repeated = [name for name, c in counts.items() if c > 1]
        if repeated:
            raise ValueError(f"indicators {repeated} load on more than one latent")
        unknown = [v for v in self.model.utility_generic if v not in generic]
        if unknown:
            raise ValueError(f"model uses unknown generic variables {unknown}")
        bad_rows = [r for r in self.crbm.fixed_g_rows if not 0 <= r < self.crbm.n_latent]
        if bad_rows:
            raise ValueError(f"crbm.fixed_g_rows {bad_rows} out of range for {self.crbm.n_latent} latents")
        return self

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"invalid run configuration: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_mapping(read_config_file(path))

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()[:16]

    def crbm_config(self) -> crbm.CRBMConfig:
        # the run seed drives every stochastic stage
        return self.crbm.model_copy(update={"seed": self.seed})

    def optimizer_config(self) -> OptimizerConfig:
        return self.optimizer.model_copy(update={"seed": self.seed})


class ArtifactWriter:
    """Writes stage artifacts into an output directory and remembers them."""

    def __init__(self, out_dir: Optional[str | Path]) -> None:
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.written: List[str] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        self.written.append(name)
        return self.out_dir / name

    def params(self, name: str, params: ParameterSet) -> None:
        path = self._path(name)
        if path is not None:
            save_params(params, path)

    def trace(self, name: str, trace: crbm.TrainingTrace) -> None:
        path = self._path(name)
        if path is not None:
            trace.write_csv(path)

    def json(self, name: str, payload: Any) -> None:
        path = self._path(name)
        if path is not None:
            path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")

    def dataset(self, name: str, dataset: SurveyDataset) -> None:
        path = self._path(name)
        if path is not None:
            save_dataset(dataset, path)

    def report(self, stem: str, report: ComparisonReport, formats: List[str]) -> None:
        for fmt in formats:
            path = self._path(f"{stem}.{EXTENSIONS[fmt]}")
            if path is not None:
                render_report(report, fmt, path)


@contextmanager
def _stage(name: str, writer: ArtifactWriter) -> Iterator[None]:
    logger.info(f"Stage '{name}' started")
    try:
        yield
    except PipelineError:
        raise
    except LatentChoiceError as exc:
        raise PipelineError(name, str(exc), writer.written) from exc
    logger.info(f"Stage '{name}' finished")


def _json_float(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def match_latents(
    report: crbm.LatentReport,
    latent_specs: List[LatentSpec],
    t_threshold: float,
) -> Dict[str, str]:
    """Assign kept C-RBM latents to configured latents.

    The score of a pair is the total ``|t|`` of the C-RBM latent's
    significant covariate weights on the configured latent's inputs; the
    assignment maximises the total score and pairs scoring zero stay
    unmatched.  Returns configured name -> C-RBM latent name.
    """
    kept = report.kept()
    if not kept or not latent_specs:
        return {}
    score = np.zeros((len(latent_specs), len(kept)))
    for h, spec in enumerate(latent_specs):
        for k, summary in enumerate(kept):
            score[h, k] = sum(
                abs(t)
                for var, t in summary.loading_t.items()
                if var in spec.inputs and t is not None and math.isfinite(t) and abs(t) > t_threshold
            )
    rows, cols = linear_sum_assignment(score, maximize=True)
    matching = {latent_specs[r].name: kept[c].name for r, c in zip(rows, cols) if score[r, c] > 0}
    logger.info(f"Latent matching: {matching}")
    return matching


def prefit_measurement(indicator: np.ndarray, latent: np.ndarray, sign: float) -> tuple[float, float]:
    """Binary-logit fit of ``P(I = 1) = sigmoid(a + sign * b * latent)``; returns ``(a, b)``.

    Rows with a missing indicator are ignored.
    """
    observed = ~np.isnan(indicator)
    y = indicator[observed]
    x = latent[observed]
    if y.size == 0:
        return 0.0, 0.0

    def objective(theta: np.ndarray):
        eta = theta[0] + sign * theta[1] * x
        ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        resid = y - expit(eta)
        return ll, np.array([resid.sum(), sign * (resid * x).sum()])

    result = maximize(objective, np.zeros(2), OptimizerConfig(max_iter=500))
    return float(result.x[0]), float(result.x[1])


def handoff_params(
    dataset: SurveyDataset,
    config: RunConfig,
    crbm_params: crbm.CRBMParams,
    prefit: ChoiceModelParams,
    matching: Dict[str, str],
) -> ICLVParams:
    """ICLV starting values derived from the C-RBM and the MNL pre-fit.

    Configured latents without a C-RBM match keep cold-start values.
    """
    catalog = dataset.catalog
    base = ICLVParams.build(catalog, config.latents, config.measurements, config.model.utility_generic)
    init = cold_start(base, config.pipeline.cold_start_scale, config.seed)
    init = init.with_block("asc", crbm_params.value("c_alt"))
    init = init.with_block("beta_attr", prefit.value("beta_attr"))
    init = init.with_block("beta_generic", prefit.value("beta_generic"))

    names = list(crbm_params.latent_names)
    d = crbm_params.value("D")
    g = crbm_params.value("G")
    c_lat = crbm_params.value("c_lat")
    beta_latent = init.value("beta_latent").copy()
    intercepts = init.value("struct_intercept").copy()
    loadings = init.value("struct_loadings").copy()
    posterior = crbm.latent_posterior(dataset, crbm_params)
    m_int = init.value("meas_intercept").copy()
    m_load = init.value("meas_loading").copy()
    for h, spec in enumerate(config.latents):
        if spec.name not in matching:
            continue
        j = names.index(matching[spec.name])
        beta_latent[:, h] = d[:, j]
        intercepts[h] = c_lat[j]
        lo, hi = init.loading_offsets[h], init.loading_offsets[h + 1]
        loadings[lo:hi] = g[j, catalog.generic_index(spec.inputs)]
        if not config.pipeline.prefit_measurements:
            continue
        for k, m in enumerate(config.measurements):
            if m.latent == spec.name:
                column = dataset.indicators[:, catalog.indicator_index(m.indicator)]
                a, b = prefit_measurement(column, posterior[:, j], m.sign)
                if m.estimate_intercept:
                    m_int[k] = a
                if m.estimate_loading:
                    m_load[k] = b
    init = init.with_block("beta_latent", np.where(init["beta_latent"].fixed, 0.0, beta_latent))
    init = init.with_block("struct_intercept", np.where(init["struct_intercept"].fixed, init.value("struct_intercept"), intercepts))
    init = init.with_block("struct_loadings", loadings)
    init = init.with_block("meas_intercept", np.where(init["meas_intercept"].fixed, init.value("meas_intercept"), m_int))
    return init.with_block("meas_loading", m_load)


@dataclass
class TwoStageResult:
    mnl_prefit: EstimationResult
    crbm_params: crbm.CRBMParams
    trace: crbm.TrainingTrace
    latent_report: crbm.LatentReport
    matching: Dict[str, str]
    initial: ICLVParams
    two_stage: EstimationResult
    baseline: Optional[EstimationResult]
    report: ComparisonReport
    artifacts: List[str] = field(default_factory=list)


def _latents_payload(report: crbm.LatentReport, matching: Dict[str, str]) -> Dict[str, Any]:
    inverse = {v: k for k, v in matching.items()}
    return {
        "method": report.method,
        "t_threshold": report.t_threshold,
        "latents": [
            {
                "name": s.name,
                "keep": s.keep,
                "duplicate_of": s.duplicate_of,
                "flagged": s.flagged,
                "matched_to": inverse.get(s.name),
                "choice_weights": {k: _json_float(v) for k, v in s.choice_weights.items()},
                "choice_t": {k: _json_float(v) for k, v in s.choice_t.items()},
                "loadings": {k: _json_float(v) for k, v in s.loadings.items()},
                "loading_t": {k: _json_float(v) for k, v in s.loading_t.items()},
            }
            for s in report.latents
        ],
    }


def estimate_two_stage(
    dataset: SurveyDataset,
    config: RunConfig,
    writer: Optional[ArtifactWriter] = None,
) -> TwoStageResult:
    """Run every stage of the two-stage procedure on ``dataset``."""
    writer = writer or ArtifactWriter(None)
    if not config.latents:
        raise ConfigError("the two-stage pipeline needs at least one configured latent")
    catalog = dataset.catalog
    optimizer = config.optimizer_config()
    utility_generic = config.model.utility_generic

    with _stage("mnl_prefit", writer):
        prefit = estimate(dataset, ChoiceModelParams.zeros(catalog, utility_generic), optimizer)
        writer.params("mnl_prefit.params", prefit.params)

    crbm_config = config.crbm_config()
    with _stage("crbm", writer):
        init = crbm.CRBMParams.initial(
            catalog,
            crbm_config.n_latent,
            crbm_config.init_scale,
            crbm_config.seed,
            crbm_config.g_term,
            crbm_config.fixed_g_rows,
        )
        try:
            crbm_params, trace = crbm.train(dataset, init, crbm_config)
        except DivergenceError as exc:
            if exc.trace is not None:
                writer.trace("crbm_trace.csv", exc.trace)
            raise
        writer.params("crbm.params", crbm_params)
        writer.trace("crbm_trace.csv", trace)

    with _stage("latents", writer):
        latent_report = crbm.extract_significant_latents(
            crbm_params,
            dataset,
            crbm_config.t_threshold,
            crbm_config.duplicate_cosine,
            crbm_config.cd_steps,
            config.seed,
        )
        matching = match_latents(latent_report, config.latents, crbm_config.t_threshold)
        writer.json("latents.json", _latents_payload(latent_report, matching))

    with _stage("two_stage", writer):
        initial = handoff_params(dataset, config, crbm_params, prefit.params, matching)
        two_stage = estimate_iclv(
            dataset,
            config.latents,
            config.measurements,
            initial,
            optimizer,
            utility_generic,
            config.model.n_draws,
            config.seed,
        )
        writer.params("two_stage.params", two_stage.params)

    baseline = None
    if config.pipeline.run_baseline:
        with _stage("baseline", writer):
            base = ICLVParams.build(catalog, config.latents, config.measurements, utility_generic)
            baseline = estimate_iclv(
                dataset,
                config.latents,
                config.measurements,
                cold_start(base, config.pipeline.cold_start_scale, config.seed),
                optimizer,
                utility_generic,
                config.model.n_draws,
                config.seed,
            )
            writer.params("iclv.params", baseline.params)

    columns = []
    if baseline is not None:
        columns.append(ModelColumn.from_result("ICLV", baseline, config.report.full))
    columns.append(ModelColumn.from_result("C-RBM", two_stage, config.report.full))
    report = ComparisonReport(title=config.report.title, columns=columns)
    return TwoStageResult(
        prefit, crbm_params, trace, latent_report, matching, initial, two_stage, baseline, report, writer.written
    )


def single_report(config: RunConfig, label: str, result: EstimationResult) -> ComparisonReport:
    return ComparisonReport(title=config.report.title, columns=[ModelColumn.from_result(label, result, config.report.full)])


def load_run_dataset(config: RunConfig) -> SurveyDataset:
    if not config.data.path:
        raise ConfigError("the configuration has no [data] path")
    return load_dataset(config.data.path, config.catalog)


def versions() -> Dict[str, str]:
    return {
        "latentchoice": __version__,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def write_manifest(writer: ArtifactWriter, command: str, config: RunConfig) -> None:
    """Config echo, seed, package versions and the artifact list."""
    if writer.out_dir is None:
        return
    payload = {
        "command": command,
        "seed": config.seed,
        "config": json.loads(config.model_dump_json()),
        "versions": versions(),
        "artifacts": sorted(writer.written) + ["manifest.json"],
    }
    writer.json("manifest.json", payload)


def run_two_stage(config: RunConfig, out_dir: Optional[str | Path] = None) -> TwoStageResult:
    """Load the configured dataset, run the pipeline and write every artifact."""
    dataset = load_run_dataset(config)
    writer = ArtifactWriter(out_dir)
    result = estimate_two_stage(dataset, config, writer)
    with _stage("report", writer):
        writer.report("report", result.report, config.report.formats)
        write_manifest(writer, "two-stage", config)
    result.artifacts = list(writer.written)
    return result


def run_generate(config: RunConfig, out_dir: Optional[str | Path] = None) -> SurveyDataset:
    """Draw a synthetic dataset from a random truth and save it with the truth."""
    synth = config.synth
    latents, measurements = config.latents, config.measurements
    if synth.model == "iclv" and not latents:
        latents, measurements = default_specs(config.catalog)
    truth = random_truth(
        synth.model,
        config.catalog,
        synth,
        latents,
        measurements,
        config.model.utility_generic,
        config.seed,
    )
    dataset = generate(truth)
    writer = ArtifactWriter(out_dir)
    writer.dataset("data.csv", dataset)
    writer.params("truth.params", truth.params)
    write_manifest(writer, "generate", config)
    return dataset


def run_train_crbm(config: RunConfig, out_dir: Optional[str | Path] = None) -> tuple[crbm.CRBMParams, crbm.LatentReport]:
    dataset = load_run_dataset(config)
    crbm_config = config.crbm_config()
    writer = ArtifactWriter(out_dir)
    init = crbm.CRBMParams.initial(
        dataset.catalog,
        crbm_config.n_latent,
        crbm_config.init_scale,
        crbm_config.seed,
        crbm_config.g_term,
        crbm_config.fixed_g_rows,
    )
    try:
        params, trace = crbm.train(dataset, init, crbm_config)
    except DivergenceError as exc:
        if exc.trace is not None:
            writer.trace("crbm_trace.csv", exc.trace)
        raise
    writer.params("crbm.params", params)
    writer.trace("crbm_trace.csv", trace)
    latent_report = crbm.extract_significant_latents(
        params, dataset, crbm_config.t_threshold, crbm_config.duplicate_cosine, crbm_config.cd_steps, config.seed
    )
    writer.json("latents.json", _latents_payload(latent_report, {}))
    write_manifest(writer, "train-crbm", config)
    return params, latent_report


def run_estimate_mnl(config: RunConfig, out_dir: Optional[str | Path] = None) -> EstimationResult:
    dataset = load_run_dataset(config)
    init = ChoiceModelParams.zeros(dataset.catalog, config.model.utility_generic)
    result = estimate(dataset, init, config.optimizer_config())
    writer = ArtifactWriter(out_dir)
    writer.params("mnl.params", result.params)
    report = single_report(config, "MNL", result)
    writer.report("report", report, config.report.formats)
    write_manifest(writer, "estimate-mnl", config)
    return result


def run_estimate_iclv(config: RunConfig, out_dir: Optional[str | Path] = None) -> EstimationResult:
    """Cold-start ICLV estimation of the configured model."""
    if not config.latents:
        raise ConfigError("ICLV estimation needs at least one configured latent")
    dataset = load_run_dataset(config)
    base = ICLVParams.build(dataset.catalog, config.latents, config.measurements, config.model.utility_generic)
    result = estimate_iclv(
        dataset,
        config.latents,
        config.measurements,
        cold_start(base, config.pipeline.cold_start_scale, config.seed),
        config.optimizer_config(),
        config.model.utility_generic,
        config.model.n_draws,
        config.seed,
    )
    writer = ArtifactWriter(out_dir)
    writer.params("iclv.params", result.params)
    report = single_report(config, "ICLV", result)
    writer.report("report", report, config.report.formats)
    write_manifest(writer, "estimate-iclv", config)
    return result


def run_validate(config: RunConfig) -> DiagnosticsReport:
    return validate(load_run_dataset(config))


def report_from_params(config: RunConfig, paths: List[str | Path], labels: Optional[List[str]] = None) -> ComparisonReport:
    """Re-evaluate saved MNL/ICLV parameter files on the configured dataset and tabulate them."""
    dataset = load_run_dataset(config)
    columns = []
    for idx, path in enumerate(paths):
        params = load_params(path)
        label = labels[idx] if labels and idx < len(labels) else Path(path).stem
        free = params.free_mask()
        if isinstance(params, ICLVParams):
            n_draws, seed = config.model.n_draws, config.seed
            final_ll = joint_log_likelihood(params, dataset, n_draws, seed)
            null_ll = joint_log_likelihood(params.with_vector(np.zeros(params.size)), dataset, n_draws, seed)

            def free_gradient(x: np.ndarray, params=params) -> np.ndarray:
                return joint_gradient(params.with_free_vector(x), dataset, n_draws, seed)[free]
        elif isinstance(params, ChoiceModelParams):
            final_ll = log_likelihood(params, dataset)
            null_ll = null_log_likelihood(dataset)

            def free_gradient(x: np.ndarray, params=params) -> np.ndarray:
                return gradient(params.with_free_vector(x), dataset)[free]
        else:
            raise ConfigError(f"{path}: only MNL and ICLV parameter files can be reported")
        stats, _ = hessian_statistics(params, free_gradient)
        result = EstimationResult(
            params,
            fit_statistics(null_ll, final_ll, params.n_free, dataset.n_obs),
            True,
            0,
            float("nan"),
            "evaluated",
            [final_ll],
            stats,
        )
        columns.append(ModelColumn.from_result(label, result, config.report.full))
    return ComparisonReport(title=config.report.title, columns=columns)
