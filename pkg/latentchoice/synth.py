"""Synthetic surveys with known ground truth.

:func:`generate` draws covariates, computes latents and utilities under a
generating model (MNL, ICLV or C-RBM), samples choices from the exact choice
probabilities and indicators from the measurement probabilities.  Everything
is driven by one ``numpy`` generator seeded from the truth, so a seed
reproduces a dataset bit for bit.  :func:`recovery_experiment` repeats
generate, estimate and compare over derived seeds and summarises bias, RMSE
and confidence-interval coverage per parameter.

Functions
---------
default_catalog(n_alternatives, n_generic, n_latent, indicators_per_latent) -> VariableCatalog
default_specs(catalog, n_latent) -> (latent specs, measurement specs)
random_truth(model, catalog, config, ...) -> GroundTruth
generate(truth) -> SurveyDataset
generate_with_latents(truth) -> (SurveyDataset, latent values)
recovery_experiment(truth, estimator, config) -> RecoveryReport
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field
from scipy.special import expit
from scipy.stats import norm

from .config import get_settings
from .data_model import IndicatorVariable, SurveyDataset, VariableCatalog
from .errors import ConfigError, LatentChoiceError
from .iclv import ICLVParams, MeasurementSpec, cold_start, estimate_iclv, joint_log_likelihood
from .inference import covariance_from_hessian, parameter_table
from .latent_fn import LatentSpec
from .mnl import ChoiceModelParams, estimate, log_likelihood, log_probabilities, utilities_matrix
from .optimize import OptimizerConfig
from .parameters import ParameterSet
from .services import crbm

logger = logging.getLogger(__name__)

ModelFamily = Literal["mnl", "iclv", "crbm"]

CASE_STUDY_ALTERNATIVES = ("train", "bus", "car", "plane", "car_rental", "train_hotel")
CASE_STUDY_ATTRIBUTES = ("cost", "duration", "reliability")
CASE_STUDY_LATENTS = ("environmental", "safety", "comfort")


class SynthConfig(BaseModel):
    """Covariate distribution and parameter scales of a synthetic truth."""

    model: ModelFamily = "iclv"
    n_obs: int = Field(5000, ge=1)
    # Bernoulli probability of every generic covariate
    generic_prob: float = Field(0.5, gt=0, lt=1)
    # Equicorrelation of the latent Gaussians behind the generic covariates
    correlation: float = Field(0.0, ge=0, lt=1)
    attribute_low: float = 0.0
    attribute_high: float = 1.0
    # Probability that a non-reference alternative is available
    availability_prob: float = Field(1.0, gt=0, le=1)
    # Share of rows without indicator responses
    indicator_missing: float = Field(0.0, ge=0, lt=1)
    asc_scale: float = Field(0.5, ge=0)
    attribute_scale: float = Field(1.0, ge=0)
    generic_scale: float = Field(0.5, ge=0)
    latent_scale: float = Field(1.0, ge=0)
    loading_scale: float = Field(1.0, ge=0)
    measurement_scale: float = Field(2.0, ge=0)
    # C-RBM truths
    n_latent: int = Field(2, ge=1)
    weight_scale: float = Field(1.0, ge=0)


@dataclass(frozen=True)
class GroundTruth:
    """A generating model with its parameters and covariate distribution."""

    model: ModelFamily
    params: ParameterSet
    catalog: VariableCatalog
    config: SynthConfig = field(default_factory=SynthConfig)
    n_obs: int = 5000
    seed: int = 0

    def __post_init__(self) -> None:
        expected = {"mnl": ChoiceModelParams, "iclv": ICLVParams, "crbm": crbm.CRBMParams}[self.model]
        if not isinstance(self.params, expected):
            raise ConfigError(f"'{self.model}' truth needs {expected.__name__}, got {type(self.params).__name__}")
        if self.model == "mnl" and isinstance(self.params, ICLVParams):
            raise ConfigError("an ICLV parameter set cannot generate an 'mnl' truth")


def default_catalog(
    n_alternatives: int = 6,
    n_generic: int = 12,
    n_latent: int = 3,
    indicators_per_latent: int = 4,
) -> VariableCatalog:
    """Catalog shaped after an intercity mode-choice survey.

    Each latent gets ``indicators_per_latent`` mode-specific indicators named
    ``<latent>_<alternative>`` (e.g. ``safety_plane``).
    """
    if not 2 <= n_alternatives <= len(CASE_STUDY_ALTERNATIVES):
        raise ConfigError(f"n_alternatives must be between 2 and {len(CASE_STUDY_ALTERNATIVES)}")
    alts = list(CASE_STUDY_ALTERNATIVES[:n_alternatives])
    latents = [CASE_STUDY_LATENTS[h] if h < len(CASE_STUDY_LATENTS) else f"latent{h + 1}" for h in range(n_latent)]
    indicators = [
        IndicatorVariable(name=f"{latent}_{alts[j % n_alternatives]}", alternative=alts[j % n_alternatives])
        for latent in latents
        for j in range(indicators_per_latent)
    ]
    return VariableCatalog(
        alternatives=alts,
        reference=alts[0],
        alt_specific_vars=list(CASE_STUDY_ATTRIBUTES),
        generic_vars=[f"x{m + 1}" for m in range(n_generic)],
        indicators=indicators,
    )


def default_specs(
    catalog: VariableCatalog,
    n_latent: int = 3,
    function: str = "sigmoid",
) -> Tuple[List[LatentSpec], List[MeasurementSpec]]:
    """Sigmoid latents over disjoint blocks of generic covariates.

    Indicators are assigned to the latent their name starts with.
    """
    generic = list(catalog.generic_vars)
    if n_latent > len(generic):
        raise ConfigError("need at least one generic covariate per latent")
    chunks = np.array_split(np.arange(len(generic)), n_latent)
    names = [CASE_STUDY_LATENTS[h] if h < len(CASE_STUDY_LATENTS) else f"latent{h + 1}" for h in range(n_latent)]
    latents = [
        LatentSpec(name=name, function=function, inputs=[generic[m] for m in chunk])
        for name, chunk in zip(names, chunks)
    ]
    measurements = [
        MeasurementSpec(indicator=ind.name, latent=name)
        for ind in catalog.indicators
        for name in names
        if ind.name.startswith(f"{name}_")
    ]
    return latents, measurements


def _randomize(params: ParameterSet, name: str, values: np.ndarray) -> ParameterSet:
    block = params[name]
    return params.with_block(name, np.where(block.fixed, block.values, values))


def random_truth(
    model: ModelFamily,
    catalog: VariableCatalog,
    config: Optional[SynthConfig] = None,
    latent_specs: Sequence[LatentSpec] = (),
    measurement_specs: Sequence[MeasurementSpec] = (),
    utility_generic: Sequence[str] = (),
    seed: int = 0,
) -> GroundTruth:
    """Draw a random parameter set of the requested family.

    Constants are ``Normal(0, asc_scale)``; attribute coefficients are
    negative with magnitude ``attribute_scale * U(0.5, 1.5)``; measurement
    loadings have magnitude ``measurement_scale * U(0.5, 1.5)`` and a random
    sign.  Fixed entries keep their value.
    """
    config = config or SynthConfig(model=model)
    rng = np.random.default_rng([seed, 1])
    n_alt = catalog.n_alternatives
    n_attr = len(catalog.alt_specific_vars)

    def choice_side(params: ParameterSet) -> ParameterSet:
        params = _randomize(params, "asc", rng.normal(0.0, config.asc_scale, n_alt))
        params = _randomize(params, "beta_attr", -config.attribute_scale * rng.uniform(0.5, 1.5, n_attr))
        shape = params.value("beta_generic").shape
        return _randomize(params, "beta_generic", rng.normal(0.0, config.generic_scale, shape))

    if model == "mnl":
        params = choice_side(ChoiceModelParams.zeros(catalog, utility_generic))
    elif model == "iclv":
        if not latent_specs:
            latent_specs, measurement_specs = default_specs(catalog)
        params = choice_side(ICLVParams.build(catalog, latent_specs, measurement_specs, utility_generic))
        shape = params.value("beta_latent").shape
        params = _randomize(params, "beta_latent", rng.normal(0.0, config.latent_scale, shape))
        params = _randomize(params, "struct_intercept", np.zeros(len(latent_specs)))
        n_load = params.value("struct_loadings").size
        params = _randomize(params, "struct_loadings", rng.normal(0.0, config.loading_scale, n_load))
        n_meas = len(measurement_specs)
        params = _randomize(params, "meas_intercept", rng.normal(0.0, 0.25, n_meas))
        magnitude = config.measurement_scale * rng.uniform(0.5, 1.5, n_meas)
        params = _randomize(params, "meas_loading", magnitude * rng.choice([-1.0, 1.0], n_meas))
    else:
        params = crbm.CRBMParams.initial(catalog, config.n_latent, config.weight_scale, seed=seed)
        params = _randomize(params, "c_alt", rng.normal(0.0, config.asc_scale, n_alt))
        params = _randomize(params, "c_lat", rng.normal(0.0, config.asc_scale, config.n_latent))
    return GroundTruth(model, params, catalog, config, config.n_obs, seed)


def _draw_generic(rng: np.random.Generator, catalog: VariableCatalog, config: SynthConfig, n: int) -> np.ndarray:
    m = len(catalog.generic_vars)
    threshold = norm.ppf(config.generic_prob)
    common = rng.standard_normal((n, 1))
    own = rng.standard_normal((n, m))
    z = np.sqrt(config.correlation) * common + np.sqrt(1.0 - config.correlation) * own
    generic = (z < threshold).astype(np.float64)
    # binned covariates are one-hot within their group
    for cat in catalog.categorized:
        cols = catalog.generic_index(cat.names)
        pick = rng.integers(0, len(cols), n)
        generic[:, cols] = 0.0
        generic[np.arange(n), np.asarray(cols)[pick]] = 1.0
    return generic


def _draw_availability(rng: np.random.Generator, catalog: VariableCatalog, config: SynthConfig, n: int) -> np.ndarray:
    avail = rng.random((n, catalog.n_alternatives)) < config.availability_prob
    avail[:, catalog.reference_index] = True
    avail[avail.sum(axis=1) < 2] = True
    return avail


def _sample_categorical(rng: np.random.Generator, prob: np.ndarray) -> np.ndarray:
    """One draw per row; zero-probability entries are never selected."""
    cum = np.cumsum(prob, axis=1)
    u = rng.random(prob.shape[0]) * cum[:, -1]
    return np.minimum((cum <= u[:, None]).sum(axis=1), prob.shape[1] - 1)


def generate_with_latents(truth: GroundTruth) -> Tuple[SurveyDataset, np.ndarray]:
    """Draw a dataset and return it with the latent values behind it.

    Latents are ``(n_obs, n_latent)``: structural values for ICLV truths,
    sampled binary states for C-RBM truths and an empty matrix for MNL.
    """
    catalog = truth.catalog
    config = truth.config
    n = truth.n_obs
    rng = np.random.default_rng(truth.seed)
    attributes = rng.uniform(
        config.attribute_low, config.attribute_high, (n, catalog.n_alternatives, len(catalog.alt_specific_vars))
    )
    generic = _draw_generic(rng, catalog, config, n)
    avail = _draw_availability(rng, catalog, config, n)
    first_available = np.argmax(avail, axis=1)
    indicators = np.full((n, len(catalog.indicators)), np.nan)
    base = SurveyDataset(catalog, attributes, generic, first_available, avail, indicators)
    params = truth.params

    if truth.model == "crbm":
        prob = crbm.choice_distribution(base, params)
        choice = _sample_categorical(rng, prob)
        dataset = SurveyDataset(catalog, attributes, generic, choice, avail, indicators)
        latents = (rng.random((n, params.n_latent)) < crbm.latent_posterior(dataset, params)).astype(np.float64)
        return dataset, latents

    generic_u = generic[:, list(params.generic_columns)]
    if truth.model == "iclv":
        draws = rng.standard_normal((n, len(params.latent_specs)))
        latents = params.latent_values(base, draws)
    else:
        latents = np.zeros((n, 0))
    utilities = utilities_matrix(params, attributes, generic_u, latents)
    choice = _sample_categorical(rng, np.exp(log_probabilities(utilities, avail)))

    if truth.model == "iclv" and params.measurement_specs:
        names = list(params.latent_names)
        lat = [names.index(m.latent) for m in params.measurement_specs]
        sign = np.array([m.sign for m in params.measurement_specs])
        eta = params.value("meas_intercept") + sign * params.value("meas_loading") * latents[:, lat]
        responses = (rng.random(eta.shape) < expit(eta)).astype(np.float64)
        missing = rng.random(n) < config.indicator_missing
        responses[missing] = np.nan
        for j, spec in enumerate(params.measurement_specs):
            indicators[:, catalog.indicator_index(spec.indicator)] = responses[:, j]
    return SurveyDataset(catalog, attributes, generic, choice, avail, indicators), latents


def generate(truth: GroundTruth) -> SurveyDataset:
    """Draw a synthetic dataset from ``truth``; same seed, same dataset."""
    dataset, _ = generate_with_latents(truth)
    logger.info(f"Generated {dataset.n_obs} rows from a {truth.model} truth (seed {truth.seed})")
    return dataset


Estimator = Literal["mnl", "iclv", "crbm", "two-stage"]


class RecoveryConfig(BaseModel):
    n_replications: int = Field(20, ge=1)
    # "truth" starts every fit at the generating values
    start: Literal["truth", "cold"] = "cold"
    cold_start_scale: float = Field(0.1, ge=0)
    confidence: float = Field(0.95, gt=0, lt=1)
    n_draws: int = Field(200, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    n_jobs: Optional[int] = None
    seed: int = 0


@dataclass
class Replication:
    seed: int
    failed: bool
    message: str
    converged: bool = False
    final_ll: float = float("nan")
    truth_ll: float = float("nan")
    baseline_ll: Optional[float] = None
    estimates: Optional[np.ndarray] = None
    std_errors: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ParameterRecovery:
    name: str
    truth: float
    mean: float
    bias: float
    rmse: float
    coverage: float


@dataclass
class RecoveryReport:
    estimator: Estimator
    parameters: List[ParameterRecovery]
    replications: List[Replication]

    @property
    def mean_coverage(self) -> float:
        values = [p.coverage for p in self.parameters if np.isfinite(p.coverage)]
        return float(np.mean(values)) if values else float("nan")

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.replications)

    def improvement_rate(self, tolerance: float = 1e-6) -> float:
        """Share of replications whose final LL is at least the baseline LL.

        Two fits ending at the same optimum count as a match: the comparison
        allows a relative slack of ``tolerance``.
        """
        pairs = [(r.final_ll, r.baseline_ll) for r in self.replications if not r.failed and r.baseline_ll is not None]
        if not pairs:
            return float("nan")
        return float(np.mean([final >= base - tolerance * max(1.0, abs(base)) for final, base in pairs]))


def _replicate(
    truth: GroundTruth,
    estimator: Estimator,
    config: RecoveryConfig,
    seed: int,
    run_config,
) -> Replication:
    truth_r = replace(truth, seed=seed)
    dataset = generate(truth_r)
    params = truth.params
    try:
        if estimator in ("mnl", "iclv"):
            init = params if config.start == "truth" else cold_start(params, config.cold_start_scale, seed)
            if estimator == "mnl":
                result = estimate(dataset, init, config.optimizer)
                truth_ll = log_likelihood(params, dataset)
            else:
                result = estimate_iclv(
                    dataset,
                    params.latent_specs,
                    params.measurement_specs,
                    init,
                    config.optimizer,
                    params.utility_generic,
                    config.n_draws,
                    seed,
                )
                truth_ll = joint_log_likelihood(params, dataset, config.n_draws, seed)
            stats = result.parameter_stats or []
            return Replication(
                seed,
                False,
                result.message,
                result.converged,
                result.statistics.final_ll,
                truth_ll,
                None,
                result.params.vector(),
                np.array([np.nan if s.std_err is None else s.std_err for s in stats]),
            )
        if estimator == "crbm":
            init = params if config.start == "truth" else crbm.CRBMParams.initial(
                truth.catalog, params.n_latent, config.cold_start_scale, seed, params.g_term
            )
            fitted = crbm.maximize_exact_log_likelihood(dataset, init)
            hessian = crbm.exact_hessian(dataset, fitted)
            cov, flagged = covariance_from_hessian(hessian)
            stats = parameter_table(fitted, cov, flagged)
            return Replication(
                seed,
                False,
                "converged",
                True,
                crbm.exact_log_likelihood(dataset, fitted),
                crbm.exact_log_likelihood(dataset, params),
                None,
                fitted.vector(),
                np.array([np.nan if s.std_err is None else s.std_err for s in stats]),
            )
        from .pipeline import estimate_two_stage

        if run_config is None:
            raise ConfigError("the two-stage estimator needs a run configuration")
        result = estimate_two_stage(dataset, run_config.model_copy(update={"seed": seed}))
        stats = result.two_stage.parameter_stats or []
        return Replication(
            seed,
            False,
            result.two_stage.message,
            result.two_stage.converged,
            result.two_stage.statistics.final_ll,
            float("nan"),
            None if result.baseline is None else result.baseline.statistics.final_ll,
            result.two_stage.params.vector(),
            np.array([np.nan if s.std_err is None else s.std_err for s in stats]),
        )
    except LatentChoiceError as exc:
        logger.warning(f"Replication with seed {seed} failed: {exc}")
        return Replication(seed, True, str(exc))


def recovery_experiment(
    truth: GroundTruth,
    estimator: Estimator,
    config: Optional[RecoveryConfig] = None,
    run_config=None,
) -> RecoveryReport:
    """Generate, estimate and compare over ``config.n_replications`` seeds.

    Replication seeds are derived from ``config.seed`` and run in parallel
    (``joblib``) with ``n_jobs`` workers.  Failed replications are recorded
    and excluded from the parameter summaries.  ``coverage`` is the share of
    replications whose confidence interval contains the true value; it is
    NaN for parameters of a truth the estimator does not share (two-stage
    fits a model with its own parameter layout only when ``run_config``
    mirrors the truth's specs).
    """
    config = config or RecoveryConfig()
    compatible = {"mnl": ("mnl",), "iclv": ("iclv", "two-stage"), "crbm": ("crbm",)}
    if estimator not in compatible[truth.model]:
        raise ConfigError(f"estimator '{estimator}' cannot fit a '{truth.model}' truth")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(config.seed).spawn(config.n_replications)]
    n_jobs = config.n_jobs or get_settings().n_jobs
    logger.info(f"Recovery experiment: {estimator} on {truth.model} truth, {len(seeds)} replications, n_jobs={n_jobs}")
    replications = Parallel(n_jobs=n_jobs)(
        delayed(_replicate)(truth, estimator, config, seed, run_config) for seed in seeds
    )

    truth_vec = truth.params.vector()
    free = truth.params.free_mask()
    labels = truth.params.labels()
    z = norm.ppf(0.5 + config.confidence / 2.0)
    ok = [r for r in replications if not r.failed and r.estimates is not None and r.estimates.shape == truth_vec.shape]
    parameters: List[ParameterRecovery] = []
    if ok:
        est = np.stack([r.estimates for r in ok])
        se = np.stack([r.std_errors for r in ok])
        for p in np.flatnonzero(free):
            err = est[:, p] - truth_vec[p]
            finite = np.isfinite(se[:, p])
            coverage = float(np.mean(np.abs(err[finite]) <= z * se[finite, p])) if finite.any() else float("nan")
            parameters.append(
                ParameterRecovery(
                    labels[p],
                    float(truth_vec[p]),
                    float(est[:, p].mean()),
                    float(err.mean()),
                    float(np.sqrt(np.mean(err ** 2))),
                    coverage,
                )
            )
    return RecoveryReport(estimator, parameters, list(replications))


def recovery_summary(report: RecoveryReport) -> Dict[str, float]:
    """Aggregate figures of a recovery report."""
    rmse = [p.rmse for p in report.parameters]
    return {
        "mean_coverage": report.mean_coverage,
        "mean_rmse": float(np.mean(rmse)) if rmse else float("nan"),
        "n_failed": float(report.n_failed),
        "improvement_rate": report.improvement_rate(),
    }
