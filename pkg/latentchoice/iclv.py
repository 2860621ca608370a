"""Integrated choice and latent variable (ICLV) estimation.

Three components are estimated simultaneously:

* structural equations ``x*_h = f_h(intercept_h + loadings_h . x)``
  (:mod:`latentchoice.latent_fn`),
* the MNL choice model with the latents in the utilities
  (:mod:`latentchoice.mnl`),
* a binary-logit measurement model per indicator,
  ``P(I_j = 1 | x*) = sigmoid(alpha_j + s_j beta_j x*_h)`` where ``s_j = -1``
  when the loading enters negated (the default, ``I_j = f(-beta x*)``).

The indicator term is the Bernoulli cross-entropy with probabilities
clamped to ``[1e-12, 1 - 1e-12]``.  With deterministic latents the joint
likelihood is evaluated in closed form; when any latent has
``noise_std > 0`` it is a simulated likelihood averaged over a fixed set of
seeded standard-normal draws.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import expit, logsumexp

from .data_model import SurveyDataset, VariableCatalog
from .errors import ConfigError, DimensionError, EstimationError
from .inference import hessian_statistics
from .latent_fn import LatentSpec, apply_function, latent_derivative, noise_draws
from .mnl import ChoiceModelParams, EstimationResult, choice_blocks, fit_statistics, log_probabilities, utilities_matrix
from .optimize import OptimizerConfig, maximize
from .parameters import Block

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12


class MeasurementSpec(BaseModel):
    """One indicator of one latent variable."""

    model_config = ConfigDict(frozen=True)

    indicator: str
    latent: str
    loading: float = 0.0
    intercept: float = 0.0
    # I_j = f(-beta x*): the loading enters with a minus sign
    negate: bool = True
    estimate_intercept: bool = True
    # false pins the loading at its configured value, fixing the latent scale
    estimate_loading: bool = True
    link: Literal["logit"] = "logit"

    @property
    def sign(self) -> float:
        return -1.0 if self.negate else 1.0


def measurement_prob(loading: float, latent_value: float, intercept: float = 0.0) -> float:
    """Binary-logit probability that the indicator equals 1.

    ``e^(a) / (e^(a) + e^0)`` with ``a = intercept + loading * latent_value``.
    """
    return float(expit(intercept + loading * latent_value))


def _bernoulli_terms(indicators: np.ndarray, prob: np.ndarray) -> np.ndarray:
    p = np.clip(prob, PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
    observed = ~np.isnan(indicators)
    ind = np.nan_to_num(indicators)
    return np.where(observed, ind * np.log(p) + (1.0 - ind) * np.log1p(-p), 0.0)


def indicator_cross_entropy(
    indicators: Sequence[float],
    latent_values: Mapping[str, float],
    specs: Sequence[MeasurementSpec],
) -> float:
    """Bernoulli log-likelihood of a respondent's indicators.

    ``indicators[j]`` is the response to ``specs[j]``; NaN entries (not
    collected) contribute nothing.  Indicators are conditionally independent
    given the latents, so the result is a plain sum over ``j``.
    """
    values = np.asarray(indicators, dtype=np.float64)
    if values.shape != (len(specs),):
        raise DimensionError(f"{values.size} indicator values for {len(specs)} measurement specs")
    prob = np.array(
        [measurement_prob(s.sign * s.loading, latent_values[s.latent], s.intercept) for s in specs]
    )
    return float(np.sum(_bernoulli_terms(values, prob)))


class ICLVParams(ChoiceModelParams):
    """Choice, structural and measurement parameters of an ICLV model."""

    kind = "iclv"

    def __init__(
        self,
        blocks,
        latent_specs: Sequence[LatentSpec],
        measurement_specs: Sequence[MeasurementSpec],
        utility_generic: Sequence[str] = (),
        generic_columns: Sequence[int] = (),
    ) -> None:
        super().__init__(blocks, utility_generic, [s.name for s in latent_specs], generic_columns)
        self.latent_specs = tuple(latent_specs)
        self.measurement_specs = tuple(measurement_specs)
        sizes = [len(s.inputs) for s in latent_specs]
        self.loading_offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(sizes)]))

    @classmethod
    def build(
        cls,
        catalog: VariableCatalog,
        latent_specs: Sequence[LatentSpec],
        measurement_specs: Sequence[MeasurementSpec] = (),
        utility_generic: Sequence[str] = (),
        choice: Optional[ChoiceModelParams] = None,
    ) -> "ICLVParams":
        """Assemble parameters from specs.

        Structural and measurement values come from the specs; choice
        coefficients from ``choice`` when given (its latent columns must match
        ``latent_specs``), zeros otherwise.
        """
        names = [s.name for s in latent_specs]
        if len(set(names)) != len(names):
            raise ConfigError("latent names must be unique")
        for spec in latent_specs:
            catalog.generic_index(spec.inputs)
        for m in measurement_specs:
            if m.latent not in names:
                raise ConfigError(f"indicator '{m.indicator}' loads on unknown latent '{m.latent}'")
            catalog.indicator_index(m.indicator)
        blocks = choice_blocks(catalog, utility_generic, names)
        if choice is not None:
            blocks = [
                Block.build(b.name, choice.value(b.name), b.labels, choice[b.name].fixed, b.reference)
                for b in blocks
            ]
        blocks.append(
            Block.build(
                "struct_intercept",
                [s.intercept for s in latent_specs],
                [f"{s.name}:intercept" for s in latent_specs],
                [s.fix_intercept for s in latent_specs],
            )
        )
        blocks.append(
            Block.build(
                "struct_loadings",
                [b for s in latent_specs for b in s.loadings],
                [f"{s.name}:{v}" for s in latent_specs for v in s.inputs],
            )
        )
        blocks.append(
            Block.build(
                "meas_intercept",
                [m.intercept for m in measurement_specs],
                [f"{m.indicator}:intercept" for m in measurement_specs],
                fixed=[not m.estimate_intercept for m in measurement_specs],
            )
        )
        blocks.append(
            Block.build(
                "meas_loading",
                [m.loading for m in measurement_specs],
                [f"{m.indicator}:{m.latent}" for m in measurement_specs],
                fixed=[not m.estimate_loading for m in measurement_specs],
            )
        )
        return cls(blocks, latent_specs, measurement_specs, utility_generic, catalog.generic_index(utility_generic))

    def metadata(self) -> Dict[str, Any]:
        return {
            "utility_generic": list(self.utility_generic),
            "generic_columns": list(self.generic_columns),
            "latent_specs": [s.model_dump() for s in self.latent_specs],
            "measurement_specs": [m.model_dump() for m in self.measurement_specs],
        }

    @classmethod
    def from_blocks(cls, blocks, metadata: Dict[str, Any]) -> "ICLVParams":
        return cls(
            blocks,
            [LatentSpec.model_validate(s) for s in metadata.get("latent_specs", [])],
            [MeasurementSpec.model_validate(m) for m in metadata.get("measurement_specs", [])],
            metadata.get("utility_generic", ()),
            metadata.get("generic_columns", ()),
        )

    def structural_loadings(self, h: int) -> np.ndarray:
        lo, hi = self.loading_offsets[h], self.loading_offsets[h + 1]
        return self.value("struct_loadings")[lo:hi]

    def choice_params(self) -> ChoiceModelParams:
        blocks = [self[name] for name in ("asc", "beta_attr", "beta_generic", "beta_latent")]
        return ChoiceModelParams(blocks, self.utility_generic, self.latent_names, self.generic_columns)

    def to_specs(self) -> Tuple[List[LatentSpec], List[MeasurementSpec]]:
        """Latent and measurement specs carrying the current values."""
        intercepts = self.value("struct_intercept")
        latents = [
            spec.model_copy(update={"intercept": float(intercepts[h]), "loadings": [float(v) for v in self.structural_loadings(h)]})
            for h, spec in enumerate(self.latent_specs)
        ]
        m_int = self.value("meas_intercept")
        m_load = self.value("meas_loading")
        measurements = [
            spec.model_copy(update={"intercept": float(m_int[j]), "loading": float(m_load[j])})
            for j, spec in enumerate(self.measurement_specs)
        ]
        return latents, measurements

    def latent_values(self, dataset: SurveyDataset, draws: Optional[np.ndarray] = None) -> np.ndarray:
        """``(n_obs, n_latent)`` latent values; ``draws`` is ``(n_obs, n_latent)`` standard normals."""
        z = self._linear_index(dataset)
        if draws is not None:
            z = z + draws * self._noise()[None, :]
        return self._apply(z)

    def _linear_index(self, dataset: SurveyDataset) -> np.ndarray:
        n = dataset.n_obs
        z = np.empty((n, len(self.latent_specs)))
        intercepts = self.value("struct_intercept")
        for h, spec in enumerate(self.latent_specs):
            cols = dataset.catalog.generic_index(spec.inputs)
            z[:, h] = intercepts[h] + dataset.generic[:, cols] @ self.structural_loadings(h)
        return z

    def _noise(self) -> np.ndarray:
        return np.array([s.noise_std for s in self.latent_specs], dtype=np.float64)

    def _apply(self, z: np.ndarray) -> np.ndarray:
        out = np.empty_like(z)
        for h, spec in enumerate(self.latent_specs):
            out[:, h] = apply_function(spec.function, z[:, h])
        return out

    def _derivative(self, z: np.ndarray) -> np.ndarray:
        out = np.empty_like(z)
        for h, spec in enumerate(self.latent_specs):
            out[:, h] = latent_derivative(spec.function, z[:, h])
        return out


def simulation_draws(params: ICLVParams, n_obs: int, n_draws: int = 200, seed: int = 0) -> np.ndarray:
    """``(n_draws, n_obs, n_latent)`` standard normals; a single zero draw when all latents are deterministic."""
    h = len(params.latent_specs)
    if not np.any(params._noise() > 0):
        return np.zeros((1, n_obs, h))
    out = np.empty((n_draws, n_obs, h))
    for k in range(h):
        out[:, :, k] = noise_draws(seed, k, n_obs, n_draws)
    return out


@dataclass
class _MeasurementLayout:
    columns: np.ndarray
    latent: np.ndarray
    sign: np.ndarray


def _layout(params: ICLVParams, catalog: VariableCatalog) -> _MeasurementLayout:
    names = list(params.latent_names)
    specs = params.measurement_specs
    return _MeasurementLayout(
        np.array([catalog.indicator_index(m.indicator) for m in specs], dtype=np.int64),
        np.array([names.index(m.latent) for m in specs], dtype=np.int64),
        np.array([m.sign for m in specs], dtype=np.float64),
    )


def _evaluate(
    params: ICLVParams,
    dataset: SurveyDataset,
    draws: np.ndarray,
    with_gradient: bool,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    n = dataset.n_obs
    n_draws = draws.shape[0]
    layout = _layout(params, dataset.catalog)
    attributes = dataset.alt_attributes
    generic_u = dataset.generic[:, list(params.generic_columns)]
    rows = np.arange(n)
    indicators = dataset.indicators[:, layout.columns]
    observed = ~np.isnan(indicators)
    ind = np.nan_to_num(indicators)
    m_int = params.value("meas_intercept")
    slope = params.value("meas_loading") * layout.sign
    noise = params._noise()
    base = params._linear_index(dataset)

    ell = np.empty((n_draws, n))
    cache = []
    for r in range(n_draws):
        z = base + draws[r] * noise[None, :]
        xs = params._apply(z)
        v = utilities_matrix(params, attributes, generic_u, xs)
        logp = log_probabilities(v, dataset.availability)
        prob_ind = expit(m_int[None, :] + slope[None, :] * xs[:, layout.latent])
        ell[r] = logp[rows, dataset.choice] + _bernoulli_terms(indicators, prob_ind).sum(axis=1)
        if with_gradient:
            cache.append((z, xs, np.exp(logp), prob_ind))

    if n_draws == 1:
        row_ll = ell[0]
        weights = np.ones((1, n))
    else:
        lse = logsumexp(ell, axis=0)
        row_ll = lse - np.log(n_draws)
        weights = np.exp(ell - lse[None, :])
    if not with_gradient:
        return row_ll, None

    grads: Dict[str, np.ndarray] = {name: np.zeros(block.values.shape) for name, block in params.items()}
    beta_latent = params.value("beta_latent")
    onehot = dataset.choice_onehot()
    for r, (z, xs, prob, prob_ind) in enumerate(cache):
        w = weights[r][:, None]
        resid = onehot - prob
        w_resid = resid * w
        grads["asc"] += w_resid.sum(axis=0)
        grads["beta_attr"] += np.einsum("ni,nik->k", w_resid, attributes)
        grads["beta_generic"] += w_resid.T @ generic_u
        grads["beta_latent"] += w_resid.T @ xs
        dm = np.where(observed, ind - prob_ind, 0.0) * w
        grads["meas_intercept"] += dm.sum(axis=0)
        grads["meas_loading"] += layout.sign * (dm * xs[:, layout.latent]).sum(axis=0)
        dxs = w_resid @ beta_latent
        np.add.at(dxs.T, layout.latent, (dm * slope[None, :]).T)
        dz = dxs * params._derivative(z)
        grads["struct_intercept"] += dz.sum(axis=0)
        for h, spec in enumerate(params.latent_specs):
            cols = dataset.catalog.generic_index(spec.inputs)
            lo, hi = params.loading_offsets[h], params.loading_offsets[h + 1]
            grads["struct_loadings"][lo:hi] += dataset.generic[:, cols].T @ dz[:, h]
    full = np.concatenate([grads[name].ravel() for name in params])
    return row_ll, params.zero_fixed(full)


def joint_log_likelihood(
    params: ICLVParams,
    dataset: SurveyDataset,
    n_draws: int = 200,
    seed: int = 0,
) -> float:
    """Joint log-likelihood of choices and indicators.

    Rows without indicators contribute the choice term only.  With
    deterministic latents this equals the MNL log-likelihood evaluated at the
    structural latent values plus the indicator cross-entropy.
    """
    draws = simulation_draws(params, dataset.n_obs, n_draws, seed)
    row_ll, _ = _evaluate(params, dataset, draws, with_gradient=False)
    return float(np.sum(row_ll))


def joint_gradient(
    params: ICLVParams,
    dataset: SurveyDataset,
    n_draws: int = 200,
    seed: int = 0,
) -> np.ndarray:
    """Analytic gradient of :func:`joint_log_likelihood` over all blocks."""
    draws = simulation_draws(params, dataset.n_obs, n_draws, seed)
    _, grad = _evaluate(params, dataset, draws, with_gradient=True)
    return grad


def estimate_iclv(
    dataset: SurveyDataset,
    latent_specs: Sequence[LatentSpec],
    measurement_specs: Sequence[MeasurementSpec],
    init: Optional[ICLVParams] = None,
    optimizer_config: Optional[OptimizerConfig] = None,
    utility_generic: Sequence[str] = (),
    n_draws: int = 200,
    seed: int = 0,
    with_std_errors: bool = True,
) -> EstimationResult:
    """Simultaneous maximum-likelihood estimation of an ICLV model.

    Parameters
    ----------
    dataset: SurveyDataset
    latent_specs, measurement_specs:
        Model structure; their numeric values are the starting point when
        ``init`` is not given.
    init: ICLVParams, optional
        Full starting parameter set (takes precedence over spec values).
    optimizer_config: OptimizerConfig
    utility_generic: Sequence[str]
        Generic covariates entering utilities directly.
    n_draws, seed:
        Simulation settings, used only when a latent has ``noise_std > 0``.

    Returns
    -------
    EstimationResult
        ``statistics.null_ll`` is the joint log-likelihood at all-zero
        parameters; ``parameter_stats`` holds Hessian-based inference.
    """
    if dataset.n_obs == 0:
        raise EstimationError("cannot estimate on an empty dataset")
    if init is None:
        init = ICLVParams.build(dataset.catalog, latent_specs, measurement_specs, utility_generic)
    draws = simulation_draws(init, dataset.n_obs, n_draws, seed)
    free = init.free_mask()

    def objective(x: np.ndarray):
        candidate = init.with_free_vector(x)
        row_ll, grad = _evaluate(candidate, dataset, draws, with_gradient=True)
        return float(np.sum(row_ll)), grad[free]

    def batch_objective(x: np.ndarray, idx: np.ndarray):
        candidate = init.with_free_vector(x)
        row_ll, grad = _evaluate(candidate, dataset.subset(idx), draws[:, idx], with_gradient=True)
        return float(np.sum(row_ll)), grad[free]

    logger.info(f"Estimating ICLV model: {init.n_free} free parameters, {dataset.n_obs} rows, {draws.shape[0]} draw(s)")
    result = maximize(objective, init.free_vector(), optimizer_config, batch_objective, dataset.n_obs)
    params = init.with_free_vector(result.x)

    zero = init.with_vector(np.zeros(init.size))
    null_ll = float(np.sum(_evaluate(zero, dataset, draws, with_gradient=False)[0]))
    stats = fit_statistics(null_ll, result.value, params.n_free, dataset.n_obs)
    if not result.converged:
        logger.warning(f"ICLV estimation did not converge: {result.message}")

    parameter_stats = None
    if with_std_errors:
        def free_gradient(x: np.ndarray) -> np.ndarray:
            return _evaluate(params.with_free_vector(x), dataset, draws, with_gradient=True)[1][free]

        parameter_stats, _ = hessian_statistics(params, free_gradient)
    return EstimationResult(
        params,
        stats,
        result.converged,
        result.n_iterations,
        result.gradient_norm,
        result.message,
        result.history,
        parameter_stats,
    )


COLD_START_BLOCKS = ("beta_latent", "struct_intercept", "struct_loadings", "meas_intercept", "meas_loading")


def cold_start(params: ChoiceModelParams, scale: float = 0.1, seed: int = 0) -> ChoiceModelParams:
    """Zero free parameters, then seeded ``Normal(0, scale)`` on the latent-side blocks.

    An exact zero start is a saddle point of the joint likelihood: with the
    latent coefficients and measurement loadings all zero no gradient flows
    into the structural equations.
    """
    rng = np.random.default_rng([seed, 2])
    start = params.with_vector(np.where(params.free_mask(), 0.0, params.vector()))
    for name in COLD_START_BLOCKS:
        if name in start:
            block = start[name]
            noise = rng.normal(0.0, scale, block.values.shape)
            start = start.with_block(name, np.where(block.fixed, block.values, noise))
    return start
