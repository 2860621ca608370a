"""Multinomial-logit choice core.

Utilities are linear in parameters::

    V_ni = asc_i + sum_k beta_attr_k x_nik + sum_m beta_generic_im x_nm + sum_h beta_latent_ih x*_nh

with the alternative-specific attributes sharing one coefficient across
alternatives and the generic covariates and latents entering through
alternative-specific coefficients.  The reference alternative's constant,
generic and latent coefficients are fixed at zero.  Probabilities are a
softmax over the available alternatives only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .data_model import ObservationRow, SurveyDataset, VariableCatalog
from .errors import DimensionError, EstimationError
from .inference import ParameterStat, hessian_statistics
from .optimize import OptimizationResult, OptimizerConfig, maximize
from .parameters import Block, ParameterSet

logger = logging.getLogger(__name__)

CHOICE_BLOCKS = ("asc", "beta_attr", "beta_generic", "beta_latent")


def choice_blocks(
    catalog: VariableCatalog,
    utility_generic: Sequence[str] = (),
    latent_names: Sequence[str] = (),
) -> List[Block]:
    """Zero-valued choice-model blocks with the reference rows fixed."""
    alts = catalog.alternatives
    n_alt = len(alts)
    ref = catalog.reference_index
    ref_row = np.zeros(n_alt, dtype=bool)
    ref_row[ref] = True
    catalog.generic_index(utility_generic)
    asc = Block.build("asc", np.zeros(n_alt), [f"ASC_{a}" for a in alts], reference=ref_row)
    attr = Block.build("beta_attr", np.zeros(len(catalog.alt_specific_vars)), list(catalog.alt_specific_vars))
    mu = len(utility_generic)
    generic = Block.build(
        "beta_generic",
        np.zeros((n_alt, mu)),
        [f"{a}:{v}" for a in alts for v in utility_generic],
        reference=np.repeat(ref_row[:, None], mu, axis=1),
    )
    hl = len(latent_names)
    latent = Block.build(
        "beta_latent",
        np.zeros((n_alt, hl)),
        [f"{a}:{h}" for a in alts for h in latent_names],
        reference=np.repeat(ref_row[:, None], hl, axis=1),
    )
    return [asc, attr, generic, latent]


class ChoiceModelParams(ParameterSet):
    """MNL parameter set: ASCs, attribute, generic and latent coefficients."""

    kind = "mnl"

    def __init__(
        self,
        blocks,
        utility_generic: Sequence[str] = (),
        latent_names: Sequence[str] = (),
        generic_columns: Sequence[int] = (),
    ) -> None:
        super().__init__(blocks)
        self.utility_generic = tuple(utility_generic)
        self.latent_names = tuple(latent_names)
        # positions of utility_generic among the catalog's generic covariates
        self.generic_columns = tuple(generic_columns)

    @classmethod
    def zeros(
        cls,
        catalog: VariableCatalog,
        utility_generic: Sequence[str] = (),
        latent_names: Sequence[str] = (),
    ) -> "ChoiceModelParams":
        return cls(
            choice_blocks(catalog, utility_generic, latent_names),
            utility_generic,
            latent_names,
            catalog.generic_index(utility_generic),
        )

    def metadata(self) -> Dict[str, Any]:
        return {
            "utility_generic": list(self.utility_generic),
            "latent_names": list(self.latent_names),
            "generic_columns": list(self.generic_columns),
        }

    @classmethod
    def from_blocks(cls, blocks, metadata: Dict[str, Any]) -> "ChoiceModelParams":
        return cls(
            blocks,
            metadata.get("utility_generic", ()),
            metadata.get("latent_names", ()),
            metadata.get("generic_columns", ()),
        )

    @property
    def asc(self) -> np.ndarray:
        return self.value("asc")

    @property
    def beta_attr(self) -> np.ndarray:
        return self.value("beta_attr")

    @property
    def beta_generic(self) -> np.ndarray:
        return self.value("beta_generic")

    @property
    def beta_latent(self) -> np.ndarray:
        return self.value("beta_latent")


@dataclass(frozen=True)
class FitStatistics:
    """Likelihood-based fit statistics; see :func:`fit_statistics`."""

    null_ll: float
    final_ll: float
    rho_square: float
    aic: float
    bic: float
    n_params: int
    n_obs: int


def fit_statistics(null_ll: float, final_ll: float, n_params: int, n_obs: int) -> FitStatistics:
    """Compute rho-square, AIC and BIC.

    ``rho_square = 1 - final_ll / null_ll``, ``aic = 2k - 2 final_ll`` and
    ``bic = ln(n_obs) k - 2 final_ll`` with ``k`` the number of free
    parameters.
    """
    rho = 1.0 - final_ll / null_ll if null_ll != 0 else float("nan")
    aic = 2.0 * n_params - 2.0 * final_ll
    bic = math.log(n_obs) * n_params - 2.0 * final_ll if n_obs > 0 else float("nan")
    return FitStatistics(null_ll, final_ll, rho, aic, bic, int(n_params), int(n_obs))


@dataclass
class EstimationResult:
    """Outcome of a maximum-likelihood estimation.

    ``history[0]`` is the log-likelihood at the starting values.
    """

    params: ParameterSet
    statistics: FitStatistics
    converged: bool
    n_iterations: int
    gradient_norm: float
    message: str
    history: List[float] = field(default_factory=list)
    parameter_stats: Optional[List[ParameterStat]] = None

    def __iter__(self):
        # allows ``params, stats = estimate(...)``
        return iter((self.params, self.statistics))


def _check_latents(params: ParameterSet, n_obs: int, latents: Optional[np.ndarray]) -> np.ndarray:
    width = params.value("beta_latent").shape[1]
    if latents is None:
        if width:
            raise DimensionError(f"model has {width} latent coefficient column(s) but no latents were given")
        return np.zeros((n_obs, 0))
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim == 1:
        latents = latents[None, :]
    if latents.shape != (n_obs, width):
        raise DimensionError(f"latents have shape {latents.shape}, expected {(n_obs, width)}")
    return latents


def _generic_block(params: ParameterSet, dataset: SurveyDataset) -> np.ndarray:
    names = getattr(params, "utility_generic", ())
    return dataset.generic[:, dataset.catalog.generic_index(names)]


def utilities_matrix(
    params: ParameterSet,
    attributes: np.ndarray,
    generic: np.ndarray,
    latents: np.ndarray,
) -> np.ndarray:
    """``(n_obs, n_alt)`` systematic utilities for already-selected covariates."""
    asc = params.value("asc")
    beta_attr = params.value("beta_attr")
    beta_generic = params.value("beta_generic")
    beta_latent = params.value("beta_latent")
    if attributes.shape[1:] != (asc.size, beta_attr.size):
        raise DimensionError(f"attributes shape {attributes.shape[1:]} does not match parameters")
    if generic.shape[1] != beta_generic.shape[1] or latents.shape[1] != beta_latent.shape[1]:
        raise DimensionError("covariate or latent width does not match parameters")
    return (
        asc[None, :]
        + np.einsum("nik,k->ni", attributes, beta_attr)
        + generic @ beta_generic.T
        + latents @ beta_latent.T
    )


def log_probabilities(utilities: np.ndarray, availability: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over available alternatives (-inf elsewhere)."""
    availability = np.asarray(availability, dtype=bool)
    if not np.all(availability.any(axis=-1)):
        raise DimensionError("every observation needs at least one available alternative")
    masked = np.where(availability, utilities, -np.inf)
    return masked - logsumexp(masked, axis=-1, keepdims=True)


def utility(params: ParameterSet, row: ObservationRow, latent: Optional[Sequence[float]] = None) -> np.ndarray:
    """Systematic utility of every alternative for a single observation.

    ``row.generic`` is the full covariate vector of the catalog; the columns
    entering utilities are those recorded in ``params.generic_columns``.
    """
    width = params.value("beta_latent").shape[1]
    latent_vec = np.zeros(0) if latent is None else np.asarray(latent, dtype=np.float64)
    if latent_vec.size != width:
        raise DimensionError(f"latent vector has length {latent_vec.size}, expected {width}")
    columns = list(getattr(params, "generic_columns", ()))
    generic = np.asarray(row.generic, dtype=np.float64)[columns]
    return utilities_matrix(
        params,
        np.asarray(row.alt_attributes, dtype=np.float64)[None],
        generic[None],
        latent_vec[None],
    )[0]


def choice_probabilities(utilities: Sequence[float], availability: Sequence[int]) -> np.ndarray:
    """Logit probabilities over the available alternatives.

    Unavailable alternatives get probability exactly 0; the computation
    subtracts the maximum available utility, so utilities of any finite
    magnitude are safe.

    Raises
    ------
    DimensionError
        If no alternative is available or lengths disagree.
    """
    v = np.asarray(utilities, dtype=np.float64)
    av = np.asarray(availability).astype(bool)
    if v.shape != av.shape:
        raise DimensionError("utilities and availability differ in length")
    if not av.any():
        raise DimensionError("no alternative is available")
    return np.exp(log_probabilities(v, av))


def _row_log_likelihood(params: ParameterSet, dataset: SurveyDataset, latents: np.ndarray) -> np.ndarray:
    v = utilities_matrix(params, dataset.alt_attributes, _generic_block(params, dataset), latents)
    logp = log_probabilities(v, dataset.availability)
    return logp[np.arange(dataset.n_obs), dataset.choice]


def log_likelihood(params: ParameterSet, dataset: SurveyDataset, latents: Optional[np.ndarray] = None) -> float:
    """Sum over rows of the log-probability of the chosen alternative."""
    latents = _check_latents(params, dataset.n_obs, latents)
    return float(np.sum(_row_log_likelihood(params, dataset, latents)))


def null_log_likelihood(dataset: SurveyDataset) -> float:
    """Log-likelihood at zero parameters: ``sum_n ln(1 / |available_n|)``."""
    return float(-np.sum(np.log(dataset.availability.sum(axis=1))))


def choice_score(
    params: ParameterSet,
    dataset: SurveyDataset,
    latents: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> tuple[dict, np.ndarray]:
    """Block gradients of the choice log-likelihood and the residuals.

    Returns a mapping block name -> gradient array, and the
    ``(n_obs, n_alt)`` residual matrix ``onehot - P`` (unweighted) that
    callers chain through latent structural equations.
    """
    generic = _generic_block(params, dataset)
    v = utilities_matrix(params, dataset.alt_attributes, generic, latents)
    prob = np.exp(log_probabilities(v, dataset.availability))
    resid = dataset.choice_onehot() - prob
    w_resid = resid if weights is None else resid * weights[:, None]
    grads = {
        "asc": w_resid.sum(axis=0),
        "beta_attr": np.einsum("ni,nik->k", w_resid, dataset.alt_attributes),
        "beta_generic": w_resid.T @ generic,
        "beta_latent": w_resid.T @ latents,
    }
    return grads, resid


def _assemble(params: ParameterSet, grads: dict) -> np.ndarray:
    parts = [np.asarray(grads.get(name, np.zeros(block.values.shape))).ravel() for name, block in params.items()]
    full = np.concatenate(parts) if parts else np.zeros(0)
    return params.zero_fixed(full)


def gradient(params: ParameterSet, dataset: SurveyDataset, latents: Optional[np.ndarray] = None) -> np.ndarray:
    """Analytic gradient of :func:`log_likelihood`, fixed entries zeroed."""
    latents = _check_latents(params, dataset.n_obs, latents)
    grads, _ = choice_score(params, dataset, latents)
    return _assemble(params, grads)


def std_errors_and_ttests(
    params: ParameterSet,
    dataset: SurveyDataset,
    latents: Optional[np.ndarray] = None,
) -> List[ParameterStat]:
    """Standard errors from the numerical Hessian of the log-likelihood."""
    latents = _check_latents(params, dataset.n_obs, latents)
    free = params.free_mask()

    def free_gradient(x: np.ndarray) -> np.ndarray:
        candidate = params.with_free_vector(x)
        return gradient(candidate, dataset, latents)[free]

    stats, _ = hessian_statistics(params, free_gradient)
    return stats


def estimate(
    dataset: SurveyDataset,
    init: ParameterSet,
    optimizer_config: Optional[OptimizerConfig] = None,
    latents: Optional[np.ndarray] = None,
    with_std_errors: bool = True,
) -> EstimationResult:
    """Maximum-likelihood estimation of an MNL model.

    Parameters
    ----------
    dataset: SurveyDataset
    init: ChoiceModelParams
        Starting values; fixed entries keep their values throughout.
    optimizer_config: OptimizerConfig
    latents: np.ndarray, optional
        ``(n_obs, n_latent)`` latent values entering utilities.
    with_std_errors: bool
        Also compute Hessian-based standard errors and t-tests.

    Returns
    -------
    EstimationResult
        Unpacks as ``(params, statistics)``.
    """
    latents = _check_latents(init, dataset.n_obs, latents)
    if dataset.n_obs == 0:
        raise EstimationError("cannot estimate on an empty dataset")
    free = init.free_mask()

    def objective(x: np.ndarray):
        candidate = init.with_free_vector(x)
        return log_likelihood(candidate, dataset, latents), gradient(candidate, dataset, latents)[free]

    def batch_objective(x: np.ndarray, idx: np.ndarray):
        candidate = init.with_free_vector(x)
        sub = dataset.subset(idx)
        return log_likelihood(candidate, sub, latents[idx]), gradient(candidate, sub, latents[idx])[free]

    result: OptimizationResult = maximize(
        objective, init.free_vector(), optimizer_config, batch_objective, dataset.n_obs
    )
    params = init.with_free_vector(result.x)
    stats = fit_statistics(null_log_likelihood(dataset), result.value, params.n_free, dataset.n_obs)
    if not result.converged:
        logger.warning(f"MNL estimation did not converge: {result.message}")
    parameter_stats = std_errors_and_ttests(params, dataset, latents) if with_std_errors else None
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
