"""Structural functions mapping covariates to latent variables.

A latent value is ``f(z)`` with ``z = intercept + loadings . x_inputs + noise``
and ``f`` one of four non-decreasing families:

======== ===========================
linear   ``z``
sigmoid  ``1 / (1 + exp(-z))``, in (0, 1)
relu     ``max(0, z)``
softplus ``ln(1 + exp(z))``
======== ===========================

Regret-style latents are expressed by feeding differenced covariates as
inputs; no extra family is needed.  Noise is Gaussian with standard deviation
``noise_std`` (0 gives a deterministic latent).
"""

from __future__ import annotations

from typing import List, Literal, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from .data_model import SurveyDataset
from .errors import DimensionError

LatentFunction = Literal["linear", "sigmoid", "relu", "softplus"]


class LatentSpec(BaseModel):
    """Declaration of one latent variable and its structural equation."""

    model_config = ConfigDict(frozen=True)

    name: str
    function: LatentFunction = "sigmoid"
    inputs: List[str] = Field(min_length=1)
    loadings: List[float] = Field(default_factory=list)
    intercept: float = 0.0
    # hold the intercept at its configured value during estimation
    fix_intercept: bool = False
    noise_std: float = Field(0.0, ge=0.0)

    @model_validator(mode="before")
    @classmethod
    def _default_loadings(cls, data):
        if isinstance(data, dict) and not data.get("loadings") and data.get("inputs"):
            data = {**data, "loadings": [0.0] * len(data["inputs"])}
        return data

    @model_validator(mode="after")
    def _check_loadings(self) -> "LatentSpec":
        if len(self.loadings) != len(self.inputs):
            raise ValueError(f"latent '{self.name}': {len(self.inputs)} inputs but {len(self.loadings)} loadings")
        if len(set(self.inputs)) != len(self.inputs):
            raise ValueError(f"latent '{self.name}': duplicate inputs")
        return self


def apply_function(function: LatentFunction, z: np.ndarray) -> np.ndarray:
    """Evaluate a latent family on ``z`` without overflow for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    if function == "linear":
        return z.copy()
    if function == "sigmoid":
        return expit(z)
    if function == "relu":
        return np.maximum(z, 0.0)
    if function == "softplus":
        return np.logaddexp(0.0, z)
    raise ValueError(f"unknown latent function '{function}'")


def latent_derivative(function: LatentFunction, z: np.ndarray) -> np.ndarray:
    """Derivative ``f'(z)``; relu uses the subgradient 0 at ``z = 0``."""
    z = np.asarray(z, dtype=np.float64)
    if function == "linear":
        return np.ones_like(z)
    if function == "sigmoid":
        s = expit(z)
        return s * (1.0 - s)
    if function == "relu":
        return (z > 0.0).astype(np.float64)
    if function == "softplus":
        return expit(z)
    raise ValueError(f"unknown latent function '{function}'")


def eval_latent(spec: LatentSpec, generic: Mapping[str, float], noise_draw: Optional[float] = None) -> float:
    """Latent value of one respondent.

    Parameters
    ----------
    spec: LatentSpec
    generic: Mapping[str, float]
        Covariate values by name; must cover ``spec.inputs``.
    noise_draw: float, optional
        Standard-normal draw scaled by ``spec.noise_std``; ignored when
        ``noise_std`` is 0.
    """
    missing = [name for name in spec.inputs if name not in generic]
    if missing:
        raise DimensionError(f"latent '{spec.name}' is missing inputs {missing}")
    z = spec.intercept + sum(b * float(generic[name]) for b, name in zip(spec.loadings, spec.inputs))
    if noise_draw is not None and spec.noise_std > 0:
        z += spec.noise_std * float(noise_draw)
    return float(apply_function(spec.function, np.array(z)))


def noise_draws(seed: int, latent_index: int, n_obs: int, n_draws: int = 1) -> np.ndarray:
    """Standard-normal draws of shape ``(n_draws, n_obs)``.

    The stream is keyed by ``(seed, latent_index)`` and consumed row-major, so
    the draw of a given row depends only on the seed, the latent and its
    position, not on how many rows follow it.
    """
    rng = np.random.default_rng([seed, latent_index])
    return rng.standard_normal((n_obs, n_draws)).T


def linear_index(spec: LatentSpec, generic: np.ndarray, columns: Sequence[int]) -> np.ndarray:
    """``intercept + X[:, columns] @ loadings`` for a covariate matrix."""
    return spec.intercept + generic[:, list(columns)] @ np.asarray(spec.loadings, dtype=np.float64)


def eval_latent_batch(spec: LatentSpec, dataset: SurveyDataset, seed: int = 0) -> np.ndarray:
    """Latent value of every row of ``dataset``.

    With ``noise_std > 0`` the noise for row ``n`` is the ``n``-th draw of a
    generator seeded by ``seed``, so reruns are bit-identical.
    """
    columns = dataset.catalog.generic_index(spec.inputs)
    z = linear_index(spec, dataset.generic, columns)
    if spec.noise_std > 0:
        z = z + spec.noise_std * noise_draws(seed, 0, dataset.n_obs)[0]
    return apply_function(spec.function, z)
