"""Conditional restricted Boltzmann machine over choices and latents.

The visible layer is the one-hot choice ``y`` (over ``I`` alternatives), the
hidden layer a binary latent vector ``x*`` (``J`` units), and the model is
conditioned on the alternative attributes ``X`` and the generic covariates
``x`` of a respondent.  The energy is::

    E(y, x*) = - y.c_alt - x*.c_lat - y' D x* - sum_i y_i (B_i . X_i) - x*' G x

with every term entering negatively, so lower energy means higher
probability.  Summing out the latents gives the free energy::

    F(y) = - y.c_alt - sum_i y_i (B_i . X_i) - sum_j softplus(D_.j' y + G_j. x + c_lat_j)

and the choice model ``p(y | x) = softmax(-F)`` over available alternatives.
With ``g_term = "constant"`` the covariate term does not multiply ``x*`` and
drops out of every conditional.

Training follows contrastive divergence: a positive phase on the observed
choice with mean-field latent probabilities, a negative phase at the end of
a ``k``-step Gibbs chain started from the data, and plain (optionally
momentum) gradient ascent on the difference.  Small models additionally get
an exact log-likelihood computed in closed form, which the trainer records
and which :func:`extract_significant_latents` differentiates with autograd.

All computation runs in float64 on CPU with explicitly seeded
``torch.Generator`` objects, so identical seeds give identical traces.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field

from ..config import get_settings
from ..data_model import ObservationRow, SurveyDataset, VariableCatalog
from ..errors import DimensionError, DivergenceError, EnumerationLimitError
from ..inference import ParameterStat, covariance_from_hessian, parameter_table
from ..parameters import Block, ParameterSet

logger = logging.getLogger(__name__)

DTYPE = torch.float64
BLOCKS = ("c_alt", "c_lat", "D", "B", "G")
GTerm = Literal["bilinear", "constant"]


class CRBMConfig(BaseModel):
    """Architecture and training settings of a C-RBM."""

    n_latent: int = Field(4, ge=1)
    batch_size: int = Field(32, ge=1)
    cd_steps: int = Field(1, ge=1)
    learning_rate: float = Field(0.01, ge=0)
    epochs: int = Field(100, ge=1)
    init_scale: float = Field(0.01, ge=0)
    momentum: float = Field(0.0, ge=0, lt=1)
    # From this epoch on the learning rate shrinks as anneal_start / epoch
    anneal_start: Optional[int] = Field(None, ge=1)
    # Divergence guard on the parameter infinity-norm
    max_param_norm: float = Field(1e3, gt=0)
    g_term: GTerm = "bilinear"
    # Latent rows of G held at zero for identification
    fixed_g_rows: List[int] = Field(default_factory=lambda: [0])
    # Record the exact log-likelihood per epoch when enumeration is allowed
    exact_trace: bool = True
    t_threshold: float = Field(1.96, gt=0)
    duplicate_cosine: float = Field(0.99, gt=0, le=1)
    seed: int = 0


class CRBMParams(ParameterSet):
    """C-RBM parameter blocks.

    ``c_alt`` (I), ``c_lat`` (J), ``D`` (I x J), ``B`` (I x K) and ``G``
    (J x M).  The reference alternative's bias and its row of ``D`` are fixed
    at zero, as are the configured rows of ``G``.
    """

    kind = "crbm"

    def __init__(
        self,
        blocks,
        alternatives: Sequence[str] = (),
        latent_names: Sequence[str] = (),
        generic_vars: Sequence[str] = (),
        g_term: GTerm = "bilinear",
    ) -> None:
        super().__init__(blocks)
        self.alternatives = tuple(alternatives)
        self.latent_names = tuple(latent_names)
        self.generic_vars = tuple(generic_vars)
        self.g_term = g_term
        n_alt = self.value("c_alt").size
        n_lat = self.value("c_lat").size
        shapes = {
            "D": (n_alt, n_lat),
            "B": (n_alt, self.value("B").shape[1]),
            "G": (n_lat, self.value("G").shape[1]),
        }
        for name, shape in shapes.items():
            if self.value(name).shape != shape:
                raise DimensionError(f"block {name} has shape {self.value(name).shape}, expected {shape}")

    @classmethod
    def initial(
        cls,
        catalog: VariableCatalog,
        n_latent: int,
        init_scale: float = 0.01,
        seed: int = 0,
        g_term: GTerm = "bilinear",
        fixed_g_rows: Sequence[int] = (0,),
    ) -> "CRBMParams":
        """Biases at zero, weights drawn from ``Normal(0, init_scale)``."""
        alts = list(catalog.alternatives)
        attrs = list(catalog.alt_specific_vars)
        generic = list(catalog.generic_vars)
        latents = [f"h{j + 1}" for j in range(n_latent)]
        n_alt, n_attr, n_gen = len(alts), len(attrs), len(generic)
        bad_rows = [r for r in fixed_g_rows if not 0 <= r < n_latent]
        if bad_rows:
            raise DimensionError(f"fixed G rows {bad_rows} out of range for {n_latent} latents")
        gen = torch.Generator().manual_seed(seed)

        def draw(*shape: int) -> np.ndarray:
            return (init_scale * torch.randn(*shape, generator=gen, dtype=DTYPE)).numpy()

        ref_alt = np.zeros(n_alt, dtype=bool)
        ref_alt[catalog.reference_index] = True
        d_ref = np.repeat(ref_alt[:, None], n_latent, axis=1)
        g_ref = np.zeros((n_latent, n_gen), dtype=bool)
        g_ref[list(fixed_g_rows), :] = True

        d_values = np.where(d_ref, 0.0, draw(n_alt, n_latent))
        g_values = np.where(g_ref, 0.0, draw(n_latent, n_gen))
        b_values = draw(n_alt, n_attr)
        blocks = [
            Block.build("c_alt", np.zeros(n_alt), [f"c_{a}" for a in alts], reference=ref_alt),
            Block.build("c_lat", np.zeros(n_latent), [f"c_{h}" for h in latents]),
            Block.build("D", d_values, [f"D[{a},{h}]" for a in alts for h in latents], reference=d_ref),
            Block.build("B", b_values, [f"B[{a},{v}]" for a in alts for v in attrs]),
            Block.build("G", g_values, [f"G[{h},{m}]" for h in latents for m in generic], reference=g_ref),
        ]
        return cls(blocks, alts, latents, generic, g_term)

    @classmethod
    def zeros(cls, catalog: VariableCatalog, n_latent: int, **kwargs) -> "CRBMParams":
        return cls.initial(catalog, n_latent, init_scale=0.0, **kwargs)

    def metadata(self) -> Dict[str, Any]:
        return {
            "alternatives": list(self.alternatives),
            "latent_names": list(self.latent_names),
            "generic_vars": list(self.generic_vars),
            "g_term": self.g_term,
        }

    @classmethod
    def from_blocks(cls, blocks, metadata: Dict[str, Any]) -> "CRBMParams":
        return cls(
            blocks,
            metadata.get("alternatives", ()),
            metadata.get("latent_names", ()),
            metadata.get("generic_vars", ()),
            metadata.get("g_term", "bilinear"),
        )

    @property
    def n_latent(self) -> int:
        return int(self.value("c_lat").size)

    @property
    def n_alternatives(self) -> int:
        return int(self.value("c_alt").size)

    def tensors(self, requires_grad: bool = False) -> Dict[str, torch.Tensor]:
        return {
            name: torch.tensor(self.value(name), dtype=DTYPE, requires_grad=requires_grad) for name in BLOCKS
        }

    def with_tensors(self, tensors: Dict[str, torch.Tensor]) -> "CRBMParams":
        return self.with_vector(np.concatenate([tensors[name].detach().numpy().ravel() for name in BLOCKS]))


@dataclass(frozen=True)
class GibbsState:
    """Position of a Gibbs chain: one-hot choice, binary latents, step."""

    y: np.ndarray
    xstar: np.ndarray
    step: int


@dataclass
class _Batch:
    attributes: torch.Tensor
    generic: torch.Tensor
    availability: torch.Tensor
    onehot: torch.Tensor
    choice: torch.Tensor

    @classmethod
    def from_dataset(cls, dataset: SurveyDataset) -> "_Batch":
        return cls(
            torch.tensor(dataset.alt_attributes, dtype=DTYPE),
            torch.tensor(dataset.generic, dtype=DTYPE),
            torch.tensor(dataset.availability, dtype=torch.bool),
            torch.tensor(dataset.choice_onehot(), dtype=DTYPE),
            torch.tensor(dataset.choice, dtype=torch.long),
        )

    @classmethod
    def from_row(cls, row: ObservationRow, y: Optional[np.ndarray] = None) -> "_Batch":
        onehot = np.zeros(len(row.availability)) if y is None else np.asarray(y, dtype=np.float64)
        return cls(
            torch.tensor(np.asarray(row.alt_attributes, dtype=np.float64)[None], dtype=DTYPE),
            torch.tensor(np.asarray(row.generic, dtype=np.float64)[None], dtype=DTYPE),
            torch.tensor(np.asarray(row.availability, dtype=bool)[None], dtype=torch.bool),
            torch.tensor(onehot[None], dtype=DTYPE),
            torch.tensor([int(row.choice)], dtype=torch.long),
        )

    def select(self, idx: torch.Tensor) -> "_Batch":
        return _Batch(
            self.attributes[idx], self.generic[idx], self.availability[idx], self.onehot[idx], self.choice[idx]
        )


def _check_dimensions(params: CRBMParams, batch: _Batch) -> None:
    n_alt, n_attr = params.value("B").shape
    n_gen = params.value("G").shape[1]
    if batch.attributes.shape[1:] != (n_alt, n_attr):
        raise DimensionError(f"attributes {tuple(batch.attributes.shape[1:])} do not match B {(n_alt, n_attr)}")
    if batch.generic.shape[1] != n_gen:
        raise DimensionError(f"{batch.generic.shape[1]} generic covariates but G has {n_gen} columns")
    if batch.onehot.shape[1] != n_alt:
        raise DimensionError(f"choice vector has length {batch.onehot.shape[1]}, expected {n_alt}")


def _generator(rng: torch.Generator | int | None) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    return torch.Generator().manual_seed(0 if rng is None else int(rng))


def _visible_bias(t: Dict[str, torch.Tensor], batch: _Batch) -> torch.Tensor:
    """``(N, I)`` choice-side bias ``c_alt_i + B_i . X_i``."""
    return t["c_alt"] + torch.einsum("nik,ik->ni", batch.attributes, t["B"])


def _latent_input(t: Dict[str, torch.Tensor], batch: _Batch, g_term: GTerm) -> torch.Tensor:
    """``(N, J)`` latent-side input excluding the choice term."""
    n = batch.generic.shape[0]
    if g_term == "bilinear":
        return batch.generic @ t["G"].T + t["c_lat"]
    return t["c_lat"].expand(n, -1)


def _constant_term(t: Dict[str, torch.Tensor], batch: _Batch, g_term: GTerm) -> torch.Tensor:
    if g_term == "constant":
        return (batch.generic @ t["G"].T).sum(dim=1)
    return torch.zeros(batch.generic.shape[0], dtype=DTYPE)


def _negative_free_energy(t: Dict[str, torch.Tensor], batch: _Batch, g_term: GTerm) -> torch.Tensor:
    """``(N, I)`` matrix of ``-F(e_i)`` for every alternative."""
    act = _latent_input(t, batch, g_term)[:, None, :] + t["D"][None, :, :]
    return _visible_bias(t, batch) + F.softplus(act).sum(dim=2) + _constant_term(t, batch, g_term)[:, None]


def _conditional_log_probs(t: Dict[str, torch.Tensor], batch: _Batch, g_term: GTerm) -> torch.Tensor:
    neg_f = _negative_free_energy(t, batch, g_term).masked_fill(~batch.availability, -math.inf)
    return neg_f - torch.logsumexp(neg_f, dim=1, keepdim=True)


def _latent_probs(t: Dict[str, torch.Tensor], batch: _Batch, y: torch.Tensor, g_term: GTerm) -> torch.Tensor:
    return torch.sigmoid(y @ t["D"] + _latent_input(t, batch, g_term))


def _choice_logits(t: Dict[str, torch.Tensor], batch: _Batch, xstar: torch.Tensor) -> torch.Tensor:
    logits = _visible_bias(t, batch) + xstar @ t["D"].T
    return logits.masked_fill(~batch.availability, -math.inf)


def _sample_choice(logits: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    idx = torch.multinomial(torch.softmax(logits, dim=1), 1, generator=gen).squeeze(1)
    return F.one_hot(idx, logits.shape[1]).to(DTYPE)


def _check_enumerable(params: CRBMParams) -> None:
    limit = get_settings().max_enumeration_latents
    if params.n_latent > limit:
        raise EnumerationLimitError(f"{params.n_latent} latents exceed the enumeration limit of {limit}")


def energy(y: Sequence[float], xstar: Sequence[float], row: ObservationRow, params: CRBMParams) -> float:
    """Energy of the joint state ``(y, x*)`` for one respondent."""
    batch = _Batch.from_row(row, y)
    _check_dimensions(params, batch)
    xs = torch.tensor(np.asarray(xstar, dtype=np.float64)[None], dtype=DTYPE)
    if xs.shape[1] != params.n_latent:
        raise DimensionError(f"latent vector has length {xs.shape[1]}, expected {params.n_latent}")
    t = params.tensors()
    yv = batch.onehot
    value = (
        (yv * _visible_bias(t, batch)).sum()
        + (xs * _latent_input(t, batch, params.g_term)).sum()
        + (yv @ t["D"] * xs).sum()
        + _constant_term(t, batch, params.g_term).sum()
    )
    return float(-value)


def free_energy(y: Sequence[float], row: ObservationRow, params: CRBMParams) -> float:
    """Free energy ``F(y) = -ln sum_{x*} exp(-E(y, x*))`` in closed form."""
    batch = _Batch.from_row(row, y)
    _check_dimensions(params, batch)
    t = params.tensors()
    neg_f = _negative_free_energy(t, batch, params.g_term)[0]
    return float(-(batch.onehot[0] @ neg_f))


def p_latent_given_visible(y: Sequence[float], row: ObservationRow, params: CRBMParams) -> np.ndarray:
    """Independent activation probabilities ``p(x*_j = 1 | y, x)``."""
    batch = _Batch.from_row(row, y)
    _check_dimensions(params, batch)
    return _latent_probs(params.tensors(), batch, batch.onehot, params.g_term)[0].numpy()


def p_choice_given_latent(
    xstar: Sequence[float],
    row: ObservationRow,
    params: CRBMParams,
    availability: Optional[Sequence[bool]] = None,
) -> np.ndarray:
    """Softmax over available alternatives of ``c_alt + D x* + B . X``."""
    batch = _Batch.from_row(row)
    if availability is not None:
        batch.availability = torch.tensor(np.asarray(availability, dtype=bool)[None])
    _check_dimensions(params, batch)
    if not bool(batch.availability.any()):
        raise DimensionError("no alternative is available")
    xs = torch.tensor(np.asarray(xstar, dtype=np.float64)[None], dtype=DTYPE)
    if xs.shape[1] != params.n_latent:
        raise DimensionError(f"latent vector has length {xs.shape[1]}, expected {params.n_latent}")
    return torch.softmax(_choice_logits(params.tensors(), batch, xs), dim=1)[0].numpy()


@dataclass
class JointDistribution:
    """Exact ``p(y, x* | x)`` of one respondent.

    ``probabilities[i, s]`` is the probability of choosing alternative ``i``
    with latent state ``latent_states[s]``; unavailable rows are zero.
    """

    probabilities: np.ndarray
    latent_states: np.ndarray

    def choice_marginal(self) -> np.ndarray:
        return self.probabilities.sum(axis=1)

    def latent_marginal(self) -> np.ndarray:
        return self.probabilities.sum(axis=0)


def latent_states(n_latent: int) -> np.ndarray:
    """All ``2^J`` binary latent vectors, in lexicographic order."""
    return np.array(list(itertools.product((0.0, 1.0), repeat=n_latent)), dtype=np.float64).reshape(-1, n_latent)


def enumerate_joint(row: ObservationRow, params: CRBMParams) -> JointDistribution:
    """Exact joint over all ``(y, x*)`` states by brute-force enumeration."""
    _check_enumerable(params)
    batch = _Batch.from_row(row)
    _check_dimensions(params, batch)
    t = params.tensors()
    states = torch.tensor(latent_states(params.n_latent), dtype=DTYPE)
    vb = _visible_bias(t, batch)[0]
    li = _latent_input(t, batch, params.g_term)[0]
    const = _constant_term(t, batch, params.g_term)[0]
    # -E for every (i, s)
    neg_e = vb[:, None] + (states @ li)[None, :] + t["D"] @ states.T + const
    neg_e = neg_e.masked_fill(~batch.availability[0][:, None], -math.inf)
    log_z = torch.logsumexp(neg_e.reshape(-1), dim=0)
    return JointDistribution(torch.exp(neg_e - log_z).numpy(), states.numpy())


def gibbs_samples(
    row: ObservationRow,
    params: CRBMParams,
    start_y: Sequence[float],
    rng: torch.Generator | int | None = None,
) -> Iterator[GibbsState]:
    """Endless Gibbs chain: ``x* ~ p(x*|y, x)`` then ``y ~ p(y|x*, x)``.

    Choices are drawn among the row's available alternatives only.
    """
    gen = _generator(rng)
    batch = _Batch.from_row(row, start_y)
    _check_dimensions(params, batch)
    t = params.tensors()
    y = batch.onehot
    step = 0
    while True:
        p = _latent_probs(t, batch, y, params.g_term)
        xs = torch.bernoulli(p, generator=gen)
        y = _sample_choice(_choice_logits(t, batch, xs), gen)
        step += 1
        yield GibbsState(y[0].numpy().copy(), xs[0].numpy().copy(), step)


def gibbs_chain(
    row: ObservationRow,
    params: CRBMParams,
    start_y: Sequence[float],
    k: int,
    rng: torch.Generator | int | None = None,
) -> GibbsState:
    """State after ``k`` Gibbs steps from ``start_y``."""
    if k < 1:
        raise ValueError("a Gibbs chain needs at least one step")
    chain = gibbs_samples(row, params, start_y, rng)
    for state in itertools.islice(chain, k):
        pass
    return state


def _run_chains(t: Dict[str, torch.Tensor], batch: _Batch, k: int, gen: torch.Generator, g_term: GTerm) -> torch.Tensor:
    y = batch.onehot
    for _ in range(k):
        xs = torch.bernoulli(_latent_probs(t, batch, y, g_term), generator=gen)
        y = _sample_choice(_choice_logits(t, batch, xs), gen)
    return y


def _cd_statistics(
    t: Dict[str, torch.Tensor],
    batch: _Batch,
    k: int,
    gen: torch.Generator,
    g_term: GTerm,
) -> Tuple[Dict[str, torch.Tensor], torch.Tensor]:
    """Per-row data-minus-model statistics and the per-row reconstruction error."""
    y = batch.onehot
    y_model = _run_chains(t, batch, k, gen, g_term)
    p = _latent_probs(t, batch, y, g_term)
    p_model = _latent_probs(t, batch, y_model, g_term)
    dy = y - y_model
    dp = p - p_model
    stats = {
        "c_alt": dy,
        "c_lat": dp,
        "D": y[:, :, None] * p[:, None, :] - y_model[:, :, None] * p_model[:, None, :],
        "B": dy[:, :, None] * batch.attributes,
    }
    if g_term == "bilinear":
        stats["G"] = dp[:, :, None] * batch.generic[:, None, :]
    else:
        stats["G"] = torch.zeros((y.shape[0],) + tuple(t["G"].shape), dtype=DTYPE)
    error = 0.5 * (dy ** 2).sum(dim=1)
    return stats, error


def _masks(params: CRBMParams) -> Dict[str, torch.Tensor]:
    return {name: torch.tensor(~params[name].fixed, dtype=DTYPE) for name in BLOCKS}


def cd_gradient(
    batch: SurveyDataset,
    params: CRBMParams,
    k: int = 1,
    rng: torch.Generator | int | None = None,
) -> Dict[str, np.ndarray]:
    """Contrastive-divergence estimate of the log-likelihood gradient.

    Returns one array per block, averaged over the rows of ``batch``, with
    fixed entries set to zero.
    """
    if batch.n_obs == 0:
        raise ValueError("cd_gradient needs a non-empty batch")
    data = _Batch.from_dataset(batch)
    _check_dimensions(params, data)
    stats, _ = _cd_statistics(params.tensors(), data, k, _generator(rng), params.g_term)
    masks = _masks(params)
    return {name: (stats[name].mean(dim=0) * masks[name]).numpy() for name in BLOCKS}


def _exact_ll(t: Dict[str, torch.Tensor], batch: _Batch, g_term: GTerm) -> torch.Tensor:
    logp = _conditional_log_probs(t, batch, g_term)
    return logp.gather(1, batch.choice[:, None]).sum()


def exact_log_likelihood(dataset: SurveyDataset, params: CRBMParams) -> float:
    """``sum_n ln p(y_n | x_n)`` with ``p(y|x) = softmax(-F)`` over available alternatives."""
    _check_enumerable(params)
    data = _Batch.from_dataset(dataset)
    _check_dimensions(params, data)
    with torch.no_grad():
        return float(_exact_ll(params.tensors(), data, params.g_term))


def choice_distribution(dataset: SurveyDataset, params: CRBMParams) -> np.ndarray:
    """``(n_obs, I)`` model choice probabilities ``p(y | x)``; the observed choices are ignored."""
    data = _Batch.from_dataset(dataset)
    _check_dimensions(params, data)
    with torch.no_grad():
        return torch.exp(_conditional_log_probs(params.tensors(), data, params.g_term)).numpy()


def latent_posterior(dataset: SurveyDataset, params: CRBMParams) -> np.ndarray:
    """``(n_obs, J)`` activation probabilities ``p(x*_j = 1 | y_n, x_n)`` at the observed choices."""
    data = _Batch.from_dataset(dataset)
    _check_dimensions(params, data)
    with torch.no_grad():
        return _latent_probs(params.tensors(), data, data.onehot, params.g_term).numpy()


def exact_gradient(dataset: SurveyDataset, params: CRBMParams) -> np.ndarray:
    """Autograd gradient of :func:`exact_log_likelihood`, full vector, fixed entries zero."""
    _check_enumerable(params)
    data = _Batch.from_dataset(dataset)
    _check_dimensions(params, data)
    t = params.tensors(requires_grad=True)
    _exact_ll(t, data, params.g_term).backward()
    full = np.concatenate([t[name].grad.numpy().ravel() for name in BLOCKS])
    return params.zero_fixed(full)


def _free_function(params: CRBMParams, data: _Batch):
    """``free vector -> exact LL`` as a differentiable torch function."""
    base = torch.tensor(params.vector(), dtype=DTYPE)
    free_idx = torch.tensor(np.flatnonzero(params.free_mask()), dtype=torch.long)
    shapes = [(name, params.value(name).shape) for name in BLOCKS]

    def f(free: torch.Tensor) -> torch.Tensor:
        full = base.index_put((free_idx,), free)
        t, offset = {}, 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            t[name] = full[offset:offset + size].reshape(shape)
            offset += size
        return _exact_ll(t, data, params.g_term)

    return f


def exact_hessian(dataset: SurveyDataset, params: CRBMParams) -> np.ndarray:
    """Autograd Hessian of the exact log-likelihood over free parameters."""
    _check_enumerable(params)
    data = _Batch.from_dataset(dataset)
    _check_dimensions(params, data)
    x = torch.tensor(params.free_vector(), dtype=DTYPE)
    return torch.autograd.functional.hessian(_free_function(params, data), x).numpy()


def maximize_exact_log_likelihood(
    dataset: SurveyDataset,
    params: CRBMParams,
    max_iter: int = 500,
    tolerance: float = 1e-9,
) -> CRBMParams:
    """Exact maximum likelihood by L-BFGS; used as the training-progress oracle."""
    _check_enumerable(params)
    data = _Batch.from_dataset(dataset)
    _check_dimensions(params, data)
    f = _free_function(params, data)
    x = torch.tensor(params.free_vector(), dtype=DTYPE, requires_grad=True)
    optimizer = torch.optim.LBFGS(
        [x], max_iter=max_iter, tolerance_grad=tolerance, tolerance_change=1e-12, line_search_fn="strong_wolfe"
    )

    def closure() -> torch.Tensor:
        optimizer.zero_grad()
        loss = -f(x)
        loss.backward()
        return loss

    optimizer.step(closure)
    return params.with_free_vector(x.detach().numpy())


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    reconstruction_error: Optional[float]
    exact_ll: Optional[float]
    gradient_norm: Optional[float]
    wall_time: Optional[float]


@dataclass
class TrainingTrace:
    """Per-epoch training record; epoch 0 holds the initial state."""

    rows: List[TraceRow] = field(default_factory=list)

    COLUMNS = ("epoch", "reconstruction_error", "exact_ll", "gradient_norm", "wall_time")

    def exact_ll(self) -> List[Optional[float]]:
        return [r.exact_ll for r in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.rows], columns=list(self.COLUMNS))

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, na_rep="", lineterminator="\n")


def train(
    dataset: SurveyDataset,
    params_init: CRBMParams,
    config: Optional[CRBMConfig] = None,
) -> Tuple[CRBMParams, TrainingTrace]:
    """Train a C-RBM by CD-k mini-batch gradient ascent.

    Parameters
    ----------
    dataset: SurveyDataset
        Training rows.
    params_init: CRBMParams
        Starting point; fixed entries never move.
    config: CRBMConfig
        Batch size, chain length, learning rate and its annealing, epochs,
        momentum, seed.

    Returns
    -------
    tuple[CRBMParams, TrainingTrace]
        Final parameters and the per-epoch trace.

    Raises
    ------
    DivergenceError
        If the parameter infinity-norm exceeds ``config.max_param_norm`` or
        becomes non-finite; the partial trace is attached.
    """
    config = config or CRBMConfig()
    if dataset.n_obs == 0:
        raise ValueError("cannot train on an empty dataset")
    settings = get_settings()
    torch.set_num_threads(settings.n_jobs)
    data = _Batch.from_dataset(dataset)
    _check_dimensions(params_init, data)
    gen = torch.Generator().manual_seed(config.seed)
    g_term = params_init.g_term
    masks = _masks(params_init)
    t = params_init.tensors()
    velocity = {name: torch.zeros_like(t[name]) for name in BLOCKS}
    track_exact = config.exact_trace and params_init.n_latent <= settings.max_enumeration_latents
    started = time.perf_counter()

    def elapsed() -> Optional[float]:
        return time.perf_counter() - started if settings.trace_wall_time else None

    def current_ll() -> Optional[float]:
        if not track_exact:
            return None
        with torch.no_grad():
            return float(_exact_ll(t, data, g_term))

    trace = TrainingTrace([TraceRow(0, None, current_ll(), None, elapsed())])
    logger.info(
        f"Training C-RBM: {params_init.n_latent} latents, {dataset.n_obs} rows, "
        f"CD-{config.cd_steps}, lr={config.learning_rate}, {config.epochs} epochs"
    )
    n = dataset.n_obs
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(n, generator=gen)
        rate = config.learning_rate
        if config.anneal_start is not None:
            rate *= min(1.0, config.anneal_start / epoch)
        errors = []
        norms = []
        for start in range(0, n, config.batch_size):
            batch = data.select(order[start:start + config.batch_size])
            stats, error = _cd_statistics(t, batch, config.cd_steps, gen, g_term)
            errors.append(error)
            batch_norm = 0.0
            for name in BLOCKS:
                grad = stats[name].mean(dim=0) * masks[name]
                velocity[name] = config.momentum * velocity[name] + rate * grad
                t[name] = t[name] + velocity[name]
                if grad.numel():
                    batch_norm = max(batch_norm, float(grad.abs().max()))
            norms.append(batch_norm)
        recon = float(torch.cat(errors).mean())
        row = TraceRow(epoch, recon, current_ll(), float(np.mean(norms)), elapsed())
        trace.rows.append(row)
        logger.debug(f"epoch {epoch}: reconstruction={recon:.6f} exact_ll={row.exact_ll}")
        param_norm = max(float(v.abs().max()) if v.numel() else 0.0 for v in t.values())
        if not math.isfinite(param_norm) or param_norm > config.max_param_norm:
            raise DivergenceError(
                f"parameter norm {param_norm:.3g} exceeds {config.max_param_norm:.3g} at epoch {epoch}", trace
            )
    return params_init.with_tensors(t), trace


@dataclass(frozen=True)
class LatentSummary:
    """Significance summary of one trained latent."""

    name: str
    loadings: Dict[str, float]
    choice_weights: Dict[str, float]
    loading_t: Dict[str, Optional[float]]
    choice_t: Dict[str, Optional[float]]
    keep: bool
    duplicate_of: Optional[str] = None
    flagged: bool = False

    @property
    def max_abs_choice_t(self) -> float:
        values = [abs(v) for v in self.choice_t.values() if v is not None and math.isfinite(v)]
        return max(values, default=0.0)


@dataclass
class LatentReport:
    latents: List[LatentSummary]
    method: Literal["exact", "cd_fisher"]
    t_threshold: float
    parameter_stats: List[ParameterStat]

    def kept(self) -> List[LatentSummary]:
        return [s for s in self.latents if s.keep]


def _cd_fisher(params: CRBMParams, dataset: SurveyDataset, k: int, seed: int) -> np.ndarray:
    data = _Batch.from_dataset(dataset)
    stats, _ = _cd_statistics(params.tensors(), data, k, _generator(seed), params.g_term)
    per_row = torch.cat([stats[name].reshape(dataset.n_obs, -1) for name in BLOCKS], dim=1).numpy()
    scores = per_row[:, params.free_mask()]
    return -(scores.T @ scores)


def extract_significant_latents(
    params: CRBMParams,
    dataset: SurveyDataset,
    t_threshold: float = 1.96,
    duplicate_cosine: float = 0.99,
    cd_steps: int = 1,
    seed: int = 0,
) -> LatentReport:
    """Keep latents whose choice weights are significant.

    Standard errors come from the exact autograd Hessian when the model is
    small enough to enumerate and from the outer product of per-row CD
    scores otherwise.  A latent is kept when any ``|t|`` on its column of
    ``D`` exceeds ``t_threshold``; a latent whose ``[D; G]`` column has
    cosine similarity above ``duplicate_cosine`` with an earlier one is
    flagged as its duplicate and dropped.
    """
    if params.n_latent <= get_settings().max_enumeration_latents:
        method = "exact"
        hessian = exact_hessian(dataset, params)
    else:
        method = "cd_fisher"
        hessian = _cd_fisher(params, dataset, cd_steps, seed)
    cov, flagged = covariance_from_hessian(hessian)
    stats = parameter_table(params, cov, flagged)
    by_label = {s.name: s for s in stats}

    d = params.value("D")
    g = params.value("G")
    alts = params.alternatives
    generic = params.generic_vars
    columns = np.concatenate([d, g.T], axis=0)
    summaries: List[LatentSummary] = []
    for j, name in enumerate(params.latent_names):
        d_stats = [by_label[f"D[{a},{name}]"] for a in alts]
        g_stats = [by_label[f"G[{name},{m}]"] for m in generic]
        significant = any(
            s.t_stat is not None and math.isfinite(s.t_stat) and abs(s.t_stat) > t_threshold for s in d_stats
        )
        duplicate_of = None
        norm_j = np.linalg.norm(columns[:, j])
        for prev in range(j):
            norm_p = np.linalg.norm(columns[:, prev])
            if norm_j > 0 and norm_p > 0:
                cosine = float(columns[:, j] @ columns[:, prev] / (norm_j * norm_p))
                if cosine > duplicate_cosine:
                    duplicate_of = params.latent_names[prev]
                    break
        summaries.append(
            LatentSummary(
                name=name,
                loadings={m: float(g[j, c]) for c, m in enumerate(generic)},
                choice_weights={a: float(d[i, j]) for i, a in enumerate(alts)},
                loading_t={m: s.t_stat for m, s in zip(generic, g_stats)},
                choice_t={a: s.t_stat for a, s in zip(alts, d_stats)},
                keep=significant and duplicate_of is None,
                duplicate_of=duplicate_of,
                flagged=any(s.flagged for s in d_stats + g_stats),
            )
        )
    kept = [s.name for s in summaries if s.keep]
    logger.info(f"Latent extraction ({method}): kept {kept} of {list(params.latent_names)}")
    return LatentReport(summaries, method, t_threshold, stats)
