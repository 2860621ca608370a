"""Survey dataset representation, ingestion and validation.

Mode-choice survey data arrive as a wide delimited table: one row per
observation, alternative-specific attributes as ``<variable>_<alternative>``
columns, binary respondent covariates, a ``choice`` column, optional
``av_<alternative>`` availability columns and binary (or raw Likert)
indicator columns.  :func:`load_dataset` turns such a file into an immutable
:class:`SurveyDataset` whose arrays are shared read-only by all estimators.

Functions
---------
load_dataset(path, schema) -> SurveyDataset
    Read, convert and validate a dataset file.
save_dataset(dataset, path) -> Path
    Write a dataset back in the same wide format.
binarize_likert(response, flip=False) -> int
    Collapse a 5-point Likert response to the binary indicator coding.
categorize_continuous(value, bin_edges) -> np.ndarray
    One-hot bin a continuous covariate.
validate(dataset) -> DiagnosticsReport
    Non-raising diagnostics over a dataset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import DatasetError, DimensionError

logger = logging.getLogger(__name__)

AVAILABILITY_PREFIX = "av_"


class IndicatorVariable(BaseModel):
    """A binary attitudinal indicator tied to one alternative.

    ``source`` names a raw 5-point Likert column to binarize on load; when it
    is empty the column ``name`` must already hold 0/1 values.
    """

    model_config = ConfigDict(frozen=True)

    name: str
    alternative: str
    source: Optional[str] = None


class CategorizedVariable(BaseModel):
    """A continuous covariate cut into one-hot generic covariates."""

    model_config = ConfigDict(frozen=True)

    source: str
    edges: List[float] = Field(min_length=1)
    names: List[str]

    @model_validator(mode="after")
    def _check_bins(self) -> "CategorizedVariable":
        if len(self.names) != len(self.edges) + 1:
            raise ValueError(f"'{self.source}': {len(self.edges)} edges need {len(self.edges) + 1} names")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError(f"'{self.source}': bin edges must be strictly ascending")
        return self


class VariableCatalog(BaseModel):
    """Declaration of alternatives and variables of a survey."""

    model_config = ConfigDict(frozen=True)

    alternatives: List[str] = Field(min_length=2)
    reference: str
    alt_specific_vars: List[str] = Field(default_factory=list)
    generic_vars: List[str] = Field(default_factory=list)
    indicators: List[IndicatorVariable] = Field(default_factory=list)
    categorized: List[CategorizedVariable] = Field(default_factory=list)
    scale_factors: Dict[str, float] = Field(default_factory=dict)
    delimiter: str = ","
    likert_flip: bool = False
    choice_column: str = "choice"

    @model_validator(mode="after")
    def _check_catalog(self) -> "VariableCatalog":
        if len(set(self.alternatives)) != len(self.alternatives):
            raise ValueError("alternative identifiers must be unique")
        if self.reference not in self.alternatives:
            raise ValueError(f"reference alternative '{self.reference}' is not an alternative")
        seen: Dict[str, str] = {}
        categories = (
            ("alt_specific", self.alt_specific_vars),
            ("generic", self.generic_vars),
            ("indicator", [ind.name for ind in self.indicators]),
        )
        for category, names in categories:
            for name in names:
                if name in seen:
                    raise ValueError(f"variable '{name}' appears in both {seen[name]} and {category}")
                seen[name] = category
        for ind in self.indicators:
            if ind.alternative not in self.alternatives:
                raise ValueError(f"indicator '{ind.name}' refers to unknown alternative '{ind.alternative}'")
        for cat in self.categorized:
            missing = [n for n in cat.names if n not in self.generic_vars]
            if missing:
                raise ValueError(f"categorized bins {missing} are not declared generic variables")
        for name, factor in self.scale_factors.items():
            if name not in self.alt_specific_vars:
                raise ValueError(f"scale factor for unknown attribute '{name}'")
            if not factor > 0:
                raise ValueError(f"scale factor for '{name}' must be strictly positive")
        return self

    @property
    def n_alternatives(self) -> int:
        return len(self.alternatives)

    @property
    def reference_index(self) -> int:
        return self.alternatives.index(self.reference)

    @property
    def indicator_names(self) -> List[str]:
        return [ind.name for ind in self.indicators]

    def scale_vector(self) -> np.ndarray:
        return np.array([self.scale_factors.get(v, 1.0) for v in self.alt_specific_vars], dtype=np.float64)

    def generic_index(self, names: Sequence[str]) -> List[int]:
        """Column positions of ``names`` among the generic covariates."""
        missing = [n for n in names if n not in self.generic_vars]
        if missing:
            raise DimensionError(f"unknown generic variables: {missing}")
        return [self.generic_vars.index(n) for n in names]

    def indicator_index(self, name: str) -> int:
        names = self.indicator_names
        if name not in names:
            raise DimensionError(f"unknown indicator '{name}'")
        return names.index(name)

    @staticmethod
    def attribute_column(variable: str, alternative: str) -> str:
        return f"{variable}_{alternative}"

    @staticmethod
    def availability_column(alternative: str) -> str:
        return f"{AVAILABILITY_PREFIX}{alternative}"


@dataclass(frozen=True)
class ObservationRow:
    """View of a single observation.

    ``indicators`` holds NaN for indicator responses that were not collected
    (e.g. revealed-preference-only rows).
    """

    alt_attributes: np.ndarray
    generic: np.ndarray
    choice: int
    availability: np.ndarray
    indicators: np.ndarray

    @property
    def has_indicators(self) -> bool:
        return bool(np.any(~np.isnan(self.indicators)))


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SurveyDataset:
    """Immutable array-backed survey dataset.

    Attributes
    ----------
    catalog: VariableCatalog
    alt_attributes: np.ndarray
        ``(n_obs, n_alternatives, n_alt_specific)`` scaled attribute values.
    generic: np.ndarray
        ``(n_obs, n_generic)`` binary covariates.
    choice: np.ndarray
        ``(n_obs,)`` index of the chosen alternative.
    availability: np.ndarray
        ``(n_obs, n_alternatives)`` boolean availability mask.
    indicators: np.ndarray
        ``(n_obs, n_indicators)`` binary indicators, NaN when absent.
    scale_factors: np.ndarray
        Per alternative-specific variable multiplier applied at load.
    raw_attributes: np.ndarray
        Attribute values in file units, before scaling. Defaults to
        ``alt_attributes / scale_factors``.
    """

    catalog: VariableCatalog
    alt_attributes: np.ndarray
    generic: np.ndarray
    choice: np.ndarray
    availability: np.ndarray
    indicators: np.ndarray
    scale_factors: np.ndarray = field(default=None)  # type: ignore[assignment]
    raw_attributes: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        cat = self.catalog
        n = int(np.asarray(self.choice).shape[0])
        n_alt, n_attr = cat.n_alternatives, len(cat.alt_specific_vars)
        scale = cat.scale_vector() if self.scale_factors is None else self.scale_factors
        raw = self.raw_attributes
        if raw is None:
            raw = np.asarray(self.alt_attributes, dtype=np.float64) / np.asarray(scale, dtype=np.float64)
        arrays = {
            "alt_attributes": (self.alt_attributes, np.float64, (n, n_alt, n_attr)),
            "generic": (self.generic, np.float64, (n, len(cat.generic_vars))),
            "choice": (self.choice, np.int64, (n,)),
            "availability": (self.availability, bool, (n, n_alt)),
            "indicators": (self.indicators, np.float64, (n, len(cat.indicators))),
            "scale_factors": (scale, np.float64, (n_attr,)),
            "raw_attributes": (raw, np.float64, (n, n_alt, n_attr)),
        }
        for name, (value, dtype, shape) in arrays.items():
            frozen = _frozen(value, dtype)
            if frozen.shape != shape:
                raise DimensionError(f"{name} has shape {frozen.shape}, catalog implies {shape}")
            object.__setattr__(self, name, frozen)

    @classmethod
    def from_arrays(
        cls,
        catalog: VariableCatalog,
        alt_attributes: np.ndarray,
        choice: np.ndarray,
        generic: Optional[np.ndarray] = None,
        availability: Optional[np.ndarray] = None,
        indicators: Optional[np.ndarray] = None,
    ) -> "SurveyDataset":
        n = len(choice)
        if generic is None:
            generic = np.zeros((n, len(catalog.generic_vars)))
        if availability is None:
            availability = np.ones((n, catalog.n_alternatives), dtype=bool)
        if indicators is None:
            indicators = np.full((n, len(catalog.indicators)), np.nan)
        return cls(catalog, alt_attributes, generic, choice, availability, indicators)

    @property
    def n_obs(self) -> int:
        return int(self.choice.shape[0])

    def __len__(self) -> int:
        return self.n_obs

    def row(self, index: int) -> ObservationRow:
        return ObservationRow(
            alt_attributes=self.alt_attributes[index],
            generic=self.generic[index],
            choice=int(self.choice[index]),
            availability=self.availability[index],
            indicators=self.indicators[index],
        )

    @property
    def rows(self) -> Iterator[ObservationRow]:
        return (self.row(i) for i in range(self.n_obs))

    def choice_onehot(self) -> np.ndarray:
        out = np.zeros((self.n_obs, self.catalog.n_alternatives))
        out[np.arange(self.n_obs), self.choice] = 1.0
        return out

    def indicator_mask(self) -> np.ndarray:
        """Boolean ``(n_obs, n_indicators)`` mask of observed indicator cells."""
        return ~np.isnan(self.indicators)

    def subset(self, index: Sequence[int] | np.ndarray) -> "SurveyDataset":
        index = np.asarray(index, dtype=np.int64)
        return SurveyDataset(
            self.catalog,
            self.alt_attributes[index],
            self.generic[index],
            self.choice[index],
            self.availability[index],
            self.indicators[index],
            self.scale_factors,
            self.raw_attributes[index],
        )

    def rescale(self, factors: Dict[str, float]) -> "SurveyDataset":
        """Return a copy with attribute columns multiplied by ``factors``.

        The returned dataset carries a catalog with the combined scale
        factors, so saving it and loading the file with its own catalog
        reproduces the rescaled values.
        """
        cat = self.catalog
        vec = np.array([factors.get(v, 1.0) for v in cat.alt_specific_vars], dtype=np.float64)
        if np.any(vec <= 0):
            raise DatasetError("scale factors must be strictly positive")
        scale = self.scale_factors * vec
        catalog = cat.model_copy(
            update={"scale_factors": {v: float(s) for v, s in zip(cat.alt_specific_vars, scale) if s != 1.0}}
        )
        return SurveyDataset(
            catalog,
            self.raw_attributes * scale,
            self.generic,
            self.choice,
            self.availability,
            self.indicators,
            scale,
            self.raw_attributes,
        )


def binarize_likert(response: int, flip: bool = False) -> int:
    """Collapse a 5-point Likert response into the binary indicator coding.

    Responses 1, 2, 3 map to 1 and responses 4, 5 map to 0.  ``flip`` swaps
    the two classes.

    Raises
    ------
    DatasetError
        If ``response`` is not one of 1..5.
    """
    if isinstance(response, (float, np.floating)) and float(response).is_integer():
        response = int(response)
    if not isinstance(response, (int, np.integer)) or isinstance(response, bool) or not 1 <= response <= 5:
        raise DatasetError(f"Likert response must be an integer in 1..5, got {response!r}")
    coded = 1 if response <= 3 else 0
    return 1 - coded if flip else coded


def categorize_continuous(value: float, bin_edges: Sequence[float]) -> np.ndarray:
    """One-hot encode ``value`` into left-closed, right-open bins.

    ``len(bin_edges) + 1`` bins are produced; values below the first edge land
    in bin 0 and values at or beyond the last edge in the last bin.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.size == 0:
        raise DatasetError("bin_edges must contain at least one edge")
    if np.any(np.diff(edges) <= 0):
        raise DatasetError("bin_edges must be strictly ascending")
    out = np.zeros(edges.size + 1, dtype=np.int64)
    out[int(np.searchsorted(edges, value, side="right"))] = 1
    return out


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column].astype(str).str.strip()
    values = pd.to_numeric(raw.where(raw != "", None), errors="coerce")
    bad = values.isna() & (raw != "")
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
        raise DatasetError(f"non-numeric value {raw.iloc[row - 1]!r} in column '{column}'", row=row)
    # float() rounds correctly, so written reprs read back bit for bit
    return np.array([float(cell) if cell else np.nan for cell in raw], dtype=np.float64)


def _require(frame: pd.DataFrame, column: str) -> None:
    if column not in frame.columns:
        raise DatasetError(f"missing column '{column}'")


def _first_row(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0]) + 1


def _read_choice(frame: pd.DataFrame, catalog: VariableCatalog) -> np.ndarray:
    _require(frame, catalog.choice_column)
    raw = frame[catalog.choice_column].astype(str).str.strip()
    names = {alt: i for i, alt in enumerate(catalog.alternatives)}
    out = np.empty(len(raw), dtype=np.int64)
    for n, cell in enumerate(raw):
        if cell in names:
            out[n] = names[cell]
            continue
        try:
            number = float(cell)
        except ValueError:
            raise DatasetError(f"unknown choice {cell!r}", row=n + 1) from None
        if not number.is_integer() or not 0 <= number < catalog.n_alternatives:
            raise DatasetError(f"choice index {cell} out of range 0..{catalog.n_alternatives - 1}", row=n + 1)
        out[n] = int(number)
    return out


def _read_generic(frame: pd.DataFrame, catalog: VariableCatalog) -> np.ndarray:
    n = len(frame)
    columns: Dict[str, np.ndarray] = {}
    for cat in catalog.categorized:
        if all(name in frame.columns for name in cat.names):
            continue
        _require(frame, cat.source)
        values = _numeric_column(frame, cat.source)
        if np.isnan(values).any():
            raise DatasetError(f"missing value in column '{cat.source}'", row=_first_row(np.isnan(values)))
        onehot = np.stack([categorize_continuous(v, cat.edges) for v in values]) if n else np.zeros((0, len(cat.names)))
        for k, name in enumerate(cat.names):
            columns[name] = onehot[:, k].astype(np.float64)
    out = np.zeros((n, len(catalog.generic_vars)))
    for m, name in enumerate(catalog.generic_vars):
        if name in columns:
            out[:, m] = columns[name]
            continue
        _require(frame, name)
        values = _numeric_column(frame, name)
        bad = ~np.isin(values, (0.0, 1.0))
        if bad.any():
            raise DatasetError(f"generic variable '{name}' must be 0 or 1", row=_first_row(bad))
        out[:, m] = values
    return out


def _read_indicators(frame: pd.DataFrame, catalog: VariableCatalog) -> np.ndarray:
    out = np.full((len(frame), len(catalog.indicators)), np.nan)
    for j, ind in enumerate(catalog.indicators):
        if ind.name not in frame.columns and ind.source:
            _require(frame, ind.source)
            raw = _numeric_column(frame, ind.source)
            for n, value in enumerate(raw):
                if np.isnan(value):
                    continue
                try:
                    out[n, j] = binarize_likert(value, flip=catalog.likert_flip)
                except DatasetError as exc:
                    raise DatasetError(str(exc), row=n + 1) from None
            continue
        _require(frame, ind.name)
        values = _numeric_column(frame, ind.name)
        bad = ~np.isnan(values) & ~np.isin(values, (0.0, 1.0))
        if bad.any():
            raise DatasetError(f"indicator '{ind.name}' must be 0, 1 or empty", row=_first_row(bad))
        out[:, j] = values
    return out


def load_dataset(path: str | Path, schema: VariableCatalog) -> SurveyDataset:
    """Read a wide delimited survey file.

    Parameters
    ----------
    path: str | Path
        UTF-8 delimited file with a header row.
    schema: VariableCatalog
        Catalog naming the alternatives and variables to read.

    Returns
    -------
    SurveyDataset
        Validated dataset, rows in file order, attributes multiplied by the
        catalog's scale factors.

    Raises
    ------
    DatasetError
        Missing column, non-numeric cell, out-of-range choice, unavailable
        chosen alternative or too few available alternatives; the message
        names the offending 1-based data row.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    frame = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    n = len(frame)
    catalog = schema
    n_alt = catalog.n_alternatives

    availability = np.ones((n, n_alt), dtype=bool)
    for i, alt in enumerate(catalog.alternatives):
        column = catalog.availability_column(alt)
        if column in frame.columns:
            values = _numeric_column(frame, column)
            bad = ~np.isin(values, (0.0, 1.0))
            if bad.any():
                raise DatasetError(f"availability '{column}' must be 0 or 1", row=_first_row(bad))
            availability[:, i] = values == 1.0

    attributes = np.zeros((n, n_alt, len(catalog.alt_specific_vars)))
    for k, var in enumerate(catalog.alt_specific_vars):
        for i, alt in enumerate(catalog.alternatives):
            column = catalog.attribute_column(var, alt)
            _require(frame, column)
            values = _numeric_column(frame, column)
            missing = np.isnan(values) & availability[:, i]
            if missing.any():
                raise DatasetError(f"empty cell in '{column}' for an available alternative", row=_first_row(missing))
            attributes[:, i, k] = np.nan_to_num(values, nan=0.0)

    choice = _read_choice(frame, catalog)
    chosen_available = availability[np.arange(n), choice] if n else np.zeros(0, dtype=bool)
    if not chosen_available.all():
        raise DatasetError("chosen alternative is not available", row=_first_row(~chosen_available))
    too_few = availability.sum(axis=1) < 2
    if too_few.any():
        raise DatasetError("fewer than 2 alternatives available", row=_first_row(too_few))

    generic = _read_generic(frame, catalog)
    indicators = _read_indicators(frame, catalog)
    scale = catalog.scale_vector()
    logger.info(f"Loaded {n} observations from {path}")
    return SurveyDataset(catalog, attributes * scale, generic, choice, availability, indicators, scale, attributes)


def save_dataset(dataset: SurveyDataset, path: str | Path) -> Path:
    """Write ``dataset`` in the wide format read by :func:`load_dataset`.

    Attribute values are written in raw (unscaled) units so that reading the
    file back with the same catalog reproduces the stored values exactly.
    """
    path = Path(path)
    cat = dataset.catalog
    columns: Dict[str, np.ndarray] = {}
    raw = dataset.raw_attributes
    for k, var in enumerate(cat.alt_specific_vars):
        for i, alt in enumerate(cat.alternatives):
            columns[cat.attribute_column(var, alt)] = raw[:, i, k]
    for i, alt in enumerate(cat.alternatives):
        columns[cat.availability_column(alt)] = dataset.availability[:, i].astype(np.int64)
    for m, name in enumerate(cat.generic_vars):
        columns[name] = dataset.generic[:, m].astype(np.int64)
    for j, name in enumerate(cat.indicator_names):
        columns[name] = pd.array(
            [None if np.isnan(v) else int(v) for v in dataset.indicators[:, j]], dtype="Int64"
        )
    columns[cat.choice_column] = dataset.choice
    frame = pd.DataFrame(columns)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, sep=cat.delimiter, index=False, na_rep="", lineterminator="\n")
    return path


@dataclass
class InvariantCheck:
    """Outcome of one dataset invariant; ``rows`` are 0-based offenders."""

    name: str
    passed: bool
    rows: List[int] = field(default_factory=list)


@dataclass
class DiagnosticsReport:
    n_rows: int
    means: Dict[str, float]
    availability_frequency: Dict[str, float]
    choice_shares: Dict[str, float]
    checks: List[InvariantCheck]
    warnings: List[str]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def failures(self) -> List[InvariantCheck]:
        return [check for check in self.checks if not check.passed]


def _check(name: str, bad: np.ndarray) -> InvariantCheck:
    rows = [int(r) for r in np.flatnonzero(bad)]
    return InvariantCheck(name, not rows, rows)


def validate(dataset: SurveyDataset) -> DiagnosticsReport:
    """Collect descriptive statistics and invariant checks.

    Never raises on invalid content and never mutates the dataset; a dataset
    whose arrays violate the catalog invariants simply yields failed checks.
    """
    cat = dataset.catalog
    n = dataset.n_obs
    n_alt = cat.n_alternatives
    choice = dataset.choice
    avail = dataset.availability
    in_range = (choice >= 0) & (choice < n_alt)
    safe_choice = np.where(in_range, choice, 0)
    chosen_available = in_range & avail[np.arange(n), safe_choice]
    ind = dataset.indicators

    checks = [
        _check("choice_in_range", ~in_range),
        _check("choice_available", in_range & ~chosen_available),
        _check("min_two_available", avail.sum(axis=1) < 2),
        _check("generic_binary", np.any(~np.isin(dataset.generic, (0.0, 1.0)), axis=1)),
        _check("indicators_binary", np.any(~np.isnan(ind) & ~np.isin(ind, (0.0, 1.0)), axis=1)),
        _check("attributes_finite", ~np.all(np.isfinite(dataset.alt_attributes), axis=(1, 2))),
        InvariantCheck("scale_factors_positive", bool(np.all(dataset.scale_factors > 0))),
    ]

    means: Dict[str, float] = {}
    for k, var in enumerate(cat.alt_specific_vars):
        for i, alt in enumerate(cat.alternatives):
            sel = avail[:, i]
            means[cat.attribute_column(var, alt)] = float(dataset.alt_attributes[sel, i, k].mean()) if sel.any() else float("nan")
    for m, name in enumerate(cat.generic_vars):
        means[name] = float(dataset.generic[:, m].mean()) if n else float("nan")
    for j, name in enumerate(cat.indicator_names):
        observed = ~np.isnan(ind[:, j])
        means[name] = float(ind[observed, j].mean()) if observed.any() else float("nan")

    availability_frequency = {alt: float(avail[:, i].mean()) if n else 0.0 for i, alt in enumerate(cat.alternatives)}
    counts = np.bincount(choice[in_range], minlength=n_alt)
    choice_shares = {alt: float(counts[i] / n) if n else 0.0 for i, alt in enumerate(cat.alternatives)}

    warnings: List[str] = []
    for i, alt in enumerate(cat.alternatives):
        if not avail[:, i].any():
            warnings.append(f"alternative '{alt}' is never available")
        elif counts[i] == 0:
            warnings.append(f"alternative '{alt}' is never chosen")

    return DiagnosticsReport(n, means, availability_frequency, choice_shares, checks, warnings)
