"""Side-by-side estimation reports.

A :class:`ComparisonReport` holds one :class:`ModelColumn` per estimated
model (parameter values, standard errors and t-tests, fit statistics).
:func:`render_report` turns it into one of three byte-deterministic formats:

``text``
    Aligned table: one row per parameter, value / std. err. / t-test per
    model, reference parameters shown as ``0 (ref.)``, followed by a
    "Model statistics" block.
``delimited``
    The same cells as a CSV table.
``structured``
    JSON dump of the report with values rounded like the tables.
"""

from __future__ import annotations

import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Literal, Optional

import pandas as pd
from pydantic import BaseModel, Field, computed_field

from .errors import UsageError
from .inference import ParameterStat
from .mnl import EstimationResult, FitStatistics

logger = logging.getLogger(__name__)

ReportFormat = Literal["text", "delimited", "structured"]
EXTENSIONS: Dict[str, str] = {"text": "txt", "delimited": "csv", "structured": "json"}
DECIMALS = 3
TABLE_BLOCKS = ("asc", "beta_attr")
STATISTICS_ROWS = (
    ("Null Loglikelihood", "null_ll"),
    ("Final Loglikelihood", "final_ll"),
    ("rho square", "rho_square"),
    ("AIC", "aic"),
    ("BIC", "bic"),
)


class ReportConfig(BaseModel):
    title: str = "Estimation results"
    # Tabulate every parameter block instead of constants and attributes only
    full: bool = False
    formats: List[ReportFormat] = Field(default_factory=lambda: ["text", "delimited", "structured"])


class ModelColumn(BaseModel):
    label: str
    statistics: FitStatistics
    parameters: List[ParameterStat] = Field(default_factory=list)
    converged: bool = True
    n_iterations: int = 0

    @classmethod
    def from_result(cls, label: str, result: EstimationResult, full: bool = False) -> "ModelColumn":
        params = result.params
        stats = result.parameter_stats
        if stats is None:
            free = params.free_mask()
            ref = params.reference_mask()
            stats = [
                ParameterStat(name, float(v), float("nan") if f else None, float("nan") if f else None, not f, bool(r))
                for name, v, f, r in zip(params.labels(), params.vector(), free, ref)
            ]
        if not full:
            shown = {label for name in TABLE_BLOCKS if name in params for label in params[name].labels}
            stats = [s for s in stats if s.name in shown]
        return cls(
            label=label,
            statistics=result.statistics,
            parameters=stats,
            converged=result.converged,
            n_iterations=result.n_iterations,
        )


def _round(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return value
    return round(value, DECIMALS)


class ComparisonReport(BaseModel):
    title: str = "Estimation results"
    columns: List[ModelColumn] = Field(default_factory=list)

    @computed_field
    @property
    def deltas(self) -> Dict[str, float]:
        """Last column minus first column for every fit statistic."""
        if len(self.columns) < 2:
            return {}
        first, last = self.columns[0].statistics, self.columns[-1].statistics
        return {key: getattr(last, key) - getattr(first, key) for _, key in STATISTICS_ROWS}

    def row_names(self) -> List[str]:
        names: List[str] = []
        seen = set()
        for column in self.columns:
            for stat in column.parameters:
                if stat.name not in seen:
                    seen.add(stat.name)
                    names.append(stat.name)
        return names

    def rounded(self) -> "ComparisonReport":
        columns = []
        for column in self.columns:
            s = column.statistics
            statistics = replace(
                s,
                null_ll=_round(s.null_ll),
                final_ll=_round(s.final_ll),
                rho_square=_round(s.rho_square),
                aic=_round(s.aic),
                bic=_round(s.bic),
            )
            parameters = [
                replace(p, value=_round(p.value), std_err=_round(p.std_err), t_stat=_round(p.t_stat))
                for p in column.parameters
            ]
            columns.append(column.model_copy(update={"statistics": statistics, "parameters": parameters}))
        return self.model_copy(update={"columns": columns})


def _number(value: Optional[float]) -> str:
    if value is None:
        return "-"
    if math.isnan(value):
        return "nan"
    return f"{value:.{DECIMALS}f}"


def _cells(stat: Optional[ParameterStat]) -> List[str]:
    if stat is None:
        return ["", "", ""]
    if stat.reference:
        return ["0 (ref.)", "-", "-"]
    return [_number(stat.value), _number(stat.std_err), _number(stat.t_stat)]


def _table(report: ComparisonReport) -> List[List[str]]:
    """Body rows: parameter cells, then the statistics block."""
    rows: List[List[str]] = []
    lookup = [{s.name: s for s in column.parameters} for column in report.columns]
    for name in report.row_names():
        row = [name]
        for stats in lookup:
            row.extend(_cells(stats.get(name)))
        rows.append(row)
    return rows


def _statistics(report: ComparisonReport) -> List[List[str]]:
    rows = []
    for title, key in STATISTICS_ROWS:
        row = [title]
        for column in report.columns:
            row.extend([_number(getattr(column.statistics, key)), "", ""])
        rows.append(row)
    return rows


def _render_text(report: ComparisonReport) -> str:
    body = _table(report)
    stats = _statistics(report)
    width = max([len("Parameter"), len("Final Loglikelihood")] + [len(r[0]) for r in body]) + 2
    cell = max([12] + [len(c) + 2 for r in body + stats for c in r[1:]])
    lines = [report.title, ""]
    lines.append(" " * width + "".join(c.label.center(3 * cell) for c in report.columns).rstrip())
    lines.append(("Parameter".ljust(width) + "".join(
        "value".rjust(cell) + "std. err.".rjust(cell) + "t-test".rjust(cell) for _ in report.columns
    )).rstrip())
    rule = "-" * (width + 3 * cell * len(report.columns))
    lines.append(rule)
    for row in body:
        lines.append((row[0].ljust(width) + "".join(c.rjust(cell) for c in row[1:])).rstrip())
    lines.append(rule)
    lines.append("Model statistics")
    for row in stats:
        lines.append((row[0].ljust(width) + "".join(c.rjust(cell) for c in row[1:])).rstrip())
    return "\n".join(lines) + "\n"


def _render_delimited(report: ComparisonReport) -> str:
    header = ["section", "parameter"]
    for column in report.columns:
        header.extend([f"{column.label} value", f"{column.label} std. err.", f"{column.label} t-test"])
    records = [["parameter"] + row for row in _table(report)]
    records += [["statistics"] + row for row in _statistics(report)]
    frame = pd.DataFrame(records, columns=header)
    return frame.to_csv(index=False, lineterminator="\n")


def render_report(report: ComparisonReport, fmt: ReportFormat = "text", path: Optional[str | Path] = None) -> str:
    """Render ``report`` and optionally write it to ``path``.

    Raises
    ------
    UsageError
        If ``fmt`` is unknown or ``path`` cannot be written.
    """
    if fmt == "text":
        content = _render_text(report)
    elif fmt == "delimited":
        content = _render_delimited(report)
    elif fmt == "structured":
        content = report.rounded().model_dump_json(indent=2) + "\n"
    else:
        raise UsageError(f"unknown report format '{fmt}'")
    if path is not None:
        path = Path(path)
        try:
            path.write_text(content, encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot write report to {path}: {exc}") from exc
        logger.info(f"Wrote {fmt} report to {path}")
    return content
