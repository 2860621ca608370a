"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`LatentChoiceError`.  Each class carries the process exit code the
command-line front end should return for it, in the same way HTTP handlers
attach a status code to the exceptions they raise.  Non-convergence of an
optimizer is *not* an error: estimators return a flagged result instead.
"""

from __future__ import annotations

from typing import Any, List, Optional


class LatentChoiceError(Exception):
    """Base class for all package errors."""

    exit_code: int = 2


class UsageError(LatentChoiceError):
    """Bad invocation: unknown subcommand, missing file, bad flag."""

    exit_code = 1


class ConfigError(UsageError):
    """The run configuration is missing, malformed or inconsistent."""


class DatasetError(LatentChoiceError, ValueError):
    """A dataset file or in-memory dataset violates its catalog.

    Parameters
    ----------
    message: str
        Human readable description.
    row: Optional[int]
        1-based data row number (header excluded) the problem was found on.
    """

    exit_code = 1

    def __init__(self, message: str, row: Optional[int] = None) -> None:
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DimensionError(LatentChoiceError, ValueError):
    """Array shapes do not agree with the catalog or the parameter layout."""


class EnumerationLimitError(LatentChoiceError, ValueError):
    """Exact enumeration was requested for a model beyond the size guard."""


class EstimationError(LatentChoiceError):
    """An estimation stage could not produce a usable result."""

    exit_code = 2


class DivergenceError(EstimationError):
    """C-RBM training left the admissible parameter region."""

    def __init__(self, message: str, trace: Any = None) -> None:
        self.trace = trace
        super().__init__(message)


class PipelineError(EstimationError):
    """A two-stage pipeline stage failed.

    ``artifacts`` lists the files already written before the failure; they
    are left in place.
    """

    def __init__(self, stage: str, message: str, artifacts: Optional[List[str]] = None) -> None:
        self.stage = stage
        self.artifacts = list(artifacts or [])
        super().__init__(f"stage '{stage}' failed: {message}")


class ParameterFileError(UsageError):
    """A parameter file is unreadable, of an unknown version or malformed."""
