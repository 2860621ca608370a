"""Inferential statistics for maximum-likelihood estimates.

Standard errors come from the negative inverse of a numerical Hessian of
the log-likelihood over the free parameters.  The Hessian is built from
central differences of the analytic score, one column per free parameter,
with a per-parameter step ``max(min_step, rel_step * |value|)``.  A Hessian
that is not negative definite does not raise: the directions it cannot
identify are flagged and their standard errors reported as NaN.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .parameters import ParameterSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParameterStat:
    """Value, standard error and t-test of one parameter.

    ``std_err`` and ``t_stat`` are ``None`` for fixed parameters.  ``flagged``
    marks parameters whose variance could not be estimated.
    """

    name: str
    value: float
    std_err: Optional[float]
    t_stat: Optional[float]
    fixed: bool
    reference: bool
    flagged: bool = False


def numerical_hessian(
    gradient: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    rel_step: float = 1e-4,
    min_step: float = 1e-4,
) -> np.ndarray:
    """Central-difference Jacobian of ``gradient`` at ``x``, symmetrised."""
    x = np.asarray(x, dtype=np.float64)
    k = x.size
    hess = np.empty((k, k))
    for p in range(k):
        step = np.zeros(k)
        step[p] = np.fmax(min_step, rel_step * np.abs(x[p]))
        g_forward = gradient(x + step)
        g_backward = gradient(x - step)
        hess[:, p] = (g_forward - g_backward) / (2.0 * step[p])
    return 0.5 * (hess + hess.T)


def covariance_from_hessian(hessian: np.ndarray, tol: float = 1e-10) -> Tuple[np.ndarray, np.ndarray]:
    """Covariance ``(-H)^-1`` with a mask of unidentified parameters.

    The information matrix is eigen-decomposed; eigenvalues below
    ``tol * max_eigenvalue`` (or negative) span directions the data do not
    identify.  Parameters loading on those directions are flagged and get NaN
    variances, the rest use the pseudo-inverse on the identified subspace.
    """
    info = -np.asarray(hessian, dtype=np.float64)
    k = info.shape[0]
    if k == 0:
        return np.zeros((0, 0)), np.zeros(0, dtype=bool)
    if not np.all(np.isfinite(info)):
        return np.full((k, k), np.nan), np.ones(k, dtype=bool)
    eigval, eigvec = np.linalg.eigh(info)
    scale = max(float(np.max(np.abs(eigval))), 1e-300)
    good = eigval > tol * scale
    flagged = np.zeros(k, dtype=bool)
    if not good.all():
        null_space = eigvec[:, ~good]
        flagged = np.any(np.abs(null_space) > 1e-6, axis=1)
        logger.warning(f"Hessian is singular or indefinite; {int(flagged.sum())} parameter(s) flagged")
    cov = (eigvec[:, good] / eigval[good]) @ eigvec[:, good].T
    cov[flagged, :] = np.nan
    cov[:, flagged] = np.nan
    return cov, flagged


def parameter_table(params: ParameterSet, cov_free: np.ndarray, flagged_free: np.ndarray) -> List[ParameterStat]:
    """Assemble per-parameter statistics from a free-parameter covariance."""
    values = params.vector()
    free = params.free_mask()
    reference = params.reference_mask()
    variances = np.full(values.size, np.nan)
    flags = np.zeros(values.size, dtype=bool)
    if free.any():
        variances[free] = np.diag(cov_free)
        flags[free] = flagged_free
    stats: List[ParameterStat] = []
    for idx, name in enumerate(params.labels()):
        value = float(values[idx])
        if not free[idx]:
            stats.append(ParameterStat(name, value, None, None, True, bool(reference[idx])))
            continue
        var = variances[idx]
        bad = bool(flags[idx]) or not np.isfinite(var) or var <= 0
        std_err = float("nan") if bad else float(np.sqrt(var))
        if value == 0.0:
            t_stat = 0.0
        elif bad:
            t_stat = float("nan")
        else:
            t_stat = value / std_err
        stats.append(ParameterStat(name, value, std_err, t_stat, False, False, bad))
    return stats


def hessian_statistics(
    params: ParameterSet,
    free_gradient: Callable[[np.ndarray], np.ndarray],
    rel_step: float = 1e-4,
    min_step: float = 1e-4,
) -> Tuple[List[ParameterStat], np.ndarray]:
    """Standard errors and t-tests from a numerical Hessian.

    Parameters
    ----------
    params: ParameterSet
        Converged parameters.
    free_gradient: Callable
        Maps a free-parameter vector to the gradient over free parameters.

    Returns
    -------
    tuple[list[ParameterStat], np.ndarray]
        Per-parameter statistics (all parameters, fixed ones included) and
        the free-parameter covariance matrix.
    """
    x = params.free_vector()
    hess = numerical_hessian(free_gradient, x, rel_step, min_step)
    cov, flagged = covariance_from_hessian(hess)
    return parameter_table(params, cov, flagged), cov
