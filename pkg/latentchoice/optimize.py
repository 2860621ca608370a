"""Likelihood maximisation over free parameter vectors.

All choice-side estimators hand this module an objective returning the
log-likelihood and its gradient for a free-parameter vector.  Three modes
are available:

``gradient``
    Full-batch gradient ascent with a Barzilai-Borwein step and Armijo
    backtracking.  Deterministic, the default.
``sgd``
    Mini-batch stochastic gradient ascent with a seeded row permutation per
    epoch, kept for parity with the C-RBM trainer.
``bfgs``
    Quasi-Newton only (:func:`scipy.optimize.minimize`).

After ``gradient`` or ``sgd`` an optional BFGS refinement pass runs when the
gradient infinity-norm is still above tolerance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]
BatchObjective = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]


class OptimizerConfig(BaseModel):
    method: Literal["gradient", "sgd", "bfgs"] = "gradient"
    # Convergence when the gradient infinity-norm falls to this value
    tolerance: float = Field(1e-5, gt=0)
    max_iter: int = Field(10_000, ge=1)
    # Quasi-Newton pass after gradient/sgd if not yet converged
    refine: bool = True
    initial_step: float = Field(1e-3, gt=0)
    # Mini-batch settings (method = "sgd")
    learning_rate: float = Field(0.01, gt=0)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(50, ge=1)
    seed: int = 0


@dataclass
class OptimizationResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    converged: bool
    n_iterations: int
    message: str
    history: List[float] = field(default_factory=list)

    @property
    def gradient_norm(self) -> float:
        return float(np.max(np.abs(self.gradient))) if self.gradient.size else 0.0


def _inf_norm(g: np.ndarray) -> float:
    return float(np.max(np.abs(g))) if g.size else 0.0


def _gradient_ascent(objective: Objective, x0: np.ndarray, config: OptimizerConfig) -> OptimizationResult:
    x = x0.copy()
    value, grad = objective(x)
    history = [value]
    step = config.initial_step
    prev_x: Optional[np.ndarray] = None
    prev_g: Optional[np.ndarray] = None
    it = 0
    while _inf_norm(grad) > config.tolerance and it < config.max_iter:
        if prev_x is not None:
            s = x - prev_x
            y = grad - prev_g
            sy = float(s @ y)
            # Barzilai-Borwein step for ascent (y is negative-definite along s)
            if sy < 0:
                step = float(s @ s) / -sy
        accepted = False
        trial = step
        for _ in range(60):
            x_new = x + trial * grad
            new_value, new_grad = objective(x_new)
            if np.isfinite(new_value) and new_value >= value + 1e-4 * trial * float(grad @ grad):
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            logger.debug(f"Line search stalled at iteration {it}")
            break
        prev_x, prev_g = x, grad
        x, value, grad = x_new, new_value, new_grad
        step = trial
        it += 1
        history.append(value)
        if it % 100 == 0:
            logger.debug(f"iter {it}: LL={value:.6f} |g|inf={_inf_norm(grad):.3e}")
    converged = _inf_norm(grad) <= config.tolerance
    message = "converged" if converged else ("max iterations reached" if it >= config.max_iter else "line search stalled")
    return OptimizationResult(x, value, grad, converged, it, message, history)


def _sgd(
    objective: Objective,
    batch_objective: BatchObjective,
    n_rows: int,
    x0: np.ndarray,
    config: OptimizerConfig,
) -> OptimizationResult:
    rng = np.random.default_rng(config.seed)
    x = x0.copy()
    value, grad = objective(x)
    history = [value]
    for epoch in range(config.epochs):
        order = rng.permutation(n_rows)
        for start in range(0, n_rows, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, batch_grad = batch_objective(x, idx)
            x = x + config.learning_rate * batch_grad / len(idx)
        value, grad = objective(x)
        history.append(value)
        logger.debug(f"epoch {epoch + 1}: LL={value:.6f}")
    converged = _inf_norm(grad) <= config.tolerance
    return OptimizationResult(
        x, value, grad, converged, config.epochs, "converged" if converged else "epochs exhausted", history
    )


def _bfgs(objective: Objective, x0: np.ndarray, config: OptimizerConfig, history: List[float]) -> OptimizationResult:
    def negative(x: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = objective(x)
        return -value, -grad

    def record(xk: np.ndarray) -> None:
        history.append(objective(xk)[0])

    res = minimize(
        negative,
        x0,
        jac=True,
        method="BFGS",
        callback=record,
        options={"gtol": config.tolerance, "maxiter": config.max_iter, "norm": np.inf},
    )
    value, grad = objective(res.x)
    converged = _inf_norm(grad) <= config.tolerance
    return OptimizationResult(res.x, value, grad, converged, int(res.nit), str(res.message), history)


def maximize(
    objective: Objective,
    x0: np.ndarray,
    config: Optional[OptimizerConfig] = None,
    batch_objective: Optional[BatchObjective] = None,
    n_rows: int = 0,
) -> OptimizationResult:
    """Maximise ``objective`` starting from ``x0``.

    Parameters
    ----------
    objective: Callable
        Maps a free-parameter vector to ``(log_likelihood, gradient)``.
    x0: np.ndarray
        Starting point.
    config: OptimizerConfig
        Method and stopping rule.
    batch_objective: Callable, optional
        ``(x, row_index) -> (ll, gradient)`` over a subset of rows; required
        for ``method="sgd"``.
    n_rows: int
        Number of rows available to ``batch_objective``.

    Returns
    -------
    OptimizationResult
        ``history[0]`` is the objective at ``x0``.  Non-convergence is
        reported through ``converged`` and ``message``, never raised.
    """
    config = config or OptimizerConfig()
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.size == 0:
        value, grad = objective(x0)
        return OptimizationResult(x0, value, grad, True, 0, "no free parameters", [value])

    if config.method == "bfgs":
        value0, grad0 = objective(x0)
        if _inf_norm(grad0) <= config.tolerance:
            return OptimizationResult(x0, value0, grad0, True, 0, "converged", [value0])
        return _bfgs(objective, x0, config, [value0])

    if config.method == "sgd":
        if batch_objective is None or n_rows <= 0:
            raise ValueError("method 'sgd' needs a batch objective and the number of rows")
        result = _sgd(objective, batch_objective, n_rows, x0, config)
    else:
        result = _gradient_ascent(objective, x0, config)

    if not result.converged and config.refine:
        logger.info(f"Refining with BFGS after {result.n_iterations} iterations ({result.message})")
        refined = _bfgs(objective, result.x, config, list(result.history))
        refined.n_iterations += result.n_iterations
        if refined.value >= result.value:
            result = refined
    logger.info(
        f"Optimisation finished: LL={result.value:.6f}, |g|inf={result.gradient_norm:.3e}, "
        f"iterations={result.n_iterations}, {result.message}"
    )
    return result
