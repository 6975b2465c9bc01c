"""Nonlinear conjugate gradients (Polak-Ribiere) with Armijo backtracking.

Maximizes a smooth objective given as ``f(theta) -> (value, gradient)``.
Every accepted step increases the objective; non-finite trial points are
treated as failed steps and the step is shrunk.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from hdpgp.errors import NumericalError

log = logging.getLogger(__name__)


@dataclass
class CgResult:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    history: list[float]


def maximize_cg(
    fun,
    theta0,
    max_iter: int = 100,
    gtol: float = 1e-5,
    step0: float = 1.0,
    c1: float = 1e-4,
    shrink: float = 0.5,
    max_backtrack: int = 30,
    max_step: float = 3.0,
) -> CgResult:
    theta = np.asarray(theta0, dtype=float).copy()
    f, g = fun(theta)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError(
            "objective is not finite at the initial hyperparameters; "
            "try a rescaled initialization (e.g. length scales near the data spread)"
        )
    history = [f]
    d = g.copy()
    step = step0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < gtol:
            converged = True
            it -= 1
            break
        slope = float(g @ d)
        if slope <= 0:  # not an ascent direction: restart along the gradient
            d = g.copy()
            slope = float(g @ g)
        # cap the log-parameter move so one step cannot leave the sensible range
        t = min(step, max_step / max(np.max(np.abs(d)), 1e-300))
        accepted = False
        for _ in range(max_backtrack):
            trial = theta + t * d
            ft, gt = fun(trial)
            if np.isfinite(ft) and np.all(np.isfinite(gt)) and ft >= f + c1 * t * slope:
                accepted = True
                break
            t *= shrink
        if not accepted:
            log.debug("cg: line search failed at iteration %d", it)
            break
        y = gt - g
        beta = max(0.0, float(gt @ y) / float(g @ g))  # PR+, restarts when negative
        theta, f, g_old, g = trial, ft, g, gt
        d = g + beta * d
        step = min(2.0 * t, 1e3) if t > 0 else step0
        history.append(f)
        del g_old
    return CgResult(theta, float(f), g, it, converged or np.max(np.abs(g)) < gtol, history)
