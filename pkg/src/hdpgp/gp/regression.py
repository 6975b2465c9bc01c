"""Exact GP regression with Gaussian noise and type-II maximum likelihood.

Noise is ``sigma_n^2`` per observation by default.  An optional per-point
``noise_scale`` vector ``v`` makes it ``sigma_n^2 * v_t``: the shape of the
noise is fixed by the caller and only its overall level is learned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from hdpgp.errors import DataError, NumericalError
from hdpgp.gp.kernels import (
    KernelSpec,
    chol_solve,
    jitter_cholesky,
    kernel_diag,
    kernel_grads,
    kernel_matrix,
    tri_solve,
)
from hdpgp.gp.optimize import maximize_cg

log = logging.getLogger(__name__)

_MIN_NOISE = 1e-6


@dataclass(frozen=True, eq=False)
class GpRegressor:
    """Fitted regressor; ``mean`` is a constant prior mean (0 by default)."""

    X: np.ndarray
    targets: np.ndarray
    kernel: KernelSpec
    mean: float = 0.0
    L: np.ndarray = field(default=None, repr=False)  # Cholesky of K + sigma_n^2 diag(v)
    alpha: np.ndarray = field(default=None, repr=False)
    jitter: float = 0.0
    noise_scale: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.targets.size


def _noise_scale(v, n):
    if v is None:
        return None
    v = np.asarray(v, dtype=float).ravel()
    if v.size != n or not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise DataError(f"noise_scale must hold {n} positive finite values")
    return v


def gp_regress_fit(X, targets, kernel: KernelSpec, mean: float = 0.0, noise_scale=None) -> GpRegressor:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(targets, dtype=float).ravel()
    if t.size == 0 or X.shape[0] != t.size:
        raise DataError(f"X has {X.shape[0]} rows but {t.size} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(t))):
        raise DataError("regression inputs and targets must be finite")
    v = _noise_scale(noise_scale, t.size)
    K = kernel_matrix(X, None, kernel)
    K[np.diag_indices_from(K)] += kernel.noise_sigma_n**2 * (1.0 if v is None else v)
    L, jit = jitter_cholesky(K, kernel.signal_sigma**2)
    alpha = chol_solve(L, t - mean)
    return GpRegressor(X, t, kernel, float(mean), L, alpha, jit, v)


def gp_regress_predict(reg: GpRegressor, Xs, include_noise: bool = False, noise_scale=None):
    """Predictive mean and standard deviation at the rows of ``Xs``.

    The latent variance ``k** - k*' (K + Sigma)^-1 k*`` is clamped at zero.
    ``include_noise`` adds the noise of a new observation, ``sigma_n^2``
    times ``noise_scale`` (one value per row of ``Xs``, default 1).
    """
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    Ks = kernel_matrix(reg.X, Xs, reg.kernel)
    mu = reg.mean + Ks.T @ reg.alpha
    v = tri_solve(reg.L, Ks)
    var = np.maximum(kernel_diag(Xs, reg.kernel) - np.sum(v * v, axis=0), 0.0)
    if include_noise:
        scale = 1.0 if noise_scale is None else _noise_scale(noise_scale, Xs.shape[0])
        var = var + reg.kernel.noise_sigma_n**2 * scale
    return mu, np.sqrt(var)


def log_marginal_and_grad(X, targets, kernel: KernelSpec, mean: float = 0.0, noise_scale=None):
    """``log p(t | X, theta)`` and its gradient in ``[log sf, log l..., log sn]``."""
    reg = gp_regress_fit(X, targets, kernel, mean, noise_scale)
    n = reg.n
    r = reg.targets - mean
    lml = -0.5 * r @ reg.alpha - np.sum(np.log(np.diag(reg.L))) - 0.5 * n * np.log(2 * np.pi)
    Kinv = chol_solve(reg.L, np.eye(n))
    Q = np.outer(reg.alpha, reg.alpha) - Kinv
    grads = [0.5 * np.sum(Q * dK) for dK in kernel_grads(reg.X, kernel)]
    # d/dlog sn of sn^2 diag(v) is 2 sn^2 diag(v)
    v = np.ones(n) if reg.noise_scale is None else reg.noise_scale
    grads.append(np.diag(Q) @ v * kernel.noise_sigma_n**2)
    return float(lml), np.array(grads), reg


def optimize_regression(X, targets, init: KernelSpec, mean: float = 0.0, max_iter: int = 100,
                        gtol: float = 1e-5, noise_scale=None,
                        learn_noise: bool = True) -> KernelSpec:
    """Type-II maximum likelihood over the log hyperparameters.

    With ``learn_noise=False`` the noise level of ``init`` is held fixed and
    only the kernel hyperparameters move.
    """
    if not learn_noise and init.noise_sigma_n <= 0:
        raise NumericalError("a fixed noise level must be positive")
    if init.noise_sigma_n <= 0:
        init = replace(init, noise_sigma_n=0.1 * init.signal_sigma)

    def fun(theta):
        spec = init.with_log_params(theta, with_noise=learn_noise)
        if spec.noise_sigma_n < _MIN_NOISE:
            return -np.inf, np.full(theta.size, np.nan)
        try:
            v, g, _ = log_marginal_and_grad(X, targets, spec, mean, noise_scale)
        except NumericalError:
            return -np.inf, np.full(theta.size, np.nan)
        return v, (g if learn_noise else g[:-1])

    try:
        res = maximize_cg(fun, init.log_params(with_noise=learn_noise), max_iter=max_iter, gtol=gtol)
    except NumericalError as exc:
        raise NumericalError(f"regression hyperparameter optimization: {exc}") from None
    return init.with_log_params(res.theta, with_noise=learn_noise)
