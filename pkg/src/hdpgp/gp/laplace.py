"""Binary and one-vs-all GP classification under the Laplace approximation.

Likelihood is the logistic sigmoid, ``p(y | f) = 1 / (1 + exp(-y f))`` with
``y in {-1, +1}``.  The posterior mode is found by Newton's method using the
numerically stable ``B = I + W^(1/2) K W^(1/2)`` formulation, and the
approximate log marginal likelihood and its gradient with respect to the log
kernel hyperparameters follow from the same factorization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from hdpgp.errors import DataError, NumericalError
from hdpgp.gp.kernels import (
    KernelSpec,
    jitter_cholesky,
    kernel_diag,
    kernel_grads,
    kernel_matrix,
    tri_solve,
)
from hdpgp.gp.optimize import maximize_cg

log = logging.getLogger(__name__)

_GH_X, _GH_W = np.polynomial.hermite.hermgauss(32)
_PROB_EPS = 1e-15
_NEG_VAR_TOL = 1e-9


# -- logistic likelihood -------------------------------------------------------


def log_lik(y, f) -> np.ndarray:
    return log_expit(y * f)


def dlog_lik(y, f):
    """First, second and third derivatives of ``log p(y|f)`` in ``f``."""
    t = (y + 1) / 2
    pi = expit(f)
    d1 = t - pi
    w = pi * (1 - pi)
    d3 = -w * (1 - 2 * pi)
    return d1, -w, d3


# -- fitted model --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GpBinaryClassifier:
    X: np.ndarray
    y: np.ndarray
    kernel: KernelSpec
    f_tilde: np.ndarray
    W: np.ndarray
    L: np.ndarray = field(repr=False)  # Cholesky of B = I + sW K sW
    grad_log_lik: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False, default=None)  # f_tilde = K a
    log_marginal: float = float("nan")
    n_newton: int = 0

    def stationarity_residual(self) -> float:
        """``||grad log p(y|f~) - K^-1 f~||_inf``; the iteration keeps ``f~ = K a``."""
        return float(np.max(np.abs(self.grad_log_lik - self.a)))


def _check_xy(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size or y.size == 0:
        raise DataError(f"X has {X.shape[0]} rows but y has {y.size} labels")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("binary labels must be -1 or +1")
    if np.all(y == y[0]):
        raise DataError("binary training data needs at least one example of each label")
    if not np.all(np.isfinite(X)):
        raise DataError("features must be finite")
    return X, y


def _newton(K, y, a0=None, tol=1e-12, max_iter=100):
    """Mode of ``log p(y|f) - f' K^-1 f / 2``, parametrized as ``f = K a``.

    Returns ``(f, a, W, L, d1, psi, iters)``.
    """
    n = y.size
    a = np.zeros(n) if a0 is None else np.asarray(a0, dtype=float).copy()
    f = K @ a
    psi = -0.5 * a @ f + log_lik(y, f).sum()
    it = 0
    for it in range(1, max_iter + 1):
        d1, d2, _ = dlog_lik(y, f)
        W = -d2
        sW = np.sqrt(W)
        B = np.eye(n) + sW[:, None] * K * sW[None, :]
        L, _ = jitter_cholesky(B)
        b = W * f + d1
        c = tri_solve(L, sW * (K @ b))
        a_new = b - sW * tri_solve(L, c, trans=True)
        # damped step: halve towards the current iterate while psi decreases
        da = a_new - a
        step = 1.0
        for _ in range(30):
            a_try = a + step * da
            f_try = K @ a_try
            psi_try = -0.5 * a_try @ f_try + log_lik(y, f_try).sum()
            if psi_try >= psi - 1e-12 * abs(psi):
                break
            step *= 0.5
        change = psi_try - psi
        a, f, psi = a_try, f_try, psi_try
        d1_new = dlog_lik(y, f)[0]
        if abs(change) < tol * max(1.0, abs(psi)) and np.max(np.abs(d1_new - a)) < 1e-10:
            break
    else:
        log.warning("Laplace Newton iteration hit the limit of %d steps", max_iter)
    d1, d2, _ = dlog_lik(y, f)
    W = -d2
    sW = np.sqrt(W)
    L, _ = jitter_cholesky(np.eye(n) + sW[:, None] * K * sW[None, :])
    return f, a, W, L, d1, psi, it


def laplace_fit(X, y, kernel: KernelSpec, a0=None) -> GpBinaryClassifier:
    """Posterior mode ``f~`` and Laplace quantities for labels ``y in {-1, +1}``.

    ``a0`` optionally warm-starts the iteration at ``f = K a0``.
    """
    X, y = _check_xy(X, y)
    K = kernel_matrix(X, None, kernel)
    f, a, W, L, d1, psi, it = _newton(K, y, a0)
    lml = psi - float(np.sum(np.log(np.diag(L))))
    if not np.isfinite(lml):
        raise NumericalError("Laplace log marginal likelihood is not finite")
    return GpBinaryClassifier(X, y, kernel, f, W, L, d1, a, lml, it)


def log_marginal_and_grad(X, y, kernel: KernelSpec, a0=None):
    """Approximate log marginal likelihood and its gradient in the log hyperparameters.

    The gradient includes the implicit dependence of the mode ``f~`` on the
    hyperparameters.  Returns ``(value, grad, model)``.
    """
    model = laplace_fit(X, y, kernel, a0)
    X, y = model.X, model.y
    K = kernel_matrix(X, None, kernel)
    sW = np.sqrt(model.W)
    L = model.L
    d1, _, d3 = dlog_lik(y, model.f_tilde)
    a = d1  # at the mode, K^-1 f = grad log p
    # R = sW B^-1 sW, C = L^-1 sW K
    Linv_sW = tri_solve(L, np.diag(sW))
    R = Linv_sW.T @ Linv_sW
    C = tri_solve(L, sW[:, None] * K)
    # d(-log|B|/2)/df_i = +1/2 [(K^-1 + W)^-1]_ii d3_i, since dW_ii/df_i = -d3_i
    s2 = 0.5 * (np.diag(K) - np.sum(C * C, axis=0)) * d3
    grads = []
    for dK in kernel_grads(X, kernel, K):
        s1 = 0.5 * a @ dK @ a - 0.5 * np.sum(R * dK)
        b = dK @ d1
        s3 = b - K @ (R @ b)
        grads.append(s1 + s2 @ s3)
    return model.log_marginal, np.array(grads), model


def optimize_hyperparams(X, y, init: KernelSpec, max_iter: int = 100, gtol: float = 1e-5) -> KernelSpec:
    """Maximize the Laplace log marginal likelihood over the log hyperparameters."""
    X, y = _check_xy(X, y)
    init.check_dim(X.shape[1])
    cache = {"a": None}

    def fun(theta):
        spec = init.with_log_params(theta)
        try:
            v, g, m = log_marginal_and_grad(X, y, spec, cache["a"])
        except NumericalError:
            return -np.inf, np.full(theta.size, np.nan)
        cache["a"] = m.a
        return v, g

    try:
        res = maximize_cg(fun, init.log_params(), max_iter=max_iter, gtol=gtol)
    except NumericalError as exc:
        raise NumericalError(f"hyperparameter optimization: {exc}") from None
    log.debug("gp hyperparameters: lml %.4f after %d CG steps", res.value, res.n_iter)
    return init.with_log_params(res.theta)


# -- prediction ----------------------------------------------------------------


def latent_predictive(model: GpBinaryClassifier, Xs):
    """Mean and variance of the latent ``f*`` at test inputs.

    Round-off negatives down to ``-1e-9`` are clamped to zero; anything
    below that raises :class:`NumericalError`.
    """
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    Ks = kernel_matrix(model.X, Xs, model.kernel)  # (n, m)
    mu = Ks.T @ model.grad_log_lik
    v = tri_solve(model.L, np.sqrt(model.W)[:, None] * Ks)
    var = kernel_diag(Xs, model.kernel) - np.sum(v * v, axis=0)
    if var.size and var.min() < -_NEG_VAR_TOL:
        raise NumericalError(f"latent predictive variance {var.min():.3e} is negative")
    return mu, np.maximum(var, 0.0)


def sigmoid_gauss_expectation(mu, var) -> np.ndarray:
    """``E[sigmoid(z)]`` for ``z ~ N(mu, var)`` by 32-point Gauss-Hermite quadrature."""
    mu = np.asarray(mu, dtype=float)
    sd = np.sqrt(np.asarray(var, dtype=float))
    z = mu[..., None] + np.sqrt(2.0) * sd[..., None] * _GH_X
    p = (expit(z) * _GH_W).sum(axis=-1) / np.sqrt(np.pi)
    return np.clip(p, _PROB_EPS, 1.0 - _PROB_EPS)


def predict_binary(model: GpBinaryClassifier, Xs) -> np.ndarray:
    """``P(y* = +1 | data, x*)`` for each test row."""
    mu, var = latent_predictive(model, Xs)
    return sigmoid_gauss_expectation(mu, var)


# -- one-vs-all ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GpMulticlass:
    classes: tuple[int, ...]
    binaries: tuple[GpBinaryClassifier, ...]

    def __post_init__(self):
        if len(self.classes) < 2 or len(self.classes) != len(self.binaries):
            raise DataError("need one binary classifier per class and at least 2 classes")


def fit_multiclass(
    X,
    labels,
    kernel: KernelSpec | str = "ard",
    optimize: bool = True,
    max_iter: int = 100,
) -> GpMulticlass:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.asarray(labels, dtype=np.int64)
    classes = tuple(int(c) for c in np.unique(labels))
    if len(classes) < 2:
        raise DataError(f"need at least 2 classes to train a classifier, got {list(classes)}")
    if isinstance(kernel, str):
        kernel = default_kernel(X, kernel)
    binaries = []
    for c in classes:
        y = np.where(labels == c, 1.0, -1.0)
        spec = optimize_hyperparams(X, y, kernel, max_iter=max_iter) if optimize else kernel
        binaries.append(laplace_fit(X, y, spec))
        log.info("class %d: kernel sigma %.3g, lml %.3f", c, spec.signal_sigma, binaries[-1].log_marginal)
    return GpMulticlass(classes, tuple(binaries))


def default_kernel(X, kind: str = "ard") -> KernelSpec:
    """Unit-ish starting point: signal 1, length scales at the per-dimension spread."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    spread = X.std(axis=0)
    spread = np.where(spread > 1e-3, spread, 1e-3)
    if kind.lower() == "rbf":
        return KernelSpec("rbf", 1.0, (float(np.sqrt(np.mean(spread**2) * X.shape[1])),))
    return KernelSpec("ard", 1.0, tuple(float(s) for s in spread * np.sqrt(X.shape[1])))


def predict_multiclass(model: GpMulticlass, Xs) -> np.ndarray:
    """Normalized one-vs-all probabilities, columns ordered as ``model.classes``."""
    P = np.column_stack([predict_binary(b, Xs) for b in model.binaries])
    return P / P.sum(axis=1, keepdims=True)


def refit(model: GpBinaryClassifier) -> GpBinaryClassifier:
    return laplace_fit(model.X, model.y, model.kernel, model.a)
