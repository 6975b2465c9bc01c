"""Squared-exponential kernels (isotropic RBF and ARD) and a jittered Cholesky.

Hyperparameters are handled on the log scale as the vector
``[log sigma_f, log l_1, ..., log l_m]``, with ``m = 1`` for RBF and ``m = d``
for ARD.  Regression appends ``log sigma_n``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from hdpgp.errors import DataError, NumericalError

KINDS = ("rbf", "ard")


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "ard"
    signal_sigma: float = 1.0
    length_scales: tuple[float, ...] = (1.0,)
    noise_sigma_n: float = 0.0

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "length_scales", tuple(float(x) for x in np.atleast_1d(self.length_scales)))
        if kind not in KINDS:
            raise DataError(f"kernel kind must be one of {KINDS}, got {self.kind!r}")
        if kind == "rbf" and len(self.length_scales) != 1:
            raise DataError("an RBF kernel takes exactly one length scale")
        if not self.signal_sigma > 0 or not all(l > 0 for l in self.length_scales):
            raise DataError("kernel scales must be positive")
        if not self.noise_sigma_n >= 0:
            raise DataError("noise_sigma_n must be non-negative")

    @classmethod
    def default(cls, kind: str, dim: int, signal_sigma=1.0, length_scale=1.0, noise_sigma_n=0.0):
        n = 1 if kind.lower() == "rbf" else dim
        return cls(kind, signal_sigma, (length_scale,) * n, noise_sigma_n)

    def check_dim(self, d: int) -> None:
        if self.kind == "ard" and len(self.length_scales) != d:
            raise DataError(f"ARD kernel has {len(self.length_scales)} length scales, data has {d} dims")

    # log-parameter vector helpers
    def log_params(self, with_noise: bool = False) -> np.ndarray:
        p = [np.log(self.signal_sigma), *np.log(self.length_scales)]
        if with_noise:
            p.append(np.log(self.noise_sigma_n))
        return np.array(p)

    def with_log_params(self, theta, with_noise: bool = False) -> "KernelSpec":
        theta = np.asarray(theta, dtype=float)
        m = len(self.length_scales)
        kw = dict(signal_sigma=float(np.exp(theta[0])), length_scales=tuple(np.exp(theta[1 : 1 + m])))
        if with_noise:
            kw["noise_sigma_n"] = float(np.exp(theta[1 + m]))
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "signal_sigma": self.signal_sigma,
            "length_scales": list(self.length_scales),
            "noise_sigma_n": self.noise_sigma_n,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "KernelSpec":
        return cls(doc["kind"], doc["signal_sigma"], tuple(doc["length_scales"]), doc.get("noise_sigma_n", 0.0))


def _scaled(X, spec: KernelSpec):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    spec.check_dim(X.shape[1])
    return X / np.asarray(spec.length_scales)


def sq_dist(A, B) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def kernel_matrix(X1, X2, spec: KernelSpec) -> np.ndarray:
    """``sigma_f^2 exp(-0.5 * sum_d (x_d - x'_d)^2 / l_d^2)``."""
    A = _scaled(X1, spec)
    if X2 is None:
        K = spec.signal_sigma**2 * np.exp(-0.5 * sq_dist(A, A))
        return 0.5 * (K + K.T)
    B = _scaled(X2, spec)
    return spec.signal_sigma**2 * np.exp(-0.5 * sq_dist(A, B))


def kernel_diag(X, spec: KernelSpec) -> np.ndarray:
    return np.full(np.atleast_2d(X).shape[0], spec.signal_sigma**2)


def kernel_grads(X, spec: KernelSpec, K: np.ndarray | None = None) -> list[np.ndarray]:
    """Derivatives of ``K(X, X)`` with respect to each log-hyperparameter."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if K is None:
        K = kernel_matrix(X, None, spec)
    grads = [2.0 * K]
    if spec.kind == "rbf":
        A = X / spec.length_scales[0]
        grads.append(K * sq_dist(A, A))
    else:
        for d, l in enumerate(spec.length_scales):
            diff = (X[:, d : d + 1] - X[:, d : d + 1].T) / l
            grads.append(K * diff * diff)
    return grads


def jitter_cholesky(A: np.ndarray, scale: float = 1.0, max_tries: int = 7):
    """Lower Cholesky factor of ``A``, adding diagonal jitter if needed.

    Jitter ``1e-10 * scale * 10**j`` is tried for ``j = 0..max_tries-1`` after
    a plain attempt.  Returns ``(L, jitter_used)``.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NumericalError("matrix to factorize has non-finite entries")
    try:
        return cholesky(A, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(A.shape[0])
    for j in range(max_tries):
        jit = 1e-10 * scale * 10.0**j
        try:
            return cholesky(A + jit * eye, lower=True, check_finite=False), jit
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"Cholesky failed even with jitter {1e-10 * scale * 10.0 ** (max_tries - 1):.1e}; "
        "the kernel matrix is far from positive definite"
    )


def chol_solve(L, b):
    return cho_solve((L, True), b, check_finite=False)


def tri_solve(L, b, trans=False):
    return solve_triangular(L, b, lower=True, trans=1 if trans else 0, check_finite=False)
