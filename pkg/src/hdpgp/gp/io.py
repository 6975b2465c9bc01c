"""JSON persistence for fitted classifiers and regressors."""

from __future__ import annotations

import json

import numpy as np

from hdpgp.errors import DataError
from hdpgp.gp.kernels import KernelSpec, jitter_cholesky, kernel_matrix
from hdpgp.gp.laplace import GpBinaryClassifier, GpMulticlass, dlog_lik, log_lik
from hdpgp.gp.regression import GpRegressor, gp_regress_fit

GP_SCHEMA = "gp/1"
GPR_SCHEMA = "gpr/1"


def _read(path, schema):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("schema") != schema:
        raise DataError(f"{path}: expected schema {schema!r}, got {doc.get('schema')!r}")
    return doc


def classifier_from_mode(X, y, kernel: KernelSpec, f_tilde) -> GpBinaryClassifier:
    """Rebuild the Laplace quantities from a stored mode without re-optimizing."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    f = np.asarray(f_tilde, dtype=float)
    if not (X.shape[0] == y.size == f.size):
        raise DataError("stored classifier has inconsistent X / y / f_tilde lengths")
    K = kernel_matrix(X, None, kernel)
    d1, d2, _ = dlog_lik(y, f)
    W = -d2
    sW = np.sqrt(W)
    L, _ = jitter_cholesky(np.eye(y.size) + sW[:, None] * K * sW[None, :])
    psi = -0.5 * d1 @ f + log_lik(y, f).sum()
    lml = float(psi - np.sum(np.log(np.diag(L))))
    return GpBinaryClassifier(X, y, kernel, f, W, L, d1, d1.copy(), lml, 0)


def save_gp(model: GpMulticlass, path, config_hash: str | None = None) -> None:
    doc = {
        "schema": GP_SCHEMA,
        "classes": list(model.classes),
        "per_class": [
            {
                "kernel": b.kernel.to_dict(),
                "X": b.X.tolist(),
                "y": b.y.tolist(),
                "f_tilde": b.f_tilde.tolist(),
            }
            for b in model.binaries
        ],
        "config_hash": config_hash,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_gp(path) -> GpMulticlass:
    doc = _read(path, GP_SCHEMA)
    try:
        binaries = tuple(
            classifier_from_mode(c["X"], c["y"], KernelSpec.from_dict(c["kernel"]), c["f_tilde"])
            for c in doc["per_class"]
        )
        return GpMulticlass(tuple(int(c) for c in doc["classes"]), binaries)
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc}") from None


def save_regressors(regs: list[tuple[int, GpRegressor]], path, config_hash: str | None = None) -> None:
    doc = {
        "schema": GPR_SCHEMA,
        "regressors": [
            {
                "target_index": int(i),
                "kernel": r.kernel.to_dict(),
                "mean": r.mean,
                "X": r.X.tolist(),
                "targets": r.targets.tolist(),
                "noise_scale": None if r.noise_scale is None else r.noise_scale.tolist(),
            }
            for i, r in regs
        ],
        "config_hash": config_hash,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_regressors(path) -> list[tuple[int, GpRegressor]]:
    doc = _read(path, GPR_SCHEMA)
    try:
        return [
            (
                int(r["target_index"]),
                gp_regress_fit(r["X"], r["targets"], KernelSpec.from_dict(r["kernel"]),
                               r.get("mean", 0.0), r.get("noise_scale")),
            )
            for r in doc["regressors"]
        ]
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc}") from None
