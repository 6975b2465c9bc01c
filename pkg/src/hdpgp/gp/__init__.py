"""Gaussian-process classification (Laplace) and regression."""

from hdpgp.gp.io import load_gp, load_regressors, save_gp, save_regressors
from hdpgp.gp.kernels import KernelSpec, jitter_cholesky, kernel_grads, kernel_matrix
from hdpgp.gp.laplace import (
    GpBinaryClassifier,
    GpMulticlass,
    default_kernel,
    fit_multiclass,
    laplace_fit,
    log_marginal_and_grad,
    optimize_hyperparams,
    predict_binary,
    predict_multiclass,
    sigmoid_gauss_expectation,
)
from hdpgp.gp.regression import GpRegressor, gp_regress_fit, gp_regress_predict, optimize_regression

__all__ = [
    "GpBinaryClassifier",
    "GpMulticlass",
    "GpRegressor",
    "KernelSpec",
    "default_kernel",
    "fit_multiclass",
    "gp_regress_fit",
    "gp_regress_predict",
    "jitter_cholesky",
    "kernel_grads",
    "kernel_matrix",
    "laplace_fit",
    "load_gp",
    "load_regressors",
    "log_marginal_and_grad",
    "optimize_hyperparams",
    "optimize_regression",
    "predict_binary",
    "predict_multiclass",
    "save_gp",
    "save_regressors",
    "sigmoid_gauss_expectation",
]
