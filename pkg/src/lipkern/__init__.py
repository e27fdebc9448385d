"""Lipschitz-bounded and monotone operator identification with nonexpansive kernels."""

from .estimator import (Dataset, FittedModel, GramMatrix, assemble_gram, empirical_lipschitz_check, fit,
                        fit_to_budget, predict, rkhs_norm_at, tune_gamma)
from .kernels import (Bilinear, ConvexSum, Conjugated, Gaussian, InversePower, Kernel, PolynomialScalar,
                      ScaledLaplacian, ScalarTimesOperator, audit_nonexpansive, audit_psd, kernel_from_dict,
                      kernel_metric, parse_kernel, uniform_box)
from .monotone import MonotoneModel, fit_monotone, monotonicity_check, scatter, simulate

__all__ = [
    "Bilinear", "ConvexSum", "Conjugated", "Dataset", "FittedModel", "Gaussian", "GramMatrix", "InversePower",
    "Kernel", "MonotoneModel", "PolynomialScalar", "ScaledLaplacian", "ScalarTimesOperator", "assemble_gram",
    "audit_nonexpansive", "audit_psd", "empirical_lipschitz_check", "fit", "fit_monotone", "fit_to_budget",
    "kernel_from_dict", "kernel_metric", "monotonicity_check", "parse_kernel", "predict", "rkhs_norm_at",
    "scatter", "simulate", "tune_gamma", "uniform_box",
]

__version__ = "0.1.0"
