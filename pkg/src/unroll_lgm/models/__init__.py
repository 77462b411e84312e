"""Concrete latent Gaussian models."""

import numpy as np

from .ar import NoisyArModel, ar_to_pacf, build_ar_precision, pacf_to_ar
from .fa import FactorAnalysisModel, fa_predict, posterior_means
from .sbl import SblModel, sbl_preconditioner

__all__ = [
    "NoisyArModel",
    "SblModel",
    "FactorAnalysisModel",
    "pacf_to_ar",
    "ar_to_pacf",
    "build_ar_precision",
    "sbl_preconditioner",
    "fa_predict",
    "posterior_means",
    "nrmse",
]


def nrmse(estimate, truth):
    """Normalized root-mean-square error in percent: ``100 |est - truth| / |truth|``."""
    estimate = np.asarray(estimate, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if estimate.shape != truth.shape:
        raise ValueError("estimate and truth must have the same size")
    ref = np.linalg.norm(truth)
    if ref == 0:
        raise ValueError("reference vector has zero norm")
    return float(100.0 * np.linalg.norm(estimate - truth) / ref)
