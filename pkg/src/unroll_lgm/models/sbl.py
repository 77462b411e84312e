"""Sparse Bayesian learning for compressed sensing.

Each signal has an independent zero-mean Gaussian prior with per-coefficient
precisions ``alpha`` shared across signals, and is observed through a random
subset of its orthonormal 2-D cosine transform in white noise of precision
``beta``.

Natural parameters: ``theta = (alpha_1..alpha_D, beta)``; free parameters are
their logarithms.
"""

from __future__ import annotations

import numpy as np

from ..lgm import Canonical, LgmModel
from ..linop import DiagonalOperator, OrthoTransformOperator

__all__ = ["SblModel", "sbl_preconditioner"]


def sbl_preconditioner(alpha, beta):
    """Diagonal of ``M^{-1}``: ``1 / (alpha_j + beta)``.

    Exact for a fully observed transform domain; used unchanged as an
    approximation when rows are masked.
    """
    s = np.asarray(alpha, dtype=float) + float(beta)
    if np.any(s <= 0):
        raise ValueError("alpha + beta must be positive")
    return DiagonalOperator(1.0 / s)


class _SblCanonical(Canonical):
    def __init__(self, theta, transform):
        alpha, beta = theta[:-1], theta[-1]
        super().__init__(theta, DiagonalOperator(alpha), transform, np.full(alpha.size, beta))
        self.alpha = alpha
        self.beta = float(beta)

    def prior_factor_apply(self, eps):
        return np.sqrt(self.alpha)[:, None] * eps if eps.ndim == 2 else np.sqrt(self.alpha) * eps

    def logdet_gamma(self):
        return float(np.sum(np.log(self.alpha)))

    def logdet_gamma_grad(self):
        return np.append(1.0 / self.alpha, 0.0)

    def gamma_vjp(self, W, V):
        return np.append(np.sum(W * V, axis=1), 0.0)

    def psi_vjp(self, g):
        out = np.zeros(self.n_params)
        out[-1] = np.sum(g)
        return out

    def preconditioner(self, weights):
        return sbl_preconditioner(self.alpha, self.beta).diag

    def preconditioner_vjp(self, weights, mbar):
        m = 1.0 / (self.alpha + self.beta)
        s = -(m**2) * np.sum(mbar, axis=1)
        return np.append(s, np.sum(s))


class SblModel(LgmModel):
    """Compressed-sensing model on a ``sqrt(D) x sqrt(D)`` grid.

    Parameters
    ----------
    dim : int
        Signal length ``D``; must be a perfect square.
    """

    def __init__(self, dim):
        self.transform = OrthoTransformOperator(dim)
        self.dim = self.transform.cols

    @property
    def latent_dim(self):
        return self.dim

    @property
    def obs_dim(self):
        return self.dim

    @property
    def n_params(self):
        return self.dim + 1

    def param_names(self):
        return [f"alpha_{j}" for j in range(self.dim)] + ["beta"]

    def canonical(self, theta):
        theta = self.check_theta(theta)
        if np.any(theta <= 0):
            raise ValueError("alpha and beta must be positive")
        return _SblCanonical(theta, self.transform)

    def to_natural(self, u):
        return np.exp(np.asarray(u, dtype=float))

    def to_free(self, theta):
        return np.log(np.asarray(theta, dtype=float))

    def pullback(self, u, grad_theta):
        return np.asarray(grad_theta, dtype=float) * np.exp(np.asarray(u, dtype=float))

    def init_natural(self, dataset, rng):
        return np.append(np.exp(rng.standard_normal(self.dim)), 1.0)
