"""Factor analysis for collaborative filtering.

Items are observation rows and users are data points: user ``n`` has a latent
taste vector ``z ~ N(0, I)`` and rates item ``m`` as ``phi_m^T z + eta_m`` plus
noise of precision ``psi_m``.

Natural parameters: ``theta = (vec(Phi), eta, psi)`` with ``Phi`` flattened row
by row; free parameters replace ``psi`` by ``log psi``.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from ..lgm import Canonical, LgmModel, as_dataset
from ..linop import DenseOperator, IdentityOperator

__all__ = ["FactorAnalysisModel", "fa_predict", "posterior_means", "RATING_RANGE", "COLD_START_RATING"]

RATING_RANGE = (1.0, 5.0)
COLD_START_RATING = 3.0


class _FaCanonical(Canonical):
    phi_has_params = True
    eta_has_params = True

    def __init__(self, theta, loadings, eta, psi):
        M, D = loadings.shape
        super().__init__(theta, IdentityOperator(D), DenseOperator(loadings, symmetric=False), psi, eta=eta)
        self.loadings = loadings
        self._sl_phi = slice(0, M * D)
        self._sl_eta = slice(M * D, M * D + M)
        self._sl_psi = slice(M * D + M, M * D + 2 * M)

    def prior_factor_apply(self, eps):
        return np.array(eps, dtype=float)

    def logdet_gamma(self):
        return 0.0

    def logdet_gamma_grad(self):
        return self._zeros()

    def gamma_vjp(self, W, V):
        return self._zeros()

    def phi_vjp(self, U, X):
        g = self._zeros()
        g[self._sl_phi] = (U @ X.T).ravel()
        return g

    def psi_vjp(self, g):
        out = self._zeros()
        out[self._sl_psi] = g
        return out

    def eta_vjp(self, g):
        out = self._zeros()
        out[self._sl_eta] = g
        return out


class FactorAnalysisModel(LgmModel):
    """Linear-Gaussian factor model with ``n_components`` latent factors.

    Parameters
    ----------
    n_items : int
        Observation dimension ``M``.
    n_components : int
        Latent dimension ``D`` (at most ``M``).
    """

    def __init__(self, n_items, n_components):
        self.n_items = int(n_items)
        self.n_components = int(n_components)
        if not 1 <= self.n_components <= self.n_items:
            raise ValueError("need 1 <= n_components <= n_items")

    @property
    def latent_dim(self):
        return self.n_components

    @property
    def obs_dim(self):
        return self.n_items

    @property
    def n_params(self):
        return self.n_items * (self.n_components + 2)

    def param_names(self):
        M, D = self.n_items, self.n_components
        names = [f"loading_{m}_{d}" for m in range(M) for d in range(D)]
        return names + [f"offset_{m}" for m in range(M)] + [f"precision_{m}" for m in range(M)]

    def split(self, theta):
        M, D = self.n_items, self.n_components
        theta = np.asarray(theta, dtype=float)
        return theta[: M * D].reshape(M, D), theta[M * D : M * D + M], theta[M * D + M :]

    def pack(self, loadings, eta, psi):
        return np.concatenate([np.ravel(loadings), np.ravel(eta), np.ravel(psi)])

    def canonical(self, theta):
        theta = self.check_theta(theta)
        loadings, eta, psi = self.split(theta)
        return _FaCanonical(theta, loadings, eta, psi)

    def _psi_slice(self):
        M, D = self.n_items, self.n_components
        return slice(M * D + M, M * D + 2 * M)

    def to_natural(self, u):
        theta = np.array(u, dtype=float)
        sl = self._psi_slice()
        theta[sl] = np.exp(theta[sl])
        return theta

    def to_free(self, theta):
        u = np.array(theta, dtype=float)
        sl = self._psi_slice()
        u[sl] = np.log(u[sl])
        return u

    def pullback(self, u, grad_theta):
        g = np.array(grad_theta, dtype=float)
        sl = self._psi_slice()
        g[sl] *= np.exp(np.asarray(u, dtype=float)[sl])
        return g

    def init_natural(self, dataset, rng):
        M, D = self.n_items, self.n_components
        loadings = rng.normal(0.0, 1.0 / np.sqrt(D), (M, D))
        data = as_dataset(dataset)
        counts = data.weights.sum(axis=1)
        total = data.weights.sum()
        glob = data.values.sum() / total if total else 0.0
        eta = np.where(counts > 0, data.values.sum(axis=1) / np.maximum(counts, 1), glob)
        return self.pack(loadings, eta, np.ones(M))


def posterior_means(model, theta, dataset):
    """Exact posterior means of every user's factors, shape ``(D, N)``.

    The ``D x D`` systems are small, so they are formed and solved directly.
    """
    loadings, eta, psi = model.split(model.check_theta(theta))
    data = as_dataset(dataset)
    wp = data.weights * psi[:, None]
    D = loadings.shape[1]
    A = np.einsum("mn,md,me->nde", wp, loadings, loadings) + np.eye(D)
    rhs = loadings.T @ (wp * (data.values - eta[:, None]))
    return np.stack([sla.solve(A[n], rhs[:, n], assume_a="pos") for n in range(len(data))], axis=1)


def fa_predict(model, theta, user, item, mean=None):
    """Clipped rating prediction for one user and item.

    ``user`` is a :class:`~unroll_lgm.lgm.DataPoint` with the user's training
    ratings; users without any rating get the cold-start constant.
    """
    item = int(item)
    if not 0 <= item < model.n_items:
        raise IndexError(f"item index {item} out of range [0, {model.n_items})")
    if user.n_observed == 0:
        return COLD_START_RATING
    loadings, eta, _ = model.split(model.check_theta(theta))
    if mean is None:
        mean = posterior_means(model, theta, user)[:, 0]
    return float(np.clip(loadings[item] @ mean + eta[item], *RATING_RANGE))
