"""Latent Gaussian models: data containers, the model contract and the
posterior system.

A model maps natural parameters ``theta`` to canonical operators

    z ~ N(nu, Gamma^{-1}),    y | z ~ N(Phi z + eta, Psi^{-1}),

with ``Psi`` diagonal.  Each data point observes a subset of the entries of
``y``.  Conditioning gives the posterior precision ``A``, the linear term ``b``
and the constant ``c`` of the complete-data negative log-likelihood

    -log p(y, z) = 1/2 z^T A z - b^T z + c + const,

and every gradient in this package is assembled from parameter-space
vector-Jacobian products of these three quantities.  The model only supplies
derivatives of its own primitives (``Gamma``, ``Phi``, ``psi``, ``nu``,
``eta``); :class:`PosteriorSystem` composes them.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .linop import (
    DENSE_CAP,
    IdentityOperator,
    LinearOperator,
    PosteriorPrecisionOperator,
    RowMaskOperator,
    to_dense,
)

__all__ = [
    "DataPoint",
    "Dataset",
    "Canonical",
    "LgmModel",
    "PosteriorSystem",
    "assemble_system",
    "draw_posterior_rhs",
    "sample_stream",
    "posterior_dense",
    "q_value",
    "q_mc",
    "nll_dense",
    "as_dataset",
]

LOG2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class DataPoint:
    """Observed entries ``values`` of one vector and the mask selecting them."""

    values: np.ndarray
    mask: RowMaskOperator

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.mask.rows:
            raise ValueError(
                f"{values.size} observed values but the mask selects {self.mask.rows} rows"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, y):
        """Build from a full-length vector with ``NaN`` marking missing entries."""
        y = np.asarray(y, dtype=float).ravel()
        observed = ~np.isnan(y)
        return cls(y[observed], RowMaskOperator.from_bool(observed))

    @property
    def n_observed(self):
        return self.mask.rows

    @property
    def obs_dim(self):
        return self.mask.cols


class Dataset:
    """A collection of partially observed vectors stored densely.

    Parameters
    ----------
    values : array of shape (M, N)
        Observations, with arbitrary (ignored) values where unobserved.
    weights : array of shape (M, N)
        0/1 observation indicators.
    ids : array of shape (N,), optional
        Global indices of the points; they key the random streams so that a
        subset draws the same samples as the full dataset.
    """

    def __init__(self, values, weights, ids=None):
        values = np.asarray(values, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if values.ndim != 2 or values.shape != weights.shape:
            raise ValueError("values and weights must be matching (M, N) arrays")
        if not np.all((weights == 0) | (weights == 1)):
            raise ValueError("weights must be 0/1 indicators")
        self.weights = weights
        self.values = np.where(weights > 0, values, 0.0)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observed values must be finite")
        n = values.shape[1]
        self.ids = np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)
        if self.ids.shape != (n,):
            raise ValueError("ids must have one entry per data point")

    @classmethod
    def from_array(cls, Y, ids=None):
        """From an ``(N, M)`` array with ``NaN`` for missing entries."""
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[None, :]
        observed = ~np.isnan(Y)
        return cls(np.where(observed, Y, 0.0).T, observed.T.astype(float), ids)

    @classmethod
    def from_points(cls, points, ids=None):
        points = list(points)
        if not points:
            raise ValueError("at least one data point is required")
        M = points[0].obs_dim
        values = np.zeros((M, len(points)))
        weights = np.zeros((M, len(points)))
        for n, p in enumerate(points):
            if p.obs_dim != M:
                raise ValueError("all data points must share the observation dimension")
            values[p.mask.indices, n] = p.values
            weights[p.mask.indices, n] = 1.0
        return cls(values, weights, ids)

    def to_array(self):
        return np.where(self.weights > 0, self.values, np.nan).T

    @property
    def obs_dim(self):
        return self.values.shape[0]

    def __len__(self):
        return self.values.shape[1]

    def __getitem__(self, n):
        idx = np.flatnonzero(self.weights[:, n])
        return DataPoint(self.values[idx, n], RowMaskOperator(idx, self.obs_dim))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.values[:, idx], self.weights[:, idx], self.ids[idx])

    def concat(self, other):
        return Dataset(
            np.hstack([self.values, other.values]),
            np.hstack([self.weights, other.weights]),
            np.concatenate([self.ids, other.ids]),
        )

    def __repr__(self):
        return f"Dataset(M={self.obs_dim}, N={len(self)}, observed={int(self.weights.sum())})"


def as_dataset(data):
    if isinstance(data, Dataset):
        return data
    if isinstance(data, DataPoint):
        return Dataset.from_points([data])
    if isinstance(data, (list, tuple)):
        return Dataset.from_points(data)
    raise TypeError(f"expected a Dataset or DataPoint, got {type(data).__name__}")


# ---------------------------------------------------------------------------
# model contract


class Canonical:
    """Canonical operators of a model at fixed natural parameters.

    Subclasses override the derivative primitives that are not identically
    zero.  Every ``*_vjp`` returns a vector of length ``n_params`` and sums
    over the columns of its block arguments:

    * ``gamma_vjp(W, V)``  - gradient of ``sum_c W[:, c]^T Gamma V[:, c]``
    * ``phi_vjp(U, X)``    - gradient of ``sum_c U[:, c]^T Phi X[:, c]``
    * ``psi_vjp(g)``       - gradient of ``g^T psi``
    * ``nu_vjp(g)`` / ``eta_vjp(g)`` - gradients of ``g^T nu`` / ``g^T eta``
    """

    phi_has_params = False
    eta_has_params = False
    nu_has_params = False

    def __init__(self, theta, gamma, phi, psi, nu=None, eta=None):
        self.theta = np.asarray(theta, dtype=float)
        self.gamma: LinearOperator = gamma
        self.phi: LinearOperator = phi
        self.psi = np.asarray(psi, dtype=float)
        self.nu = None if nu is None else np.asarray(nu, dtype=float)
        self.eta = None if eta is None else np.asarray(eta, dtype=float)
        if self.psi.shape != (phi.rows,):
            raise ValueError("psi must have one entry per observation row")
        if not np.all(np.isfinite(self.psi)) or np.any(self.psi <= 0):
            raise ValueError("noise precisions must be positive and finite")

    @property
    def n_params(self):
        return self.theta.size

    @property
    def latent_dim(self):
        return self.gamma.cols

    @property
    def obs_dim(self):
        return self.phi.rows

    def _zeros(self):
        return np.zeros(self.n_params)

    def prior_factor_apply(self, eps):  # pragma: no cover - abstract
        raise NotImplementedError

    def logdet_gamma(self):  # pragma: no cover - abstract
        raise NotImplementedError

    def logdet_gamma_grad(self):  # pragma: no cover - abstract
        raise NotImplementedError

    def gamma_vjp(self, W, V):  # pragma: no cover - abstract
        raise NotImplementedError

    def phi_vjp(self, U, X):
        return self._zeros()

    def psi_vjp(self, g):  # pragma: no cover - abstract
        raise NotImplementedError

    def nu_vjp(self, g):
        return self._zeros()

    def eta_vjp(self, g):
        return self._zeros()

    def logdet_masked_psi(self, mask):
        """``sum_{m in Omega} log psi_m`` for a :class:`RowMaskOperator`."""
        return float(np.sum(np.log(self.psi[mask.indices])))

    def preconditioner(self, weights):
        """Diagonal of ``M^{-1}`` for conjugate gradient, or ``None``."""
        return None

    def preconditioner_vjp(self, weights, mbar):
        return self._zeros()


class LgmModel(ABC):
    """Base class for concrete latent Gaussian models.

    Subclasses define the natural parameter layout and map it to a
    :class:`Canonical`.  The optimizer works on an unconstrained free vector
    ``u``; ``to_natural``/``to_free``/``pullback`` implement that transform.
    """

    @property
    @abstractmethod
    def latent_dim(self) -> int: ...

    @property
    @abstractmethod
    def obs_dim(self) -> int: ...

    @property
    @abstractmethod
    def n_params(self) -> int: ...

    @abstractmethod
    def canonical(self, theta) -> Canonical: ...

    def param_names(self):
        return [f"theta[{i}]" for i in range(self.n_params)]

    def check_theta(self, theta):
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("parameters must be finite")
        return theta

    def to_natural(self, u):
        return np.asarray(u, dtype=float).copy()

    def to_free(self, theta):
        return np.asarray(theta, dtype=float).copy()

    def pullback(self, u, grad_theta):
        """Chain rule from a natural-space gradient to free space."""
        return np.asarray(grad_theta, dtype=float).copy()

    @abstractmethod
    def init_natural(self, dataset, rng) -> np.ndarray: ...

    def metrics(self, theta):
        """Model-specific scalars logged by the training loop."""
        return {}


# ---------------------------------------------------------------------------
# posterior system


class PosteriorSystem:
    """``A``, ``b`` and ``c`` for every point of a dataset at parameters ``theta``.

    ``A`` is a batched :class:`PosteriorPrecisionOperator` with one column
    mask per point; ``b`` is ``(D, N)`` and ``c`` is ``(N,)``.
    """

    def __init__(self, canonical: Canonical, dataset: Dataset):
        if dataset.obs_dim != canonical.obs_dim:
            raise ValueError(
                f"data has {dataset.obs_dim} observation rows, model expects {canonical.obs_dim}"
            )
        self.canonical = canonical
        self.dataset = dataset
        can = canonical
        w = dataset.weights
        eta = 0.0 if can.eta is None else can.eta[:, None]
        self.residual = w * (dataset.values - eta)
        self.A = PosteriorPrecisionOperator(can.gamma, can.phi, can.psi, w)
        b = can.phi.apply_transpose(can.psi[:, None] * self.residual)
        c = 0.5 * np.sum(can.psi[:, None] * self.residual**2, axis=0)
        c -= 0.5 * (w.T @ np.log(can.psi))
        c -= 0.5 * can.logdet_gamma()
        if can.nu is not None:
            gnu = can.gamma.apply(can.nu)
            b = b + gnu[:, None]
            c += 0.5 * float(can.nu @ gnu)
        self.b = b
        self.c = c

    @property
    def n_points(self):
        return self.dataset.values.shape[1]

    def operator(self, owner=None):
        """Batched precision for columns belonging to points ``owner``."""
        if owner is None:
            return self.A
        return self.A.take_columns(np.asarray(owner, dtype=np.intp))

    def point_operator(self, n):
        return self.A.column(n)

    def _col_weights(self, owner):
        w = self.dataset.weights
        return w if owner is None else w[:, np.asarray(owner, dtype=np.intp)]

    # -- derivatives -------------------------------------------------------

    def a_vjp(self, W, V, owner=None):
        """Gradient of ``sum_c W_c^T A_{owner[c]} V_c`` in ``theta``."""
        W = np.asarray(W, dtype=float)
        V = np.asarray(V, dtype=float)
        if W.ndim == 1:
            W, V = W[:, None], V[:, None]
        can = self.canonical
        w = self._col_weights(owner)
        g = can.gamma_vjp(W, V)
        PW = can.phi.apply(W)
        PV = can.phi.apply(V)
        if can.phi_has_params:
            wp = w * can.psi[:, None]
            g = g + can.phi_vjp(wp * PV, W) + can.phi_vjp(wp * PW, V)
        g = g + can.psi_vjp(np.sum(w * PW * PV, axis=1))
        return g

    def b_vjp(self, W):
        """Gradient of ``sum_n b_n^T W[:, n]``."""
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        can = self.canonical
        e = self.residual
        PW = can.phi.apply(W)
        g = can.psi_vjp(np.sum(PW * e, axis=1))
        if can.phi_has_params:
            g = g + can.phi_vjp(can.psi[:, None] * e, W)
        if can.eta_has_params:
            g = g + can.eta_vjp(-np.sum(self.dataset.weights * can.psi[:, None] * PW, axis=1))
        if can.nu is not None:
            g = g + can.gamma_vjp(W, np.repeat(can.nu[:, None], W.shape[1], axis=1))
            if can.nu_has_params:
                g = g + can.nu_vjp(can.gamma.apply(W).sum(axis=1))
        return g

    def c_grad(self):
        """Gradient of ``sum_n c_n``."""
        can = self.canonical
        e = self.residual
        w = self.dataset.weights
        N = self.n_points
        g = can.psi_vjp(0.5 * np.sum(e**2, axis=1) - 0.5 * w.sum(axis=1) / can.psi)
        if can.eta_has_params:
            g = g + can.eta_vjp(-np.sum(can.psi[:, None] * e, axis=1))
        if can.nu is not None:
            g = g + 0.5 * N * can.gamma_vjp(can.nu[:, None], can.nu[:, None])
            if can.nu_has_params:
                g = g + can.nu_vjp(N * can.gamma.apply(can.nu))
        g = g - 0.5 * N * can.logdet_gamma_grad()
        return g

    # -- dense helpers (oracle use) ---------------------------------------

    def dense_precision(self, n, cap=None):
        return to_dense(self.point_operator(n), cap)


def assemble_system(model, theta, data):
    """Posterior system for one point or a whole dataset."""
    theta = model.check_theta(theta)
    return PosteriorSystem(model.canonical(theta), as_dataset(data))


# ---------------------------------------------------------------------------
# sampling


def sample_stream(seed, iteration, point_id, k):
    """Independent generator for sample ``k`` of point ``point_id`` at an EM iteration."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(0, int(iteration), int(point_id), int(k)))
    return np.random.default_rng(ss)


def draw_posterior_rhs(model_or_canonical, theta, data, K, seed, iteration=0):
    """Right-hand sides ``delta_k = xi_k + Phi^T Omega^T Omega zeta_k``.

    ``xi_k`` has covariance ``Gamma`` and ``zeta_k`` has covariance ``Psi`` so
    ``delta_k`` has covariance ``A``.  Returns a ``(D, N * K)`` block with the
    ``K`` samples of each point stored contiguously.
    """
    K = int(K)
    if K < 1:
        raise ValueError("K must be at least 1")
    if isinstance(model_or_canonical, Canonical):
        can = model_or_canonical
    else:
        can = model_or_canonical.canonical(model_or_canonical.check_theta(theta))
    data = as_dataset(data)
    D, M = can.latent_dim, can.obs_dim
    N = len(data)
    eps = np.empty((D + M, N * K))
    for n in range(N):
        pid = data.ids[n]
        for k in range(K):
            eps[:, n * K + k] = sample_stream(seed, iteration, pid, k).standard_normal(D + M)
    xi = can.prior_factor_apply(eps[:D])
    w = np.repeat(data.weights, K, axis=1)
    zeta = np.sqrt(can.psi)[:, None] * eps[D:]
    return xi + can.phi.apply_transpose(w * zeta)


# ---------------------------------------------------------------------------
# dense references


def posterior_dense(system, n=0, cap=None):
    """Exact posterior mean and covariance of point ``n`` by Cholesky."""
    A = system.dense_precision(n, cap)
    cf = sla.cho_factor(A, lower=True)
    mu = sla.cho_solve(cf, system.b[:, n])
    Sigma = sla.cho_solve(cf, np.eye(A.shape[0]))
    return mu, 0.5 * (Sigma + Sigma.T)


def _single(system, n):
    if system.n_points != 1 and n is None:
        raise ValueError("pass the point index for multi-point systems")
    return 0 if n is None else n


def q_value(model, theta1, theta2, data, mu=None, Sigma=None):
    """``q(theta1 | theta2)`` for a single point using dense posterior moments.

    ``mu`` and ``Sigma`` are the posterior moments under ``theta2``; they are
    computed when omitted.
    """
    s1 = assemble_system(model, theta1, data)
    if mu is None or Sigma is None:
        mu, Sigma = posterior_dense(assemble_system(model, theta2, data), 0)
    A1 = s1.dense_precision(0)
    mu = np.asarray(mu, dtype=float)
    return float(
        0.5 * mu @ A1 @ mu - s1.b[:, 0] @ mu + 0.5 * np.sum(A1 * Sigma) + s1.c[0]
    )


def q_mc(model, theta1, theta2, data, mu, sigmas):
    """Monte Carlo objective: the trace term replaced by ``(1/2K) sum sigma^T A sigma``."""
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.size == 0:
        raise ValueError("at least one sample is required")
    if sigmas.ndim == 1:
        sigmas = sigmas[:, None]
    s1 = assemble_system(model, theta1, data)
    A = s1.point_operator(0)
    mu = np.asarray(mu, dtype=float)
    K = sigmas.shape[1]
    quad = np.sum(sigmas * A.apply(sigmas)) / (2.0 * K)
    return float(0.5 * mu @ A.apply(mu) - s1.b[:, 0] @ mu + quad + s1.c[0])


def nll_dense(model, theta, dataset, cap=None):
    """Mean negative log marginal likelihood over a dataset (dense reference).

    Uses the marginal ``y_obs ~ N(Omega(Phi nu + eta), Omega(Phi Gamma^{-1} Phi^T + Psi^{-1})Omega^T)``.
    """
    theta = model.check_theta(theta)
    data = as_dataset(dataset)
    can = model.canonical(theta)
    cap = DENSE_CAP if cap is None else cap
    G = to_dense(can.gamma, cap)
    P = to_dense(can.phi, cap) if not isinstance(can.phi, IdentityOperator) else np.eye(can.obs_dim)
    cov = P @ sla.solve(G, P.T, assume_a="pos") + np.diag(1.0 / can.psi)
    mean = P @ (can.nu if can.nu is not None else np.zeros(can.latent_dim))
    if can.eta is not None:
        mean = mean + can.eta
    total = 0.0
    for n in range(len(data)):
        idx = np.flatnonzero(data.weights[:, n])
        if idx.size == 0:
            continue
        r = data.values[idx, n] - mean[idx]
        C = cov[np.ix_(idx, idx)]
        cf = sla.cho_factor(C, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        total += 0.5 * (r @ sla.cho_solve(cf, r) + logdet + idx.size * LOG2PI)
    return total / len(data)
