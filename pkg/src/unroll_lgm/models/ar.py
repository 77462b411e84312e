"""Noisy autoregressive model.

A stationary AR(P) process ``z`` with innovation variance ``kappa`` observed
through additive white noise of variance ``lam``.  The latent precision is the
banded product ``X^T X`` and the AR coefficients are parameterized by partial
autocorrelations so every parameter vector describes a stationary process.

Natural parameters: ``theta = (phi_1..phi_P, kappa, lam)``.
Free parameters:    ``u = (atanh(pacf_1..pacf_P), log kappa, log lam)``.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from ..lgm import Canonical, LgmModel
from ..linop import BandedOperator, IdentityOperator

__all__ = [
    "pacf_to_ar",
    "ar_to_pacf",
    "build_ar_precision",
    "ArPrecision",
    "NoisyArModel",
]


def pacf_to_ar(pacf, return_jacobian=False):
    """Map partial autocorrelations in ``(-1, 1)`` to AR coefficients.

    Runs the Durbin-Levinson recursion; with ``return_jacobian`` also returns
    ``d phi / d pacf`` as a ``(P, P)`` array.
    """
    pacf = np.asarray(pacf, dtype=float).ravel()
    if np.any(np.abs(pacf) >= 1.0):
        raise ValueError("partial autocorrelations must lie strictly inside (-1, 1)")
    P = pacf.size
    phi = np.zeros(0)
    jac = np.zeros((0, P))
    for p in range(1, P + 1):
        g = pacf[p - 1]
        new = np.empty(p)
        new_jac = np.zeros((p, P))
        new[: p - 1] = phi - g * phi[::-1]
        new[p - 1] = g
        if return_jacobian:
            new_jac[: p - 1] = jac - g * jac[::-1]
            new_jac[: p - 1, p - 1] -= phi[::-1]
            new_jac[p - 1, p - 1] = 1.0
        phi, jac = new, new_jac
    return (phi, jac) if return_jacobian else phi


def ar_to_pacf(phi):
    """Inverse of :func:`pacf_to_ar` (step-down recursion)."""
    phi = np.asarray(phi, dtype=float).ravel().copy()
    P = phi.size
    pacf = np.zeros(P)
    for p in range(P, 0, -1):
        g = phi[p - 1]
        if abs(g) >= 1.0:
            raise ValueError("coefficients do not describe a stationary process")
        pacf[p - 1] = g
        prev = phi[: p - 1]
        phi = (prev + g * prev[::-1]) / (1.0 - g * g)
    return pacf


def _head_blocks(phi):
    """The P x P blocks whose difference gives the stationary head precision."""
    P = phi.size
    L = np.eye(P)
    H = np.zeros((P, P))
    for i in range(P):
        for j in range(i):
            L[i, j] = -phi[i - j - 1]
        for c in range(i, P):
            H[i, c] = -phi[P - c + i - 1]
    return L, H


def _head_derivatives(phi, L, H):
    """``d(L^T L - H H^T) / d phi_p`` for each lag p."""
    P = phi.size
    out = np.zeros((P, P, P))
    for p in range(1, P + 1):
        EL = np.zeros((P, P))
        EH = np.zeros((P, P))
        for i in range(P):
            if 0 <= i - p < P:
                EL[i, i - p] = -1.0
            c = i + P - p
            if i <= c < P:
                EH[i, c] = -1.0
        out[p - 1] = EL.T @ L + L.T @ EL - EH @ H.T - H @ EH.T
    return out


class ArPrecision:
    """Banded factor and precision of a stationary AR(P) segment.

    ``factor`` is the lower banded ``X`` with ``X^T X = Gamma``; ``gamma`` is
    ``Gamma`` in symmetric band storage.
    """

    def __init__(self, phi, kappa, length):
        phi = np.asarray(phi, dtype=float).ravel()
        P = phi.size
        length = int(length)
        if length <= P:
            raise ValueError("series length must exceed the AR order")
        if not kappa > 0:
            raise ValueError("innovation variance must be positive")
        self.phi, self.kappa, self.length, self.order = phi, float(kappa), length, P
        L, H = _head_blocks(phi)
        self.head = L.T @ L - H @ H.T
        try:
            # T lower triangular with T^T T = head, via a flipped Cholesky
            C = np.linalg.cholesky(self.head[::-1, ::-1]) if P else np.zeros((0, 0))
        except np.linalg.LinAlgError:
            raise ValueError("AR coefficients are not stationary") from None
        T = C.T[::-1, ::-1]
        self.head_chol = C
        self.head_derivs = _head_derivatives(phi, L, H)

        scale = 1.0 / np.sqrt(self.kappa)
        xs = np.zeros((P + 1, length))  # xs[s, k] = X[k, k - s]
        xs[0, P:] = 1.0
        for s in range(1, P + 1):
            xs[s, P:] = -phi[s - 1]
        for k in range(P):
            for s in range(k + 1):
                xs[s, k] = T[k, k - s]
        xs *= scale
        ab = np.zeros((P + 1, length))
        for s in range(P + 1):
            ab[s, : length - s] = xs[s, s:]
        self.factor = BandedOperator(ab, lower=P, upper=0)
        self.factor_bands = ab
        gb = np.zeros((P + 1, length))
        for o in range(P + 1):
            diag = np.zeros(length - o)
            for s in range(o, P + 1):
                diag[: length - s] += xs[s, s:] * xs[s - o, s:]
            gb[P - o, o:] = diag
        self.gamma = BandedOperator(gb, lower=0, upper=P, symmetric=True)

    def logdet(self):
        logdet_head = 2.0 * np.sum(np.log(np.diag(self.head_chol)))
        return float(logdet_head - self.length * np.log(self.kappa))

    def logdet_grad_phi(self):
        inv = sla.cho_solve((self.head_chol, True), np.eye(self.order))[::-1, ::-1]
        return np.array([np.sum(inv * d) for d in self.head_derivs])

    def sample(self, eps):
        """Draw ``z`` with covariance ``Gamma^{-1}`` by solving ``X z = eps``."""
        return sla.solve_banded((self.order, 0), self.factor_bands, eps)


def build_ar_precision(phi, kappa, length):
    """Banded factor ``X`` and ``log det Gamma`` for AR coefficients ``phi``."""
    prec = ArPrecision(phi, kappa, length)
    return prec.factor, prec.logdet()


class _ArCanonical(Canonical):
    def __init__(self, theta, prec: ArPrecision, lam):
        D = prec.length
        super().__init__(theta, prec.gamma, IdentityOperator(D), np.full(D, 1.0 / lam))
        self.prec = prec
        self.lam = float(lam)

    def prior_factor_apply(self, eps):
        return self.prec.factor.apply_transpose(eps)

    def logdet_gamma(self):
        return self.prec.logdet()

    def logdet_gamma_grad(self):
        P = self.prec.order
        g = np.zeros(P + 2)
        g[:P] = self.prec.logdet_grad_phi()
        g[P] = -self.prec.length / self.prec.kappa
        return g

    def _lag_residual(self, X):
        P, phi = self.prec.order, self.prec.phi
        D = X.shape[0]
        out = X[P:].copy()
        for p in range(1, P + 1):
            out -= phi[p - 1] * X[P - p : D - p]
        return out

    def gamma_vjp(self, W, V):
        prec = self.prec
        P, D, kappa = prec.order, prec.length, prec.kappa
        G = W[:P] @ V[:P].T
        MW = self._lag_residual(W)
        MV = self._lag_residual(V)
        total = (np.sum(prec.head * G) + np.sum(MW * MV)) / kappa
        g = np.zeros(P + 2)
        for p in range(1, P + 1):
            lagW = W[P - p : D - p]
            lagV = V[P - p : D - p]
            g[p - 1] = (
                np.sum(prec.head_derivs[p - 1] * G) - np.sum(lagW * MV) - np.sum(lagV * MW)
            ) / kappa
        g[P] = -total / kappa
        return g

    def psi_vjp(self, g):
        out = np.zeros(self.prec.order + 2)
        out[-1] = -np.sum(g) / self.lam**2
        return out


class NoisyArModel(LgmModel):
    """AR(P) series of length ``length`` observed in white noise.

    Parameters
    ----------
    order : int
        Autoregressive order ``P``.
    length : int
        Number of time points.
    """

    def __init__(self, order, length):
        self.order = int(order)
        self.length = int(length)
        if self.order < 1 or self.length <= self.order:
            raise ValueError("need 1 <= order < length")

    @property
    def latent_dim(self):
        return self.length

    @property
    def obs_dim(self):
        return self.length

    @property
    def n_params(self):
        return self.order + 2

    def param_names(self):
        return [f"phi_{p}" for p in range(1, self.order + 1)] + ["kappa", "lambda"]

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[: self.order], theta[self.order], theta[self.order + 1]

    def pack(self, phi, kappa, lam):
        return np.concatenate([np.asarray(phi, dtype=float).ravel(), [kappa, lam]])

    def canonical(self, theta):
        theta = self.check_theta(theta)
        phi, kappa, lam = self.split(theta)
        if not (kappa > 0 and lam > 0):
            raise ValueError("kappa and lambda must be positive")
        return _ArCanonical(theta, ArPrecision(phi, kappa, self.length), lam)

    def to_natural(self, u):
        u = np.asarray(u, dtype=float)
        phi = pacf_to_ar(np.tanh(u[: self.order]))
        return self.pack(phi, np.exp(u[self.order]), np.exp(u[self.order + 1]))

    def to_free(self, theta):
        phi, kappa, lam = self.split(theta)
        return np.concatenate([np.arctanh(ar_to_pacf(phi)), [np.log(kappa), np.log(lam)]])

    def pullback(self, u, grad_theta):
        u = np.asarray(u, dtype=float)
        g = np.asarray(grad_theta, dtype=float)
        P = self.order
        pacf = np.tanh(u[:P])
        _, jac = pacf_to_ar(pacf, return_jacobian=True)
        out = np.empty_like(g)
        out[:P] = (jac.T @ g[:P]) * (1.0 - pacf**2)
        out[P] = g[P] * np.exp(u[P])
        out[P + 1] = g[P + 1] * np.exp(u[P + 1])
        return out

    def init_natural(self, dataset, rng):
        pacf = rng.uniform(-1.0, 1.0, self.order)
        pacf = np.clip(pacf, -0.999, 0.999)
        kappa, lam = np.exp(rng.uniform(np.log(0.1), np.log(10.0), 2))
        return self.pack(pacf_to_ar(pacf), kappa, lam)

    def sample_latent(self, theta, n, rng):
        """``n`` independent stationary series, shape ``(length, n)``."""
        phi, kappa, _ = self.split(self.check_theta(theta))
        prec = ArPrecision(phi, kappa, self.length)
        return prec.sample(rng.standard_normal((self.length, n)))
