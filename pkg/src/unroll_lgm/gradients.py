"""Gradient estimators for gradient EM.

Four estimates of ``d/d theta1 q(theta1 | theta)`` at ``theta1 = theta`` are
provided, each averaged over the data points of a batch:

``exact``
    dense posterior moments (reference only, small ``D``);
``monte_carlo``
    exact solves of the mean system and of ``K`` sampled systems, with the
    trace term replaced by its sample estimate;
``output``
    the same expression evaluated at truncated iterative solves;
``network``
    the total derivative through the unrolled solver of the truncated
    objective minus the sample cross term, computed by a reverse pass over
    the solver tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .lgm import PosteriorSystem, as_dataset, draw_posterior_rhs
from .linop import DiagonalOperator, IdentityOperator, matvec_count, to_dense
from .solvers import SolveConfig, solve, solve_adjoint

__all__ = [
    "KINDS",
    "GradientEstimate",
    "GradientSettings",
    "exact_gradient",
    "mc_gradient",
    "output_gradient",
    "network_gradient",
    "unrolled_gradient",
    "population_gradient",
    "posterior_via_woodbury",
    "dense_moments",
    "MODEL_PRECONDITIONER",
]

KINDS = ("exact", "monte_carlo", "output", "network")

#: Pass as ``SolveConfig.preconditioner`` to use the model's own diagonal
#: preconditioner (and differentiate through it in the network gradient).
MODEL_PRECONDITIONER = "model"


@dataclass
class GradientEstimate:
    """Population-averaged gradient in natural parameter space."""

    values: np.ndarray
    kind: str
    matvecs: int = 0
    iterations: int = 0
    samples: int = 0
    objective: float = float("nan")

    @property
    def is_finite(self):
        return bool(np.all(np.isfinite(self.values)))

    def __len__(self):
        return self.values.size


@dataclass
class GradientSettings:
    """Estimator choice plus the knobs the stochastic estimators need."""

    kind: str = "network"
    solver: SolveConfig = field(default_factory=SolveConfig)
    n_samples: int = 10
    seed: int = 0
    propagate_step_sizes: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator {self.kind!r}; choose from {KINDS}")
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be at least 1")


def _theta(model, theta):
    return model.check_theta(theta)


def _factor(A):
    """Cholesky factor of a dense SPD matrix (lower)."""
    c, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        raise np.linalg.LinAlgError("posterior precision is not positive definite")
    return c


def dense_moments(system, n, cap=None, covariance=True):
    """Posterior mean and (optionally) covariance of point ``n`` densely."""
    A = system.dense_precision(n, cap)
    c = _factor(A)
    mu = sla.cho_solve((c, True), system.b[:, n])
    if not covariance:
        return mu, c
    inv, info = lapack.dpotri(c, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("failed to invert the posterior precision")
    Sigma = np.tril(inv) + np.tril(inv, -1).T
    return mu, Sigma


def _q_exact(system, n, mu):
    D = system.b.shape[0]
    return -0.5 * system.b[:, n] @ mu + 0.5 * D + system.c[n]


def exact_gradient(model, theta, data, cap=None):
    """Dense reference gradient, averaged over the points of ``data``."""
    theta = _theta(model, theta)
    data = as_dataset(data)
    system = PosteriorSystem(model.canonical(theta), data)
    D, N = system.b.shape
    eye = np.eye(D)
    g = system.c_grad()
    objective = 0.0
    MU = np.empty((D, N))
    for n in range(N):
        mu, Sigma = dense_moments(system, n, cap)
        MU[:, n] = mu
        g = g + 0.5 * system.a_vjp(eye, Sigma, owner=np.full(D, n))
        objective += _q_exact(system, n, mu)
    g = g + 0.5 * system.a_vjp(MU, MU) - system.b_vjp(MU)
    return GradientEstimate(g / N, "exact", objective=objective / N)


def _as_blocks(data, mu, sigmas):
    mu = np.asarray(mu, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if mu.ndim == 1:
        mu = mu[:, None]
        if sigmas.ndim == 1:
            sigmas = sigmas[:, None]
        elif sigmas.ndim == 2 and sigmas.shape[0] != mu.shape[0]:
            sigmas = sigmas.T
    return mu, sigmas


def mc_gradient(model, theta, data, mu, sigmas):
    """Monte Carlo gradient from exact posterior means and solved samples.

    ``mu`` is ``(D, N)`` (or ``(D,)`` for one point) and ``sigmas`` is
    ``(D, N * K)`` with the ``K`` samples of each point contiguous.
    """
    theta = _theta(model, theta)
    data = as_dataset(data)
    system = PosteriorSystem(model.canonical(theta), data)
    mu, sigmas = _as_blocks(data, mu, sigmas)
    N = len(data)
    if sigmas.size == 0:
        raise ValueError("at least one sample is required")
    K = sigmas.shape[1] // N
    if K * N != sigmas.shape[1]:
        raise ValueError("sample block must hold the same number of samples per point")
    g, obj = _quadratic_terms(system, mu, sigmas, K, None, None)
    return GradientEstimate(g / N, "monte_carlo", samples=K, objective=obj / N)


def _quadratic_terms(system, MU, S, K, AMU, AS):
    """Gradient and value of the (possibly truncated) Monte Carlo objective.

    ``AMU``/``AS`` are the products of ``A`` with the iterates when they are
    available from the solver; otherwise they are computed (uncounted, as
    this path is only used with exact moments).
    """
    N = MU.shape[1]
    owner_s = np.repeat(np.arange(N), K)
    g = (
        system.c_grad()
        + 0.5 * system.a_vjp(MU, MU)
        - system.b_vjp(MU)
        + system.a_vjp(S, S, owner=owner_s) / (2.0 * K)
    )
    if AMU is None:
        AMU = system.A.apply(MU)
        AS = system.operator(owner_s).apply(S)
    obj = (
        np.sum(0.5 * MU * AMU)
        - np.sum(system.b * MU)
        + np.sum(S * AS) / (2.0 * K)
        + np.sum(system.c)
    )
    return g, float(obj)


def unrolled_gradient(
    model,
    theta,
    data,
    solver: SolveConfig,
    n_samples,
    seed=0,
    iteration=0,
    kind="network",
    rhs=None,
    propagate_step_sizes=True,
):
    """Output or network gradient from one batched truncated solve.

    The mean system and the ``K`` sampled systems of every point share one
    block solve.  ``rhs`` overrides the sampled right-hand sides (a
    ``(D, N * K)`` block), which is how callers freeze the draws.
    """
    if kind not in ("output", "network"):
        raise ValueError("kind must be 'output' or 'network'")
    theta = _theta(model, theta)
    data = as_dataset(data)
    can = model.canonical(theta)
    system = PosteriorSystem(can, data)
    D, N = system.b.shape
    K = int(n_samples)
    mv0 = matvec_count()
    if rhs is None:
        rhs = draw_posterior_rhs(can, None, data, K, seed, iteration)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (D, N * K):
        raise ValueError(f"sample block must have shape ({D}, {N * K})")
    owner = np.concatenate([np.arange(N), np.repeat(np.arange(N), K)])
    A = system.operator(owner)
    B = np.hstack([system.b, rhs])

    model_pre = isinstance(solver.preconditioner, str)
    cfg = solver
    if model_pre:
        if solver.preconditioner != MODEL_PRECONDITIONER:
            raise ValueError(f"unknown preconditioner {solver.preconditioner!r}")
        pre = can.preconditioner(A.weights)
        cfg = solver.replace(preconditioner=pre)
    if kind == "network":
        cfg = cfg.replace(record_tape=True)
    res = solve(A, B, cfg)
    X, R = res.solution, res.residual
    MU, S = X[:, :N], X[:, N:]
    AX = B - R
    g, obj = _quadratic_terms(system, MU, S, K, AX[:, :N], AX[:, N:])
    if kind == "network":
        seed_bar = -R.copy()
        seed_bar[:, N:] /= K
        theta_bar, rhs_bar, m_bar = solve_adjoint(
            A,
            res.tape,
            seed_bar,
            lambda W, V: system.a_vjp(W, V, owner=owner),
            propagate_step_sizes=propagate_step_sizes,
        )
        g = g + theta_bar + system.b_vjp(rhs_bar[:, :N])
        if model_pre and m_bar is not None:
            g = g + can.preconditioner_vjp(A.weights, m_bar)
    return GradientEstimate(
        g / N,
        kind,
        matvecs=matvec_count() - mv0,
        iterations=int(res.iterations.max(initial=0)),
        samples=K,
        objective=obj / N,
    )


def output_gradient(model, theta, data, solver, n_samples, seed=0, iteration=0, rhs=None):
    """Gradient of the truncated objective with the solver outputs held fixed."""
    return unrolled_gradient(model, theta, data, solver, n_samples, seed, iteration, "output", rhs)


def network_gradient(
    model, theta, data, solver, n_samples, seed=0, iteration=0, rhs=None, propagate_step_sizes=True
):
    """Gradient through the unrolled solver (reverse pass over the tape)."""
    return unrolled_gradient(
        model, theta, data, solver, n_samples, seed, iteration, "network", rhs, propagate_step_sizes
    )


def _dense_mc(model, theta, data, n_samples, seed, iteration, rhs=None, cap=None):
    theta = _theta(model, theta)
    data = as_dataset(data)
    can = model.canonical(theta)
    system = PosteriorSystem(can, data)
    D, N = system.b.shape
    K = int(n_samples)
    if rhs is None:
        rhs = draw_posterior_rhs(can, None, data, K, seed, iteration)
    MU = np.empty((D, N))
    S = np.empty((D, N * K))
    for n in range(N):
        mu, c = dense_moments(system, n, cap, covariance=False)
        MU[:, n] = mu
        S[:, n * K : (n + 1) * K] = sla.cho_solve((c, True), rhs[:, n * K : (n + 1) * K])
    g, obj = _quadratic_terms(system, MU, S, K, None, None)
    return GradientEstimate(g / N, "monte_carlo", samples=K, objective=obj / N)


def population_gradient(model, theta, dataset, settings: GradientSettings, iteration=0, cap=None):
    """Batch-averaged gradient of the selected kind."""
    data = as_dataset(dataset)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if settings.kind == "exact":
        return exact_gradient(model, theta, data, cap)
    if settings.kind == "monte_carlo":
        return _dense_mc(model, theta, data, settings.n_samples, settings.seed, iteration, cap=cap)
    return unrolled_gradient(
        model,
        theta,
        data,
        settings.solver,
        settings.n_samples,
        settings.seed,
        iteration,
        settings.kind,
        propagate_step_sizes=settings.propagate_step_sizes,
    )


def posterior_via_woodbury(model, theta, data, cap=None, return_inner=False):
    """Posterior moments of one point through an ``M_n x M_n`` inversion.

    Requires diagonal ``Gamma`` and ``Psi``.
    """
    theta = _theta(model, theta)
    data = as_dataset(data)
    if len(data) != 1:
        raise ValueError("pass a single data point")
    can = model.canonical(theta)
    if isinstance(can.gamma, DiagonalOperator):
        ginv = 1.0 / can.gamma.diag
    elif isinstance(can.gamma, IdentityOperator):
        ginv = np.ones(can.latent_dim)
    else:
        raise ValueError("the low-dimensional inversion needs a diagonal prior precision")
    system = PosteriorSystem(can, data)
    idx = np.flatnonzero(data.weights[:, 0])
    Phi = to_dense(can.phi, cap)[idx]
    inner = np.diag(1.0 / can.psi[idx]) + (Phi * ginv) @ Phi.T
    right = Phi * ginv  # Omega Phi Gamma^{-1}
    Sigma = np.diag(ginv) - right.T @ sla.solve(inner, right, assume_a="pos")
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = Sigma @ system.b[:, 0]
    if return_inner:
        return mu, Sigma, inner
    return mu, Sigma
