"""Scikit-learn style front ends for the three models.

Each estimator takes a ``(n_samples, n_features)`` array with ``NaN`` for
unobserved entries, fits by gradient EM with the configured gradient
estimator, and exposes the fitted parameters as trailing-underscore
attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    check_choice,
    check_observations,
    check_positive_float,
    check_positive_int,
    to_dataset,
)
from .gradients import KINDS, MODEL_PRECONDITIONER
from .lgm import PosteriorSystem, nll_dense
from .linop import DENSE_CAP
from .models.ar import NoisyArModel
from .models.fa import COLD_START_RATING, RATING_RANGE, FactorAnalysisModel, posterior_means
from .models.sbl import SblModel
from .solvers import METHODS, SolveConfig, canonical_method, solve
from .training import TrainConfig, fit

__all__ = ["NoisyAR", "BayesianCompressedSensing", "FactorAnalysisCF", "rating_rmse"]


class _GradientEMEstimator(TransformerMixin, BaseEstimator):
    """Shared fitting plumbing; subclasses provide the model and defaults."""

    def _check_common(self):
        check_choice(self.estimator, "estimator", KINDS)
        canonical_method(self.solver)
        check_positive_int(self.n_samples, "n_samples")
        check_positive_int(self.n_iterations, "n_iterations")
        check_positive_int(self.em_iterations, "em_iterations", minimum=0)
        check_positive_float(self.learning_rate, "learning_rate")

    def _solver_config(self, preconditioner=None):
        return SolveConfig(self.solver, self.n_iterations, preconditioner=preconditioner)

    def _train_config(self, **extra):
        return TrainConfig(
            estimator=self.estimator,
            solver=self._solver_config(extra.pop("preconditioner", None)),
            n_samples=self.n_samples,
            learning_rate=self.learning_rate,
            em_iterations=self.em_iterations,
            seed=self.random_state,
            **extra,
        )

    def _store(self, result):
        self.model_ = result.model
        self.theta_ = result.best_theta
        self.log_ = result.log
        self.n_iter_ = result.state.iteration
        self.total_matvecs_ = result.total_matvecs

    def _posterior_means(self, X, max_iterations, preconditioned=False):
        """Posterior means of each row, solved with conjugate gradient."""
        data = to_dataset(X)
        can = self.model_.canonical(self.theta_)
        system = PosteriorSystem(can, data)
        pre = can.preconditioner(system.A.weights) if preconditioned else None
        cfg = SolveConfig(
            "cg", max_iterations, residual_tolerance=self.tol * max(1.0, np.linalg.norm(system.b)),
            preconditioner=pre,
        )
        return solve(system.A, system.b, cfg).solution.T


class NoisyAR(_GradientEMEstimator):
    """Stationary autoregressive series observed in white noise.

    Parameters
    ----------
    order : int, default=5
    estimator : {"exact", "monte_carlo", "output", "network"}, default="network"
    solver : {"cg", "sd", "gd"}, default="cg"
    n_samples : int, default=10
        Posterior samples per series and EM iteration.
    n_iterations : int, default=30
        Solver iterations.
    learning_rate : float, default=0.1
        Adam step in the unconstrained parameterization.
    em_iterations : int, default=200
    tol : float, default=1e-10
        Relative residual tolerance of the solves in :meth:`transform`.
    random_state : int, default=0

    Attributes
    ----------
    ar_coef_ : ndarray of shape (order,)
    innovation_variance_ : float
    noise_variance_ : float
    theta_ : ndarray
        ``(ar_coef_, innovation_variance_, noise_variance_)``.
    log_ : list of dict
        Per-iteration training log.
    """

    def __init__(
        self,
        order=5,
        estimator="network",
        solver="cg",
        n_samples=10,
        n_iterations=30,
        learning_rate=0.1,
        em_iterations=200,
        tol=1e-10,
        random_state=0,
    ):
        self.order = order
        self.estimator = estimator
        self.solver = solver
        self.n_samples = n_samples
        self.n_iterations = n_iterations
        self.learning_rate = learning_rate
        self.em_iterations = em_iterations
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None, theta0=None):
        """Fit to series stored as rows of ``X`` (``NaN`` = missing)."""
        self._check_common()
        order = check_positive_int(self.order, "order")
        X = check_observations(X)
        if X.shape[1] <= order:
            raise ValueError("series must be longer than the AR order")
        self.n_features_in_ = X.shape[1]
        model = NoisyArModel(order, X.shape[1])
        self._store(fit(model, to_dataset(X), self._train_config(), theta0=theta0))
        self.ar_coef_, self.innovation_variance_, self.noise_variance_ = model.split(self.theta_)
        return self

    def transform(self, X):
        """Posterior mean of the latent series, one row per input row."""
        check_is_fitted(self, "theta_")
        X = check_observations(X, self.n_features_in_)
        return self._posterior_means(X, self.n_features_in_)

    def score(self, X, y=None):
        """Mean log marginal likelihood per series (dense, short series only)."""
        check_is_fitted(self, "theta_")
        X = check_observations(X, self.n_features_in_)
        if self.n_features_in_**2 > DENSE_CAP:
            raise ValueError("series too long for the dense likelihood")
        return -nll_dense(self.model_, self.theta_, to_dataset(X))


class BayesianCompressedSensing(_GradientEMEstimator):
    """Sparse Bayesian learning from partial orthonormal-transform measurements.

    Rows of ``X`` are measurement vectors in the transform domain of a
    ``sqrt(D) x sqrt(D)`` signal; ``NaN`` marks unmeasured coefficients.

    Parameters
    ----------
    estimator : {"exact", "monte_carlo", "output", "network"}, default="network"
    solver : {"cg", "sd", "gd"}, default="cg"
    preconditioned : bool, default=True
        Use the diagonal ``1 / (alpha + beta)`` preconditioner with
        conjugate gradient.
    n_samples : int, default=30
    n_iterations : int, default=25
    learning_rate : float, default=1.0
    em_iterations : int, default=100
    tol : float, default=1e-10
    random_state : int, default=0

    Attributes
    ----------
    alpha_ : ndarray of shape (D,)
        Prior precisions of the signal coefficients.
    beta_ : float
        Noise precision.
    """

    def __init__(
        self,
        estimator="network",
        solver="cg",
        preconditioned=True,
        n_samples=30,
        n_iterations=25,
        learning_rate=1.0,
        em_iterations=100,
        tol=1e-10,
        random_state=0,
    ):
        self.estimator = estimator
        self.solver = solver
        self.preconditioned = preconditioned
        self.n_samples = n_samples
        self.n_iterations = n_iterations
        self.learning_rate = learning_rate
        self.em_iterations = em_iterations
        self.tol = tol
        self.random_state = random_state

    def _use_preconditioner(self):
        return bool(self.preconditioned) and canonical_method(self.solver) == METHODS[2]

    def fit(self, X, y=None, theta0=None):
        self._check_common()
        X = check_observations(X)
        model = SblModel(X.shape[1])
        self.n_features_in_ = X.shape[1]
        pre = MODEL_PRECONDITIONER if self._use_preconditioner() else None
        self._store(fit(model, to_dataset(X), self._train_config(preconditioner=pre), theta0=theta0))
        self.alpha_, self.beta_ = self.theta_[:-1], float(self.theta_[-1])
        return self

    def transform(self, X):
        """Posterior-mean signals, one row per measurement row."""
        check_is_fitted(self, "theta_")
        X = check_observations(X, self.n_features_in_)
        return self._posterior_means(X, self.n_features_in_, self._use_preconditioner())


def rating_rmse(model, theta, train, evaluate):
    """RMSE of clipped predictions on the observed entries of ``evaluate``.

    Both arguments are ``(n_users, n_items)`` arrays with ``NaN`` for missing
    ratings; users without training ratings get the cold-start constant.
    """
    mask = ~np.isnan(evaluate)
    if not mask.any():
        raise ValueError("no ratings to evaluate")
    users, items = np.nonzero(mask)
    pred = _predict(model, theta, train, users, items)
    return float(np.sqrt(np.mean((pred - evaluate[users, items]) ** 2)))


def _predict(model, theta, train, users, items):
    loadings, eta, _ = model.split(theta)
    data = to_dataset(train)
    means = posterior_means(model, theta, data)
    pred = np.einsum("nd,dn->n", loadings[items], means[:, users]) + eta[items]
    pred = np.clip(pred, *RATING_RANGE)
    cold = data.weights.sum(axis=0) == 0
    return np.where(cold[users], COLD_START_RATING, pred)


class FactorAnalysisCF(_GradientEMEstimator):
    """Factor analysis for rating prediction.

    Rows of ``X`` are users and columns are items; ``NaN`` marks a missing
    rating.

    Parameters
    ----------
    n_components : int, default=5
    estimator : {"exact", "monte_carlo", "output", "network"}, default="output"
    solver : {"cg", "sd", "gd"}, default="cg"
    n_samples : int, default=10
    n_iterations : int, default=10
    learning_rate : float, default=0.001
    em_iterations : int, default=2000
    batch_size : int, default=25
        Users per minibatch.
    accumulation : int, default=4
        Minibatch gradients averaged per update.
    validation_every : int, default=25
        Checkpoint cadence when validation ratings are passed to :meth:`fit`.
    random_state : int, default=0

    Attributes
    ----------
    components_ : ndarray of shape (n_items, n_components)
    offsets_ : ndarray of shape (n_items,)
    noise_precision_ : ndarray of shape (n_items,)
    best_validation_rmse_ : float
        ``inf`` when no validation set was given.
    """

    def __init__(
        self,
        n_components=5,
        estimator="output",
        solver="cg",
        n_samples=10,
        n_iterations=10,
        learning_rate=0.001,
        em_iterations=2000,
        batch_size=25,
        accumulation=4,
        validation_every=25,
        tol=1e-10,
        random_state=0,
    ):
        self.n_components = n_components
        self.estimator = estimator
        self.solver = solver
        self.n_samples = n_samples
        self.n_iterations = n_iterations
        self.learning_rate = learning_rate
        self.em_iterations = em_iterations
        self.batch_size = batch_size
        self.accumulation = accumulation
        self.validation_every = validation_every
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None, X_val=None, theta0=None):
        """Fit on training ratings ``X``; ``X_val`` enables checkpointing."""
        self._check_common()
        n_components = check_positive_int(self.n_components, "n_components")
        X = check_observations(X)
        if np.isnan(X).all():
            raise ValueError("X holds no ratings")
        self.n_features_in_ = X.shape[1]
        model = FactorAnalysisModel(X.shape[1], n_components)
        validation = None
        if X_val is not None:
            X_val = check_observations(X_val, X.shape[1], name="X_val")
            if X_val.shape[0] != X.shape[0]:
                raise ValueError("X_val must have one row per user of X")
            validation = X_val
        cfg = self._train_config(
            batch_size=self.batch_size,
            accumulation=self.accumulation,
            validation_every=self.validation_every if validation is not None else 0,
        )
        result = fit(
            model,
            to_dataset(X),
            cfg,
            theta0=theta0,
            validation=validation,
            validation_metric=lambda m, th, v: rating_rmse(m, th, X, v),
        )
        self._store(result)
        self.best_validation_rmse_ = result.state.best_metric
        self.train_ratings_ = X
        self.components_, self.offsets_, self.noise_precision_ = model.split(self.theta_)
        return self

    def transform(self, X):
        """Posterior means of the user factors, shape ``(n_users, n_components)``."""
        check_is_fitted(self, "theta_")
        X = check_observations(X, self.n_features_in_)
        return posterior_means(self.model_, self.theta_, to_dataset(X)).T

    def predict(self, users, items, X=None):
        """Clipped ratings for ``(users[i], items[i])`` pairs.

        Users are rows of ``X`` (the training ratings by default).
        """
        check_is_fitted(self, "theta_")
        X = self.train_ratings_ if X is None else check_observations(X, self.n_features_in_)
        users = np.asarray(users, dtype=np.intp).ravel()
        items = np.asarray(items, dtype=np.intp).ravel()
        if users.shape != items.shape:
            raise ValueError("users and items must have the same length")
        if users.size and (users.min() < 0 or users.max() >= X.shape[0]):
            raise IndexError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.n_features_in_):
            raise IndexError("item index out of range")
        return _predict(self.model_, self.theta_, X, users, items)

    def score(self, X, y=None):
        """Negative RMSE on the observed entries of ``X`` (same users as training)."""
        check_is_fitted(self, "theta_")
        X = check_observations(X, self.n_features_in_)
        return -rating_rmse(self.model_, self.theta_, self.train_ratings_, X)
