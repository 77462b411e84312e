"""The gradient-EM training loop.

Each EM iteration draws fresh posterior samples, estimates the gradient of
the expected complete-data negative log-likelihood with the configured
estimator, maps it to the unconstrained parameterization and takes one
optimizer step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .gradients import KINDS, GradientSettings, population_gradient
from .lgm import as_dataset, nll_dense
from .linop import DENSE_CAP
from .solvers import SolveConfig

__all__ = [
    "TrainConfig",
    "TrainState",
    "FitResult",
    "NonFiniteGradientError",
    "TrainingError",
    "gradient_em_step",
    "fit",
    "init_state",
    "LOG_COLUMNS",
]

LOG_COLUMNS = ("iter", "objective_proxy", "grad_norm", "matvecs", "seconds")
OPTIMIZERS = ("adam", "fixed_step")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, index, name, iteration):
        super().__init__(
            f"non-finite gradient for parameter {index} ({name}) at EM iteration {iteration}"
        )
        self.index = index
        self.name = name
        self.iteration = iteration


class TrainingError(RuntimeError):
    """A step failed; ``state`` is the last valid state and ``log`` the rows so far."""

    def __init__(self, message, state, log):
        super().__init__(message)
        self.state = state
        self.log = log


@dataclass
class TrainConfig:
    """Settings of the EM loop.

    ``n_iterations`` (solver depth) overrides ``solver.max_iterations`` when
    given.  ``frozen`` lists free-parameter indices that are never updated.
    """

    estimator: str = "network"
    solver: SolveConfig = field(default_factory=SolveConfig)
    n_samples: int = 10
    n_iterations: int | None = None
    optimizer: str = "adam"
    learning_rate: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    em_iterations: int = 200
    batch_size: int | None = None
    accumulation: int = 1
    seed: int = 0
    validation_every: int = 0
    propagate_step_sizes: bool = True
    frozen: tuple = ()
    log_nll: bool = False

    def __post_init__(self):
        if self.estimator not in KINDS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {KINDS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be at least 1")
        if self.n_iterations is not None:
            if int(self.n_iterations) < 1:
                raise ValueError("n_iterations must be at least 1")
            self.solver = self.solver.replace(max_iterations=int(self.n_iterations))
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if int(self.em_iterations) < 0:
            raise ValueError("em_iterations must be non-negative")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ValueError("batch_size must be positive")
        if int(self.accumulation) < 1:
            raise ValueError("accumulation must be at least 1")
        if int(self.validation_every) < 0:
            raise ValueError("validation_every must be non-negative")

    def gradient_settings(self):
        return GradientSettings(
            kind=self.estimator,
            solver=self.solver,
            n_samples=self.n_samples,
            seed=self.seed,
            propagate_step_sizes=self.propagate_step_sizes,
        )


@dataclass
class TrainState:
    params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    iteration: int = 0
    best_params: np.ndarray | None = None
    best_metric: float = float("inf")
    seed: int = 0
    last_gradient: object = None


def init_state(model, theta0, seed=0):
    """Optimizer state at natural parameters ``theta0``."""
    u = model.to_free(model.check_theta(theta0))
    return TrainState(u, np.zeros_like(u), np.zeros_like(u), seed=seed)


def _combine(estimates):
    if len(estimates) == 1:
        return estimates[0]
    first = estimates[0]
    values = np.mean([e.values for e in estimates], axis=0)
    return replace(
        first,
        values=values,
        matvecs=sum(e.matvecs for e in estimates),
        objective=float(np.mean([e.objective for e in estimates])),
    )


def gradient_em_step(state: TrainState, model, batch, cfg: TrainConfig) -> TrainState:
    """One gradient-EM update.

    ``batch`` is a dataset or a list of datasets whose gradients are averaged
    (gradient accumulation).  A non-finite gradient raises
    :class:`NonFiniteGradientError` and leaves ``state`` untouched.
    """
    batches = batch if isinstance(batch, (list, tuple)) else [batch]
    batches = [as_dataset(b) for b in batches]
    if not batches or any(len(b) == 0 for b in batches):
        raise ValueError("batch is empty")
    theta = model.to_natural(state.params)
    settings = cfg.gradient_settings()
    est = _combine(
        [population_gradient(model, theta, b, settings, iteration=state.iteration) for b in batches]
    )
    grad = model.pullback(state.params, est.values)
    if cfg.frozen:
        grad[np.asarray(cfg.frozen, dtype=np.intp)] = 0.0
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        i = int(bad[0])
        raise NonFiniteGradientError(i, model.param_names()[i], state.iteration)
    lr = cfg.learning_rate
    if cfg.optimizer == "fixed_step":
        params = state.params - lr * grad
        m, v = state.adam_m, state.adam_v
    else:
        t = state.iteration + 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        m = b1 * state.adam_m + (1.0 - b1) * grad
        v = b2 * state.adam_v + (1.0 - b2) * grad * grad
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        params = state.params - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    new = replace(state, params=params, adam_m=m, adam_v=v, iteration=state.iteration + 1)
    new.last_gradient = replace(est, values=grad)
    return new


class _BatchSchedule:
    """Seeded epoch-wise permutation cut into equal minibatches."""

    def __init__(self, n, batch_size, accumulation, seed):
        self.n = n
        self.size = n if batch_size is None else min(int(batch_size), n)
        self.accumulation = accumulation
        self.seed = seed
        self.epoch = 0
        self.order = self._perm()
        self.pos = 0

    def _perm(self):
        if self.size == self.n:
            return np.arange(self.n)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(2, self.epoch)))
        return rng.permutation(self.n)

    def next(self):
        out = []
        for _ in range(self.accumulation):
            if self.pos + self.size > self.n:
                self.epoch += 1
                self.order = self._perm()
                self.pos = 0
            out.append(self.order[self.pos : self.pos + self.size])
            self.pos += self.size
        return out


@dataclass
class FitResult:
    state: TrainState
    log: list
    model: object

    @property
    def theta(self):
        return self.model.to_natural(self.state.params)

    @property
    def best_theta(self):
        if self.state.best_params is None:
            return self.theta
        return self.model.to_natural(self.state.best_params)

    @property
    def total_matvecs(self):
        return int(sum(row["matvecs"] for row in self.log))


def fit(
    model,
    dataset,
    cfg: TrainConfig,
    theta0=None,
    validation=None,
    validation_metric=None,
    metrics_fn=None,
    callback=None,
):
    """Run ``cfg.em_iterations`` gradient-EM steps.

    Parameters
    ----------
    model : LgmModel
    dataset : Dataset
    cfg : TrainConfig
    theta0 : array, optional
        Initial natural parameters; drawn with ``model.init_natural`` from the
        configured seed when omitted.
    validation : Dataset, optional
    validation_metric : callable ``(model, theta, validation) -> float``
        Lower is better.  Evaluated every ``cfg.validation_every`` steps; the
        best parameters are kept in ``state.best_params``.
    metrics_fn : callable ``(theta) -> dict``, optional
        Extra columns for the log.
    callback : callable ``(state, row)``, optional
    """
    data = as_dataset(dataset)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if theta0 is None:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
        theta0 = model.init_natural(data, rng)
    state = init_state(model, theta0, cfg.seed)
    schedule = _BatchSchedule(len(data), cfg.batch_size, int(cfg.accumulation), cfg.seed)
    full_batch = cfg.batch_size is None and cfg.accumulation == 1
    checkpointing = cfg.validation_every > 0 and validation is not None and validation_metric
    log = []
    start = time.perf_counter()
    can_nll = cfg.log_nll and model.latent_dim * model.latent_dim <= DENSE_CAP

    for _ in range(int(cfg.em_iterations)):
        if full_batch:
            batch = data
        else:
            batch = [data.subset(idx) for idx in schedule.next()]
        try:
            state = gradient_em_step(state, model, batch, cfg)
        except Exception as exc:
            raise TrainingError(
                f"EM iteration {state.iteration} failed: {exc}", state, log
            ) from exc
        est = state.last_gradient
        theta = model.to_natural(state.params)
        row = {
            "iter": state.iteration,
            "objective_proxy": est.objective,
            "grad_norm": float(np.linalg.norm(est.values)),
            "matvecs": int(est.matvecs),
            "seconds": time.perf_counter() - start,
        }
        if can_nll:
            row["nll"] = nll_dense(model, theta, data)
        if metrics_fn is not None:
            row.update(metrics_fn(theta))
        if checkpointing and state.iteration % cfg.validation_every == 0:
            metric = float(validation_metric(model, theta, validation))
            row["validation"] = metric
            if metric < state.best_metric:
                state.best_metric = metric
                state.best_params = state.params.copy()
        log.append(row)
        if callback is not None:
            callback(state, row)
    return FitResult(state, log, model)
