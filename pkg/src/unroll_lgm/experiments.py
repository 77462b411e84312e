"""Config-driven experiments behind the command line.

A config names an experiment kind and optional ``data``, ``model``,
``train`` and ``diagnose`` blocks; missing fields take per-kind defaults.
:func:`resolve_config` validates and fills them, :func:`run_experiment`
executes one experiment and returns its metrics log and result document.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .datagen import (
    SyntheticSpec,
    gen_low_rank_ratings,
    gen_noisy_ar,
    gen_sparse_signals,
    load_ratings_csv,
)
from .diagnostics import (
    JacobianProbe,
    OptErrorProbe,
    StatErrorProbe,
    conditioned_instance,
    jacobian_error_sweep,
    opt_error_sweep,
    probe_instance,
    stat_error_sweep,
)
from .estimators import rating_rmse
from .gradients import KINDS as ESTIMATORS
from .gradients import MODEL_PRECONDITIONER
from .lgm import Dataset, PosteriorSystem
from .linop import DENSE_CAP
from .models import FactorAnalysisModel, NoisyArModel, SblModel, nrmse
from .solvers import SolveConfig, solve
from .training import TrainConfig, fit

__all__ = [
    "ExperimentConfig",
    "ConfigError",
    "ExperimentError",
    "resolve_config",
    "load_config",
    "config_hash",
    "run_experiment",
    "EXPERIMENT_KINDS",
]

EXPERIMENT_KINDS = ("ar-recover", "cs-reconstruct", "cf-train", "diagnose")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class ExperimentError(RuntimeError):
    """An experiment failed; ``context`` holds what is known about where."""

    def __init__(self, message, context=None, log=None):
        super().__init__(message)
        self.context = dict(context or {})
        self.log = list(log or [])


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataBlock(_Block):
    dim: Optional[int] = Field(None, ge=1)
    n_points: Optional[int] = Field(None, ge=1)
    order: Optional[int] = Field(None, ge=1)
    rank: int = Field(5, ge=1)
    support_fraction: float = Field(0.1, ge=0.0, le=1.0)
    mask_fraction: Optional[float] = Field(None, ge=0.0, le=1.0)
    noise: Optional[float] = Field(None, ge=0.0)
    ratings_path: Optional[str] = None
    test_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    validation_fraction: float = Field(0.1, ge=0.0, lt=1.0)


class ModelBlock(_Block):
    order: Optional[int] = Field(None, ge=1)
    n_components: Optional[int] = Field(None, ge=1)


class TrainBlock(_Block):
    estimator: Optional[Literal["exact", "monte_carlo", "output", "network"]] = None
    solver: Optional[Literal["cg", "pcg", "sd", "gd"]] = None
    preconditioned: Optional[bool] = None
    n_samples: Optional[int] = Field(None, ge=1)
    n_iterations: Optional[int] = Field(None, ge=1)
    step_size: Optional[float] = Field(None, gt=0.0)
    optimizer: Literal["adam", "fixed_step"] = "adam"
    learning_rate: Optional[float] = Field(None, gt=0.0)
    em_iterations: Optional[int] = Field(None, ge=0)
    batch_size: Optional[int] = Field(None, ge=1)
    accumulation: Optional[int] = Field(None, ge=1)
    validation_every: Optional[int] = Field(None, ge=0)
    propagate_step_sizes: bool = True
    log_nll: bool = False


class DiagnoseBlock(_Block):
    instance: Literal["noisy_ar", "sparse_signals"] = "noisy_ar"
    dim: int = Field(8, ge=2)
    n_points: int = Field(2, ge=1)
    k_grid: List[int] = [4, 16, 64, 256]
    trials: int = Field(50, ge=1)
    condition_number: float = Field(5.0, ge=1.0)
    opt_dim: int = Field(16, ge=4)
    opt_method: Literal["gd", "sd", "cg"] = "gd"
    opt_grid: List[int] = list(range(3, 61, 3))
    opt_samples: int = Field(4, ge=1)
    jacobian_dim: int = Field(16, ge=2)
    jacobian_methods: List[Literal["gd", "sd"]] = ["gd", "sd"]
    jacobian_grid: List[int] = [2, 4, 8, 16, 32]
    param_index: int = Field(0, ge=0)


class ExperimentConfig(_Block):
    kind: Literal["ar-recover", "cs-reconstruct", "cf-train", "diagnose"]
    seed: int = 0
    data: DataBlock = DataBlock()
    model: ModelBlock = ModelBlock()
    train: TrainBlock = TrainBlock()
    diagnose: DiagnoseBlock = DiagnoseBlock()


_DATA_DEFAULTS = {
    "ar-recover": dict(dim=1000, n_points=5, order=5),
    "cs-reconstruct": dict(dim=1024, n_points=10),
    "cf-train": dict(dim=200, n_points=500),
    "diagnose": dict(),
}
_TRAIN_DEFAULTS = {
    "ar-recover": dict(
        estimator="network", solver="cg", n_samples=10, n_iterations=30,
        learning_rate=0.1, em_iterations=200, accumulation=1, validation_every=0,
    ),
    "cs-reconstruct": dict(
        estimator="network", solver="cg", preconditioned=True, n_samples=30,
        n_iterations=25, learning_rate=1.0, em_iterations=100, accumulation=1,
        validation_every=0,
    ),
    "cf-train": dict(
        estimator="output", solver="cg", n_samples=10, n_iterations=10,
        learning_rate=0.001, em_iterations=2000, batch_size=25, accumulation=4,
        validation_every=25,
    ),
    "diagnose": dict(),
}


def _fill(block, defaults):
    values = block.model_dump()
    for key, value in defaults.items():
        if values.get(key) is None:
            values[key] = value
    return type(block)(**values)


def resolve_config(raw, seed=None):
    """Validate ``raw`` (a mapping) and fill per-kind defaults.

    Raises :class:`ConfigError` naming the offending field path.
    """
    from pydantic import ValidationError

    try:
        cfg = ExperimentConfig(**raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"config field '{path}': {err['msg']}") from None
    except TypeError as exc:
        raise ConfigError(f"config must be a table of settings: {exc}") from None
    updates = {}
    if seed is not None:
        updates["seed"] = int(seed)
    updates["data"] = _fill(cfg.data, _DATA_DEFAULTS[cfg.kind])
    updates["train"] = _fill(cfg.train, _TRAIN_DEFAULTS[cfg.kind])
    model = cfg.model
    if cfg.kind == "ar-recover" and model.order is None:
        model = ModelBlock(order=updates["data"].order, n_components=model.n_components)
    if cfg.kind == "cf-train" and model.n_components is None:
        model = ModelBlock(order=model.order, n_components=updates["data"].rank)
    updates["model"] = model
    cfg = cfg.model_copy(update=updates)
    if cfg.kind == "cs-reconstruct":
        side = math.isqrt(cfg.data.dim)
        if side * side != cfg.data.dim:
            raise ConfigError("config field 'data.dim': must be a perfect square for cs-reconstruct")
    if cfg.kind == "ar-recover" and cfg.model.order >= cfg.data.dim:
        raise ConfigError("config field 'model.order': must be smaller than data.dim")
    return cfg


def load_config(path):
    """Read a TOML (or ``.json``) config file into a mapping."""
    path = str(path)
    try:
        with open(path, "rb") as fh:
            content = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if path.endswith(".json"):
        try:
            return json.loads(content.decode())
        except (ValueError, UnicodeDecodeError) as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    try:
        import tomllib  # type: ignore[import-not-found]
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        return tomllib.loads(content.decode())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None


def config_hash(cfg: ExperimentConfig):
    """Short digest of the resolved config (seed included)."""
    doc = json.dumps(cfg.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# runners


def _train_config(cfg: ExperimentConfig, preconditioner=None):
    t = cfg.train
    solver = SolveConfig(
        t.solver, t.n_iterations, step_size=t.step_size, preconditioner=preconditioner
    )
    return TrainConfig(
        estimator=t.estimator,
        solver=solver,
        n_samples=t.n_samples,
        optimizer=t.optimizer,
        learning_rate=t.learning_rate,
        em_iterations=t.em_iterations,
        batch_size=t.batch_size,
        accumulation=t.accumulation,
        seed=cfg.seed,
        validation_every=t.validation_every,
        propagate_step_sizes=t.propagate_step_sizes,
        log_nll=t.log_nll,
    )


def _check_dense(cfg, latent_dim):
    if cfg.train.estimator in ("exact", "monte_carlo") and latent_dim * latent_dim > DENSE_CAP:
        raise ConfigError(
            f"estimator '{cfg.train.estimator}' needs dense {latent_dim}x{latent_dim} "
            f"posterior matrices, above the densification cap of {DENSE_CAP} entries"
        )


def _fit(model, data, tcfg, **kw):
    from .training import TrainingError

    try:
        return fit(model, data, tcfg, **kw)
    except TrainingError as exc:
        raise ExperimentError(
            str(exc), {"iteration": exc.state.iteration}, exc.log
        ) from exc


def _run_ar(cfg):
    d = cfg.data
    spec = SyntheticSpec(
        "noisy_ar", d.dim, d.n_points, order=d.order, mask_fraction=d.mask_fraction, seed=cfg.seed
    )
    data, truth, _ = gen_noisy_ar(spec)
    model = NoisyArModel(cfg.model.order, d.dim)
    _check_dense(cfg, model.latent_dim)
    if cfg.model.order != d.order:
        truth_phi = None
    else:
        truth_phi = model.split(truth)[0]

    def metrics(theta):
        if truth_phi is None:
            return {}
        return {"phi_nrmse_percent": nrmse(model.split(theta)[0], truth_phi)}

    result = _fit(model, data, _train_config(cfg), metrics_fn=metrics)
    theta = result.theta
    phi, kappa, lam = model.split(theta)
    out = {
        "ar_coef": phi,
        "innovation_variance": kappa,
        "noise_variance": lam,
        "true_theta": truth,
        "total_matvecs": result.total_matvecs,
    }
    if truth_phi is not None:
        _, t_kappa, t_lam = model.split(truth)
        out["phi_nrmse_percent"] = nrmse(phi, truth_phi)
        out["kappa_nrmse_percent"] = nrmse([kappa], [t_kappa])
        out["lambda_nrmse_percent"] = nrmse([lam], [t_lam])
    band = 2 * cfg.model.order + 1
    out["matvec_flops_proxy"] = float(result.total_matvecs) * band * d.dim
    out["dense_flops_proxy"] = float(cfg.train.em_iterations) * d.n_points * (4.0 / 3.0) * d.dim**3
    return result.log, out


def _reconstruct(model, theta, data, preconditioned):
    can = model.canonical(theta)
    system = PosteriorSystem(can, data)
    pre = can.preconditioner(system.A.weights) if preconditioned else None
    tol = 1e-10 * max(1.0, float(np.linalg.norm(system.b)))
    cfg = SolveConfig("cg", model.latent_dim, residual_tolerance=tol, preconditioner=pre)
    return solve(system.A, system.b, cfg).solution


def _run_cs(cfg):
    d = cfg.data
    spec = SyntheticSpec(
        "sparse_signals",
        d.dim,
        d.n_points,
        support_fraction=d.support_fraction,
        mask_fraction=d.mask_fraction,
        noise=d.noise,
        seed=cfg.seed,
    )
    data, signals = gen_sparse_signals(spec)
    model = SblModel(d.dim)
    _check_dense(cfg, model.latent_dim)
    pre_on = bool(cfg.train.preconditioned) and cfg.train.solver in ("cg", "pcg")
    tcfg = _train_config(cfg, MODEL_PRECONDITIONER if pre_on else None)
    result = _fit(model, data, tcfg)
    recon = _reconstruct(model, result.theta, data, pre_on)
    out = {
        "reconstruction_nrmse_percent": nrmse(recon.ravel(), signals.ravel()),
        "noise_precision": float(result.theta[-1]),
        "total_matvecs": result.total_matvecs,
    }
    return result.log, out


def _ratings_table(cfg):
    d = cfg.data
    if d.ratings_path:
        return load_ratings_csv(
            d.ratings_path, cfg.seed, d.test_fraction, d.validation_fraction
        )
    spec = SyntheticSpec(
        "low_rank_ratings",
        d.dim,
        d.n_points,
        rank=d.rank,
        mask_fraction=d.mask_fraction,
        noise=d.noise,
        seed=cfg.seed,
    )
    return gen_low_rank_ratings(spec)[0]


def _run_cf(cfg):
    table = _ratings_table(cfg)
    train, val, test = (table.matrix(w) for w in ("train", "validation", "test"))
    model = FactorAnalysisModel(table.n_items, cfg.model.n_components)
    _check_dense(cfg, model.latent_dim)
    data = Dataset.from_array(train)
    has_val = bool(np.any(~np.isnan(val)))
    result = _fit(
        model,
        data,
        _train_config(cfg),
        validation=val if has_val else None,
        validation_metric=lambda m, th, v: rating_rmse(m, th, train, v),
    )
    theta = result.best_theta
    out = {"total_matvecs": result.total_matvecs}
    if np.any(~np.isnan(test)):
        observed = train[~np.isnan(train)]
        mean = float(observed.mean()) if observed.size else 3.0
        test_vals = test[~np.isnan(test)]
        base = float(np.sqrt(np.mean((test_vals - mean) ** 2)))
        rmse = rating_rmse(model, theta, train, test)
        out.update(
            test_rmse=rmse,
            global_mean_rmse=base,
            relative_improvement=(base - rmse) / base if base > 0 else 0.0,
        )
    if has_val:
        out["best_validation_rmse"] = result.state.best_metric
    out["cold_start_users"] = int(table.cold_users.sum())
    return result.log, out


def run_diagnostics(cfg):
    """Run the three probes; returns ``({name: report}, summary)``."""
    g = cfg.diagnose
    seed = cfg.seed
    reports = {}
    model, theta, data = probe_instance(g.instance, g.dim, g.n_points, seed)
    reports["stat_error"] = stat_error_sweep(
        StatErrorProbe(model, theta, data, tuple(g.k_grid), g.trials, seed)
    )
    m2, th2, d2 = conditioned_instance(g.condition_number, g.opt_dim, 1, seed)
    reports["opt_error"] = opt_error_sweep(
        OptErrorProbe(m2, th2, d2, g.opt_method, tuple(g.opt_grid), g.opt_samples, seed)
    )
    m3, th3, d3 = probe_instance(g.instance, g.jacobian_dim, 1, seed)
    jac = {}
    for method in g.jacobian_methods:
        for prop in (True, False):
            key = f"jacobian_{method}_{'propagated' if prop else 'frozen'}"
            jac[key] = jacobian_error_sweep(
                JacobianProbe(m3, th3, d3, g.param_index, 0, method, tuple(g.jacobian_grid),
                              propagate_step_sizes=prop)
            )
    reports.update(jac)
    opt = reports["opt_error"]
    summary = {
        "stat_error_slope": reports["stat_error"].slope,
        "stat_error_xi": reports["stat_error"].xi,
        "opt_output_slope": opt.output_slope,
        "opt_network_slope": opt.network_slope,
        "opt_slope_ratio": opt.slope_ratio,
        "opt_theoretical_slope": opt.theoretical_slope,
        "opt_network_not_worse_after_warmup": opt.network_not_worse_after_warmup,
        "opt_suggested_depth": opt.suggested_depth,
        "jacobian_trends": {k: r.trend for k, r in jac.items()},
    }
    return reports, summary


_RUNNERS = {"ar-recover": _run_ar, "cs-reconstruct": _run_cs, "cf-train": _run_cf}


def run_experiment(cfg: ExperimentConfig):
    """Execute a training experiment; returns ``(log, metrics, seconds)``."""
    if cfg.kind not in _RUNNERS:
        raise ConfigError(f"kind '{cfg.kind}' is not a training experiment")
    start = time.perf_counter()
    log, metrics = _RUNNERS[cfg.kind](cfg)
    return log, metrics, time.perf_counter() - start


def with_estimator(cfg: ExperimentConfig, estimator):
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator '{estimator}'; choose from {ESTIMATORS}")
    return cfg.model_copy(update={"train": cfg.train.model_copy(update={"estimator": estimator})})
