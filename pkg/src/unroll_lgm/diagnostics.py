"""Empirical error probes for the gradient estimators.

Three probes separate the error sources of the stochastic gradients on small
instances where dense references are available:

* :func:`stat_error_sweep` - Monte Carlo error of ``h#`` (exact solves) against
  the exact gradient as the number of samples grows;
* :func:`opt_error_sweep` - error of the output and network gradients against
  ``h#`` (same frozen draws) as the solver depth grows;
* :func:`jacobian_error_sweep` - error of the derivative of the truncated
  solve against the implicit-function derivative of the exact solve.

Reports serialize to JSON and to a flat CSV table.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.stats import theilslopes

from .gradients import _dense_mc, exact_gradient, unrolled_gradient
from .lgm import Dataset, PosteriorSystem, as_dataset, draw_posterior_rhs
from .models.ar import NoisyArModel, pacf_to_ar
from .models.sbl import SblModel
from .solvers import SolveConfig, canonical_method

__all__ = [
    "StatErrorProbe",
    "StatErrorReport",
    "OptErrorProbe",
    "OptErrorReport",
    "JacobianProbe",
    "JacobianReport",
    "stat_error_sweep",
    "opt_error_sweep",
    "jacobian_error_sweep",
    "precision_derivatives",
    "rhs_derivative",
    "probe_instance",
    "conditioned_instance",
    "write_report",
    "loglog_slope",
]


# ---------------------------------------------------------------------------
# instances


def probe_instance(kind="noisy_ar", dim=16, n_points=2, seed=0):
    """Small ``(model, theta, dataset)`` triple drawn from the model itself.

    ``kind`` is ``"noisy_ar"`` (order 2) or ``"sparse_signals"`` (``dim`` a
    perfect square, half the transform rows observed).
    """
    rng = np.random.default_rng(seed)
    if kind == "noisy_ar":
        model = NoisyArModel(2, dim)
        theta = model.pack(pacf_to_ar(rng.uniform(-0.7, 0.7, 2)), rng.uniform(0.5, 2.0), rng.uniform(0.3, 1.0))
        _, _, lam = model.split(theta)
        z = model.sample_latent(theta, n_points, rng)
        y = z + np.sqrt(lam) * rng.standard_normal(z.shape)
        weights = (rng.uniform(size=z.shape) < 0.8).astype(float)
    elif kind == "sparse_signals":
        model = SblModel(dim)
        theta = np.append(np.exp(rng.uniform(-1.0, 1.0, model.dim)), rng.uniform(1.0, 3.0))
        z = rng.standard_normal((model.dim, n_points)) / np.sqrt(theta[:-1])[:, None]
        y = model.transform.apply(z) + rng.standard_normal(z.shape) / np.sqrt(theta[-1])
        weights = (rng.uniform(size=z.shape) < 0.5).astype(float)
    else:
        raise ValueError(f"unknown probe instance kind {kind!r}")
    return model, theta, Dataset(y, weights)


def conditioned_instance(condition_number=5.0, dim=16, n_points=1, seed=0):
    """Fully observed sparse-learning instance whose posterior precision is
    diagonal with eigenvalues spread evenly over ``[2, 2 * condition_number]``.
    """
    if not condition_number >= 1.0:
        raise ValueError("condition number must be at least 1")
    rng = np.random.default_rng(seed)
    model = SblModel(dim)
    D = model.dim
    beta = 1.0
    eig = np.linspace(2.0, 2.0 * condition_number, D)
    theta = np.append(rng.permutation(eig - beta), beta)
    z = rng.standard_normal((D, n_points)) / np.sqrt(theta[:-1])[:, None]
    y = model.transform.apply(z) + rng.standard_normal(z.shape) / np.sqrt(beta)
    return model, theta, Dataset(y, np.ones_like(y))


# ---------------------------------------------------------------------------
# dense derivative helpers


def precision_derivatives(system: PosteriorSystem, n=0, index=None):
    """Dense ``dA_n / d theta_l`` built entry by entry from ``a_vjp``.

    Returns ``(L, D, D)``, or ``(D, D)`` when ``index`` selects one parameter.
    """
    D = system.b.shape[0]
    owner = np.array([n])
    eye = np.eye(D)
    out = None
    for i in range(D):
        for j in range(i, D):
            g = system.a_vjp(eye[:, i : i + 1], eye[:, j : j + 1], owner=owner)
            if out is None:
                out = np.zeros((g.size, D, D))
            out[:, i, j] = g
            out[:, j, i] = g
    return out if index is None else out[int(index)]


def rhs_derivative(system: PosteriorSystem, n=0, index=None):
    """Dense ``d b_n / d theta_l`` as ``(L, D)`` (or ``(D,)`` for one index)."""
    D, N = system.b.shape
    out = None
    for i in range(D):
        W = np.zeros((D, N))
        W[i, n] = 1.0
        g = system.b_vjp(W)
        if out is None:
            out = np.zeros((g.size, D))
        out[:, i] = g
    return out if index is None else out[int(index)]


def _probe_theta(probe):
    return probe.model.check_theta(probe.theta)


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def _semilog_slope(x, y):
    return float(np.polyfit(np.asarray(x, float), np.log(np.asarray(y, float)), 1)[0])


def _rate_for(method, kappa):
    if method == "gradient_descent":
        return (kappa - 1.0) / kappa
    if method == "steepest_descent":
        return (kappa - 1.0) / (kappa + 1.0)
    return (math.sqrt(kappa) - 1.0) / (math.sqrt(kappa) + 1.0)


# ---------------------------------------------------------------------------
# reports


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


class _Report:
    def to_dict(self):
        return _jsonable(asdict(self))

    def rows(self):  # pragma: no cover - overridden
        raise NotImplementedError


def write_report(report, directory, stem, extra=None):
    """Write ``<stem>.json`` and ``<stem>.csv`` under ``directory``.

    ``extra`` entries (for example a seed and config hash) go into the JSON
    document and are repeated as leading CSV columns.
    """
    import pathlib

    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    extra = dict(extra or {})
    doc = dict(extra)
    doc.update(report.to_dict())
    (directory / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    rows = [dict(extra, **row) for row in report.rows()]
    with open(directory / f"{stem}.csv", "w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return directory / f"{stem}.json", directory / f"{stem}.csv"


# ---------------------------------------------------------------------------
# statistical error


@dataclass
class StatErrorProbe:
    model: object
    theta: np.ndarray
    dataset: Dataset
    k_grid: tuple = (4, 16, 64, 256)
    trials: int = 50
    seed: int = 0


@dataclass
class StatErrorReport(_Report):
    k_grid: list
    errors: np.ndarray  # (trials, len(k_grid)) of |h* - h#|_inf
    medians: np.ndarray
    slope: float
    xi: float
    exact_gradient: np.ndarray

    def rows(self):
        out = []
        for j, K in enumerate(self.k_grid):
            for t in range(self.errors.shape[0]):
                out.append({"K": K, "trial": t, "error": float(self.errors[t, j])})
        return out


def _xi(system, N):
    """Largest Frobenius norm of ``Sigma^{1/2} dA/dtheta_l Sigma^{1/2}``."""
    best = 0.0
    for n in range(N):
        A = system.dense_precision(n)
        evals, evecs = np.linalg.eigh(A)
        half = (evecs / np.sqrt(evals)) @ evecs.T
        dA = precision_derivatives(system, n)
        for dl in dA:
            best = max(best, float(np.linalg.norm(half @ dl @ half)))
    return best


def stat_error_sweep(probe: StatErrorProbe) -> StatErrorReport:
    """Median ``|h* - h#|_inf`` over trials for every ``K`` and its log-log slope.

    Trials use independent draws (the trial index plays the role of the EM
    iteration in the sample stream).
    """
    model, theta = probe.model, _probe_theta(probe)
    data = as_dataset(probe.dataset)
    h_star = exact_gradient(model, theta, data).values
    ks = [int(k) for k in probe.k_grid]
    errors = np.zeros((int(probe.trials), len(ks)))
    for j, K in enumerate(ks):
        for t in range(int(probe.trials)):
            h = _dense_mc(model, theta, data, K, probe.seed + 7919 * j, t).values
            errors[t, j] = np.max(np.abs(h - h_star))
    medians = np.median(errors, axis=0)
    system = PosteriorSystem(model.canonical(theta), data)
    return StatErrorReport(
        k_grid=ks,
        errors=errors,
        medians=medians,
        slope=loglog_slope(ks, medians),
        xi=_xi(system, len(data)),
        exact_gradient=h_star,
    )


# ---------------------------------------------------------------------------
# optimization error


@dataclass
class OptErrorProbe:
    model: object
    theta: np.ndarray
    dataset: Dataset
    method: str = "gradient_descent"
    i_grid: tuple = tuple(range(3, 61, 3))
    n_samples: int = 4
    seed: int = 0
    step_size: float | None = None
    propagate_step_sizes: bool = True
    warmup: int = 3
    fit_from: int = 10


@dataclass
class OptErrorReport(_Report):
    method: str
    i_grid: list
    output_errors: np.ndarray
    network_errors: np.ndarray
    output_slope: float
    network_slope: float
    slope_ratio: float
    condition_number: float
    rate: float
    theoretical_slope: float
    network_not_worse_after_warmup: bool
    step_size: float | None
    suggested_depth: float
    details: dict = field(default_factory=dict)

    def rows(self):
        return [
            {"I": int(i), "output_error": float(o), "network_error": float(n)}
            for i, o, n in zip(self.i_grid, self.output_errors, self.network_errors)
        ]


def opt_error_sweep(probe: OptErrorProbe) -> OptErrorReport:
    """Errors of the output and network gradients against ``h#`` per depth.

    Draws are frozen across depths and ``h#`` uses exact dense solves of the
    same draws.  Gradient descent uses ``1 / lambda_max`` of the dense
    precision unless a step is given.  Slopes are least-squares fits of
    ``log error`` against ``I`` over depths ``>= fit_from``.
    ``suggested_depth`` is ``log(N K) / log(1 / rate)``, the depth at which the
    optimization error of the output gradient meets the Monte Carlo error
    up to an unspecified constant.
    """
    model, theta = probe.model, _probe_theta(probe)
    data = as_dataset(probe.dataset)
    method = canonical_method(probe.method)
    can = model.canonical(theta)
    system = PosteriorSystem(can, data)
    N, K = len(data), int(probe.n_samples)
    evals = [np.linalg.eigvalsh(system.dense_precision(n)) for n in range(N)]
    kappa = max(float(e[-1] / e[0]) for e in evals)
    step = probe.step_size
    if method == "gradient_descent" and step is None:
        step = 1.0 / max(float(e[-1]) for e in evals)
    rhs = draw_posterior_rhs(can, None, data, K, probe.seed, 0)
    h_sharp = _dense_mc(model, theta, data, K, probe.seed, 0, rhs=rhs).values
    grid = [int(i) for i in probe.i_grid]
    out_err, net_err = [], []
    for I in grid:
        cfg = SolveConfig(method, I, residual_tolerance=0.0, step_size=step)
        for kind, store in (("output", out_err), ("network", net_err)):
            g = unrolled_gradient(
                model, theta, data, cfg, K, rhs=rhs, kind=kind,
                propagate_step_sizes=probe.propagate_step_sizes,
            ).values
            store.append(float(np.linalg.norm(g - h_sharp)))
    out_err, net_err = np.array(out_err), np.array(net_err)
    sel = [j for j, i in enumerate(grid) if i >= probe.fit_from]
    sel = sel if len(sel) >= 2 else list(range(len(grid)))
    tiny = 1e-300
    o_slope = _semilog_slope(np.array(grid)[sel], np.maximum(out_err[sel], tiny))
    n_slope = _semilog_slope(np.array(grid)[sel], np.maximum(net_err[sel], tiny))
    rate = _rate_for(method, kappa)
    after = [j for j, i in enumerate(grid) if i >= probe.warmup]
    return OptErrorReport(
        method=method,
        i_grid=grid,
        output_errors=out_err,
        network_errors=net_err,
        output_slope=o_slope,
        network_slope=n_slope,
        slope_ratio=n_slope / o_slope if o_slope != 0 else float("nan"),
        condition_number=kappa,
        rate=rate,
        theoretical_slope=math.log(rate) if rate > 0 else float("-inf"),
        network_not_worse_after_warmup=bool(np.all(net_err[after] <= out_err[after])),
        step_size=step,
        suggested_depth=math.log(N * K) / math.log(1.0 / rate) if 0 < rate < 1 else float("inf"),
        details={"h_sharp": h_sharp, "warmup": probe.warmup, "fit_from": probe.fit_from},
    )


# ---------------------------------------------------------------------------
# Jacobian error


@dataclass
class JacobianProbe:
    model: object
    theta: np.ndarray
    dataset: Dataset
    param_index: int = 0
    point: int = 0
    method: str = "gradient_descent"
    i_grid: tuple = (2, 4, 8, 16, 32)
    step_size: float | None = None
    propagate_step_sizes: bool = True


@dataclass
class JacobianReport(_Report):
    method: str
    propagate_step_sizes: bool
    i_grid: list
    jacobian_errors: np.ndarray
    solution_errors: np.ndarray
    ratios: np.ndarray
    trend: float
    step_size: float | None
    condition_number: float

    def rows(self):
        return [
            {"I": int(i), "jacobian_error": float(j), "solution_error": float(s), "ratio": float(r)}
            for i, j, s, r in zip(self.i_grid, self.jacobian_errors, self.solution_errors, self.ratios)
        ]


def unrolled_jacobian(A, dA, b, db, method, iterations, step_size=None, propagate=True):
    """Iterate and its derivative along one parameter after ``iterations`` steps.

    Forward-mode differentiation of the unrolled descent recursion
    ``x <- x + alpha r``, ``r <- r - alpha A r`` from ``x = 0``.  With
    ``propagate=False`` the steepest-descent step sizes are held constant.
    """
    method = canonical_method(method)
    if method == "conjugate_gradient":
        raise ValueError("the Jacobian probe covers gradient and steepest descent")
    x = np.zeros_like(b)
    dx = np.zeros_like(b)
    r, dr = b.copy(), db.copy()
    for _ in range(int(iterations)):
        q = A @ r
        dq = dA @ r + A @ dr
        if method == "steepest_descent":
            num, den = r @ r, r @ q
            alpha = num / den
            dalpha = (2.0 * (r @ dr) * den - num * (dr @ q + r @ dq)) / den**2 if propagate else 0.0
        else:
            alpha, dalpha = step_size, 0.0
        x, dx = x + alpha * r, dx + dalpha * r + alpha * dr
        r, dr = r - alpha * q, dr - dalpha * q - alpha * dq
    return x, dx


def jacobian_error_sweep(probe: JacobianProbe) -> JacobianReport:
    """``|J_I - J#|``, ``|x_I - x#|`` and their ratio ``|J err| / (I |x err|)``.

    The mean system of one data point is the inner problem.  ``J#`` is the
    implicit-function derivative ``A^{-1} (db - dA x#)``.  ``trend`` is the
    Theil-Sen slope of the ratio, normalized by its median, against ``I``.
    """
    model, theta = probe.model, _probe_theta(probe)
    data = as_dataset(probe.dataset)
    system = PosteriorSystem(model.canonical(theta), data)
    n, l = int(probe.point), int(probe.param_index)
    A = system.dense_precision(n)
    dA = precision_derivatives(system, n, l)
    b = system.b[:, n]
    db = rhs_derivative(system, n, l)
    method = canonical_method(probe.method)
    evals = np.linalg.eigvalsh(A)
    step = probe.step_size
    if method == "gradient_descent" and step is None:
        step = 1.0 / evals[-1]
    cf = sla.cho_factor(A, lower=True)
    x_sharp = sla.cho_solve(cf, b)
    j_sharp = sla.cho_solve(cf, db - dA @ x_sharp)
    grid = [int(i) for i in probe.i_grid]
    jerr, xerr = [], []
    for I in grid:
        x, dx = unrolled_jacobian(A, dA, b, db, method, I, step, probe.propagate_step_sizes)
        jerr.append(float(np.linalg.norm(dx - j_sharp)))
        xerr.append(float(np.linalg.norm(x - x_sharp)))
    jerr, xerr = np.array(jerr), np.array(xerr)
    ratios = jerr / (np.array(grid) * np.where(xerr > 0, xerr, np.nan))
    ok = np.isfinite(ratios)
    if ok.sum() >= 2:
        scale = np.median(ratios[ok])
        trend = float(theilslopes(ratios[ok] / scale, np.array(grid)[ok])[0])
    else:
        trend = float("nan")
    return JacobianReport(
        method=method,
        propagate_step_sizes=bool(probe.propagate_step_sizes),
        i_grid=grid,
        jacobian_errors=jerr,
        solution_errors=xerr,
        ratios=ratios,
        trend=trend,
        step_size=None if step is None else float(step),
        condition_number=float(evals[-1] / evals[0]),
    )
