import numpy as np
import pytest
from conftest import MODEL_KINDS, central_difference, rel_err, small_instance
from scipy.optimize import minimize

from unroll_lgm import (
    Dataset,
    FactorAnalysisModel,
    GradientSettings,
    SblModel,
    SolveConfig,
    assemble_system,
    draw_posterior_rhs,
    exact_gradient,
    mc_gradient,
    network_gradient,
    nll_dense,
    output_gradient,
    population_gradient,
    posterior_via_woodbury,
)
from unroll_lgm.gradients import MODEL_PRECONDITIONER, GradientEstimate
from unroll_lgm.lgm import posterior_dense
from unroll_lgm.solvers import solve

K = 2


def _config(kind, method, iterations):
    pre = MODEL_PRECONDITIONER if (kind == "sbl" and method == "cg") else None
    return SolveConfig(
        method, iterations, residual_tolerance=0.0, step_size=0.05 if method == "gd" else None, preconditioner=pre
    )


def _solve_block(model, theta, data, cfg, rhs):
    can = model.canonical(theta)
    system = assemble_system(model, theta, data)
    N = len(data)
    owner = np.concatenate([np.arange(N), np.repeat(np.arange(N), K)])
    if cfg.preconditioner == MODEL_PRECONDITIONER:
        cfg = cfg.replace(preconditioner=can.preconditioner(None))
    X = solve(system.operator(owner), np.hstack([system.b, rhs]), cfg).solution
    return X[:, :N], X[:, N:]


def _truncated_objective(model, theta, data, MU, S):
    """Batch mean of the sampled objective at fixed iterates, written densely."""
    system = assemble_system(model, theta, data)
    total = 0.0
    for n in range(len(data)):
        A = system.dense_precision(n)
        mu, sig = MU[:, n], S[:, n * K : (n + 1) * K]
        total += 0.5 * mu @ A @ mu - system.b[:, n] @ mu + 0.5 * np.sum(sig * (A @ sig)) / K + system.c[n]
    return total / len(data)


def _network_scalar(model, data, cfg, rhs):
    def f(theta):
        MU, S = _solve_block(model, theta, data, cfg, rhs)
        return _truncated_objective(model, theta, data, MU, S) - np.sum(rhs * S) / (K * len(data))

    return f


@pytest.mark.parametrize("kind", MODEL_KINDS)
@pytest.mark.parametrize("method", ["gd", "sd", "cg"])
@pytest.mark.parametrize("iterations", [1, 3, 7])
def test_network_gradient_matches_finite_differences(kind, method, iterations):
    rng = np.random.default_rng(100 + iterations)
    model, theta, data = small_instance(kind, rng)
    cfg = _config(kind, method, iterations)
    rhs = draw_posterior_rhs(model, theta, data, K, seed=1)
    est = network_gradient(model, theta, data, cfg, K, rhs=rhs)
    fd = central_difference(_network_scalar(model, data, cfg, rhs), theta)
    assert rel_err(est.values, fd) < 1e-5


@pytest.mark.parametrize("kind", MODEL_KINDS)
@pytest.mark.parametrize("method", ["gd", "sd", "cg"])
def test_output_gradient_matches_finite_differences(kind, method):
    rng = np.random.default_rng(3)
    model, theta, data = small_instance(kind, rng)
    cfg = _config(kind, method, 3)
    rhs = draw_posterior_rhs(model, theta, data, K, seed=2)
    MU, S = _solve_block(model, theta, data, cfg, rhs)
    est = output_gradient(model, theta, data, cfg, K, rhs=rhs)
    fd = central_difference(lambda t: _truncated_objective(model, t, data, MU, S), theta)
    assert rel_err(est.values, fd) < 1e-5


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_mc_gradient_matches_finite_differences(kind, rng):
    model, theta, data = small_instance(kind, rng)
    rhs = draw_posterior_rhs(model, theta, data, K, seed=3)
    system = assemble_system(model, theta, data)
    MU = np.column_stack([posterior_dense(system, n)[0] for n in range(len(data))])
    S = np.column_stack(
        [np.linalg.solve(system.dense_precision(n), rhs[:, n * K : (n + 1) * K]) for n in range(len(data))]
    )
    est = mc_gradient(model, theta, data, MU, S)
    fd = central_difference(lambda t: _truncated_objective(model, t, data, MU, S), theta)
    assert rel_err(est.values, fd) < 1e-5
    with pytest.raises(ValueError):
        mc_gradient(model, theta, data, MU, np.empty((model.latent_dim, 0)))


@pytest.mark.parametrize("kind", MODEL_KINDS)
@pytest.mark.parametrize("method", ["sd", "cg"])
def test_converged_estimators_agree(kind, method):
    rng = np.random.default_rng(4)
    model, theta, data = small_instance(kind, rng)
    rhs = draw_posterior_rhs(model, theta, data, K, seed=4)
    cfg = SolveConfig(method, 5000 if method == "sd" else 200, residual_tolerance=1e-13)
    system = assemble_system(model, theta, data)
    MU = np.column_stack([posterior_dense(system, n)[0] for n in range(len(data))])
    S = np.column_stack(
        [np.linalg.solve(system.dense_precision(n), rhs[:, n * K : (n + 1) * K]) for n in range(len(data))]
    )
    ref = mc_gradient(model, theta, data, MU, S).values
    out = output_gradient(model, theta, data, cfg, K, rhs=rhs).values
    net = network_gradient(model, theta, data, cfg, K, rhs=rhs).values
    scale = max(1.0, np.abs(ref).max())
    assert np.abs(out - ref).max() < 1e-8 * scale
    assert np.abs(net - ref).max() < 1e-8 * scale


def test_frozen_step_sizes_converge_to_mc():
    rng = np.random.default_rng(5)
    model, theta, data = small_instance("fa", rng)
    rhs = draw_posterior_rhs(model, theta, data, K, seed=5)
    ref = network_gradient(model, theta, data, SolveConfig("cg", 200, residual_tolerance=1e-13), K, rhs=rhs).values
    errs = []
    for method in ("sd", "cg"):
        for I in (5, 60):
            cfg = SolveConfig(method, I, residual_tolerance=1e-13)
            frozen = network_gradient(model, theta, data, cfg, K, rhs=rhs, propagate_step_sizes=False).values
            errs.append(np.linalg.norm(frozen - ref))
    assert errs[1] < 1e-3 * errs[0]
    assert errs[3] < 1e-6 * max(1.0, np.linalg.norm(ref))


def test_zero_iterates_leave_only_constant_term(rng):
    model, theta, data = small_instance("dense", rng)
    system = assemble_system(model, theta, data)
    D, N = system.b.shape
    est = mc_gradient(model, theta, data, np.zeros((D, N)), np.zeros((D, N * K)))
    np.testing.assert_allclose(est.values, system.c_grad() / N, atol=1e-14)


def test_fa_offset_gradient_with_zero_loadings(rng):
    M, D = 5, 2
    model = FactorAnalysisModel(M, D)
    eta = rng.standard_normal(M)
    psi = np.exp(rng.standard_normal(M))
    theta = model.pack(np.zeros((M, D)), eta, psi)
    y = rng.standard_normal(M)
    g = exact_gradient(model, theta, Dataset.from_array(y)).values
    np.testing.assert_allclose(g[M * D : M * D + M], -psi * (y - eta), atol=1e-12)


def test_exact_gradient_vanishes_at_stationary_point(rng):
    M, D = 3, 1
    model = FactorAnalysisModel(M, D)
    Y = rng.standard_normal((40, 1)) @ rng.standard_normal((1, M)) + 0.5 * rng.standard_normal((40, M))
    data = Dataset.from_array(Y)
    u0 = model.to_free(model.pack(rng.standard_normal((M, D)), np.zeros(M), np.ones(M)))

    def fun(u):
        theta = model.to_natural(u)
        return nll_dense(model, theta, data), model.pullback(u, exact_gradient(model, theta, data).values)

    res = minimize(fun, u0, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 2000})
    g = exact_gradient(model, model.to_natural(res.x), data).values
    assert np.linalg.norm(g) <= 1e-6


def _mc_batches(model, theta, data, k, n_batches, seed0):
    out = []
    for t in range(n_batches):
        est = population_gradient(
            model, theta, data, GradientSettings("monte_carlo", n_samples=k, seed=seed0 + t)
        )
        out.append(est.values)
    return np.array(out)


def test_mc_gradient_unbiased():
    rng = np.random.default_rng(6)
    model, theta, data = small_instance("fa", rng, n_points=1)
    batches = _mc_batches(model, theta, data, 1000, 100, 0)
    exact = exact_gradient(model, theta, data).values
    se = batches.std(axis=0, ddof=1) / np.sqrt(len(batches))
    varying = se > 1e-14
    assert np.all(np.abs(batches.mean(axis=0) - exact)[varying] < 3 * se[varying])
    np.testing.assert_allclose(batches.mean(axis=0)[~varying], exact[~varying], atol=1e-10)


def test_mc_variance_shrinks_with_samples():
    rng = np.random.default_rng(7)
    model, theta, data = small_instance("fa", rng, n_points=1)
    v1 = _mc_batches(model, theta, data, 1, 2000, 10_000).var(axis=0, ddof=1)
    v64 = _mc_batches(model, theta, data, 64, 2000, 20_000).var(axis=0, ddof=1)
    varying = v1 > 1e-20
    ratio = v1[varying] / v64[varying]
    assert np.all((ratio > 64 * 0.75) & (ratio < 64 * 1.25))


def test_network_error_below_output_error():
    rng = np.random.default_rng(8)
    model, theta, data = small_instance("fa", rng)
    rhs = draw_posterior_rhs(model, theta, data, K, seed=8)
    ref = network_gradient(model, theta, data, SolveConfig("cg", 200, residual_tolerance=1e-13), K, rhs=rhs).values
    system = assemble_system(model, theta, data)
    step = 1.0 / max(np.linalg.eigvalsh(system.dense_precision(n))[-1] for n in range(len(data)))
    for I in (10, 20, 40):
        cfg = SolveConfig("gd", I, residual_tolerance=0.0, step_size=step)
        out = output_gradient(model, theta, data, cfg, K, rhs=rhs).values
        net = network_gradient(model, theta, data, cfg, K, rhs=rhs).values
        assert np.linalg.norm(net - ref) < np.linalg.norm(out - ref)


@pytest.mark.parametrize("kind", ["exact", "output", "network"])
def test_population_gradient_reductions(kind, rng):
    model, theta, data = small_instance("ar", rng, n_points=3)
    cfg = SolveConfig("cg", 4)
    settings = GradientSettings(kind, cfg, n_samples=3, seed=9)
    one = data.subset([1])
    direct = {
        "exact": lambda: exact_gradient(model, theta, one),
        "output": lambda: output_gradient(model, theta, one, cfg, 3, seed=9),
        "network": lambda: network_gradient(model, theta, one, cfg, 3, seed=9),
    }[kind]()
    np.testing.assert_array_equal(population_gradient(model, theta, one, settings).values, direct.values)
    full = population_gradient(model, theta, data, settings).values
    doubled = population_gradient(model, theta, data.concat(data), settings).values
    np.testing.assert_allclose(doubled, full, rtol=1e-12, atol=1e-14)
    with pytest.raises(ValueError):
        population_gradient(model, theta, data.subset([]), settings)


def test_population_mean_matches_nll_derivative(rng):
    model, theta, data = small_instance("sbl", rng, n_points=5)
    fd = central_difference(lambda t: nll_dense(model, t, data), theta)
    est = population_gradient(model, theta, data, GradientSettings("exact"))
    assert rel_err(est.values, fd) < 1e-5
    assert isinstance(est, GradientEstimate) and len(est) == model.n_params and est.is_finite


def test_gradient_settings_validation():
    with pytest.raises(ValueError):
        GradientSettings("bogus")
    with pytest.raises(ValueError):
        GradientSettings("network", n_samples=0)


def test_woodbury_uniform_prior():
    model = SblModel(16)
    alpha, beta = 2.0, 3.0
    theta = np.append(np.full(16, alpha), beta)
    data = Dataset.from_array(np.random.default_rng(0).standard_normal(16))
    _, Sigma = posterior_via_woodbury(model, theta, data)
    np.testing.assert_allclose(Sigma, np.eye(16) / (alpha + beta), atol=1e-12)


def test_woodbury_matches_dense(rng):
    model, theta, data = small_instance("sbl", rng, n_points=1, missing=0.5)
    mu, Sigma, inner = posterior_via_woodbury(model, theta, data, return_inner=True)
    ref_mu, ref_Sigma = posterior_dense(assemble_system(model, theta, data), 0)
    m = int(data.weights.sum())
    assert inner.shape == (m, m) and m < model.latent_dim
    np.testing.assert_allclose(Sigma, ref_Sigma, atol=1e-10)
    np.testing.assert_allclose(mu, ref_mu, atol=1e-10)
    with pytest.raises(ValueError):
        posterior_via_woodbury(model, theta, Dataset.from_array(np.zeros((2, 16))))
