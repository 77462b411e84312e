import numpy as np
import pytest

from unroll_lgm import Dataset, FactorAnalysisModel, NoisyArModel, SblModel
from unroll_lgm.lgm import Canonical, LgmModel
from unroll_lgm.linop import DenseOperator


def central_difference(f, x, h=1e-6):
    """Central differences of scalar ``f`` at ``x`` with relative steps."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h * max(1.0, abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2.0 * e[i])
    return g


def rel_err(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / max(np.max(np.abs(b)), 1e-12))


class _DenseCanonical(Canonical):
    nu_has_params = True
    eta_has_params = True

    def __init__(self, theta, model):
        D, M = model.latent_dim, model.obs_dim
        g, psi, nu, eta = np.split(theta, [D, D + M, 2 * D + M])
        self.G = model.base_gamma + np.diag(g)
        self.slots = model.slots
        super().__init__(theta, DenseOperator(self.G), DenseOperator(model.phi_matrix), psi, nu, eta)
        self.chol = np.linalg.cholesky(self.G)

    def _put(self, name, value):
        out = np.zeros(self.n_params)
        out[self.slots[name]] = value
        return out

    def prior_factor_apply(self, eps):
        return self.chol @ eps

    def logdet_gamma(self):
        return float(np.linalg.slogdet(self.G)[1])

    def logdet_gamma_grad(self):
        return self._put("g", np.diag(np.linalg.inv(self.G)))

    def gamma_vjp(self, W, V):
        return self._put("g", np.sum(W * V, axis=1))

    def psi_vjp(self, g):
        return self._put("psi", g)

    def nu_vjp(self, g):
        return self._put("nu", g)

    def eta_vjp(self, g):
        return self._put("eta", g)


class DenseModel(LgmModel):
    """Generic dense model used as an oracle.

    ``Gamma = base_gamma + diag(g)`` and ``Phi`` is a fixed matrix; the
    parameters are ``(g, psi, nu, eta)``.
    """

    def __init__(self, base_gamma, phi_matrix):
        self.base_gamma = np.asarray(base_gamma, dtype=float)
        self.phi_matrix = np.asarray(phi_matrix, dtype=float)
        D, M = self.latent_dim, self.obs_dim
        bounds = np.cumsum([0, D, M, D, M])
        self.slots = {k: slice(a, b) for k, a, b in zip(("g", "psi", "nu", "eta"), bounds[:-1], bounds[1:])}

    @property
    def latent_dim(self):
        return self.base_gamma.shape[0]

    @property
    def obs_dim(self):
        return self.phi_matrix.shape[0]

    @property
    def n_params(self):
        return 2 * (self.latent_dim + self.obs_dim)

    def pack(self, g, psi, nu, eta):
        return np.concatenate([g, psi, nu, eta])

    def canonical(self, theta):
        return _DenseCanonical(self.check_theta(theta), self)

    def init_natural(self, dataset, rng):
        return self.pack(np.zeros(self.latent_dim), np.ones(self.obs_dim), np.zeros(self.latent_dim), np.zeros(self.obs_dim))


def random_dense_model(rng, D=5, M=6):
    B = rng.standard_normal((D, D))
    model = DenseModel(B @ B.T / D + 0.5 * np.eye(D), rng.standard_normal((M, D)))
    theta = model.pack(rng.uniform(0.1, 1.0, D), rng.uniform(0.5, 2.0, M), rng.standard_normal(D), rng.standard_normal(M))
    return model, theta


def small_instance(kind, rng, n_points=3, missing=0.3):
    """Random small ``(model, theta, dataset)`` for each model family."""
    if kind == "ar":
        model = NoisyArModel(2, 12)
        from unroll_lgm.models.ar import pacf_to_ar

        theta = model.pack(pacf_to_ar(rng.uniform(-0.8, 0.8, 2)), rng.uniform(0.5, 2), rng.uniform(0.3, 2))
    elif kind == "sbl":
        model = SblModel(16)
        theta = np.append(np.exp(rng.standard_normal(16)), rng.uniform(0.5, 3))
    elif kind == "dense":
        model, theta = random_dense_model(rng)
    elif kind == "fa":
        model = FactorAnalysisModel(8, 3)
        theta = model.pack(
            rng.standard_normal((8, 3)), rng.standard_normal(8), np.exp(rng.standard_normal(8))
        )
    else:
        raise ValueError(kind)
    Y = rng.standard_normal((n_points, model.obs_dim))
    Y[rng.random(Y.shape) < missing] = np.nan
    return model, theta, Dataset.from_array(Y)


MODEL_KINDS = ("ar", "sbl", "fa", "dense")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance summary: one line per criterion after the run
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": 0, "total": 0, "details": []})
    entry["total"] += 1
    entry["passed"] += int(rep.passed)
    entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        verdict = "PASS" if e["passed"] == e["total"] else "FAIL"
        detail = "; ".join(e["details"][:3])
        terminalreporter.write_line(
            f"criterion {number:>2} {verdict}  {e['title']} ({e['passed']}/{e['total']} checks)"
            + (f"  [{detail}]" if detail else "")
        )


@pytest.fixture
def detail(request):
    """Attach a short measurement string to the acceptance summary."""

    def add(text):
        request.node.user_properties.append(("detail", text))

    return add
