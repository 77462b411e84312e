"""Truncated iterative solvers for symmetric positive definite systems.

All solvers start from ``x = 0`` and run column-wise independent iterations on
a block of right-hand sides, sharing one batched operator product per step.
When a tape is requested, every quantity needed to differentiate the unrolled
iterations is kept, and :func:`solve_adjoint` runs the reverse pass.

The iterations are written with a recursively updated residual
(``r <- r - alpha * A d``), so each step costs exactly one product with ``A``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .linop import DiagonalOperator, LinearOperator, matvec, matvec_count, to_dense

__all__ = [
    "METHODS",
    "SolverError",
    "SolveConfig",
    "SolveTape",
    "SolveResult",
    "solve",
    "solve_adjoint",
    "steepest_descent_step_size",
    "estimate_max_eigenvalue",
    "contraction_probe",
    "ContractionReport",
]

METHODS = ("gradient_descent", "steepest_descent", "conjugate_gradient")
_ALIASES = {
    "gd": "gradient_descent",
    "sd": "steepest_descent",
    "cg": "conjugate_gradient",
    "pcg": "conjugate_gradient",
}


class SolverError(ArithmeticError):
    """Raised on non-finite iterates or a non positive definite operator."""


def canonical_method(name):
    name = str(name).lower().replace("-", "_")
    name = _ALIASES.get(name, name)
    if name not in METHODS:
        raise ValueError(f"unknown solver method {name!r}; choose from {METHODS}")
    return name


@dataclass
class SolveConfig:
    """Settings for :func:`solve`.

    ``step_size`` applies to gradient descent only; when omitted it is set to
    ``1 / lambda_max`` with ``lambda_max`` estimated by power iteration.
    ``preconditioner`` is the diagonal of ``M^{-1}`` (a vector, a
    :class:`DiagonalOperator`, or a ``(D, C)`` array giving one per column) and
    is used by conjugate gradient only.
    """

    method: str = "conjugate_gradient"
    max_iterations: int = 30
    residual_tolerance: float = 1e-8
    step_size: float | None = None
    preconditioner: object = None
    record_tape: bool = False
    power_iterations: int = 20

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be at least 1")
        self.max_iterations = int(self.max_iterations)
        if self.residual_tolerance < 0:
            raise ValueError("residual_tolerance must be non-negative")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")

    def replace(self, **changes):
        params = dict(self.__dict__)
        params.update(changes)
        return SolveConfig(**params)


@dataclass
class SolveTape:
    """Record of an unrolled solve.

    ``steps[i]`` holds the arrays of iteration ``i + 1``: the search direction
    the operator was applied to (``d``), its product (``q``), the step scalars
    and the per-column activity flags.  Conjugate gradient also keeps the
    updated residual and the ``rho``/``beta`` recurrences.
    """

    method: str
    rhs: np.ndarray
    preconditioner: np.ndarray | None
    steps: list = field(default_factory=list)

    @property
    def n_iterations(self):
        return len(self.steps)

    def iterate(self, i=None):
        """Replay the updates ``x <- x + alpha * d`` up to iteration ``i``."""
        i = self.n_iterations if i is None else int(i)
        x = np.zeros_like(self.rhs)
        for step in self.steps[:i]:
            x = x + step["alpha"] * step["d"]
        return x


@dataclass
class SolveResult:
    solution: np.ndarray
    residual: np.ndarray
    residual_norms: np.ndarray
    matvecs: int
    iterations: np.ndarray
    tape: SolveTape | None = None


def steepest_descent_step_size(r, Ar):
    """Exact line-search step ``<r, r> / <r, A r>`` (column-wise for blocks)."""
    r = np.asarray(r, dtype=float)
    Ar = np.asarray(Ar, dtype=float)
    num = np.sum(r * r, axis=0)
    den = np.sum(r * Ar, axis=0)
    if np.any(den <= 0):
        raise SolverError("r^T A r <= 0: operator is not positive definite")
    return num / den


def estimate_max_eigenvalue(A, n_iter=20, n_columns=None):
    """Power-iteration estimate of the largest eigenvalue, one per column."""
    C = 1 if n_columns is None else int(n_columns)
    v = np.ones((A.cols, C)) / np.sqrt(A.cols)
    lam = np.zeros(C)
    for _ in range(int(n_iter)):
        w = matvec(A, v)
        lam = np.sum(v * w, axis=0)
        nrm = np.linalg.norm(w, axis=0)
        nrm[nrm == 0] = 1.0
        v = w / nrm
    return lam


def _precond_diag(pre, D, C):
    if pre is None:
        return None
    if isinstance(pre, DiagonalOperator):
        pre = pre.diag
    m = np.asarray(pre, dtype=float)
    if m.ndim == 1:
        m = np.broadcast_to(m[:, None], (D, C))
    if m.shape != (D, C):
        raise ValueError(f"preconditioner must have shape ({D},) or ({D}, {C})")
    if np.any(m <= 0):
        raise ValueError("preconditioner diagonal must be positive")
    return np.array(m)


def _check_finite(arrays, it):
    for a in arrays:
        bad = ~np.all(np.isfinite(a), axis=0)
        if np.any(bad):
            col = int(np.flatnonzero(bad)[0])
            raise SolverError(f"non-finite value in column {col} at iteration {it}")


def _product(A, D, active):
    """Counted ``A @ D`` restricted to active columns (zeros elsewhere)."""
    if np.all(active):
        return matvec(A, D)
    idx = np.flatnonzero(active)
    out = np.zeros_like(D)
    if idx.size:
        out[:, idx] = matvec(A.take_columns(idx), D[:, idx])
    return out


def solve(A: LinearOperator, B, cfg: SolveConfig) -> SolveResult:
    """Run ``cfg.max_iterations`` steps of the configured solver on ``A X = B``.

    Columns stop updating once their residual norm drops to
    ``cfg.residual_tolerance``; the tape records which columns were active at
    each step so a reverse pass mirrors what was executed.
    """
    B = np.asarray(B, dtype=float)
    flat = B.ndim == 1
    if flat:
        B = B[:, None]
    if B.ndim != 2 or B.shape[0] != A.cols or B.shape[1] < 1:
        raise ValueError(f"right-hand sides must have shape ({A.cols}, C) with C >= 1")
    D, C = B.shape
    method = cfg.method
    tol = cfg.residual_tolerance
    mv0 = matvec_count()

    step = None
    if method == "gradient_descent":
        if cfg.step_size is not None:
            step = np.full(C, float(cfg.step_size))
        else:
            lam = estimate_max_eigenvalue(A, cfg.power_iterations, C)
            if np.any(lam <= 0):
                raise SolverError("power iteration returned a non-positive eigenvalue")
            step = 1.0 / lam

    m = _precond_diag(cfg.preconditioner, D, C) if method == "conjugate_gradient" else None
    tape = SolveTape(method, B.copy(), m) if cfg.record_tape else None

    x = np.zeros_like(B)
    r = B.copy()
    iters = np.zeros(C, dtype=int)
    if method == "conjugate_gradient":
        z = r * m if m is not None else r
        rho = np.sum(r * z, axis=0)
        d = z.copy()

    for it in range(1, cfg.max_iterations + 1):
        active = np.linalg.norm(r, axis=0) > tol
        if not np.any(active):
            break
        act = active.astype(float)
        if method == "conjugate_gradient":
            q = _product(A, d, active)
            pi = np.sum(d * q, axis=0)
            if np.any(pi[active] <= 0):
                raise SolverError(f"d^T A d <= 0 at iteration {it}: operator is not SPD")
            alpha = np.where(active, rho / np.where(active, pi, 1.0), 0.0)
            x = x + alpha * d
            r = r - alpha * q
            z = r * m if m is not None else r
            rho_new = np.sum(r * z, axis=0)
            beta = np.where(active, rho_new / np.where(rho > 0, rho, 1.0), 1.0)
            d_new = act * (z + beta * d) + (1.0 - act) * d
            _check_finite((x, r, d_new), it)
            if tape is not None:
                tape.steps.append(
                    dict(d=d, q=q, pi=pi, alpha=alpha, rho=rho, rho_new=rho_new,
                         beta=beta, r=r, active=active)
                )
            d, rho = d_new, rho_new
        else:
            q = _product(A, r, active)
            if method == "steepest_descent":
                num = np.sum(r * r, axis=0)
                den = np.sum(r * q, axis=0)
                if np.any(den[active] <= 0):
                    raise SolverError(f"r^T A r <= 0 at iteration {it}: operator is not SPD")
                alpha = np.where(active, num / np.where(active, den, 1.0), 0.0)
            else:
                alpha = step * act
            if tape is not None:
                tape.steps.append(dict(d=r, q=q, alpha=alpha, active=active))
            x = x + alpha * r
            r = r - alpha * q
            _check_finite((x, r), it)
        iters += active

    norms = np.linalg.norm(r, axis=0)
    result = SolveResult(
        solution=x[:, 0] if flat else x,
        residual=r[:, 0] if flat else r,
        residual_norms=norms,
        matvecs=matvec_count() - mv0,
        iterations=iters,
        tape=tape,
    )
    return result


def solve_adjoint(A, tape: SolveTape, seed, a_vjp, propagate_step_sizes=True):
    """Reverse pass through a taped solve.

    Given ``seed = dL/dX`` for the final iterate, returns the cotangents of the
    other inputs of the unrolled computation:

    * ``theta_bar`` - accumulated ``a_vjp(q_bar, d)`` over every product
      ``q = A d`` of the forward pass (a parameter-space vector),
    * ``rhs_bar`` - cotangent of the right-hand side block,
    * ``precond_bar`` - cotangent of the preconditioner diagonal (conjugate
      gradient with a preconditioner only, else ``None``).

    With ``propagate_step_sizes=False`` the step scalars are treated as
    constants, which is the cheaper variant discussed for the Jacobian probe.
    """
    seed = np.asarray(seed, dtype=float)
    if seed.ndim == 1:
        seed = seed[:, None]
    if seed.shape != tape.rhs.shape:
        raise ValueError("seed shape does not match the taped right-hand side")
    if tape.method == "conjugate_gradient":
        return _adjoint_cg(A, tape, seed, a_vjp, propagate_step_sizes)
    return _adjoint_descent(A, tape, seed, a_vjp, propagate_step_sizes)


def _adjoint_descent(A, tape, xbar, a_vjp, propagate):
    sd = tape.method == "steepest_descent"
    rbar = np.zeros_like(xbar)
    theta_bar = None
    for step in reversed(tape.steps):
        r_prev, q, alpha, active = step["d"], step["q"], step["alpha"], step["active"]
        act = active.astype(float)
        # x_i = x_{i-1} + alpha r_{i-1};  r_i = r_{i-1} - alpha q
        qbar = -alpha * rbar
        rbar_prev = rbar + alpha * xbar
        if sd and propagate:
            abar = -np.sum(rbar * q, axis=0) + np.sum(xbar * r_prev, axis=0)
            num = np.sum(r_prev * r_prev, axis=0)
            den = np.sum(r_prev * q, axis=0)
            den = np.where(active, den, 1.0)
            nbar = act * abar / den
            dbar = -act * abar * num / den**2
            rbar_prev = rbar_prev + 2.0 * nbar * r_prev + dbar * q
            qbar = qbar + dbar * r_prev
        qbar = qbar * act
        rbar_prev = rbar_prev + _product(A, qbar, active)
        g = a_vjp(qbar, r_prev)
        theta_bar = g if theta_bar is None else theta_bar + g
        rbar = rbar_prev
    if theta_bar is None:
        theta_bar = a_vjp(np.zeros_like(xbar), np.zeros_like(xbar))
    return theta_bar, rbar, None


def _adjoint_cg(A, tape, xbar, a_vjp, propagate):
    m = tape.preconditioner
    rbar = np.zeros_like(xbar)
    dbar = np.zeros_like(xbar)
    rhobar = np.zeros(xbar.shape[1])
    mbar = np.zeros_like(xbar) if m is not None else None
    theta_bar = None
    for step in reversed(tape.steps):
        d, q, pi, alpha = step["d"], step["q"], step["pi"], step["alpha"]
        rho, rho_new, beta, r = step["rho"], step["rho_new"], step["beta"], step["r"]
        active = step["active"]
        act = active.astype(float)
        z = r * m if m is not None else r
        # d_i = z_i + beta d_{i-1}
        zbar = dbar.copy()
        dbar_prev = beta * dbar
        rbar_i = rbar.copy()
        rhobar_prev = np.zeros_like(rhobar)
        if propagate:
            bbar = np.sum(dbar * d, axis=0)
            safe = np.where(rho > 0, rho, 1.0)
            rhobar_i = rhobar + bbar / safe
            rhobar_prev = -bbar * rho_new / safe**2
            # rho_i = <r_i, z_i>
            rbar_i += rhobar_i * z
            zbar += rhobar_i * r
        # z_i = m * r_i
        if m is not None:
            rbar_i += m * zbar
            mbar += act * zbar * r
        else:
            rbar_i += zbar
        # r_i = r_{i-1} - alpha q ; x_i = x_{i-1} + alpha d_{i-1}
        rbar_prev = rbar_i
        qbar = -alpha * rbar_i
        dbar_prev = dbar_prev + alpha * xbar
        if propagate:
            abar = -np.sum(rbar_i * q, axis=0) + np.sum(xbar * d, axis=0)
            pisafe = np.where(active, pi, 1.0)
            rhobar_prev = rhobar_prev + abar / pisafe
            pibar = -abar * rho / pisafe**2
            dbar_prev = dbar_prev + pibar * q
            qbar = qbar + pibar * d
        qbar = qbar * act
        dbar_prev = dbar_prev + _product(A, qbar, active)
        g = a_vjp(qbar, d)
        theta_bar = g if theta_bar is None else theta_bar + g
        # inactive columns executed an identity step
        rbar = act * rbar_prev + (1.0 - act) * rbar
        dbar = act * dbar_prev + (1.0 - act) * dbar
        rhobar = act * rhobar_prev + (1.0 - act) * rhobar
    # initialization: r0 = B, z0 = m r0, rho0 = <r0, z0>, d0 = z0
    r0 = tape.rhs
    z0 = r0 * m if m is not None else r0
    zbar = dbar.copy()
    if propagate:
        rbar = rbar + rhobar * z0
        zbar = zbar + rhobar * r0
    if m is not None:
        rbar = rbar + m * zbar
        mbar += zbar * r0
    else:
        rbar = rbar + zbar
    if theta_bar is None:
        theta_bar = a_vjp(np.zeros_like(xbar), np.zeros_like(xbar))
    return theta_bar, rbar, mbar


@dataclass
class ContractionReport:
    ratios: np.ndarray
    bound: float
    condition_number: float
    errors: np.ndarray


def contraction_probe(A, method, b=None, iterations=None, step_size=None, seed=0, norm=None):
    """Per-iteration error ratios ``|x_{i+1} - x*| / |x_i - x*|`` on a dense-able system.

    The bound is ``(k - 1) / k`` for gradient descent with step ``1/lambda_max``,
    ``(k - 1) / (k + 1)`` for steepest descent and
    ``(sqrt(k) - 1) / (sqrt(k) + 1)`` for conjugate gradient, where ``k`` is the
    condition number.

    ``norm`` is ``"2"`` or ``"energy"`` (``|e|_A``).  By default steepest
    descent and conjugate gradient are measured in the energy norm, where
    their bounds hold step by step, and gradient descent in the 2-norm.
    """
    method = canonical_method(method)
    dense = to_dense(A)
    evals = np.linalg.eigvalsh(dense)
    lo, hi = evals[0], evals[-1]
    kappa = hi / lo
    if b is None:
        b = np.random.default_rng(seed).standard_normal(A.cols)
    b = np.asarray(b, dtype=float)
    x_star = sla.solve(dense, b, assume_a="pos")
    n_it = A.cols if iterations is None else int(iterations)
    if method == "gradient_descent" and step_size is None:
        step_size = 1.0 / hi
    cfg = SolveConfig(method, n_it, residual_tolerance=0.0, step_size=step_size, record_tape=True)
    res = solve(A, b, cfg)
    xs = [np.zeros_like(b)] + [res.tape.iterate(i)[:, 0] for i in range(1, res.tape.n_iterations + 1)]
    if norm is None:
        norm = "2" if method == "gradient_descent" else "energy"
    if norm == "2":
        errs = np.array([np.linalg.norm(x - x_star) for x in xs])
    elif norm == "energy":
        errs = np.array([np.sqrt(max((x - x_star) @ dense @ (x - x_star), 0.0)) for x in xs])
    else:
        raise ValueError("norm must be '2' or 'energy'")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(errs[:-1] > 0, errs[1:] / errs[:-1], 0.0)
    if method == "gradient_descent":
        bound = (kappa - 1.0) / kappa
    elif method == "steepest_descent":
        bound = (kappa - 1.0) / (kappa + 1.0)
    else:
        bound = (np.sqrt(kappa) - 1.0) / (np.sqrt(kappa) + 1.0)
    return ContractionReport(ratios=ratios, bound=float(bound), condition_number=float(kappa), errors=errs)
