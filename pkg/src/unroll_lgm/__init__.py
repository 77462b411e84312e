"""Matrix-free maximum likelihood for latent Gaussian models.

Gradient EM where posterior moments come from sampled right-hand sides and
truncated iterative solves, optionally differentiated through the unrolled
solver iterations.
"""

from .gradients import (
    GradientEstimate,
    GradientSettings,
    exact_gradient,
    mc_gradient,
    network_gradient,
    output_gradient,
    population_gradient,
    posterior_via_woodbury,
)
from .lgm import DataPoint, Dataset, assemble_system, draw_posterior_rhs, nll_dense, q_mc, q_value
from .linop import matvec, matvec_count, reset_matvec_count, to_dense
from .models import FactorAnalysisModel, NoisyArModel, SblModel, nrmse
from .solvers import SolveConfig, solve
from .estimators import BayesianCompressedSensing, FactorAnalysisCF, NoisyAR, rating_rmse
from .diagnostics import (
    JacobianProbe,
    OptErrorProbe,
    StatErrorProbe,
    jacobian_error_sweep,
    opt_error_sweep,
    stat_error_sweep,
)

__version__ = "0.1.0"

__all__ = [
    "DataPoint",
    "Dataset",
    "GradientEstimate",
    "GradientSettings",
    "SolveConfig",
    "NoisyArModel",
    "SblModel",
    "FactorAnalysisModel",
    "assemble_system",
    "draw_posterior_rhs",
    "exact_gradient",
    "mc_gradient",
    "output_gradient",
    "network_gradient",
    "population_gradient",
    "posterior_via_woodbury",
    "nll_dense",
    "q_value",
    "q_mc",
    "solve",
    "matvec",
    "matvec_count",
    "reset_matvec_count",
    "to_dense",
    "nrmse",
    "NoisyAR",
    "BayesianCompressedSensing",
    "FactorAnalysisCF",
    "rating_rmse",
    "StatErrorProbe",
    "OptErrorProbe",
    "JacobianProbe",
    "stat_error_sweep",
    "opt_error_sweep",
    "jacobian_error_sweep",
]
