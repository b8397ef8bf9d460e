"""Bayesian inference for state space models.

Exact Kalman methods for linear-Gaussian models, Laplace/EKF
approximations for non-Gaussian and nonlinear ones, particle filters,
and adaptive MCMC with delayed acceptance and importance-sampling
post-correction.
"""

from .approx import (
    GaussianApprox,
    approx_loglik,
    ekf,
    ekf_smoother,
    gaussian_approximation,
)
from .errors import (
    ConfigError,
    ModelSpecError,
    NumericalError,
    ParticleDegeneracyError,
    SsmError,
)
from .families import ObsFamily, obs_logdensity
from .kalman import (
    FilterResult,
    SmootherResult,
    kalman_filter,
    kalman_smoother,
    simulation_smoother,
)
from .mcmc import (
    McmcConfig,
    McmcOutput,
    compress_chain,
    expand_sample,
    post_correct,
    ram_step,
    run_mcmc,
    suggest_N,
    summarize,
)
from .models import (
    Lgssm,
    NlgModel,
    simulate_data,
    sv_model,
    trend_model,
    update_model,
)
from .particle import (
    ParticleOutput,
    bootstrap_filter,
    filter_smoother_trace,
    psi_apf,
    resample,
)
from .priors import Prior, gamma, halfnormal, log_prior, normal, tnormal, uniform
from .sde import SdeModel, milstein_simulate, sde_bsf

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FilterResult",
    "GaussianApprox",
    "Lgssm",
    "McmcConfig",
    "McmcOutput",
    "ModelSpecError",
    "NlgModel",
    "NumericalError",
    "ObsFamily",
    "ParticleDegeneracyError",
    "ParticleOutput",
    "Prior",
    "SdeModel",
    "SmootherResult",
    "SsmError",
    "approx_loglik",
    "bootstrap_filter",
    "compress_chain",
    "ekf",
    "ekf_smoother",
    "expand_sample",
    "filter_smoother_trace",
    "gamma",
    "gaussian_approximation",
    "halfnormal",
    "kalman_filter",
    "kalman_smoother",
    "log_prior",
    "milstein_simulate",
    "normal",
    "obs_logdensity",
    "post_correct",
    "psi_apf",
    "ram_step",
    "resample",
    "run_mcmc",
    "sde_bsf",
    "simulate_data",
    "simulation_smoother",
    "suggest_N",
    "summarize",
    "sv_model",
    "tnormal",
    "trend_model",
    "uniform",
    "update_model",
]
