"""Prior distributions for model hyperparameters.

A prior is attached to each component of the hyperparameter vector theta.
Construct priors with the helper functions (``normal``, ``halfnormal``,
``tnormal``, ``gamma``, ``uniform``); each takes the initial value of the
parameter first, followed by the distribution parameters.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ModelSpecError

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _norm_cdf(z):
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


@dataclass(frozen=True)
class Prior:
    """Prior for a single hyperparameter.

    Parameters
    ----------
    family : str
        One of ``normal``, ``halfnormal``, ``tnormal``, ``gamma``,
        ``uniform``.
    init : float
        Initial value of the parameter; must have positive prior density.
    params : tuple of float
        Family-specific parameters, see the helper constructors.
    """

    family: str
    init: float
    params: tuple

    def logpdf(self, x):
        """Log prior density at ``x``; ``-inf`` outside the support."""
        x = float(x)
        if self.family == "normal":
            mean, sd = self.params
            z = (x - mean) / sd
            return -_HALF_LOG_2PI - math.log(sd) - 0.5 * z * z
        if self.family == "halfnormal":
            (scale,) = self.params
            if x < 0.0:
                return -math.inf
            z = x / scale
            return math.log(2.0) - _HALF_LOG_2PI - math.log(scale) - 0.5 * z * z
        if self.family == "tnormal":
            mean, sd, lo, hi = self.params
            if x < lo or x > hi:
                return -math.inf
            z = (x - mean) / sd
            mass = _norm_cdf((hi - mean) / sd) - _norm_cdf((lo - mean) / sd)
            return -_HALF_LOG_2PI - math.log(sd) - 0.5 * z * z - math.log(mass)
        if self.family == "gamma":
            shape, rate = self.params
            if x <= 0.0:
                return -math.inf
            return (
                shape * math.log(rate)
                - math.lgamma(shape)
                + (shape - 1.0) * math.log(x)
                - rate * x
            )
        if self.family == "uniform":
            lo, hi = self.params
            if x < lo or x > hi:
                return -math.inf
            return -math.log(hi - lo)
        raise ModelSpecError(f"unknown prior family '{self.family}'")

    @property
    def support(self):
        """(lower, upper) bounds of the support."""
        if self.family == "normal":
            return (-math.inf, math.inf)
        if self.family in ("halfnormal", "gamma"):
            return (0.0, math.inf)
        if self.family == "tnormal":
            return (self.params[2], self.params[3])
        if self.family == "uniform":
            return (self.params[0], self.params[1])
        raise ModelSpecError(f"unknown prior family '{self.family}'")


def _finish(prior):
    if not math.isfinite(prior.logpdf(prior.init)):
        raise ModelSpecError(
            f"initial value {prior.init} has zero density under "
            f"{prior.family} prior {prior.params}"
        )
    return prior


def normal(init, mean, sd):
    """Normal prior with given mean and standard deviation."""
    if sd <= 0:
        raise ModelSpecError("normal prior needs sd > 0")
    return _finish(Prior("normal", float(init), (float(mean), float(sd))))


def halfnormal(init, scale):
    """Half-normal prior on [0, inf) with the given scale."""
    if scale <= 0:
        raise ModelSpecError("halfnormal prior needs scale > 0")
    return _finish(Prior("halfnormal", float(init), (float(scale),)))


def tnormal(init, mean, sd, min=-math.inf, max=math.inf):
    """Normal prior truncated to [min, max]."""
    if sd <= 0:
        raise ModelSpecError("tnormal prior needs sd > 0")
    if not min < max:
        raise ModelSpecError("tnormal prior needs min < max")
    return _finish(
        Prior("tnormal", float(init), (float(mean), float(sd), float(min), float(max)))
    )


def gamma(init, shape, rate):
    """Gamma prior with shape/rate parameterization."""
    if shape <= 0 or rate <= 0:
        raise ModelSpecError("gamma prior needs shape > 0 and rate > 0")
    return _finish(Prior("gamma", float(init), (float(shape), float(rate))))


def uniform(init, min, max):
    """Uniform prior on [min, max]."""
    if not min < max:
        raise ModelSpecError("uniform prior needs min < max")
    return _finish(Prior("uniform", float(init), (float(min), float(max))))


def log_prior(priors, theta):
    """Sum of componentwise log prior densities.

    Returns ``-inf`` when any component falls outside its support.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (len(priors),):
        raise ModelSpecError(
            f"theta has length {theta.size}, expected {len(priors)}"
        )
    total = 0.0
    for prior, x in zip(priors, theta):
        lp = prior.logpdf(x)
        if lp == -math.inf:
            return -math.inf
        total += lp
    return total
