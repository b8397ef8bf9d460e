"""Observation families for models with linear-Gaussian state dynamics.

Each non-Gaussian family defines the conditional density of an observation
given the linear signal ``s_t = d_t + Z_t alpha_t``:

* ``poisson``:  y ~ Poisson(u * exp(s)), u a known exposure
* ``binomial``: y ~ Binomial(u, logistic(s)), u the number of trials
* ``negbin``:   y ~ NegBin(mean = u * exp(s), dispersion phi)
* ``gamma``:    y ~ Gamma(shape = phi, mean = u * exp(s))
* ``svm``:      y ~ N(0, exp(s)), the stochastic volatility observation

The scalar kernels below also provide the first two derivatives of the
log density with respect to the signal, which drive the mode-finding
iteration of the approximating Gaussian model.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._jit import njit
from .errors import ModelSpecError

GAUSSIAN = 0
POISSON = 1
BINOMIAL = 2
NEGBIN = 3
GAMMA = 4
SVM = 5

CODES = {
    "gaussian": GAUSSIAN,
    "poisson": POISSON,
    "binomial": BINOMIAL,
    "negbin": NEGBIN,
    "gamma": GAMMA,
    "svm": SVM,
}

NEEDS_PHI = ("negbin", "gamma")

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@njit
def _log1pexp(s):
    # log(1 + exp(s)) without overflow
    if s > 0.0:
        return s + math.log1p(math.exp(-s))
    return math.log1p(math.exp(s))


@njit
def obs_logpdf(code, y, s, phi, u):
    """Log observation density given the signal s (scalar)."""
    if code == POISSON:
        lam = u * math.exp(s)
        if y > 0.0:
            return y * math.log(lam) - lam - math.lgamma(y + 1.0)
        return -lam
    if code == BINOMIAL:
        lchoose = (
            math.lgamma(u + 1.0) - math.lgamma(y + 1.0) - math.lgamma(u - y + 1.0)
        )
        return lchoose + y * s - u * _log1pexp(s)
    if code == NEGBIN:
        m = u * math.exp(s)
        out = (
            math.lgamma(y + phi)
            - math.lgamma(phi)
            - math.lgamma(y + 1.0)
            + phi * math.log(phi / (phi + m))
        )
        if y > 0.0:
            out += y * math.log(m / (phi + m))
        return out
    if code == GAMMA:
        m = u * math.exp(s)
        return (
            phi * math.log(phi / m)
            - math.lgamma(phi)
            + (phi - 1.0) * math.log(y)
            - phi * y / m
        )
    if code == SVM:
        return -_HALF_LOG_2PI - 0.5 * s - 0.5 * y * y * math.exp(-s)
    # gaussian: treated by the linear-Gaussian machinery, phi = obs sd here
    z = (y - s) / phi
    return -_HALF_LOG_2PI - math.log(phi) - 0.5 * z * z


@njit
def obs_dlogpdf(code, y, s, phi, u):
    """First derivative of the log density with respect to the signal."""
    if code == POISSON:
        return y - u * math.exp(s)
    if code == BINOMIAL:
        return y - u / (1.0 + math.exp(-s))
    if code == NEGBIN:
        m = u * math.exp(s)
        return y - (phi + y) * m / (phi + m)
    if code == GAMMA:
        m = u * math.exp(s)
        return phi * (y / m - 1.0)
    if code == SVM:
        return -0.5 + 0.5 * y * y * math.exp(-s)
    return (y - s) / (phi * phi)


@njit
def obs_d2logpdf(code, y, s, phi, u):
    """Second derivative of the log density with respect to the signal."""
    if code == POISSON:
        return -u * math.exp(s)
    if code == BINOMIAL:
        pr = 1.0 / (1.0 + math.exp(-s))
        return -u * pr * (1.0 - pr)
    if code == NEGBIN:
        m = u * math.exp(s)
        return -(phi + y) * phi * m / ((phi + m) * (phi + m))
    if code == GAMMA:
        m = u * math.exp(s)
        return -phi * y / m
    if code == SVM:
        return -0.5 * y * y * math.exp(-s)
    return -1.0 / (phi * phi)


@njit
def obs_informative(code, y):
    """Whether the observation contributes curvature to the signal.

    A zero svm observation has a log density that is exactly linear in the
    signal, so it cannot be represented by a finite-variance pseudo
    observation; it is skipped by the approximating model and its density
    enters only through correction terms and importance weights.
    """
    if code == SVM:
        return y != 0.0
    return True


@njit
def init_signal(code, y, u):
    """Family-specific starting value for the signal mode iteration."""
    if code == POISSON or code == NEGBIN:
        return math.log((y + 0.1) / u)
    if code == BINOMIAL:
        pr = (y + 0.5) / (u + 1.0)
        if pr < 1e-4:
            pr = 1e-4
        elif pr > 1.0 - 1e-4:
            pr = 1.0 - 1e-4
        return math.log(pr / (1.0 - pr))
    if code == GAMMA:
        return math.log(y / u)
    if code == SVM:
        return math.log(y * y + 1e-4)
    return y


@dataclass(frozen=True)
class ObsFamily:
    """Observation family attached to a state space model.

    Parameters
    ----------
    kind : str
        One of ``gaussian``, ``poisson``, ``binomial``, ``negbin``,
        ``gamma``, ``svm``.
    phi : float, optional
        Dispersion (negbin) or shape (gamma) parameter. Required exactly
        for those two families.
    u : ndarray, optional
        Known exposure / trial count / offset sequence, one value per
        observation (or per series and observation). Defaults to ones.
    """

    kind: str
    phi: float = None
    u: object = None

    def __post_init__(self):
        if self.kind not in CODES:
            raise ModelSpecError(f"unknown observation family '{self.kind}'")
        if self.kind in NEEDS_PHI:
            if self.phi is None or not self.phi > 0:
                raise ModelSpecError(f"family '{self.kind}' requires phi > 0")
        elif self.phi is not None:
            raise ModelSpecError(f"family '{self.kind}' does not take phi")
        if self.u is not None and self.kind in ("gaussian", "svm"):
            raise ModelSpecError(f"family '{self.kind}' does not take u")

    @property
    def code(self):
        return CODES[self.kind]


def validate_observations(kind, y, u):
    """Check that observed values are admissible for the family.

    ``y`` and ``u`` are (T, p) arrays; NaN entries in ``y`` are missing
    and skipped.
    """
    obs = ~np.isnan(y)
    yo = y[obs]
    if kind in ("poisson", "binomial", "negbin"):
        if yo.size and (np.any(yo < 0) or np.any(yo != np.round(yo))):
            raise ModelSpecError(
                f"family '{kind}' requires nonnegative integer observations"
            )
    if kind == "binomial":
        if yo.size and np.any(yo > u[obs]):
            raise ModelSpecError("binomial observations must not exceed trials u")
    if kind == "gamma":
        if yo.size and np.any(yo <= 0):
            raise ModelSpecError("gamma observations must be positive")
    if np.any(u <= 0):
        raise ModelSpecError("exposure sequence u must be positive")


def obs_logdensity(family, y, s, t=0):
    """Log observation density ``log g_t(y | s)`` for a non-Gaussian family.

    Parameters
    ----------
    family : ObsFamily
    y : float
        Observed value (must not be missing).
    s : float
        Signal value ``d_t + Z_t alpha_t``.
    t : int
        Time index used to look up the exposure ``u_t``.
    """
    if family.kind == "gaussian":
        raise ModelSpecError(
            "gaussian observations are evaluated by the Kalman machinery"
        )
    if np.isnan(y):
        raise ModelSpecError("obs_logdensity called on a missing observation")
    u = 1.0
    if family.u is not None:
        u = float(np.asarray(family.u).reshape(-1)[t])
    code = family.code
    yy = np.array([[float(y)]])
    uu = np.array([[u]])
    validate_observations(family.kind, yy, uu)
    phi = family.phi if family.phi is not None else 1.0
    return obs_logpdf(code, float(y), float(s), phi, u)


def simulate_observations(kind, rng, signal, phi, u, H=None, eps=None):
    """Draw observations given a (T, p) signal array.

    For the gaussian family the noise is ``H_t eps_t`` with ``eps`` given
    (or drawn) as standard normals; other families draw from their
    counting/positive distributions.
    """
    n, p = signal.shape
    if kind == "gaussian":
        if eps is None:
            eps = rng.standard_normal((n, p))
        out = signal.copy()
        for t in range(n):
            hi = t if H.shape[0] > 1 else 0
            out[t] += H[hi] @ eps[t]
        return out
    if kind == "poisson":
        return rng.poisson(u * np.exp(signal)).astype(float)
    if kind == "binomial":
        pr = 1.0 / (1.0 + np.exp(-signal))
        return rng.binomial(u.astype(np.int64), pr).astype(float)
    if kind == "negbin":
        m = u * np.exp(signal)
        return rng.negative_binomial(phi, phi / (phi + m)).astype(float)
    if kind == "gamma":
        m = u * np.exp(signal)
        return rng.gamma(phi, m / phi)
    if kind == "svm":
        return np.exp(signal / 2.0) * rng.standard_normal((n, p))
    raise ModelSpecError(f"unknown observation family '{kind}'")
