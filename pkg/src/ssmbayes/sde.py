"""Scalar diffusion state dynamics.

A latent state follows the Ito diffusion

    d x_t = drift(x_t, theta) dt + diffusion(x_t, theta) dB_t

observed at integer times through an arbitrary log-density. Simulation
uses the Milstein scheme on a dyadic mesh (step ``2**-level``); when the
diffusion derivative is identically zero this reduces exactly to
Euler-Maruyama. Likelihood estimation runs a bootstrap particle filter
whose proposals are Milstein paths between consecutive observation
times.

All user callbacks must be vectorized over the state: ``drift(x, theta)``
etc. receive an ndarray of states and return an array of the same shape;
``obs_logdensity(y, x, theta)`` receives a scalar observation and the
particle array.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ._jit import njit
from .errors import ModelSpecError, NumericalError, ParticleDegeneracyError
from .particle import ParticleOutput, _stratified
from .priors import Prior, log_prior


@dataclass
class SdeModel:
    """Scalar diffusion model with discrete-time observations.

    Parameters
    ----------
    drift, diffusion, ddiffusion : callable
        ``f(x, theta) -> array``; ``ddiffusion`` is the state derivative
        of ``diffusion`` and must be consistent with it.
    obs_logdensity : callable
        ``f(y_k, x_k, theta) -> array`` of per-particle log densities.
    log_prior : callable or sequence of Prior
        Either a callback ``theta -> float`` or a list of priors, one per
        hyperparameter.
    x0 : float
        Fixed initial state at time zero.
    theta : array_like
        Initial hyperparameter values.
    level : int
        Mesh exponent L; the integration step is ``2**-L``.
    positive : bool
        Constrain the state to stay positive (reflection at zero).
    y : ndarray, optional
        Observations at integer times 1..T, used by the samplers.
    """

    drift: callable
    diffusion: callable
    ddiffusion: callable
    obs_logdensity: callable
    log_prior_fn: object
    x0: float
    theta: np.ndarray
    level: int
    positive: bool = False
    y: np.ndarray = None
    theta_names: tuple = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.level < 0:
            raise ModelSpecError("mesh level must be nonnegative")
        if self.theta_names is None:
            self.theta_names = tuple(f"x{i}" for i in range(self.theta.size))
        self._priors = None
        if not callable(self.log_prior_fn):
            priors = tuple(self.log_prior_fn)
            for pr in priors:
                if not isinstance(pr, Prior):
                    raise ModelSpecError(
                        "log_prior must be a callable or a sequence of Prior"
                    )
            if len(priors) != self.theta.size:
                raise ModelSpecError("one prior per hyperparameter required")
            self._priors = priors
        self._check_ddiffusion()

    def _check_ddiffusion(self):
        x = self.x0 + np.linspace(-1.0, 1.0, 9)
        if self.positive:
            x = np.abs(x) + 1e-3
        h = 1e-6
        num = (
            np.asarray(self.diffusion(x + h, self.theta), dtype=float)
            - np.asarray(self.diffusion(x - h, self.theta), dtype=float)
        ) / (2 * h)
        ana = np.asarray(self.ddiffusion(x, self.theta), dtype=float)
        ana = np.broadcast_to(ana, num.shape)
        scale = np.maximum(np.abs(num), 1.0)
        if np.any(np.abs(num - ana) > 1e-4 * scale):
            raise ModelSpecError(
                "ddiffusion is inconsistent with diffusion (finite-difference check)"
            )

    @property
    def theta_init(self):
        return self.theta.copy()

    def log_prior(self, theta):
        if self._priors is not None:
            return log_prior(self._priors, theta)
        return float(self.log_prior_fn(np.asarray(theta, dtype=float)))

    @property
    def priors(self):
        return self._priors if self._priors is not None else ()


def _milstein_steps(model, theta, x, dB, dt):
    """Advance a batch of states through the given Brownian increments."""
    for j in range(dB.shape[0]):
        mu = np.asarray(model.drift(x, theta), dtype=float)
        sig = np.asarray(model.diffusion(x, theta), dtype=float)
        dsig = np.asarray(model.ddiffusion(x, theta), dtype=float)
        db = dB[j]
        x = x + mu * dt + sig * db + 0.5 * sig * dsig * (db * db - dt)
        if model.positive:
            x = np.abs(x)
    return x


def milstein_simulate(model, theta=None, t_span=(0.0, 1.0), rng=None, dB=None,
                      x0=None):
    """Simulate a fine-grid path with the Milstein scheme.

    Parameters
    ----------
    model : SdeModel
    theta : array_like, optional
        Hyperparameters; defaults to the model's initial values.
    t_span : tuple
        (t0, t1); the interval length times ``2**level`` must be an
        integer number of steps.
    rng : numpy.random.Generator, optional
        Source of Brownian increments when ``dB`` is not supplied.
    dB : ndarray, optional
        Explicit Brownian increments, shape (steps,) or (steps, m) for m
        coupled paths.
    x0 : float or ndarray, optional
        Starting value(s); defaults to ``model.x0``.

    Returns
    -------
    ndarray
        Path of shape (steps + 1,) or (steps + 1, m), starting at x0.
    """
    theta = model.theta_init if theta is None else np.asarray(theta, dtype=float)
    dt = 2.0 ** (-model.level)
    span = float(t_span[1]) - float(t_span[0])
    steps_f = span / dt
    steps = int(round(steps_f))
    if steps < 0 or abs(steps_f - steps) > 1e-9:
        raise ModelSpecError("t_span length must be a multiple of 2**-level")
    x = np.asarray(model.x0 if x0 is None else x0, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).astype(float)
    if dB is None:
        if rng is None:
            rng = np.random.default_rng()
        dB = rng.normal(0.0, math.sqrt(dt), size=(steps, x.shape[0]))
    else:
        dB = np.asarray(dB, dtype=float)
        if dB.ndim == 1:
            dB = dB[:, None]
        if dB.shape != (steps, x.shape[0]):
            raise ModelSpecError(
                f"dB must have shape ({steps}, {x.shape[0]}), got {dB.shape}"
            )
    path = np.empty((steps + 1, x.shape[0]))
    path[0] = x
    for j in range(steps):
        x = _milstein_steps(model, theta, x, dB[j : j + 1], dt)
        path[j + 1] = x
    if not np.all(np.isfinite(path)):
        raise NumericalError("diffusion path reached a non-finite state")
    return path[:, 0] if scalar else path


def sde_bsf(model, y=None, theta=None, N=100, rng=None):
    """Bootstrap particle filter for a discretely observed diffusion.

    Particles start at the fixed ``model.x0`` at time zero and are
    propagated with the Milstein scheme between consecutive integer
    observation times; weights come from ``model.obs_logdensity``.
    Missing observations (NaN) give unit weights and no resampling.

    Returns a :class:`ParticleOutput` with scalar particles (T, N, 1).
    """
    if N < 2:
        raise ModelSpecError("sde_bsf requires N >= 2")
    if rng is None:
        rng = np.random.default_rng()
    theta = model.theta_init if theta is None else np.asarray(theta, dtype=float)
    y = model.y if y is None else y
    y = np.asarray(y, dtype=float).reshape(-1)
    n = y.shape[0]
    sub = 2**model.level
    dt = 2.0 ** (-model.level)

    dB = rng.normal(0.0, math.sqrt(dt), size=(n, sub, N))
    us = rng.random((n, N))

    particles = np.zeros((n, N, 1))
    normw = np.full((n, N), 1.0 / N)
    anc = np.zeros((n, N), np.int64)
    fmeans = np.zeros((n, 1))
    loglik = 0.0

    cur = np.full(N, float(model.x0))
    idx_prev = np.arange(N)

    for t in range(n):
        cur = _milstein_steps(model, theta, cur, dB[t], dt)
        if not np.all(np.isfinite(cur)):
            raise NumericalError(
                f"diffusion path reached a non-finite state at time index {t}"
            )
        particles[t, :, 0] = cur
        anc[t] = idx_prev
        if np.isnan(y[t]):
            fmeans[t, 0] = cur.mean()
            idx_prev = np.arange(N)
            continue
        logw = np.asarray(model.obs_logdensity(y[t], cur, theta), dtype=float)
        mx = logw.max()
        if not np.isfinite(mx):
            raise ParticleDegeneracyError(
                f"all particle weights vanished at time index {t}"
            )
        w = np.exp(logw - mx)
        sw = w.sum()
        loglik += mx + math.log(sw / N)
        normw[t] = w / sw
        fmeans[t, 0] = normw[t] @ cur
        idx = _stratified(normw[t], us[t])
        cur = cur[idx]
        idx_prev = idx

    return ParticleOutput(
        loglik_est=loglik,
        particles=particles,
        norm_weights=normw,
        ancestors=anc,
        filtered_means=fmeans,
    )
