"""Model containers: validation, hyperparameter updates, and simulation.

The central class is :class:`Lgssm`, a state space model with
linear-Gaussian state dynamics

    alpha_{t+1} = c_t + T_mat_t alpha_t + R_t eta_t,   eta_t ~ N(0, I_k)
    alpha_1     ~ N(a1, P1)

combined with an observation family (see :mod:`ssmbayes.families`). For
the gaussian family the observation equation is

    y_t = d_vec_t + Z_t alpha_t + H_t eps_t,   eps_t ~ N(0, I_p).

System components may be constant or time-varying; time-varying
components carry one slice per time point and are addressed with
``min(t, slices - 1)``.

:class:`NlgModel` holds callback-defined nonlinear models used by the
extended Kalman filter and the bootstrap particle filter.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import families
from .errors import ModelSpecError, NumericalError
from .families import ObsFamily
from .priors import Prior, log_prior


def _as_slices(name, value, tail_shape, n):
    """Canonicalize a possibly time-varying component to (slices, *tail)."""
    arr = np.asarray(value, dtype=float)
    want = len(tail_shape)
    if arr.ndim < want:
        # scalar or short input broadcast to the tail shape
        try:
            arr = np.broadcast_to(arr, tail_shape).copy()
        except ValueError:
            raise ModelSpecError(
                f"{name}: cannot broadcast shape {arr.shape} to {tail_shape}"
            )
    if arr.ndim == want:
        arr = arr[None, ...]
    if arr.ndim != want + 1:
        raise ModelSpecError(
            f"{name}: expected {want}- or {want + 1}-dimensional input, "
            f"got shape {arr.shape}"
        )
    if arr.shape[1:] != tail_shape:
        raise ModelSpecError(
            f"{name}: slice shape {arr.shape[1:]} does not match {tail_shape}"
        )
    if arr.shape[0] not in (1, n):
        raise ModelSpecError(
            f"{name}: time-varying component must have 1 or {n} slices, "
            f"got {arr.shape[0]}"
        )
    if not np.all(np.isfinite(arr)):
        raise ModelSpecError(f"{name}: contains non-finite entries")
    return np.ascontiguousarray(arr)


def _check_psd(name, mat, tol=1e-8):
    if not np.allclose(mat, mat.T, atol=tol):
        raise ModelSpecError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    scale = max(abs(w[-1]), 1.0)
    if w[0] < -tol * scale:
        raise ModelSpecError(f"{name} must be positive semidefinite")
    return 0.5 * (mat + mat.T)


class Lgssm:
    """Validated state space model with linear-Gaussian state dynamics.

    Parameters
    ----------
    y : array_like
        Observations, shape (T,) or (T, p). NaN marks a missing value.
    Z : array_like
        Observation map, (p, d) or (T, p, d).
    H : array_like, optional
        Observation noise factor (gaussian family only), (p, p) or
        (T, p, p); the observation covariance is ``H H'``.
    T : array_like
        State transition map, (d, d) or (T, d, d).
    R : array_like
        State noise factor, (d, k) or (T, d, k); state covariance
        ``R R'``. ``k <= d`` is allowed.
    c : array_like, optional
        State intercept, (d,) or (T, d). Defaults to zero.
    d : array_like, optional
        Observation intercept, (p,) or (T, p). Defaults to zero.
    a1, P1 : array_like, optional
        Initial state mean and covariance. Default to zeros.
    family : str or ObsFamily
        Observation family; defaults to gaussian.
    phi, u : optional
        Family parameters, forwarded to :class:`ObsFamily` when ``family``
        is given as a string.
    priors : sequence of Prior, optional
        Priors for the hyperparameter vector theta.
    theta_names : sequence of str, optional
        Names for theta components; defaults to x0, x1, ...
    update_fn : callable, optional
        Maps theta to a dict of components to replace, e.g.
        ``lambda theta: {"R": ...}``. Required when priors are given.
    """

    def __init__(
        self,
        y,
        Z,
        H=None,
        T=None,
        R=None,
        c=None,
        d=None,
        a1=None,
        P1=None,
        family="gaussian",
        phi=None,
        u=None,
        priors=(),
        theta_names=None,
        update_fn=None,
        state_names=None,
    ):
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[0] < 1:
            raise ModelSpecError(f"y must be (T,) or (T, p), got shape {y.shape}")
        self.y = np.ascontiguousarray(y)
        n, p = y.shape

        if T is None:
            raise ModelSpecError("transition map T is required")
        T_arr = np.asarray(T, dtype=float)
        if T_arr.ndim == 0:
            d_state = 1
        elif T_arr.ndim in (2, 3):
            d_state = T_arr.shape[-1]
        else:
            raise ModelSpecError(f"T must be (d, d) or (T, d, d), got {T_arr.shape}")
        self.T_mat = _as_slices("T", T_arr, (d_state, d_state), n)

        self.Z = _as_slices("Z", Z, (p, d_state), n)

        if R is None:
            raise ModelSpecError("state noise factor R is required")
        R_arr = np.asarray(R, dtype=float)
        if R_arr.ndim == 0:
            k = 1
            R_arr = R_arr.reshape(1, 1)
            if d_state != 1:
                raise ModelSpecError("scalar R requires a one-dimensional state")
        elif R_arr.ndim == 1:
            k = 1
            R_arr = R_arr.reshape(-1, 1)
        else:
            k = R_arr.shape[-1]
        if k > d_state:
            raise ModelSpecError(f"R has more noise terms ({k}) than states ({d_state})")
        self.R = _as_slices("R", R_arr, (d_state, k), n)

        self.c = _as_slices("c", 0.0 if c is None else c, (d_state,), n)
        self.d_vec = _as_slices("d", 0.0 if d is None else d, (p,), n)

        a1 = np.zeros(d_state) if a1 is None else np.asarray(a1, dtype=float).reshape(-1)
        if a1.shape != (d_state,):
            raise ModelSpecError(f"a1 must have shape ({d_state},), got {a1.shape}")
        if not np.all(np.isfinite(a1)):
            raise ModelSpecError("a1 contains non-finite entries")
        self.a1 = np.ascontiguousarray(a1)

        P1 = np.zeros((d_state, d_state)) if P1 is None else np.asarray(P1, dtype=float)
        if P1.ndim == 0:
            P1 = P1 * np.eye(d_state)
        if P1.shape != (d_state, d_state):
            raise ModelSpecError(
                f"P1 must have shape ({d_state}, {d_state}), got {P1.shape}"
            )
        if not np.all(np.isfinite(P1)):
            raise ModelSpecError("P1 contains non-finite entries")
        self.P1 = np.ascontiguousarray(_check_psd("P1", P1))

        if isinstance(family, ObsFamily):
            fam = family
        else:
            fam = ObsFamily(family, phi=phi, u=None if u is None else np.asarray(u))
        self.family = fam
        if fam.kind == "svm" and d_state != 1:
            raise ModelSpecError("svm requires a one-dimensional state")

        if fam.kind == "gaussian":
            if H is None:
                raise ModelSpecError("gaussian family requires H")
            H_arr = np.asarray(H, dtype=float)
            if H_arr.ndim == 0:
                H_arr = H_arr.reshape(1, 1) * np.eye(p)
            self.H = _as_slices("H", H_arr, (p, p), n)
        else:
            if H is not None:
                raise ModelSpecError(f"family '{fam.kind}' does not take H")
            self.H = np.zeros((1, p, p))

        if fam.u is None:
            u_arr = np.ones((n, p))
        else:
            u_arr = np.asarray(fam.u, dtype=float)
            if u_arr.ndim == 1:
                if u_arr.shape[0] != n:
                    raise ModelSpecError(f"u must have length {n}, got {u_arr.shape[0]}")
                u_arr = np.repeat(u_arr[:, None], p, axis=1)
            if u_arr.shape != (n, p):
                raise ModelSpecError(f"u must have shape ({n},) or ({n}, {p})")
        self.u = np.ascontiguousarray(u_arr)
        if fam.kind != "gaussian":
            families.validate_observations(fam.kind, self.y, self.u)

        priors = tuple(priors)
        for pr in priors:
            if not isinstance(pr, Prior):
                raise ModelSpecError("priors must be Prior instances")
        self.priors = priors
        if theta_names is None:
            theta_names = tuple(f"x{i}" for i in range(len(priors)))
        self.theta_names = tuple(theta_names)
        if len(self.theta_names) != len(priors):
            raise ModelSpecError("theta_names and priors must have equal length")
        self.update_fn = update_fn
        if priors and update_fn is None:
            raise ModelSpecError("models with priors require an update_fn")
        if state_names is None:
            state_names = tuple(f"alpha_{j + 1}" for j in range(d_state))
        self.state_names = tuple(state_names)
        if len(self.state_names) != d_state:
            raise ModelSpecError("state_names must have one entry per state")

    # -- basic dimensions -------------------------------------------------

    @property
    def n(self):
        """Number of time points."""
        return self.y.shape[0]

    @property
    def n_series(self):
        return self.y.shape[1]

    @property
    def n_states(self):
        return self.a1.shape[0]

    @property
    def n_shocks(self):
        return self.R.shape[2]

    @property
    def theta_init(self):
        return np.array([pr.init for pr in self.priors])

    def log_prior(self, theta):
        return log_prior(self.priors, theta)

    # -- component access -------------------------------------------------

    def signal(self, alpha):
        """Observation-scale signal ``d_t + Z_t alpha_t`` for a state path."""
        alpha = np.asarray(alpha, dtype=float)
        n = self.n
        out = np.empty((n, self.n_series))
        for t in range(n):
            zi = t if self.Z.shape[0] > 1 else 0
            di = t if self.d_vec.shape[0] > 1 else 0
            out[t] = self.d_vec[di] + self.Z[zi] @ alpha[t]
        return out

    def _components(self):
        return {
            "y": self.y,
            "Z": self.Z,
            "H": self.H,
            "T": self.T_mat,
            "R": self.R,
            "c": self.c,
            "d": self.d_vec,
            "a1": self.a1,
            "P1": self.P1,
            "phi": self.family.phi,
            "u": self.u,
        }

    def _replace(self, updates):
        """Fast immutable update used by update_model and the samplers."""
        new = object.__new__(Lgssm)
        new.__dict__.update(self.__dict__)
        n, p = self.y.shape
        d_state = self.n_states
        k = self.n_shocks
        tails = {
            "Z": (p, d_state),
            "H": (p, p),
            "T": (d_state, d_state),
            "R": (d_state, k),
            "c": (d_state,),
            "d": (p,),
        }
        attr = {"T": "T_mat", "d": "d_vec"}
        fam_phi = self.family.phi
        for key, value in updates.items():
            if key in tails:
                arr = np.asarray(value, dtype=float)
                if key == "R" and arr.ndim == 0:
                    arr = arr.reshape(1, 1)
                setattr(new, attr.get(key, key), _as_slices(key, arr, tails[key], n))
            elif key == "a1":
                a1 = np.asarray(value, dtype=float).reshape(-1)
                if a1.shape != (d_state,) or not np.all(np.isfinite(a1)):
                    raise NumericalError("update produced an invalid a1")
                new.a1 = np.ascontiguousarray(a1)
            elif key == "P1":
                P1 = np.asarray(value, dtype=float)
                if P1.ndim == 0:
                    P1 = P1 * np.eye(d_state)
                if P1.shape != (d_state, d_state) or not np.all(np.isfinite(P1)):
                    raise NumericalError("update produced an invalid P1")
                new.P1 = np.ascontiguousarray(_check_psd("P1", P1))
            elif key == "phi":
                if not value > 0 or not math.isfinite(value):
                    raise NumericalError("update produced an invalid phi")
                fam_phi = float(value)
            elif key == "u":
                u_arr = np.asarray(value, dtype=float)
                if u_arr.ndim == 1:
                    u_arr = np.repeat(u_arr[:, None], p, axis=1)
                if u_arr.shape != (n, p) or np.any(u_arr <= 0):
                    raise NumericalError("update produced an invalid u")
                new.u = np.ascontiguousarray(u_arr)
            else:
                raise ModelSpecError(f"update_fn returned unknown component '{key}'")
        if fam_phi != self.family.phi:
            new.family = ObsFamily(self.family.kind, phi=fam_phi, u=self.family.u)
        return new


def update_model(model, theta):
    """Instantiate the model at a hyperparameter value.

    Applies the model's update function to ``theta`` and returns a new
    model instance; only the components named by the update are replaced.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape != (len(model.priors),):
        raise ModelSpecError(
            f"theta has length {theta.size}, expected {len(model.priors)}"
        )
    if model.update_fn is None:
        if len(model.priors) == 0:
            return model
        raise ModelSpecError("model has no update_fn")
    updates = model.update_fn(theta)
    if not isinstance(updates, dict):
        raise ModelSpecError("update_fn must return a dict of components")
    for value in updates.values():
        if not np.all(np.isfinite(np.asarray(value, dtype=float))):
            raise NumericalError("update produced non-finite components")
    return model._replace(updates)


def simulate_data(model, theta=None, rng=None, include_states=False):
    """Simulate observations (and optionally states) from the model.

    States are drawn forward from the initial distribution, then
    observations are drawn from the observation family given the signal.

    Returns the (T, p) observation array, or ``(y, alpha)`` when
    ``include_states`` is set.
    """
    from .kalman import _psd_factor, _simulate_states

    if rng is None:
        rng = np.random.default_rng()
    if theta is not None:
        model = update_model(model, theta)
    n, p = model.y.shape
    k = model.n_shocks
    xi0 = rng.standard_normal(model.n_states)
    eta = rng.standard_normal((n, k))
    L1 = _psd_factor(model.P1)
    alpha = _simulate_states(
        model.T_mat, model.R, model.c, model.a1, L1, xi0, eta
    )
    signal = model.signal(alpha)
    y = families.simulate_observations(
        model.family.kind, rng, signal, model.family.phi, model.u, H=model.H
    )
    if include_states:
        return y, alpha
    return y


@dataclass
class NlgModel:
    """Nonlinear Gaussian model defined through callbacks.

    The observation and state equations are

        y_t       = Z_fn(t, alpha_t, theta) + H_fn(t, alpha_t, theta) eps_t
        alpha_t+1 = T_fn(t, alpha_t, theta) + R_fn(t, alpha_t, theta) eta_t

    with ``alpha_1 ~ N(a1_fn(theta), P1_fn(theta))``. ``Z_jac`` and
    ``T_jac`` return the Jacobians of ``Z_fn`` and ``T_fn`` with respect
    to the state, with shapes (p, d) and (d, d). Time indices passed to
    the callbacks are zero-based.
    """

    y: np.ndarray
    Z_fn: callable
    H_fn: callable
    T_fn: callable
    R_fn: callable
    Z_jac: callable
    T_jac: callable
    a1_fn: callable
    P1_fn: callable
    priors: tuple = ()
    theta_names: tuple = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        self.y = y
        self.priors = tuple(self.priors)
        if self.theta_names is None:
            self.theta_names = tuple(f"x{i}" for i in range(len(self.priors)))
        theta0 = self.theta_init
        a1 = np.asarray(self.a1_fn(theta0), dtype=float).reshape(-1)
        P1 = np.asarray(self.P1_fn(theta0), dtype=float)
        d = a1.shape[0]
        p = y.shape[1]
        if P1.shape != (d, d):
            raise ModelSpecError(f"P1_fn must return ({d}, {d}), got {P1.shape}")
        jz = np.asarray(self.Z_jac(0, a1, theta0), dtype=float)
        jt = np.asarray(self.T_jac(0, a1, theta0), dtype=float)
        if jz.shape != (p, d):
            raise ModelSpecError(f"Z_jac must return ({p}, {d}), got {jz.shape}")
        if jt.shape != (d, d):
            raise ModelSpecError(f"T_jac must return ({d}, {d}), got {jt.shape}")
        for name, arr in (("Z_jac", jz), ("T_jac", jt)):
            if not np.all(np.isfinite(arr)):
                raise ModelSpecError(f"{name} returned non-finite values")

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def n_series(self):
        return self.y.shape[1]

    @property
    def theta_init(self):
        return np.array([pr.init for pr in self.priors])

    def log_prior(self, theta):
        return log_prior(self.priors, theta)


# -- builders ------------------------------------------------------------


def _prior_or_fixed(value):
    if isinstance(value, Prior):
        return value, True
    return float(value), False


def trend_model(
    y,
    *,
    sd_y=None,
    sd_level=None,
    sd_slope=None,
    xreg=None,
    beta=None,
    distribution="gaussian",
    phi=None,
    u=None,
    a1=None,
    P1=None,
):
    """Local level / local linear trend model, optionally with covariates.

    The state contains a level and, when ``sd_slope`` is given, a slope:

        y_t ~ family(u_t exp(beta' x_t + level_t))      (non-gaussian)
        y_t = beta' x_t + level_t + eps_t               (gaussian)
        level_{t+1} = level_t + slope_t + eta_t,  sd(eta) = sd_level
        slope_{t+1} = slope_t + xi_t,             sd(xi) = sd_slope

    Standard deviation arguments and ``phi``/``beta`` accept either a
    fixed float or a :class:`Prior`, in which case they join theta.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ModelSpecError("trend_model expects a univariate series")
    n = y.shape[0]
    has_slope = sd_slope is not None
    d_state = 2 if has_slope else 1
    gaussian = distribution == "gaussian"
    if gaussian and sd_y is None:
        raise ModelSpecError("gaussian trend model requires sd_y")
    if not gaussian and sd_y is not None:
        raise ModelSpecError("sd_y applies to the gaussian trend model only")
    if sd_level is None:
        raise ModelSpecError("trend_model requires sd_level")

    if xreg is not None:
        xreg = np.asarray(xreg, dtype=float)
        if xreg.ndim == 1:
            xreg = xreg[:, None]
        if xreg.shape[0] != n:
            raise ModelSpecError("xreg must have one row per observation")
        if beta is None:
            raise ModelSpecError("xreg requires beta priors or coefficients")
        betas = beta if isinstance(beta, (list, tuple)) else [beta]
        if len(betas) != xreg.shape[1]:
            raise ModelSpecError("one beta per xreg column required")
    else:
        betas = []

    priors = []
    names = []
    fixed = {}

    def register(name, value):
        if value is None:
            return None
        val, is_prior = _prior_or_fixed(value)
        if is_prior:
            priors.append(val)
            names.append(name)
            return val.init
        fixed[name] = val
        return val

    sd_y0 = register("sd_y", sd_y) if gaussian else None
    sd_level0 = register("sd_level", sd_level)
    sd_slope0 = register("sd_slope", sd_slope) if has_slope else None
    phi0 = register("phi", phi) if distribution in families.NEEDS_PHI else None
    beta0 = [register(f"beta_{i}", b) for i, b in enumerate(betas)]

    Z = np.zeros((1, d_state))
    Z[0, 0] = 1.0
    T_mat = np.eye(d_state)
    if has_slope:
        T_mat[0, 1] = 1.0

    def build(values):
        out = {}
        if gaussian:
            out["H"] = np.array([[values["sd_y"]]])
        Rm = np.zeros((d_state, d_state))
        Rm[0, 0] = values["sd_level"]
        if has_slope:
            Rm[1, 1] = values["sd_slope"]
        out["R"] = Rm
        if distribution in families.NEEDS_PHI:
            out["phi"] = values["phi"]
        if betas:
            bvec = np.array([values[f"beta_{i}"] for i in range(len(betas))])
            out["d"] = (xreg @ bvec)[:, None]
        return out

    def update_fn(theta):
        values = dict(fixed)
        values.update(dict(zip(names, theta)))
        return build(values)

    init_values = dict(fixed)
    init_values.update({nm: pr.init for nm, pr in zip(names, priors)})
    parts = build(init_values)

    if P1 is None:
        P1 = np.diag([1e2] * d_state)
    return Lgssm(
        y,
        Z=Z,
        H=parts.get("H"),
        T=T_mat,
        R=parts["R"],
        d=parts.get("d"),
        a1=a1,
        P1=P1,
        family=distribution,
        phi=parts.get("phi"),
        u=u,
        priors=priors,
        theta_names=names,
        update_fn=update_fn if priors else None,
        state_names=("level", "slope") if has_slope else ("level",),
    )


def sv_model(y, *, mu, rho, sd_eta):
    """Stochastic volatility model with AR(1) log-variance state.

    The observation is ``y_t = exp(alpha_t / 2) eps_t`` and the state
    follows ``alpha_{t+1} = mu + rho (alpha_t - mu) + sd_eta eta_t`` with
    the stationary initial distribution. All three arguments are priors;
    the support of ``rho`` must lie inside (-1, 1).
    """
    for name, pr in (("mu", mu), ("rho", rho), ("sd_eta", sd_eta)):
        if not isinstance(pr, Prior):
            raise ModelSpecError(f"sv_model requires a Prior for {name}")
    lo, hi = rho.support
    if lo <= -1.0 or hi >= 1.0:
        raise ModelSpecError("the support of the rho prior must lie in (-1, 1)")
    if sd_eta.support[0] < 0.0:
        raise ModelSpecError("the support of the sd_eta prior must be nonnegative")

    def update_fn(theta):
        m, r, s = theta
        return {
            "T": np.array([[r]]),
            "c": np.array([m * (1.0 - r)]),
            "R": np.array([[s]]),
            "a1": np.array([m]),
            "P1": np.array([[s * s / (1.0 - r * r)]]),
        }

    theta0 = (mu.init, rho.init, sd_eta.init)
    parts = update_fn(theta0)
    return Lgssm(
        y,
        Z=np.ones((1, 1)),
        T=parts["T"],
        R=parts["R"],
        c=parts["c"],
        a1=parts["a1"],
        P1=parts["P1"],
        family="svm",
        priors=(mu, rho, sd_eta),
        theta_names=("mu", "rho", "sd_eta"),
        update_fn=update_fn,
    )
