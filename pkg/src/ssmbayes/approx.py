"""Gaussian approximations of intractable models.

Two routes are provided:

* For non-Gaussian observation families with linear-Gaussian state
  dynamics, :func:`gaussian_approximation` builds the approximating
  Gaussian model whose observation log-density matches the first two
  derivatives of the true one at the posterior mode of the signal. The
  resulting pseudo observations / variances feed the approximate
  marginal likelihood (:func:`approx_loglik`) and the twisted particle
  filter.

* For nonlinear models defined through callbacks, :func:`ekf` and
  :func:`ekf_smoother` run the (iterated) extended Kalman filter and the
  corresponding linearized smoother.
"""

import math

import numpy as np

from ._jit import njit
from .errors import ModelSpecError, NumericalError
from .families import (
    init_signal,
    obs_d2logpdf,
    obs_dlogpdf,
    obs_informative,
    obs_logpdf,
)
from .kalman import (
    FilterResult,
    SmootherResult,
    _filter_core,
    _smoother_core,
    kalman_filter,
    kalman_smoother,
)
from .models import Lgssm, update_model

_LOG_2PI = math.log(2.0 * math.pi)


class GaussianApprox:
    """Approximating Gaussian model at the signal mode.

    Attributes
    ----------
    mode : ndarray
        Smoothed state means (T, d) of the approximating model; equals
        the joint posterior mode of the states.
    signal_mode : ndarray
        Mode on the signal scale (T, p), ``d_t + Z_t mode_t``.
    pseudo_y : ndarray
        Pseudo observations (T, p); NaN where the original observation is
        missing or carries no curvature.
    pseudo_H : ndarray
        Observation noise factor of the approximating model, (T, p, p)
        diagonal (or the original H for gaussian-family input).
    pseudo_h2 : ndarray
        Pseudo variances (T, p), the squared diagonal of ``pseudo_H``.
    approx_loglik_gaussian : float
        Marginal log-likelihood of the pseudo observations under the
        approximating Gaussian model.
    scaling_correction : float
        Sum over observations of the true minus approximate observation
        log-density at the mode.
    converged : bool
    iterations : int
    model : Lgssm
        The approximating Gaussian model instance (built lazily).
    """

    def __init__(
        self,
        mode,
        signal_mode,
        pseudo_y,
        pseudo_H,
        pseudo_h2,
        approx_loglik_gaussian,
        scaling_correction,
        converged,
        iterations,
        source,
        model=None,
    ):
        self.mode = mode
        self.signal_mode = signal_mode
        self.pseudo_y = pseudo_y
        self.pseudo_H = pseudo_H
        self.pseudo_h2 = pseudo_h2
        self.approx_loglik_gaussian = approx_loglik_gaussian
        self.scaling_correction = scaling_correction
        self.converged = converged
        self.iterations = iterations
        self._source = source
        self._model = model

    @property
    def loglik(self):
        """Approximate marginal log-likelihood."""
        return self.approx_loglik_gaussian + self.scaling_correction

    @property
    def model(self):
        if self._model is None:
            src = self._source
            self._model = Lgssm(
                self.pseudo_y,
                Z=src.Z,
                H=self.pseudo_H,
                T=src.T_mat,
                R=src.R,
                c=src.c,
                d=src.d_vec,
                a1=src.a1,
                P1=src.P1,
                family="gaussian",
            )
        return self._model


@njit
def _signal_core(Z, d_vec, alpha):
    n = alpha.shape[0]
    p = Z.shape[1]
    nz = Z.shape[0]
    nd = d_vec.shape[0]
    out = np.empty((n, p))
    for t in range(n):
        zi = t if nz > 1 else 0
        di = t if nd > 1 else 0
        out[t] = d_vec[di] + Z[zi] @ alpha[t]
    return out


@njit
def _pseudo_obs(y, u, phi, code, s, ytil, h2, Hd):
    """Fill pseudo observations from the current signal iterate.

    Returns 0 on success, or t+1 when the observation log-density has
    non-negative curvature at time index t.
    """
    n, p = y.shape
    for t in range(n):
        for j in range(p):
            Hd[t, j, j] = 0.0
            if np.isnan(y[t, j]) or not obs_informative(code, y[t, j]):
                ytil[t, j] = np.nan
                h2[t, j] = np.nan
            else:
                l2 = obs_d2logpdf(code, y[t, j], s[t, j], phi, u[t, j])
                if not (l2 < 0.0) or not np.isfinite(l2):
                    return t + 1
                l1 = obs_dlogpdf(code, y[t, j], s[t, j], phi, u[t, j])
                hh = -1.0 / l2
                h2[t, j] = hh
                ytil[t, j] = s[t, j] + hh * l1
                Hd[t, j, j] = math.sqrt(hh)
    return 0


@njit
def _correction(y, u, phi, code, s, ytil, h2):
    """True minus approximate observation log-density, summed at signal s."""
    n, p = y.shape
    corr = 0.0
    for t in range(n):
        for j in range(p):
            if np.isnan(y[t, j]):
                continue
            corr += obs_logpdf(code, y[t, j], s[t, j], phi, u[t, j])
            if not np.isnan(ytil[t, j]):
                res = ytil[t, j] - s[t, j]
                corr -= -0.5 * (
                    1.8378770664093453 + math.log(h2[t, j]) + res * res / h2[t, j]
                )
    return corr


@njit
def _laplace_core(y, u, phi, code, Z, T_mat, R, c, d_vec, a1, P1, s0, max_iter, tol):
    n, p = y.shape
    d = a1.shape[0]
    ytil = np.empty((n, p))
    h2 = np.empty((n, p))
    Hd = np.zeros((n, p, p))

    s = s0.copy()
    s_prev = s0.copy()
    value_prev = -np.inf
    have_prev = False
    converged = False
    final_sweep = False
    iters = 0

    alphahat = np.zeros((n, d))
    shat = np.zeros((n, p))
    gauss_ll = 0.0
    corr = 0.0
    value = -np.inf

    full_s = s0.copy()
    full_vals = (0.0, 0.0, -np.inf)

    while iters < max_iter:
        iters += 1
        halvings = 0
        have_full = False
        while True:
            ok = False
            status = _pseudo_obs(y, u, phi, code, s, ytil, h2, Hd)
            if status == 0:
                out = _filter_core(ytil, Z, Hd, T_mat, R, c, d_vec, a1, P1)
                if out[10] == 0:
                    alphahat, _vt = _smoother_core(
                        Z, T_mat, out[0][:-1], out[1][:-1], out[4], out[5],
                        out[6], out[7], out[8],
                    )
                    gauss_ll = out[9]
                    shat = _signal_core(Z, d_vec, alphahat)
                    corr = _correction(y, u, phi, code, shat, ytil, h2)
                    value = gauss_ll + corr
                    ok = np.isfinite(value)
                else:
                    status = -out[10]
            if ok and not have_prev:
                break
            if ok and value >= value_prev - 1e-10 * (0.1 + abs(value_prev)):
                break
            if ok and not have_full:
                # remember the undamped step in case damping never recovers
                have_full = True
                full_s = s.copy()
                full_vals = (gauss_ll, corr, value)
            # objective decreased or evaluation failed: damp the step
            # toward the previous accepted iterate
            if halvings >= 10:
                if have_full:
                    # a finite but smaller objective: accept the full
                    # fixed-point step and keep iterating
                    s = full_s
                    _ = _pseudo_obs(y, u, phi, code, s, ytil, h2, Hd)
                    out = _filter_core(ytil, Z, Hd, T_mat, R, c, d_vec, a1, P1)
                    alphahat, _vt = _smoother_core(
                        Z, T_mat, out[0][:-1], out[1][:-1], out[4], out[5],
                        out[6], out[7], out[8],
                    )
                    shat = _signal_core(Z, d_vec, alphahat)
                    gauss_ll, corr, value = full_vals
                    break
                if status == 0:
                    status = -2000000
                return (
                    ytil, h2, Hd, alphahat, shat, gauss_ll, corr,
                    iters, converged, status,
                )
            if not have_prev:
                if status == 0:
                    status = -2000000
                return (
                    ytil, h2, Hd, alphahat, shat, gauss_ll, corr,
                    iters, converged, status,
                )
            halvings += 1
            for t in range(n):
                for j in range(p):
                    s[t, j] = 0.5 * (s[t, j] + s_prev[t, j])

        if final_sweep:
            converged = True
            break
        if have_prev and abs(value - value_prev) / (0.1 + abs(value)) < tol:
            # criterion met: one stabilizing sweep from the new mode
            final_sweep = True
        value_prev = value
        have_prev = True
        s_prev = s.copy()
        s = shat.copy()

    return ytil, h2, Hd, alphahat, shat, gauss_ll, corr, iters, converged, 0


def _default_init_signal(model):
    y = model.y
    u = model.u
    code = model.family.code
    n, p = y.shape
    s0 = np.zeros((n, p))
    for t in range(n):
        for j in range(p):
            if not np.isnan(y[t, j]) and obs_informative(code, y[t, j]):
                s0[t, j] = init_signal(code, y[t, j], u[t, j])
    return s0


def gaussian_approximation(
    model, theta=None, *, start_signal=None, max_iter=100, tol=1e-8
):
    """Build the approximating Gaussian model for a non-Gaussian family.

    Starting from a family-specific transformation of the data (or
    ``start_signal``), the routine repeatedly (i) replaces each observed
    value by a pseudo observation with variance ``-1 / l''(s)`` and mean
    ``s + variance * l'(s)``, where ``l`` is the observation log-density
    as a function of the signal ``s``, and (ii) re-smooths the resulting
    Gaussian model to update the signal. Iteration stops when the
    relative change of the approximate log-likelihood falls below
    ``tol``; a decreasing step is damped by halving toward the previous
    iterate.

    For a gaussian-family model the approximation is exact and returned
    after a single pass.

    Raises
    ------
    NumericalError
        On non-convergence or non-negative curvature at an iterate.
    """
    if theta is not None:
        model = update_model(model, theta)
    if not isinstance(model, Lgssm):
        raise ModelSpecError("gaussian_approximation requires linear state dynamics")

    if model.family.kind == "gaussian":
        sm = kalman_smoother(model)
        fr = kalman_filter(model)
        signal = _signal_core(model.Z, model.d_vec, sm.alphahat)
        n, p = model.y.shape
        h2 = np.empty((n, p))
        for t in range(n):
            hi = t if model.H.shape[0] > 1 else 0
            h2[t] = np.diag(model.H[hi] @ model.H[hi].T)
        return GaussianApprox(
            mode=sm.alphahat,
            signal_mode=signal,
            pseudo_y=model.y.copy(),
            pseudo_H=model.H,
            pseudo_h2=h2,
            approx_loglik_gaussian=fr.loglik,
            scaling_correction=0.0,
            converged=True,
            iterations=1,
            source=model,
            model=model,
        )

    phi = model.family.phi if model.family.phi is not None else 1.0
    if start_signal is None:
        s0 = _default_init_signal(model)
    else:
        s0 = np.ascontiguousarray(np.asarray(start_signal, dtype=float))
        if s0.shape != model.y.shape:
            raise ModelSpecError("start_signal must have the shape of y")

    ytil, h2, Hd, alphahat, shat, gauss_ll, corr, iters, converged, status = (
        _laplace_core(
            model.y, model.u, phi, model.family.code,
            model.Z, model.T_mat, model.R, model.c, model.d_vec,
            model.a1, model.P1, s0, max_iter, tol,
        )
    )
    if status > 0:
        raise NumericalError(
            "observation log-density has non-negative curvature at time "
            f"index {status - 1}; no Gaussian approximation exists there"
        )
    if status < 0:
        raise NumericalError(
            "Gaussian approximation failed to make progress"
            + (
                f" (Kalman pass failed at time index {-status - 1})"
                if status > -2000000
                else " (objective decreased despite step damping)"
            )
        )
    if not converged:
        raise NumericalError(
            f"Gaussian approximation did not converge in {max_iter} iterations"
        )

    return GaussianApprox(
        mode=alphahat,
        signal_mode=shat,
        pseudo_y=ytil,
        pseudo_H=Hd,
        pseudo_h2=h2,
        approx_loglik_gaussian=gauss_ll,
        scaling_correction=corr,
        converged=bool(converged),
        iterations=int(iters),
        source=model,
    )


def approx_loglik(model, theta=None, *, approx=None, start_signal=None):
    """Approximate marginal log-likelihood.

    For linear-Gaussian dynamics this is the likelihood of the
    approximating Gaussian model plus the scaling correction at the mode
    (the remainder expectation is dropped). For callback-defined
    nonlinear models the extended Kalman filter log-likelihood is used.
    """
    from .models import NlgModel

    if isinstance(model, NlgModel):
        return ekf(model, theta).loglik
    if approx is None:
        approx = gaussian_approximation(model, theta, start_signal=start_signal)
    return approx.approx_loglik_gaussian + approx.scaling_correction


# -- extended Kalman filter ----------------------------------------------


def ekf(model, theta=None, iekf_iter=0):
    """(Iterated) extended Kalman filter for a callback-defined model.

    ``iekf_iter > 0`` repeats the measurement-update linearization about
    the updated mean that many times. Returns a :class:`FilterResult`
    whose ``loglik`` is the Gaussian innovation-form approximation.
    """
    from .models import NlgModel

    if not isinstance(model, NlgModel):
        raise ModelSpecError("ekf requires a callback-defined nonlinear model")
    if iekf_iter < 0:
        raise ModelSpecError("iekf_iter must be nonnegative")
    theta = model.theta_init if theta is None else np.asarray(theta, dtype=float)
    return _ekf_pass(model, theta, iekf_iter)[0]


def _ekf_pass(model, theta, iekf_iter):
    y = model.y
    n, p = y.shape
    a = np.asarray(model.a1_fn(theta), dtype=float).reshape(-1)
    P = np.asarray(model.P1_fn(theta), dtype=float)
    d = a.shape[0]

    at = np.zeros((n + 1, d))
    Pt = np.zeros((n + 1, d, d))
    att = np.zeros((n, d))
    Ptt = np.zeros((n, d, d))
    at[0] = a
    Pt[0] = 0.5 * (P + P.T)
    loglik = 0.0

    # linearized system components, reused for smoothing and state draws
    lin = {
        "Z": np.zeros((n, p, d)),
        "d": np.zeros((n, p)),
        "H": np.zeros((n, p, p)),
        "T": np.zeros((n, d, d)),
        "c": np.zeros((n, d)),
        "R": None,
        "a1": a.copy(),
        "P1": Pt[0].copy(),
    }

    for t in range(n):
        a = at[t]
        P = Pt[t]
        obs = ~np.isnan(y[t])
        m = int(obs.sum())
        xlin = a
        for _ in range(iekf_iter + 1 if m > 0 else 1):
            zx = np.asarray(model.Z_fn(t, xlin, theta), dtype=float).reshape(-1)
            Jz = np.asarray(model.Z_jac(t, xlin, theta), dtype=float)
            Hx = np.asarray(model.H_fn(t, xlin, theta), dtype=float)
            if Hx.ndim == 0:
                Hx = Hx.reshape(1, 1)
            if m == 0:
                break
            Jo = Jz[obs]
            HHo = (Hx @ Hx.T)[np.ix_(obs, obs)]
            v = y[t, obs] - zx[obs] - Jo @ (a - xlin)
            F = Jo @ P @ Jo.T + HHo
            F = 0.5 * (F + F.T)
            w = np.linalg.eigvalsh(F)
            if not w[-1] > 0 or w[0] <= 1e-14 * w[-1]:
                raise NumericalError(
                    f"singular innovation covariance at time index {t}"
                )
            K = P @ Jo.T @ np.linalg.inv(F)
            xlin = a + K @ v
        lin["Z"][t] = Jz
        lin["d"][t] = zx - Jz @ xlin
        lin["H"][t] = Hx
        if m == 0:
            att[t] = a
            Ptt[t] = P
        else:
            att[t] = xlin
            Pnew = P - K @ F @ K.T
            Ptt[t] = 0.5 * (Pnew + Pnew.T)
            _sign, logdet = np.linalg.slogdet(F)
            loglik += -0.5 * (m * _LOG_2PI + logdet + v @ np.linalg.solve(F, v))

        Jt = np.asarray(model.T_jac(t, att[t], theta), dtype=float)
        Rx = np.asarray(model.R_fn(t, att[t], theta), dtype=float)
        if Rx.ndim == 0:
            Rx = Rx.reshape(1, 1)
        elif Rx.ndim == 1:
            Rx = Rx.reshape(-1, 1)
        tx = np.asarray(model.T_fn(t, att[t], theta), dtype=float).reshape(-1)
        if lin["R"] is None:
            lin["R"] = np.zeros((n, d, Rx.shape[1]))
        lin["T"][t] = Jt
        lin["c"][t] = tx - Jt @ att[t]
        lin["R"][t] = Rx
        at[t + 1] = tx
        Pp = Jt @ Ptt[t] @ Jt.T + Rx @ Rx.T
        Pt[t + 1] = 0.5 * (Pp + Pp.T)

    result = FilterResult(at=at, Pt=Pt, att=att, Ptt=Ptt, loglik=loglik)
    return result, lin


def _linearized_model(model, theta=None, iekf_iter=0):
    """Gaussian model from the EKF linearization of a nonlinear model.

    Used to draw approximate state trajectories via the simulation
    smoother for approx-type runs on callback-defined models.
    """
    theta = model.theta_init if theta is None else np.asarray(theta, dtype=float)
    _fr, lin = _ekf_pass(model, theta, iekf_iter)
    return Lgssm(
        model.y,
        Z=lin["Z"],
        H=lin["H"],
        T=lin["T"],
        R=lin["R"],
        c=lin["c"],
        d=lin["d"],
        a1=lin["a1"],
        P1=lin["P1"],
        family="gaussian",
    )


def ekf_smoother(model, theta=None, iekf_iter=0):
    """Smoothing pass on the EKF-linearized model (RTS recursion)."""
    from .models import NlgModel

    if not isinstance(model, NlgModel):
        raise ModelSpecError("ekf_smoother requires a callback-defined model")
    theta = model.theta_init if theta is None else np.asarray(theta, dtype=float)
    fr, lin = _ekf_pass(model, theta, iekf_iter)
    Tjac = lin["T"]
    n = model.y.shape[0]
    d = fr.att.shape[1]
    alphahat = np.zeros((n, d))
    Vt = np.zeros((n, d, d))
    alphahat[n - 1] = fr.att[n - 1]
    Vt[n - 1] = fr.Ptt[n - 1]
    for t in range(n - 2, -1, -1):
        G = fr.Ptt[t] @ Tjac[t].T @ np.linalg.pinv(fr.Pt[t + 1])
        alphahat[t] = fr.att[t] + G @ (alphahat[t + 1] - fr.at[t + 1])
        V = fr.Ptt[t] + G @ (Vt[t + 1] - fr.Pt[t + 1]) @ G.T
        Vt[t] = 0.5 * (V + V.T)
    return SmootherResult(alphahat=alphahat, Vt=Vt)
