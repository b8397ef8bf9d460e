"""Exact inference for linear-Gaussian models.

Provides the Kalman filter (prediction/update recursions and the exact
marginal log-likelihood), the associated fixed-interval smoother, and a
mean-correction simulation smoother that draws state trajectories from
the smoothing distribution.

Missing observations (NaN) are skipped in the update step; partially
missing multivariate observations use the observed sub-vector. Innovation
covariances are solved jointly per time step.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._jit import njit
from .errors import ModelSpecError, NumericalError

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FilterResult:
    """Kalman filter output.

    Attributes
    ----------
    at, Pt : ndarray
        One-step predicted state means (T+1, d) and covariances
        (T+1, d, d); the final entry predicts one step past the sample.
    att, Ptt : ndarray
        Filtered means (T, d) and covariances (T, d, d).
    loglik : float
        Exact marginal log-likelihood of the observations.
    """

    at: np.ndarray
    Pt: np.ndarray
    att: np.ndarray
    Ptt: np.ndarray
    loglik: float


@dataclass
class SmootherResult:
    """Smoothed state means (T, d) and covariances (T, d, d)."""

    alphahat: np.ndarray
    Vt: np.ndarray


@njit
def _filter_core(y, Z, H, T_mat, R, c, d_vec, a1, P1):
    n, p = y.shape
    d = a1.shape[0]
    k = R.shape[2]
    nz = Z.shape[0]
    nh = H.shape[0]
    nt = T_mat.shape[0]
    nr = R.shape[0]
    nc = c.shape[0]
    nd = d_vec.shape[0]

    at = np.zeros((n + 1, d))
    Pt = np.zeros((n + 1, d, d))
    att = np.zeros((n, d))
    Ptt = np.zeros((n, d, d))
    vt = np.zeros((n, p))
    Finv = np.zeros((n, p, p))
    Kt = np.zeros((n, d, p))
    nobs = np.zeros(n, np.int64)
    obsidx = np.zeros((n, p), np.int64)

    # workspaces, reused across steps
    PZ = np.empty((d, p))
    F = np.empty((p, p))
    Fi = np.empty((p, p))
    K = np.empty((d, p))
    vo = np.empty(p)
    TP = np.empty((d, d))

    at[0] = a1
    Pt[0] = P1
    loglik = 0.0
    status = 0

    for t in range(n):
        zi = t if nz > 1 else 0
        hi = t if nh > 1 else 0
        ti = t if nt > 1 else 0
        ri = t if nr > 1 else 0
        ci = t if nc > 1 else 0
        di = t if nd > 1 else 0

        m = 0
        for j in range(p):
            if not np.isnan(y[t, j]):
                obsidx[t, m] = j
                m += 1
        nobs[t] = m

        a = at[t]
        P = Pt[t]
        if m == 0:
            for i in range(d):
                att[t, i] = a[i]
                for j in range(d):
                    Ptt[t, i, j] = P[i, j]
        else:
            for j_ in range(m):
                jr = obsidx[t, j_]
                for i in range(d):
                    acc = 0.0
                    for l in range(d):
                        acc += P[i, l] * Z[zi, jr, l]
                    PZ[i, j_] = acc
            for r_ in range(m):
                jr = obsidx[t, r_]
                for c_ in range(r_ + 1):
                    jc = obsidx[t, c_]
                    acc = 0.0
                    for l in range(d):
                        acc += Z[zi, jr, l] * PZ[l, c_]
                    for l in range(p):
                        acc += H[hi, jr, l] * H[hi, jc, l]
                    F[r_, c_] = acc
                    F[c_, r_] = acc
                acc = y[t, jr] - d_vec[di, jr]
                for l in range(d):
                    acc -= Z[zi, jr, l] * a[l]
                vo[r_] = acc
            if m == 1:
                f0 = F[0, 0]
                if not (f0 > 0.0) or not np.isfinite(f0):
                    status = t + 1
                    break
                Fi[0, 0] = 1.0 / f0
                logdet = math.log(f0)
                quad = vo[0] * vo[0] / f0
            else:
                Fm = np.empty((m, m))
                for r_ in range(m):
                    for c_ in range(m):
                        Fm[r_, c_] = F[r_, c_]
                w, V = np.linalg.eigh(Fm)
                wmax = w[m - 1]
                if not (wmax > 0.0) or w[0] <= 1e-14 * wmax:
                    status = t + 1
                    break
                logdet = 0.0
                for l in range(m):
                    logdet += math.log(w[l])
                for r_ in range(m):
                    for c_ in range(m):
                        acc = 0.0
                        for l in range(m):
                            acc += V[r_, l] * V[c_, l] / w[l]
                        Fi[r_, c_] = acc
                quad = 0.0
                for r_ in range(m):
                    for c_ in range(m):
                        quad += vo[r_] * Fi[r_, c_] * vo[c_]
            for i in range(d):
                for j_ in range(m):
                    acc = 0.0
                    for l in range(m):
                        acc += PZ[i, l] * Fi[l, j_]
                    K[i, j_] = acc
            for i in range(d):
                acc = a[i]
                for l in range(m):
                    acc += K[i, l] * vo[l]
                att[t, i] = acc
            # Ptt = P - K F K'
            for i in range(d):
                for j in range(i + 1):
                    acc = P[i, j]
                    for r_ in range(m):
                        kf = 0.0
                        for l in range(m):
                            kf += K[i, l] * F[l, r_]
                        acc -= kf * K[j, r_]
                    Ptt[t, i, j] = acc
                    Ptt[t, j, i] = acc
            for r_ in range(m):
                vt[t, r_] = vo[r_]
                for c_ in range(m):
                    Finv[t, r_, c_] = Fi[r_, c_]
                for i in range(d):
                    Kt[t, i, r_] = K[i, r_]
            loglik += -0.5 * (m * 1.8378770664093453 + logdet + quad)

        # predict t+1
        for i in range(d):
            acc = c[ci, i]
            for l in range(d):
                acc += T_mat[ti, i, l] * att[t, l]
            at[t + 1, i] = acc
        for i in range(d):
            for j in range(d):
                acc = 0.0
                for l in range(d):
                    acc += T_mat[ti, i, l] * Ptt[t, l, j]
                TP[i, j] = acc
        for i in range(d):
            for j in range(i + 1):
                acc = 0.0
                for l in range(d):
                    acc += TP[i, l] * T_mat[ti, j, l]
                for l in range(k):
                    acc += R[ri, i, l] * R[ri, j, l]
                Pt[t + 1, i, j] = acc
                Pt[t + 1, j, i] = acc

    return at, Pt, att, Ptt, vt, Finv, Kt, nobs, obsidx, loglik, status


@njit
def _smoother_core(Z, T_mat, at, Pt, vt, Finv, Kt, nobs, obsidx):
    n, p = vt.shape
    d = at.shape[1]
    nz = Z.shape[0]
    nt = T_mat.shape[0]

    alphahat = np.zeros((n, d))
    Vt = np.zeros((n, d, d))
    r = np.zeros(d)
    N = np.zeros((d, d))
    rprev = np.zeros(d)
    Nprev = np.zeros((d, d))
    L = np.empty((d, d))
    M = np.empty((d, d))
    ZFi = np.empty((d, p))
    NL = np.empty((d, d))
    PN = np.empty((d, d))

    for t in range(n - 1, -1, -1):
        zi = t if nz > 1 else 0
        ti = t if nt > 1 else 0
        m = nobs[t]
        if m == 0:
            for i in range(d):
                acc = 0.0
                for l in range(d):
                    acc += T_mat[ti, l, i] * r[l]
                rprev[i] = acc
            for i in range(d):
                for l in range(d):
                    acc = 0.0
                    for s_ in range(d):
                        acc += N[i, s_] * T_mat[ti, s_, l]
                    NL[i, l] = acc
            for i in range(d):
                for j in range(d):
                    acc = 0.0
                    for l in range(d):
                        acc += T_mat[ti, l, i] * NL[l, j]
                    Nprev[i, j] = acc
        else:
            # M = I - K Zo ; L = T M
            for i in range(d):
                for j in range(d):
                    acc = 1.0 if i == j else 0.0
                    for l in range(m):
                        acc -= Kt[t, i, l] * Z[zi, obsidx[t, l], j]
                    M[i, j] = acc
            for i in range(d):
                for j in range(d):
                    acc = 0.0
                    for l in range(d):
                        acc += T_mat[ti, i, l] * M[l, j]
                    L[i, j] = acc
            # ZFi = Zo' Finv
            for i in range(d):
                for j_ in range(m):
                    acc = 0.0
                    for l in range(m):
                        acc += Z[zi, obsidx[t, l], i] * Finv[t, l, j_]
                    ZFi[i, j_] = acc
            for i in range(d):
                acc = 0.0
                for l in range(m):
                    acc += ZFi[i, l] * vt[t, l]
                for l in range(d):
                    acc += L[l, i] * r[l]
                rprev[i] = acc
            # Nprev = Zo' Fi Zo + L' N L
            for i in range(d):
                for l in range(d):
                    acc = 0.0
                    for s_ in range(d):
                        acc += N[i, s_] * L[s_, l]
                    NL[i, l] = acc
            for i in range(d):
                for j in range(d):
                    acc = 0.0
                    for l in range(m):
                        acc += ZFi[i, l] * Z[zi, obsidx[t, l], j]
                    for l in range(d):
                        acc += L[l, i] * NL[l, j]
                    Nprev[i, j] = acc
        P = Pt[t]
        for i in range(d):
            acc = at[t, i]
            for l in range(d):
                acc += P[i, l] * rprev[l]
            alphahat[t, i] = acc
        for i in range(d):
            for l in range(d):
                acc = 0.0
                for s_ in range(d):
                    acc += P[i, s_] * Nprev[s_, l]
                PN[i, l] = acc
        for i in range(d):
            for j in range(i + 1):
                acc = P[i, j]
                for l in range(d):
                    acc -= PN[i, l] * P[l, j]
                half = acc
                acc2 = P[j, i]
                for l in range(d):
                    acc2 -= PN[j, l] * P[l, i]
                sym = 0.5 * (half + acc2)
                Vt[t, i, j] = sym
                Vt[t, j, i] = sym
        for i in range(d):
            r[i] = rprev[i]
            for j in range(d):
                N[i, j] = 0.5 * (Nprev[i, j] + Nprev[j, i])

    return alphahat, Vt


@njit
def _simulate_states(T_mat, R, c, a1, L1, xi0, eta):
    n = eta.shape[0]
    d = a1.shape[0]
    k = R.shape[2]
    nt = T_mat.shape[0]
    nr = R.shape[0]
    nc = c.shape[0]
    alpha = np.zeros((n, d))
    a = np.empty(d)
    anew = np.empty(d)
    for i in range(d):
        acc = a1[i]
        for l in range(d):
            acc += L1[i, l] * xi0[l]
        a[i] = acc
    for t in range(n):
        for i in range(d):
            alpha[t, i] = a[i]
        ti = t if nt > 1 else 0
        ri = t if nr > 1 else 0
        ci = t if nc > 1 else 0
        for i in range(d):
            acc = c[ci, i]
            for l in range(d):
                acc += T_mat[ti, i, l] * a[l]
            for l in range(k):
                acc += R[ri, i, l] * eta[t, l]
            anew[i] = acc
        for i in range(d):
            a[i] = anew[i]
    return alpha


def _psd_factor(P):
    """Square-root factor of a PSD matrix via symmetric eigendecomposition."""
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    w = np.clip(w, 0.0, None)
    return V * np.sqrt(w)


def _require_gaussian(model, who):
    if model.family.kind != "gaussian":
        raise ModelSpecError(
            f"{who} requires the gaussian observation family; "
            f"got '{model.family.kind}' (use the approximation routines)"
        )


def _run_filter_arrays(model):
    out = _filter_core(
        model.y,
        model.Z,
        model.H,
        model.T_mat,
        model.R,
        model.c,
        model.d_vec,
        model.a1,
        model.P1,
    )
    status = out[10]
    if status != 0:
        raise NumericalError(
            f"innovation covariance numerically singular at time index {status - 1}"
        )
    return out


def kalman_filter(model):
    """Run the Kalman filter on a gaussian-family model.

    Parameters
    ----------
    model : Lgssm
        Model instance with gaussian observations.

    Returns
    -------
    FilterResult

    Raises
    ------
    NumericalError
        If an innovation covariance is numerically singular.
    """
    _require_gaussian(model, "kalman_filter")
    at, Pt, att, Ptt, *_rest, loglik, _status = _run_filter_arrays(model)
    return FilterResult(at=at, Pt=Pt, att=att, Ptt=Ptt, loglik=loglik)


def kalman_smoother(model):
    """Fixed-interval smoother for a gaussian-family model.

    Returns
    -------
    SmootherResult
        Smoothed means and covariances of the states given all data.
    """
    _require_gaussian(model, "kalman_smoother")
    at, Pt, att, Ptt, vt, Finv, Kt, nobs, obsidx, loglik, _ = _run_filter_arrays(model)
    alphahat, Vt = _smoother_core(
        model.Z, model.T_mat, at[:-1], Pt[:-1], vt, Finv, Kt, nobs, obsidx
    )
    return SmootherResult(alphahat=alphahat, Vt=Vt)


def _smoothed_means(y, Z, H, T_mat, R, c, d_vec, a1, P1):
    out = _filter_core(y, Z, H, T_mat, R, c, d_vec, a1, P1)
    status = out[10]
    if status != 0:
        raise NumericalError(
            f"innovation covariance numerically singular at time index {status - 1}"
        )
    at, Pt, att, Ptt, vt, Finv, Kt, nobs, obsidx = out[:9]
    alphahat, _ = _smoother_core(Z, T_mat, at[:-1], Pt[:-1], vt, Finv, Kt, nobs, obsidx)
    return alphahat, out[9]


def simulation_smoother(model, rng):
    """Draw one state trajectory from the smoothing distribution.

    Uses the mean-correction construction: simulate unconditional states
    and observations (alpha+, y+) from the model, then return
    ``alphahat(y) + alpha+ - alphahat(y+)`` where ``alphahat`` denotes
    smoothed means. The draw respects the missingness pattern of ``y``.

    Parameters
    ----------
    model : Lgssm
        Gaussian-family model instance.
    rng : numpy.random.Generator

    Returns
    -------
    ndarray
        Trajectory of shape (T, d).
    """
    _require_gaussian(model, "simulation_smoother")
    n, p = model.y.shape
    d = model.n_states
    k = model.n_shocks

    alphahat, _ = _smoothed_means(
        model.y, model.Z, model.H, model.T_mat, model.R, model.c,
        model.d_vec, model.a1, model.P1,
    )

    xi0 = rng.standard_normal(d)
    eta = rng.standard_normal((n, k))
    eps = rng.standard_normal((n, p))
    L1 = _psd_factor(model.P1)
    alpha_plus = _simulate_states(model.T_mat, model.R, model.c, model.a1, L1, xi0, eta)
    y_plus = np.empty((n, p))
    for t in range(n):
        zi = t if model.Z.shape[0] > 1 else 0
        hi = t if model.H.shape[0] > 1 else 0
        di = t if model.d_vec.shape[0] > 1 else 0
        y_plus[t] = model.d_vec[di] + model.Z[zi] @ alpha_plus[t] + model.H[hi] @ eps[t]
    y_plus[np.isnan(model.y)] = np.nan

    alphahat_plus, _ = _smoothed_means(
        y_plus, model.Z, model.H, model.T_mat, model.R, model.c,
        model.d_vec, model.a1, model.P1,
    )
    return alphahat + alpha_plus - alphahat_plus
