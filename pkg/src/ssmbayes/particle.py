"""Sequential Monte Carlo: bootstrap and twisted auxiliary particle filters.

The bootstrap filter propagates particles through the state dynamics and
weights them by the observation density, yielding an unbiased estimator
of the marginal likelihood. The twisted filter (:func:`psi_apf`) instead
proposes from the approximating Gaussian model's one-step smoothing
conditionals given the pseudo observations, weighting by the ratio of
true to approximate observation densities; on an exactly Gaussian model
every weight is one and the estimator has zero variance.

Both filters resample with the stratified scheme at every step carrying
an observation and store the ancestry needed to trace full state
trajectories backwards.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._jit import njit
from .errors import ModelSpecError, NumericalError, ParticleDegeneracyError
from .families import GAUSSIAN, obs_logpdf
from .kalman import _psd_factor
from .models import Lgssm, NlgModel, update_model

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ParticleOutput:
    """Particle filter output.

    Attributes
    ----------
    loglik_est : float
        Log marginal likelihood estimate.
    particles : ndarray
        Particle positions before resampling, (T, N, d).
    norm_weights : ndarray
        Normalized weights per step, (T, N); rows sum to one.
    ancestors : ndarray
        ``ancestors[t, i]`` is the index into ``particles[t-1]`` of the
        parent of ``particles[t, i]``; the first row is the identity.
    filtered_means : ndarray
        Weighted particle means, (T, d).
    """

    loglik_est: float
    particles: np.ndarray
    norm_weights: np.ndarray
    ancestors: np.ndarray
    filtered_means: np.ndarray


@njit
def _stratified(w, us):
    n = w.shape[0]
    idx = np.empty(n, np.int64)
    csum = w[0]
    j = 0
    for i in range(n):
        u = (i + us[i]) / n
        while csum < u and j < n - 1:
            j += 1
            csum += w[j]
        idx[i] = j
    return idx


def resample(weights, rng):
    """Stratified resampling of normalized weights.

    Returns an index vector of the same length whose expected count of
    index ``i`` is ``N * weights[i]``.

    Raises
    ------
    ParticleDegeneracyError
        If all weights are zero (or not finite), which signals particle
        degeneracy upstream.
    """
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0 or np.any(w < 0):
        raise ParticleDegeneracyError("cannot resample: weights are degenerate")
    w = w / total
    return _stratified(w, rng.random(w.shape[0]))


@njit
def _obs_cov_factor(H, obsidx, m):
    p = H.shape[0]
    Ho = np.empty((m, m))
    for r_ in range(m):
        jr = obsidx[r_]
        for c_ in range(m):
            jc = obsidx[c_]
            acc = 0.0
            for l in range(p):
                acc += H[jr, l] * H[jc, l]
            Ho[r_, c_] = acc
    return Ho


@njit
def _bsf_core(y, Z, H, T_mat, R, c, d_vec, a1, L1, code, phi, u, xi, eta, us):
    n, p = y.shape
    N = xi.shape[0]
    d = a1.shape[0]
    nz = Z.shape[0]
    nh = H.shape[0]
    nt = T_mat.shape[0]
    nr = R.shape[0]
    nc = c.shape[0]
    nd = d_vec.shape[0]

    particles = np.zeros((n, N, d))
    normw = np.full((n, N), 1.0 / N)
    anc = np.zeros((n, N), np.int64)
    fmeans = np.zeros((n, d))
    logw = np.empty(N)

    cur = np.empty((N, d))
    for i in range(N):
        cur[i] = a1 + L1 @ xi[i]
    idx_prev = np.arange(N)

    loglik = 0.0
    status = 0
    obsidx = np.empty(p, np.int64)

    for t in range(n):
        zi = t if nz > 1 else 0
        hi = t if nh > 1 else 0
        di = t if nd > 1 else 0

        for i in range(N):
            anc[t, i] = idx_prev[i]
            for l in range(d):
                particles[t, i, l] = cur[i, l]

        m = 0
        for j in range(p):
            if not np.isnan(y[t, j]):
                obsidx[m] = j
                m += 1

        if m == 0:
            for l in range(d):
                acc = 0.0
                for i in range(N):
                    acc += cur[i, l]
                fmeans[t, l] = acc / N
            idx_prev = np.arange(N)
        else:
            if code == GAUSSIAN:
                Ho = _obs_cov_factor(H[hi], obsidx, m)
                w_, V = np.linalg.eigh(Ho)
                if not (w_[m - 1] > 0.0) or w_[0] <= 1e-14 * w_[m - 1]:
                    status = t + 1
                    break
                Hinv = (V / w_) @ V.T
                logdet = 0.0
                for l in range(m):
                    logdet += math.log(w_[l])
                for i in range(N):
                    quad = 0.0
                    res = np.empty(m)
                    for r_ in range(m):
                        jr = obsidx[r_]
                        acc = y[t, jr] - d_vec[di, jr]
                        for l in range(d):
                            acc -= Z[zi, jr, l] * cur[i, l]
                        res[r_] = acc
                    for r_ in range(m):
                        for c_ in range(m):
                            quad += res[r_] * Hinv[r_, c_] * res[c_]
                    logw[i] = -0.5 * (m * _LOG_2PI + logdet + quad)
            else:
                for i in range(N):
                    acc = 0.0
                    for r_ in range(m):
                        jr = obsidx[r_]
                        s = d_vec[di, jr]
                        for l in range(d):
                            s += Z[zi, jr, l] * cur[i, l]
                        acc += obs_logpdf(code, y[t, jr], s, phi, u[t, jr])
                    logw[i] = acc

            mx = logw[0]
            for i in range(1, N):
                if logw[i] > mx:
                    mx = logw[i]
            if not np.isfinite(mx):
                status = t + 1
                break
            sw = 0.0
            for i in range(N):
                logw[i] = math.exp(logw[i] - mx)
                sw += logw[i]
            if not (sw > 0.0) or not np.isfinite(sw):
                status = t + 1
                break
            loglik += mx + math.log(sw / N)
            for i in range(N):
                normw[t, i] = logw[i] / sw
            for l in range(d):
                acc = 0.0
                for i in range(N):
                    acc += normw[t, i] * cur[i, l]
                fmeans[t, l] = acc
            idx = _stratified(normw[t], us[t])
            nxt = np.empty((N, d))
            for i in range(N):
                nxt[i] = cur[idx[i]]
            cur = nxt
            idx_prev = idx

        if t < n - 1:
            ti = t if nt > 1 else 0
            ri = t if nr > 1 else 0
            ci = t if nc > 1 else 0
            k = R.shape[2]
            nxt = np.empty((N, d))
            for i in range(N):
                for l in range(d):
                    acc = c[ci, l]
                    for s_ in range(d):
                        acc += T_mat[ti, l, s_] * cur[i, s_]
                    for s_ in range(k):
                        acc += R[ri, l, s_] * eta[t, i, s_]
                    nxt[i, l] = acc
            cur = nxt

    return particles, normw, anc, fmeans, loglik, status


def bootstrap_filter(model, theta=None, N=100, rng=None):
    """Bootstrap particle filter.

    Works for any model with simulable dynamics and a pointwise
    observation density: linear-Gaussian-dynamics models with any
    observation family, and callback-defined nonlinear models. Missing
    observations give unit weights and no resampling at that step.

    Parameters
    ----------
    model : Lgssm or NlgModel
    theta : array_like, optional
        Hyperparameters to instantiate the model at.
    N : int
        Number of particles (at least 2).
    rng : numpy.random.Generator

    Returns
    -------
    ParticleOutput
        ``loglik_est`` is unbiased on the likelihood scale.
    """
    if N < 2:
        raise ModelSpecError("bootstrap_filter requires N >= 2")
    if rng is None:
        rng = np.random.default_rng()
    if isinstance(model, NlgModel):
        return _bsf_nonlinear(model, theta, N, rng)
    if theta is not None:
        model = update_model(model, theta)

    n, p = model.y.shape
    k = model.n_shocks
    d = model.n_states
    xi = rng.standard_normal((N, d))
    eta = rng.standard_normal((max(n - 1, 0), N, k))
    us = rng.random((n, N))
    phi = model.family.phi if model.family.phi is not None else 1.0
    L1 = _psd_factor(model.P1)
    particles, normw, anc, fmeans, loglik, status = _bsf_core(
        model.y, model.Z, model.H, model.T_mat, model.R, model.c,
        model.d_vec, model.a1, L1, model.family.code, phi, model.u,
        xi, eta, us,
    )
    if status != 0:
        raise ParticleDegeneracyError(
            f"all particle weights vanished at time index {status - 1}"
        )
    return ParticleOutput(
        loglik_est=loglik,
        particles=particles,
        norm_weights=normw,
        ancestors=anc,
        filtered_means=fmeans,
    )


def _bsf_nonlinear(model, theta, N, rng):
    theta = model.theta_init if theta is None else np.asarray(theta, dtype=float)
    y = model.y
    n, p = y.shape
    a1 = np.asarray(model.a1_fn(theta), dtype=float).reshape(-1)
    P1 = np.asarray(model.P1_fn(theta), dtype=float)
    d = a1.shape[0]
    L1 = _psd_factor(P1)

    cur = a1 + rng.standard_normal((N, d)) @ L1.T
    idx_prev = np.arange(N)
    particles = np.zeros((n, N, d))
    normw = np.full((n, N), 1.0 / N)
    anc = np.zeros((n, N), np.int64)
    fmeans = np.zeros((n, d))
    loglik = 0.0

    for t in range(n):
        particles[t] = cur
        anc[t] = idx_prev
        obs = ~np.isnan(y[t])
        m = int(obs.sum())
        if m == 0:
            fmeans[t] = cur.mean(axis=0)
            idx_prev = np.arange(N)
        else:
            logw = np.empty(N)
            for i in range(N):
                zx = np.asarray(model.Z_fn(t, cur[i], theta), dtype=float).reshape(-1)
                Hx = np.asarray(model.H_fn(t, cur[i], theta), dtype=float)
                if Hx.ndim == 0:
                    Hx = Hx.reshape(1, 1)
                HHo = (Hx @ Hx.T)[np.ix_(obs, obs)]
                res = y[t, obs] - zx[obs]
                sign, logdet = np.linalg.slogdet(HHo)
                if sign <= 0:
                    raise NumericalError(
                        f"singular observation covariance at time index {t}"
                    )
                logw[i] = -0.5 * (
                    m * _LOG_2PI + logdet + res @ np.linalg.solve(HHo, res)
                )
            mx = logw.max()
            if not np.isfinite(mx):
                raise ParticleDegeneracyError(
                    f"all particle weights vanished at time index {t}"
                )
            w = np.exp(logw - mx)
            sw = w.sum()
            loglik += mx + math.log(sw / N)
            normw[t] = w / sw
            fmeans[t] = normw[t] @ cur
            idx = _stratified(normw[t], rng.random(N))
            cur = cur[idx]
            idx_prev = idx
        if t < n - 1:
            nxt = np.empty((N, d))
            for i in range(N):
                Rx = np.asarray(model.R_fn(t, cur[i], theta), dtype=float)
                if Rx.ndim == 0:
                    Rx = Rx.reshape(1, 1)
                elif Rx.ndim == 1:
                    Rx = Rx.reshape(-1, 1)
                tx = np.asarray(model.T_fn(t, cur[i], theta), dtype=float).reshape(-1)
                nxt[i] = tx + Rx @ rng.standard_normal(Rx.shape[1])
            cur = nxt

    return ParticleOutput(
        loglik_est=loglik,
        particles=particles,
        norm_weights=normw,
        ancestors=anc,
        filtered_means=fmeans,
    )


@njit
def _twist_core(ytil, Z, H, T_mat, R, c, d_vec, a1, P1):
    """Backward information pass on the approximating Gaussian model.

    Computes, for every time step, the affine map and noise factor of the
    proposal ``p(alpha_t | alpha_{t-1}, pseudo-data from t on)``:
    ``alpha_t = b[t] + A[t] alpha_{t-1} + Lq[t] xi``. The first step uses
    the initial distribution instead of a previous state (``A[0] = 0``).
    """
    n, p = ytil.shape
    d = a1.shape[0]
    nz = Z.shape[0]
    nh = H.shape[0]
    nt = T_mat.shape[0]
    nr = R.shape[0]
    nc = c.shape[0]
    nd = d_vec.shape[0]

    A = np.zeros((n, d, d))
    b = np.zeros((n, d))
    Lq = np.zeros((n, d, d))
    eye = np.eye(d)

    Lam = np.zeros((d, d))
    lam = np.zeros(d)
    obsidx = np.empty(p, np.int64)
    status = 0

    for t in range(n - 1, -1, -1):
        zi = t if nz > 1 else 0
        hi = t if nh > 1 else 0
        di = t if nd > 1 else 0

        if t < n - 1:
            # integrate the transition t -> t+1 over alpha_{t+1}
            ti = t if nt > 1 else 0
            ri = t if nr > 1 else 0
            ci = t if nc > 1 else 0
            Tl = T_mat[ti]
            Q = R[ri] @ R[ri].T
            M = np.linalg.solve(eye + Q @ Lam, eye)
            LamM = Lam @ M
            LamBar = 0.5 * (LamM + LamM.T)
            lam_new = Tl.T @ (M.T @ lam - LamBar @ c[ci])
            Lam_new = Tl.T @ LamBar @ Tl
            Lam = 0.5 * (Lam_new + Lam_new.T)
            lam = lam_new

        # absorb the pseudo observation at time t
        m = 0
        for j in range(p):
            if not np.isnan(ytil[t, j]):
                obsidx[m] = j
                m += 1
        if m > 0:
            Ho = _obs_cov_factor(H[hi], obsidx, m)
            w_, V = np.linalg.eigh(Ho)
            if not (w_[m - 1] > 0.0) or w_[0] <= 1e-14 * w_[m - 1]:
                status = t + 1
                break
            Hinv = (V / w_) @ V.T
            Zo = np.empty((m, d))
            res = np.empty(m)
            for r_ in range(m):
                jr = obsidx[r_]
                for l in range(d):
                    Zo[r_, l] = Z[zi, jr, l]
                res[r_] = ytil[t, jr] - d_vec[di, jr]
            ZH = Zo.T @ Hinv
            Lam_new = Lam + ZH @ Zo
            Lam = 0.5 * (Lam_new + Lam_new.T)
            lam = lam + ZH @ res

        # proposal entering time t
        if t > 0:
            ti = (t - 1) if nt > 1 else 0
            ri = (t - 1) if nr > 1 else 0
            ci = (t - 1) if nc > 1 else 0
            Q = R[ri] @ R[ri].T
            M = np.linalg.solve(eye + Q @ Lam, eye)
            Cov = M @ Q
            A[t] = M @ T_mat[ti]
            b[t] = M @ (c[ci] + Q @ lam)
        else:
            M = np.linalg.solve(eye + P1 @ Lam, eye)
            Cov = M @ P1
            b[0] = M @ (a1 + P1 @ lam)
        Cov = 0.5 * (Cov + Cov.T)
        wc, Vc = np.linalg.eigh(Cov)
        for j in range(d):
            sj = math.sqrt(wc[j]) if wc[j] > 0.0 else 0.0
            for i in range(d):
                Lq[t, i, j] = Vc[i, j] * sj

    return A, b, Lq, status


@njit
def _psi_core(y, u, phi, code, Z, d_vec, ytil, h2, A, b, Lq, xi, us):
    n, p = y.shape
    N = xi.shape[1]
    d = b.shape[1]
    nz = Z.shape[0]
    nd = d_vec.shape[0]

    particles = np.zeros((n, N, d))
    normw = np.full((n, N), 1.0 / N)
    anc = np.zeros((n, N), np.int64)
    fmeans = np.zeros((n, d))
    logw = np.empty(N)

    cur = np.empty((N, d))
    for i in range(N):
        for l in range(d):
            acc = b[0, l]
            for s_ in range(d):
                acc += Lq[0, l, s_] * xi[0, i, s_]
            cur[i, l] = acc
    idx_prev = np.arange(N)

    logsum = 0.0
    status = 0

    for t in range(n):
        zi = t if nz > 1 else 0
        di = t if nd > 1 else 0

        for i in range(N):
            anc[t, i] = idx_prev[i]
            for l in range(d):
                particles[t, i, l] = cur[i, l]

        m = 0
        weighted = False
        for j in range(p):
            if not np.isnan(y[t, j]):
                m += 1
        if m > 0 and code != GAUSSIAN:
            weighted = True
            for i in range(N):
                acc = 0.0
                for j in range(p):
                    if np.isnan(y[t, j]):
                        continue
                    s = d_vec[di, j]
                    for l in range(d):
                        s += Z[zi, j, l] * cur[i, l]
                    acc += obs_logpdf(code, y[t, j], s, phi, u[t, j])
                    if not np.isnan(ytil[t, j]):
                        res = ytil[t, j] - s
                        acc -= -0.5 * (
                            _LOG_2PI + math.log(h2[t, j]) + res * res / h2[t, j]
                        )
                logw[i] = acc

        if weighted:
            mx = logw[0]
            for i in range(1, N):
                if logw[i] > mx:
                    mx = logw[i]
            if not np.isfinite(mx):
                status = t + 1
                break
            sw = 0.0
            for i in range(N):
                logw[i] = math.exp(logw[i] - mx)
                sw += logw[i]
            if not (sw > 0.0) or not np.isfinite(sw):
                status = t + 1
                break
            logsum += mx + math.log(sw / N)
            for i in range(N):
                normw[t, i] = logw[i] / sw
            for l in range(d):
                acc = 0.0
                for i in range(N):
                    acc += normw[t, i] * cur[i, l]
                fmeans[t, l] = acc
            idx = _stratified(normw[t], us[t])
            nxt = np.empty((N, d))
            for i in range(N):
                nxt[i] = cur[idx[i]]
            cur = nxt
            idx_prev = idx
        else:
            for l in range(d):
                acc = 0.0
                for i in range(N):
                    acc += cur[i, l]
                fmeans[t, l] = acc / N
            idx_prev = np.arange(N)

        if t < n - 1:
            nxt = np.empty((N, d))
            for i in range(N):
                for l in range(d):
                    acc = b[t + 1, l]
                    for s_ in range(d):
                        acc += (
                            A[t + 1, l, s_] * cur[i, s_]
                            + Lq[t + 1, l, s_] * xi[t + 1, i, s_]
                        )
                    nxt[i, l] = acc
            cur = nxt

    return particles, normw, anc, fmeans, logsum, status


def psi_apf(model, approx, N=10, rng=None):
    """Twisted auxiliary particle filter driven by a Gaussian approximation.

    Particles are proposed from the approximating model's one-step
    smoothing conditionals given the pseudo observations; the incremental
    weight at each observed step is the ratio of the true observation
    density to the approximating Gaussian one. The log-likelihood
    estimate adds the approximating model's marginal log-likelihood to
    the sum of log mean weights, and is unbiased on the likelihood scale.

    Parameters
    ----------
    model : Lgssm
        Model instance matching ``approx``.
    approx : GaussianApprox
        Converged approximation for the same model and hyperparameters.
    N : int
        Number of particles.
    rng : numpy.random.Generator
    """
    if N < 1:
        raise ModelSpecError("psi_apf requires N >= 1")
    if rng is None:
        rng = np.random.default_rng()
    if not isinstance(model, Lgssm):
        raise ModelSpecError("psi_apf requires linear state dynamics")
    if not approx.converged:
        raise ModelSpecError("psi_apf requires a converged approximation")

    n, p = model.y.shape
    d = model.n_states
    A, b, Lq, status = _twist_core(
        approx.pseudo_y, model.Z, approx.pseudo_H, model.T_mat, model.R,
        model.c, model.d_vec, model.a1, model.P1,
    )
    if status != 0:
        raise NumericalError(
            f"approximating model degenerate at time index {status - 1}"
        )

    xi = rng.standard_normal((n, N, d))
    us = rng.random((n, N))
    phi = model.family.phi if model.family.phi is not None else 1.0
    particles, normw, anc, fmeans, logsum, status = _psi_core(
        model.y, model.u, phi, model.family.code, model.Z, model.d_vec,
        approx.pseudo_y, approx.pseudo_h2, A, b, Lq, xi, us,
    )
    if status != 0:
        raise ParticleDegeneracyError(
            f"all particle weights vanished at time index {status - 1}"
        )
    return ParticleOutput(
        loglik_est=approx.approx_loglik_gaussian + logsum,
        particles=particles,
        norm_weights=normw,
        ancestors=anc,
        filtered_means=fmeans,
    )


def filter_smoother_trace(po, rng):
    """Sample one trajectory by tracing particle ancestries.

    Draws a terminal particle index from the final weights and follows
    the stored ancestor indices back to the first time step.
    """
    n, N, d = po.particles.shape
    w = po.norm_weights[n - 1]
    csum = np.cumsum(w)
    csum[-1] = 1.0
    j = int(np.searchsorted(csum, rng.random(), side="right"))
    j = min(j, N - 1)
    path = np.empty((n, d))
    path[n - 1] = po.particles[n - 1, j]
    for t in range(n - 2, -1, -1):
        j = int(po.ancestors[t + 1, j])
        path[t] = po.particles[t, j]
    return path
