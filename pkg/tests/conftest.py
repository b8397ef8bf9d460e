"""Shared fixtures and independent oracles.

The oracles here deliberately avoid the library's recursions: the dense
oracle builds the joint Gaussian of states and observations by direct
matrix products and conditions on the observed entries; the grid oracle
integrates non-Gaussian scalar-state models by iterated quadrature on a
dense state grid.
"""

import math

import numpy as np
import pytest
from scipy import stats

import ssmbayes as sb
from ssmbayes.families import obs_logpdf


def _slices(arr, t):
    return arr[t if arr.shape[0] > 1 else 0]


def dense_joint_moments(model):
    """Mean and covariance of the stacked states and observations.

    Returns (mean_alpha (T*d,), cov_alpha, mean_y (T*p,), cov_y,
    cross_cov alpha-y) built by direct matrix products.
    """
    n, p = model.y.shape
    d = model.n_states
    mean_a = np.zeros(n * d)
    cov_a = np.zeros((n * d, n * d))
    mean_a[:d] = model.a1
    cov_a[:d, :d] = model.P1
    for t in range(1, n):
        T_t = _slices(model.T_mat, t - 1)
        R_t = _slices(model.R, t - 1)
        c_t = _slices(model.c, t - 1)
        mean_a[t * d : (t + 1) * d] = c_t + T_t @ mean_a[(t - 1) * d : t * d]
        for s in range(t):
            blk = T_t @ cov_a[(t - 1) * d : t * d, s * d : (s + 1) * d]
            cov_a[t * d : (t + 1) * d, s * d : (s + 1) * d] = blk
            cov_a[s * d : (s + 1) * d, t * d : (t + 1) * d] = blk.T
        cov_a[t * d : (t + 1) * d, t * d : (t + 1) * d] = (
            T_t @ cov_a[(t - 1) * d : t * d, (t - 1) * d : t * d] @ T_t.T
            + R_t @ R_t.T
        )

    Zbar = np.zeros((n * p, n * d))
    dbar = np.zeros(n * p)
    HH = np.zeros((n * p, n * p))
    for t in range(n):
        Z_t = _slices(model.Z, t)
        H_t = _slices(model.H, t)
        d_t = _slices(model.d_vec, t)
        Zbar[t * p : (t + 1) * p, t * d : (t + 1) * d] = Z_t
        dbar[t * p : (t + 1) * p] = d_t
        HH[t * p : (t + 1) * p, t * p : (t + 1) * p] = H_t @ H_t.T

    mean_y = dbar + Zbar @ mean_a
    cov_y = Zbar @ cov_a @ Zbar.T + HH
    cross = cov_a @ Zbar.T
    return mean_a, cov_a, mean_y, cov_y, cross


def dense_oracle(model):
    """Exact loglik and smoothed moments from the dense joint Gaussian."""
    n, p = model.y.shape
    d = model.n_states
    mean_a, cov_a, mean_y, cov_y, cross = dense_joint_moments(model)
    yvec = model.y.reshape(-1)
    obs = ~np.isnan(yvec)
    yo = yvec[obs]
    mo = mean_y[obs]
    So = cov_y[np.ix_(obs, obs)]
    loglik = stats.multivariate_normal.logpdf(yo, mean=mo, cov=So)
    Sinv_r = np.linalg.solve(So, yo - mo)
    cond_mean = mean_a + cross[:, obs] @ Sinv_r
    gain = cross[:, obs] @ np.linalg.inv(So)
    cond_cov = cov_a - gain @ cross[:, obs].T
    return (
        float(loglik),
        cond_mean.reshape(n, d),
        cond_cov,
    )


def grid_loglik(model, span=9.0, npts=1200):
    """Marginal log-likelihood by iterated quadrature on a state grid.

    Scalar-state models only. Integrates the state-space integral
    directly: p(y) = int p(a_1) g_1 prod_t p(a_t | a_{t-1}) g_t da.
    """
    assert model.n_states == 1
    n = model.n
    code = model.family.code
    phi = model.family.phi if model.family.phi is not None else 1.0

    sd1 = math.sqrt(model.P1[0, 0])
    lo = model.a1[0] - span * max(sd1, 1.0)
    hi = model.a1[0] + span * max(sd1, 1.0)
    for t in range(n):
        R_t = _slices(model.R, t)[0, 0]
        lo -= span * abs(R_t) / math.sqrt(max(t, 1))
        hi += span * abs(R_t) / math.sqrt(max(t, 1))
    grid = np.linspace(lo, hi, npts)
    dx = grid[1] - grid[0]

    def obs_term(t):
        Z_t = _slices(model.Z, t)[0, 0]
        d_t = _slices(model.d_vec, t)[0]
        out = np.zeros(npts)
        if not np.isnan(model.y[t, 0]):
            s = d_t + Z_t * grid
            for i in range(npts):
                out[i] = obs_logpdf(
                    code, model.y[t, 0], s[i], phi, model.u[t, 0]
                )
        return out

    log_f = stats.norm.logpdf(grid, model.a1[0], max(sd1, 1e-12)) + obs_term(0)
    for t in range(1, n):
        T_t = _slices(model.T_mat, t - 1)[0, 0]
        c_t = _slices(model.c, t - 1)[0]
        R_t = _slices(model.R, t - 1)[0, 0]
        trans = stats.norm.logpdf(
            grid[:, None], c_t + T_t * grid[None, :], max(abs(R_t), 1e-12)
        )
        mx = log_f.max()
        f = np.exp(log_f - mx)
        with np.errstate(divide="ignore"):
            log_f = mx + np.log(np.exp(trans) @ f * dx) + obs_term(t)
    mx = log_f.max()
    return float(mx + np.log(np.exp(log_f - mx).sum() * dx))


def random_lgssm(rng, n=10, d=2, p=1, time_varying=False, missing=0.0):
    """Random well-conditioned gaussian-family model."""
    nt = n if time_varying else 1
    Z = rng.normal(size=(nt, p, d))
    H = 0.3 * np.eye(p) + 0.2 * np.tril(rng.normal(size=(nt, p, p)))
    for t in range(nt):
        H[t] = np.tril(H[t])
        np.fill_diagonal(H[t], np.abs(np.diag(H[t])) + 0.5)
    T_mat = rng.normal(scale=0.5, size=(nt, d, d))
    R = rng.normal(scale=0.7, size=(nt, d, d))
    c = rng.normal(scale=0.3, size=(nt, d))
    d_vec = rng.normal(scale=0.3, size=(nt, p))
    a1 = rng.normal(size=d)
    A = rng.normal(size=(d, d))
    P1 = A @ A.T + 0.5 * np.eye(d)
    y = rng.normal(size=(n, p))
    if missing > 0:
        mask = rng.random((n, p)) < missing
        y[mask] = np.nan
    return sb.Lgssm(
        y, Z=Z, H=H, T=T_mat, R=R, c=c, d=d_vec, a1=a1, P1=P1
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
