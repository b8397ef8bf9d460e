"""Milstein discretization and the diffusion bootstrap filter."""

import math

import numpy as np
import pytest
from scipy import stats

import ssmbayes as sb
from ssmbayes.errors import ModelSpecError


def gbm_model(level, mu=0.1, sigma=0.5, x0=1.0):
    # dX = mu X dt + sigma X dB
    return sb.SdeModel(
        drift=lambda x, th: th[0] * x,
        diffusion=lambda x, th: th[1] * x,
        ddiffusion=lambda x, th: th[1] * np.ones_like(x),
        obs_logdensity=lambda y, x, th: np.zeros_like(x),
        log_prior_fn=lambda th: 0.0,
        x0=x0,
        theta=[mu, sigma],
        level=level,
        positive=True,
    )


def ou_model(level, rho=0.5, nu=2.0, sigma=1.0, x0=1.0, obs_sd=None):
    # dX = rho (nu - X) dt + sigma dB
    if obs_sd is None:
        obs = lambda y, x, th: np.zeros_like(x)
    else:
        obs = lambda y, x, th: stats.norm.logpdf(y, loc=x, scale=obs_sd)
    return sb.SdeModel(
        drift=lambda x, th: th[0] * (th[1] - x),
        diffusion=lambda x, th: th[2] * np.ones_like(x),
        ddiffusion=lambda x, th: np.zeros_like(x),
        obs_logdensity=obs,
        log_prior_fn=lambda th: 0.0,
        x0=x0,
        theta=[rho, nu, sigma],
        level=level,
    )


def exact_ou_lgssm(y, rho, nu, sigma, x0, obs_sd):
    """Exactly discretized OU transition as a linear-Gaussian model."""
    a = math.exp(-rho)
    q = sigma**2 * (1 - math.exp(-2 * rho)) / (2 * rho)
    c = nu * (1 - a)
    return sb.Lgssm(
        y, Z=1.0, H=obs_sd, T=a, R=math.sqrt(q), c=[c],
        a1=[c + a * x0], P1=[[q]],
    )


class TestMilstein:
    def test_zero_diffusion_is_deterministic_drift_integration(self):
        m = sb.SdeModel(
            drift=lambda x, th: -0.5 * x,
            diffusion=lambda x, th: np.zeros_like(x),
            ddiffusion=lambda x, th: np.zeros_like(x),
            obs_logdensity=lambda y, x, th: np.zeros_like(x),
            log_prior_fn=lambda th: 0.0,
            x0=2.0, theta=[0.0], level=6,
        )
        path1 = sb.milstein_simulate(m, t_span=(0, 1), rng=np.random.default_rng(1))
        path2 = sb.milstein_simulate(m, t_span=(0, 1), rng=np.random.default_rng(2))
        assert np.array_equal(path1, path2)
        # Euler integration of dx = -x/2 dt
        dt = 2.0**-6
        x = 2.0
        for _ in range(64):
            x += -0.5 * x * dt
        assert path1[-1] == pytest.approx(x, abs=1e-12)

    def test_zero_ddiffusion_reduces_to_euler_maruyama_bitwise(self):
        m = ou_model(level=4)
        steps = 16
        rng = np.random.default_rng(3)
        dB = rng.normal(0, 2.0**-2, size=steps)
        path = sb.milstein_simulate(m, t_span=(0, 1), dB=dB)
        x = np.float64(1.0)
        dt = 2.0**-4
        for j in range(steps):
            x = x + 0.5 * (2.0 - x) * dt + 1.0 * dB[j]
        assert path[-1] == x

    def test_gbm_strong_order_one(self):
        # shared Brownian increments across mesh levels; the pathwise
        # error against the exact solution should halve per level
        mu, sigma, x0 = 0.1, 0.5, 1.0
        L = 5
        paths = 200
        rng = np.random.default_rng(4)
        dt_fine = 2.0 ** -(L + 1)
        nf = 2 ** (L + 1)
        dB_fine = rng.normal(0.0, math.sqrt(dt_fine), size=(nf, paths))
        dB_coarse = dB_fine[0::2] + dB_fine[1::2]
        B1 = dB_fine.sum(axis=0)
        exact = x0 * np.exp((mu - 0.5 * sigma**2) * 1.0 + sigma * B1)
        xf = sb.milstein_simulate(
            gbm_model(L + 1, mu, sigma, x0), t_span=(0, 1),
            dB=dB_fine, x0=np.full(paths, x0),
        )[-1]
        xc = sb.milstein_simulate(
            gbm_model(L, mu, sigma, x0), t_span=(0, 1),
            dB=dB_coarse, x0=np.full(paths, x0),
        )[-1]
        err_f = np.abs(xf - exact).mean()
        err_c = np.abs(xc - exact).mean()
        assert 0.35 < err_f / err_c < 0.65

    def test_ou_transition_moments(self):
        # exact OU transition at t=1: mean nu + (x0-nu)e^-rho,
        # var sigma^2 (1-e^-2rho)/(2 rho)
        rho, nu, sigma, x0 = 0.5, 2.0, 1.0, 1.0
        m = ou_model(level=6, rho=rho, nu=nu, sigma=sigma, x0=x0)
        reps = 10_000
        rng = np.random.default_rng(5)
        ends = sb.milstein_simulate(
            m, t_span=(0, 1), rng=rng, x0=np.full(reps, x0)
        )[-1]
        mean_want = nu + (x0 - nu) * math.exp(-rho)
        var_want = sigma**2 * (1 - math.exp(-2 * rho)) / (2 * rho)
        se_mean = math.sqrt(var_want / reps)
        assert abs(ends.mean() - mean_want) < 5 * se_mean + 2e-3
        se_var = var_want * math.sqrt(2 / (reps - 1))
        assert abs(ends.var(ddof=1) - var_want) < 5 * se_var + 2e-3

    def test_inconsistent_ddiffusion_rejected(self):
        with pytest.raises(ModelSpecError, match="ddiffusion"):
            sb.SdeModel(
                drift=lambda x, th: -x,
                diffusion=lambda x, th: 1.0 + 0.5 * x * x,
                ddiffusion=lambda x, th: np.zeros_like(x),
                obs_logdensity=lambda y, x, th: np.zeros_like(x),
                log_prior_fn=lambda th: 0.0,
                x0=1.0, theta=[0.0], level=3,
            )

    def test_positive_flag_reflects_at_zero(self):
        m = gbm_model(level=3)
        rng = np.random.default_rng(6)
        path = sb.milstein_simulate(m, t_span=(0, 4), rng=rng, x0=0.05)
        assert np.all(path > 0)


class TestSdeBsf:
    @staticmethod
    def simulate_exact_ou(seed, n, rho, nu, sigma, x0, obs_sd):
        rng = np.random.default_rng(seed)
        a = math.exp(-rho)
        q = sigma**2 * (1 - math.exp(-2 * rho)) / (2 * rho)
        c = nu * (1 - a)
        x = x0
        y = np.empty(n)
        for k in range(n):
            x = c + a * x + math.sqrt(q) * rng.standard_normal()
            y[k] = x + obs_sd * rng.standard_normal()
        return y

    def test_ou_gaussian_obs_matches_exact_kalman(self):
        rho, nu, sigma, x0, obs_sd = 0.5, 2.0, 1.0, 1.0, 0.5
        n = 20
        # data seed chosen so the coarse-mesh model bias (-0.40, known in
        # closed form from the composed Euler transition) clearly exceeds
        # the Monte Carlo noise, while the fine-mesh bias is ~ -0.006
        y = self.simulate_exact_ou(9, n, rho, nu, sigma, x0, obs_sd)
        exact = sb.kalman_filter(
            exact_ou_lgssm(y, rho, nu, sigma, x0, obs_sd)
        ).loglik

        reps = 100
        m8 = ou_model(8, rho, nu, sigma, x0, obs_sd=obs_sd)
        m2 = ou_model(2, rho, nu, sigma, x0, obs_sd=obs_sd)
        lls8 = np.empty(reps)
        lls2 = np.empty(reps)
        for r in range(reps):
            # paired seeds across mesh levels
            lls8[r] = sb.sde_bsf(m8, y, N=512, rng=np.random.default_rng(r)).loglik_est
            lls2[r] = sb.sde_bsf(m2, y, N=512, rng=np.random.default_rng(r)).loglik_est
        se = lls8.std(ddof=1) / math.sqrt(reps)
        assert abs(lls8.mean() - exact) < 3 * se
        assert abs(lls2.mean() - exact) > abs(lls8.mean() - exact)

    def test_poisson_observations_run_end_to_end(self):
        # OU latent process observed through Poisson(exp(x)) counts
        rng = np.random.default_rng(8)
        n = 100
        path = sb.milstein_simulate(
            ou_model(6), t_span=(0, n), rng=rng
        )
        x_int = path[2**6 :: 2**6][:n]
        y = rng.poisson(np.exp(x_int)).astype(float)

        def obs_ld(yk, x, th):
            lam = np.exp(x)
            return yk * x - lam - math.lgamma(yk + 1.0)

        m = sb.SdeModel(
            drift=lambda x, th: th[0] * (th[1] - x),
            diffusion=lambda x, th: th[2] * np.ones_like(x),
            ddiffusion=lambda x, th: np.zeros_like(x),
            obs_logdensity=obs_ld,
            log_prior_fn=lambda th: 0.0,
            x0=1.0, theta=[0.5, 2.0, 1.0], level=4,
        )
        po = sb.sde_bsf(m, y, N=128, rng=rng)
        assert np.isfinite(po.loglik_est)
        assert po.particles.shape == (n, 128, 1)

    def test_determinism_and_config_independence(self):
        m = ou_model(4, obs_sd=0.5)
        y = np.array([1.0, 2.0, 1.5, 2.2, 1.8])
        a = sb.sde_bsf(m, y, N=64, rng=np.random.default_rng(9))
        b = sb.sde_bsf(m, y, N=64, rng=np.random.default_rng(9))
        assert a.loglik_est == b.loglik_est
        assert np.array_equal(a.particles, b.particles)
        # an unrelated field (positive flag elsewhere, names) does not
        # change results
        m2 = ou_model(4, obs_sd=0.5)
        m2.theta_names = ("a", "b", "c")
        c = sb.sde_bsf(m2, y, N=64, rng=np.random.default_rng(9))
        assert c.loglik_est == a.loglik_est

    def test_particle_relabeling_exchangeability(self):
        # permuting the particle axis of the noise leaves the sampling
        # distribution of the estimator unchanged (two-sample KS check)
        m = ou_model(3, obs_sd=0.7)
        rng = np.random.default_rng(10)
        y = np.array([1.2, 1.9, 2.1, 1.7, 2.3, 2.0])
        n, sub, N = len(y), 2**3, 32

        def run(seed, permute):
            r = np.random.default_rng(seed)
            dB = r.normal(0, math.sqrt(2.0**-3), size=(n, sub, N))
            us = r.random((n, N))
            if permute:
                perm = np.random.default_rng(seed + 10_000).permutation(N)
                dB = dB[:, :, perm]
            # replay through a generator yielding exactly these numbers
            class Replay:
                def __init__(self):
                    self.k = 0

                def normal(self, loc, scale, size):
                    return dB

                def random(self, size):
                    return us

            return sb.sde_bsf(m, y, N=N, rng=Replay()).loglik_est

        base = np.array([run(s, False) for s in range(200)])
        perm = np.array([run(s, True) for s in range(200)])
        ks = stats.ks_2samp(base, perm)
        assert ks.pvalue > 0.01

    def test_requires_two_particles(self):
        m = ou_model(2, obs_sd=0.5)
        with pytest.raises(ModelSpecError):
            sb.sde_bsf(m, [1.0], N=1, rng=np.random.default_rng(0))
