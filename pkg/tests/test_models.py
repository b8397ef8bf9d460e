"""Model validation, priors, observation families, update and simulation."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

import ssmbayes as sb
from ssmbayes.errors import ModelSpecError
from ssmbayes.families import CODES, obs_logpdf, obs_dlogpdf, obs_d2logpdf


class TestValidation:
    def test_local_linear_trend_valid(self):
        y = np.arange(60, dtype=float)
        prior = sb.halfnormal(1, 10)
        m = sb.trend_model(y, sd_y=prior, sd_level=prior, sd_slope=prior)
        assert m.n_states == 2
        assert m.n_shocks == 2
        assert m.theta_names == ("sd_y", "sd_level", "sd_slope")

    def test_bivariate_poisson_valid(self):
        rng = np.random.default_rng(1)
        x = np.cumsum(rng.normal(scale=0.2, size=50))
        y = np.column_stack(
            [rng.poisson(np.exp(x)), rng.poisson(np.exp(x))]
        ).astype(float)
        m = sb.Lgssm(
            y, Z=np.ones((2, 1)), T=1.0, R=0.1, P1=[[1.0]],
            family="poisson",
            priors=[sb.gamma(0.1, 2, 0.01)],
            update_fn=lambda th: {"R": np.array(th).reshape(1, 1, 1)},
        )
        assert m.n_series == 2
        assert m.n_states == 1

    def test_negative_eigenvalue_P1_rejected(self):
        with pytest.raises(ModelSpecError, match="positive semidefinite"):
            sb.Lgssm(
                [1.0, 2.0], Z=1.0, H=1.0, T=1.0, R=1.0,
                P1=[[-1.0]],
            )

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ModelSpecError):
            sb.Lgssm([1.0], Z=np.ones((2, 3)), H=np.eye(2), T=np.eye(2), R=np.eye(2))

    def test_phi_required_for_negbin_and_gamma(self):
        y = np.ones(5)
        for fam in ("negbin", "gamma"):
            with pytest.raises(ModelSpecError, match="phi"):
                sb.Lgssm(y, Z=1.0, T=1.0, R=0.1, P1=[[1.0]], family=fam)
        with pytest.raises(ModelSpecError, match="phi"):
            sb.Lgssm(y, Z=1.0, T=1.0, R=0.1, P1=[[1.0]], family="poisson", phi=2.0)

    def test_invalid_observations_rejected(self):
        with pytest.raises(ModelSpecError, match="nonnegative integer"):
            sb.Lgssm([1.5], Z=1.0, T=1.0, R=0.1, P1=[[1.0]], family="poisson")
        with pytest.raises(ModelSpecError, match="positive"):
            sb.Lgssm([0.0], Z=1.0, T=1.0, R=0.1, P1=[[1.0]], family="gamma", phi=2.0)
        with pytest.raises(ModelSpecError, match="trials"):
            sb.Lgssm(
                [3.0], Z=1.0, T=1.0, R=0.1, P1=[[1.0]], family="binomial",
                u=[2.0],
            )

    def test_time_varying_slices_checked(self):
        with pytest.raises(ModelSpecError, match="slices"):
            sb.Lgssm(
                np.ones(5), Z=np.ones((3, 1, 1)), H=1.0, T=1.0, R=1.0
            )


class TestPriors:
    def test_uniform_unit_density(self):
        assert sb.uniform(0.5, 0, 1).logpdf(0.5) == pytest.approx(0.0)

    def test_gamma_matches_scipy(self):
        pr = sb.gamma(0.1, 2, 0.01)
        want = stats.gamma.logpdf(0.1, a=2, scale=1 / 0.01)
        assert pr.logpdf(0.1) == pytest.approx(want, abs=1e-12)

    def test_halfnormal_outside_support(self):
        assert sb.halfnormal(1.0, 10).logpdf(-1.0) == -math.inf

    def test_halfnormal_matches_scipy(self):
        pr = sb.halfnormal(1.0, 10)
        assert pr.logpdf(3.2) == pytest.approx(
            stats.halfnorm.logpdf(3.2, scale=10), abs=1e-12
        )

    def test_tnormal_matches_scipy(self):
        pr = sb.tnormal(0.5, 1.0, 2.0, min=-1.0, max=3.0)
        a, b = (-1.0 - 1.0) / 2.0, (3.0 - 1.0) / 2.0
        want = stats.truncnorm.logpdf(0.5, a, b, loc=1.0, scale=2.0)
        assert pr.logpdf(0.5) == pytest.approx(want, abs=1e-10)

    def test_log_prior_sums_and_respects_support(self):
        priors = [sb.normal(0, 0, 1), sb.halfnormal(1, 2)]
        got = sb.log_prior(priors, [0.3, 0.7])
        want = priors[0].logpdf(0.3) + priors[1].logpdf(0.7)
        assert got == pytest.approx(want)
        assert sb.log_prior(priors, [0.3, -0.1]) == -math.inf

    def test_finite_exactly_on_support_product(self):
        priors = [sb.uniform(0.5, 0, 1), sb.gamma(1.0, 2, 1)]
        pts = [-0.5, 0.25, 0.75, 1.5]
        for x0 in pts:
            for x1 in (-1.0, 0.5, 2.0):
                lp = sb.log_prior(priors, [x0, x1])
                inside = (0 <= x0 <= 1) and (x1 > 0)
                assert np.isfinite(lp) == inside

    def test_init_outside_support_rejected(self):
        with pytest.raises(ModelSpecError, match="zero density"):
            sb.uniform(2.0, 0, 1)


class TestObsDensities:
    def test_poisson_at_zero_signal(self):
        fam = sb.ObsFamily("poisson")
        assert sb.obs_logdensity(fam, 0.0, 0.0) == pytest.approx(-1.0)

    def test_binomial_logit_half(self):
        fam = sb.ObsFamily("binomial", u=[1.0])
        assert sb.obs_logdensity(fam, 1.0, 0.0) == pytest.approx(math.log(0.5))

    def test_negbin_matches_scipy(self):
        fam = sb.ObsFamily("negbin", phi=5.0)
        mean = math.e
        want = stats.nbinom.logpmf(3, 5.0, 5.0 / (5.0 + mean))
        assert sb.obs_logdensity(fam, 3.0, 1.0) == pytest.approx(want, abs=1e-12)

    def test_gamma_matches_scipy(self):
        fam = sb.ObsFamily("gamma", phi=3.0)
        mean = math.exp(0.4) * 2.0
        want = stats.gamma.logpdf(1.7, a=3.0, scale=mean / 3.0)
        got = obs_logpdf(CODES["gamma"], 1.7, 0.4, 3.0, 2.0)
        assert got == pytest.approx(want, abs=1e-12)

    def test_svm_is_normal_with_log_variance_signal(self):
        want = stats.norm.logpdf(0.7, scale=math.exp(0.5 * -1.2))
        got = obs_logpdf(CODES["svm"], 0.7, -1.2, 1.0, 1.0)
        assert got == pytest.approx(want, abs=1e-12)

    def test_negative_count_rejected(self):
        fam = sb.ObsFamily("poisson")
        with pytest.raises(ModelSpecError):
            sb.obs_logdensity(fam, -1.0, 0.0)

    @pytest.mark.parametrize(
        "kind,phi,u,s",
        [
            ("poisson", 1.0, 2.0, 0.3),
            ("binomial", 1.0, 7.0, -0.4),
            ("negbin", 3.0, 1.5, 0.2),
        ],
    )
    def test_discrete_families_sum_to_one(self, kind, phi, u, s):
        code = CODES[kind]
        ymax = int(u) if kind == "binomial" else 400
        total = sum(
            math.exp(obs_logpdf(code, float(yy), s, phi, u))
            for yy in range(ymax + 1)
        )
        assert total == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize(
        "kind,phi,u,s",
        [("gamma", 2.5, 1.3, 0.1), ("svm", 1.0, 1.0, -0.7)],
    )
    def test_continuous_families_integrate_to_one(self, kind, phi, u, s):
        code = CODES[kind]
        lo = 1e-12 if kind == "gamma" else -np.inf
        val, _ = integrate.quad(
            lambda yy: math.exp(obs_logpdf(code, yy, s, phi, u)),
            lo, np.inf, limit=200,
        )
        assert val == pytest.approx(1.0, abs=1e-7)

    @pytest.mark.parametrize(
        "kind,y,phi,u",
        [
            ("poisson", 3.0, 1.0, 2.0),
            ("binomial", 4.0, 1.0, 9.0),
            ("negbin", 6.0, 4.0, 1.5),
            ("gamma", 2.2, 3.0, 1.1),
            ("svm", 0.8, 1.0, 1.0),
        ],
    )
    def test_signal_derivatives_match_finite_differences(self, kind, y, phi, u):
        code = CODES[kind]
        h = 1e-5
        for s in (-1.0, -0.2, 0.5, 1.3):
            l = lambda ss: obs_logpdf(code, y, ss, phi, u)
            d1_fd = (l(s + h) - l(s - h)) / (2 * h)
            d2_fd = (l(s + h) - 2 * l(s) + l(s - h)) / h**2
            assert obs_dlogpdf(code, y, s, phi, u) == pytest.approx(d1_fd, abs=1e-6)
            assert obs_d2logpdf(code, y, s, phi, u) == pytest.approx(
                d2_fd, abs=1e-4
            )


class TestUpdateModel:
    def test_identity_at_init(self):
        prior = sb.halfnormal(1, 10)
        m = sb.trend_model(np.ones(10), sd_y=prior, sd_level=prior)
        m2 = sb.update_model(m, m.theta_init)
        assert np.array_equal(m2.R, m.R)
        assert np.array_equal(m2.H, m.H)

    def test_bivariate_poisson_update_sets_R(self):
        y = np.zeros((5, 2))
        m = sb.Lgssm(
            y, Z=np.ones((2, 1)), T=1.0, R=0.1, P1=[[1.0]], family="poisson",
            priors=[sb.gamma(0.1, 2, 0.01)],
            update_fn=lambda th: {"R": np.array(th).reshape(1, 1, 1)},
        )
        m2 = sb.update_model(m, [0.37])
        assert m2.R.shape == (1, 1, 1)
        assert m2.R[0, 0, 0] == 0.37
        # untouched components are shared, not copied
        assert m2.Z is m.Z

    def test_negbin_drift_update(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=20)
        y = rng.poisson(5.0, size=20).astype(float)
        m = sb.trend_model(
            y, sd_level=sb.halfnormal(0.1, 1), sd_slope=sb.halfnormal(0.01, 0.1),
            xreg=x, beta=sb.normal(0, 0, 10), distribution="negbin",
            phi=sb.halfnormal(1, 10), a1=[0, 0], P1=np.diag([100.0, 0.01]),
        )
        theta = [0.2, 0.05, 4.0, -0.5]
        m2 = sb.update_model(m, theta)
        assert m2.R[0, 0, 0] == 0.2
        assert m2.R[0, 1, 1] == 0.05
        assert m2.family.phi == 4.0
        assert np.allclose(m2.d_vec[:, 0], -0.5 * x)

    def test_update_is_pure(self):
        m = sb.trend_model(
            np.ones(6), sd_y=sb.halfnormal(1, 10), sd_level=sb.halfnormal(1, 10)
        )
        a = sb.update_model(m, [0.5, 0.2])
        b = sb.update_model(m, [0.5, 0.2])
        assert np.array_equal(a.H, b.H)
        assert np.array_equal(a.R, b.R)
        assert np.array_equal(m.H, sb.update_model(m, m.theta_init).H)


class TestSimulateData:
    def test_zero_observation_noise_returns_states(self, rng):
        m = sb.Lgssm(
            np.zeros(20), Z=1.0, H=0.0, T=0.9, R=0.5, a1=[0.3], P1=[[1.0]]
        )
        y, alpha = sb.simulate_data(m, rng=rng, include_states=True)
        assert np.allclose(y[:, 0], alpha[:, 0])

    def test_deterministic_given_seed(self):
        m = sb.trend_model(
            np.zeros(30), sd_level=sb.halfnormal(0.1, 1),
            distribution="poisson", a1=[0.0], P1=[[1.0]],
        )
        y1 = sb.simulate_data(m, rng=np.random.default_rng(42))
        y2 = sb.simulate_data(m, rng=np.random.default_rng(42))
        assert np.array_equal(y1, y2)

    def test_first_moment_matches_model(self):
        rng = np.random.default_rng(5)
        Z = np.array([[1.0, 0.5]])
        H = np.array([[0.8]])
        a1 = np.array([0.4, -0.2])
        P1 = np.array([[1.0, 0.3], [0.3, 2.0]])
        m = sb.Lgssm(
            np.zeros(3), Z=Z, H=H, T=0.5 * np.eye(2), R=0.1 * np.eye(2),
            d=[0.7], a1=a1, P1=P1,
        )
        reps = 10_000
        y1 = np.empty(reps)
        for r in range(reps):
            y1[r] = sb.simulate_data(m, rng=rng)[0, 0]
        mean_want = 0.7 + Z[0] @ a1
        var_want = Z[0] @ P1 @ Z[0] + H[0, 0] ** 2
        se_mean = math.sqrt(var_want / reps)
        assert abs(y1.mean() - mean_want) < 5 * se_mean
        se_var = var_want * math.sqrt(2.0 / (reps - 1))
        assert abs(y1.var(ddof=1) - var_want) < 5 * se_var

    def test_negbin_drift_series_generates_counts(self):
        rng = np.random.default_rng(6)
        n = 200
        x = 3 + np.arange(1, n + 1) * 0.01 + np.sin(
            np.arange(1, n + 1) + rng.uniform(-1, 1, n)
        )
        m = sb.trend_model(
            np.zeros(n), sd_level=sb.halfnormal(0.1, 1),
            sd_slope=sb.halfnormal(0.01, 0.1), xreg=x,
            beta=sb.normal(-0.9, 0, 10), distribution="negbin",
            phi=sb.halfnormal(5, 10), a1=[5.0, 0.01],
            P1=np.zeros((2, 2)),
        )
        y = sb.simulate_data(m, theta=[0.1, 0.0, 5.0, -0.9], rng=rng)
        assert y.shape == (n, 1)
        assert np.all(y >= 0)
        assert np.all(y == np.round(y))
