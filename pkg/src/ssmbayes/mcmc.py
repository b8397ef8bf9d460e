"""Adaptive Metropolis inference over model hyperparameters.

One sampler drives four marginal-likelihood plug-ins:

* ``full``   - exact Kalman log-likelihood (gaussian-family models);
* ``approx`` - approximate log-likelihood from the Gaussian
  approximation (or the EKF for callback-defined nonlinear models);
* ``da``     - delayed acceptance: a cheap approximate first stage and a
  particle-filter correction second stage;
* ``pm``     - pseudo-marginal: the particle estimate replaces the
  likelihood (bootstrap filter or the twisted filter).

The proposal is a random walk whose Cholesky factor adapts during
burn-in by rank-one updates toward a fixed target acceptance rate.
Post-burn-in draws are stored as a jump chain (unique values plus stay
counts). Approximate runs can be reweighted afterwards with
:func:`post_correct`, giving consistent estimators of the exact
posterior.
"""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .approx import gaussian_approximation, _linearized_model, ekf
from .errors import ModelSpecError, NumericalError
from .kalman import kalman_filter, simulation_smoother
from .models import Lgssm, NlgModel, update_model
from .particle import bootstrap_filter, filter_smoother_trace, psi_apf

_TYPES = ("full", "approx", "da", "pm")


@dataclass
class McmcConfig:
    """Sampler configuration.

    Attributes
    ----------
    iter : int
        Total number of iterations, including burn-in.
    burnin : int
        Adaptation phase length; the proposal factor is frozen afterwards
        and only post-burn-in draws are stored.
    mcmc_type : str
        One of ``full``, ``approx``, ``da``, ``pm``.
    particles : int
        Number of particles for the da/pm stages.
    target_accept : float
        RAM target acceptance rate.
    gamma : float
        Adaptation decay exponent; the step size at iteration i is
        ``min(1, q * i**(-gamma))``.
    seed : int
        Master seed; all chain randomness derives from it.
    store_states : bool
        Store one state trajectory per unique draw.
    particle_filter : str or None
        ``psi`` or ``bsf`` for pm runs; default is ``psi`` for
        non-Gaussian families with linear dynamics, ``bsf`` otherwise.
    """

    iter: int
    burnin: int
    mcmc_type: str = "full"
    particles: int = 10
    target_accept: float = 0.234
    gamma: float = 2.0 / 3.0
    seed: int = 0
    store_states: bool = True
    particle_filter: str = None

    def __post_init__(self):
        if self.mcmc_type not in _TYPES:
            raise ModelSpecError(f"mcmc_type must be one of {_TYPES}")
        if not 0 <= self.burnin < self.iter:
            raise ModelSpecError("require 0 <= burnin < iter")
        if not 0.0 < self.target_accept < 1.0:
            raise ModelSpecError("target_accept must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ModelSpecError("gamma must lie in (0, 1]")
        if self.mcmc_type in ("da", "pm") and self.particles < 2:
            raise ModelSpecError("da/pm require particles >= 2")
        if self.particle_filter not in (None, "psi", "bsf"):
            raise ModelSpecError("particle_filter must be 'psi' or 'bsf'")


@dataclass
class McmcOutput:
    """Jump-chain posterior sample.

    ``theta`` holds the unique accepted draws, ``counts`` how many
    iterations the chain stayed on each. ``weights`` are all ones until a
    post-correction attaches importance weights. ``loglik_trace`` holds
    the marginal-likelihood value used by the chain at each unique draw
    (approximate for approx runs, particle estimates for da/pm).
    """

    theta: np.ndarray
    counts: np.ndarray
    states: np.ndarray
    weights: np.ndarray
    acceptance_rate: float
    S_final: np.ndarray
    loglik_trace: np.ndarray
    logprior_trace: np.ndarray
    theta_names: tuple
    state_names: tuple
    mcmc_type: str
    seed: int
    particles: int = 0
    info: dict = field(default_factory=dict)


def _chol_rank1(L, x, add):
    n = x.shape[0]
    x = x.copy()
    for k in range(n):
        lkk = L[k, k]
        if add:
            r = math.hypot(lkk, x[k])
        else:
            t = (lkk - x[k]) * (lkk + x[k])
            if t <= 0.0:
                raise NumericalError(
                    "rank-one downdate lost positive definiteness"
                )
            r = math.sqrt(t)
        c = r / lkk
        s = x[k] / lkk
        L[k, k] = r
        if k + 1 < n:
            if add:
                L[k + 1 :, k] = (L[k + 1 :, k] + s * x[k + 1 :]) / c
            else:
                L[k + 1 :, k] = (L[k + 1 :, k] - s * x[k + 1 :]) / c
            x[k + 1 :] = c * x[k + 1 :] - s * L[k + 1 :, k]
    return L


def ram_step(S, u, alpha_obs, target, step):
    """One rank-one adaptation of the proposal Cholesky factor.

    Returns the lower-triangular S' satisfying

        S' S'^T = S (I + step * (alpha_obs - target) u u^T / ||u||^2) S^T

    computed with a rank-one Cholesky update or downdate.

    Raises
    ------
    NumericalError
        If a downdate would lose positive definiteness.
    """
    S = np.array(S, dtype=float)
    u = np.asarray(u, dtype=float).reshape(-1)
    if S.shape != (u.shape[0], u.shape[0]):
        raise ModelSpecError("S and u have incompatible shapes")
    if np.any(np.diag(S) <= 0) or np.any(np.triu(S, 1) != 0):
        raise ModelSpecError("S must be lower-triangular with positive diagonal")
    if not 0.0 < step <= 1.0:
        raise ModelSpecError("step must lie in (0, 1]")
    nrm2 = float(u @ u)
    if nrm2 == 0.0:
        return S
    coef = step * (alpha_obs - target) / nrm2
    if coef == 0.0:
        return S
    x = (S @ u) * math.sqrt(abs(coef))
    return _chol_rank1(S, x, coef > 0.0)


def _default_filter(model, config):
    if config.particle_filter is not None:
        return config.particle_filter
    if isinstance(model, Lgssm) and model.family.kind != "gaussian":
        return "psi"
    return "bsf"


def _check_admissible(model, config):
    kind = config.mcmc_type
    if isinstance(model, Lgssm):
        if kind == "full" and model.family.kind != "gaussian":
            raise ModelSpecError("full-type MCMC requires gaussian observations")
        return
    if isinstance(model, NlgModel):
        if kind in ("full", "da"):
            raise ModelSpecError(
                f"{kind}-type MCMC is not available for nonlinear models"
            )
        if kind == "pm" and _default_filter(model, config) == "psi":
            raise ModelSpecError("psi filter is not available for nonlinear models")
        return
    from .sde import SdeModel

    if isinstance(model, SdeModel):
        if kind != "pm":
            raise ModelSpecError("diffusion models support pm-type MCMC only")
        return
    raise ModelSpecError(f"unsupported model type {type(model)!r}")


def run_mcmc(model, config, rng=None):
    """Run the adaptive Metropolis sampler.

    Parameters
    ----------
    model : Lgssm, NlgModel or SdeModel
        Model with priors and an update function.
    config : McmcConfig or dict
    rng : numpy.random.Generator, optional
        Chain randomness; derived from ``config.seed`` when omitted.

    Returns
    -------
    McmcOutput
    """
    if isinstance(config, dict):
        config = McmcConfig(**config)
    _check_admissible(model, config)
    from .sde import SdeModel, sde_bsf

    q = len(getattr(model, "priors", ())) or len(model.theta_init)
    if q == 0:
        raise ModelSpecError("MCMC requires at least one hyperparameter")

    ss = np.random.SeedSequence(config.seed)
    chain_ss, states_ss = ss.spawn(2)
    if rng is None:
        rng = np.random.default_rng(chain_ss)
    rng_states = np.random.default_rng(states_ss)

    kind = config.mcmc_type
    filter_kind = _default_filter(model, config)
    is_sde = isinstance(model, SdeModel)
    is_nlg = isinstance(model, NlgModel)

    # evaluator: theta, warm aux -> (chain loglik, aux); aux carries what
    # the state draws and the delayed-acceptance stage need
    if kind == "full":

        def evaluate(theta, warm):
            inst = update_model(model, theta)
            return kalman_filter(inst).loglik, inst

    elif kind == "approx" and not is_nlg:

        def evaluate(theta, warm):
            inst = update_model(model, theta)
            start = warm.signal_mode if warm is not None else None
            ap = gaussian_approximation(inst, start_signal=start)
            return ap.loglik, ap

    elif kind == "approx" and is_nlg:

        def evaluate(theta, warm):
            return ekf(model, theta).loglik, theta

    elif kind in ("pm", "da") and is_sde:

        def evaluate(theta, warm):
            po = sde_bsf(model, model.y, theta, config.particles, rng)
            return po.loglik_est, po

    elif kind == "pm" and filter_kind == "bsf":

        def evaluate(theta, warm):
            po = bootstrap_filter(model, theta, config.particles, rng)
            return po.loglik_est, po

    else:  # pm with the twisted filter, and da (which needs the approximation)

        def evaluate(theta, warm):
            inst = update_model(model, theta)
            start = warm[0].signal_mode if warm is not None else None
            ap = gaussian_approximation(inst, start_signal=start)
            po = psi_apf(inst, ap, config.particles, rng)
            return po.loglik_est, (ap, po)

    def draw_state(theta, aux):
        if kind == "full":
            return simulation_smoother(aux, rng_states)
        if kind == "approx" and not is_nlg:
            return simulation_smoother(aux.model, rng_states)
        if kind == "approx" and is_nlg:
            return simulation_smoother(
                _linearized_model(model, theta), rng_states
            )
        po = aux[1] if isinstance(aux, tuple) else aux
        return filter_smoother_trace(po, rng_states)

    theta = np.asarray(model.theta_init, dtype=float)
    lp = model.log_prior(theta)
    if not np.isfinite(lp):
        raise NumericalError("initial hyperparameters have zero prior density")

    if kind == "da":
        inst0 = update_model(model, theta)
        cur_approx = gaussian_approximation(inst0)
        cur_po = psi_apf(inst0, cur_approx, config.particles, rng)
        ll_stage1 = cur_approx.loglik
        log_w = cur_po.loglik_est - ll_stage1
        ll = cur_po.loglik_est
        aux = (cur_approx, cur_po)
    else:
        ll, aux = evaluate(theta, None)
    if not np.isfinite(ll):
        raise NumericalError("non-finite initial posterior density")

    S = 0.1 * np.eye(q)
    target = config.target_accept
    burnin = config.burnin
    n_iter = config.iter

    rows_theta = []
    rows_ll = []
    rows_lp = []
    rows_states = []
    counts = []
    accepted_post = 0
    accepted_burnin = 0
    stage1_accepts = 0
    eval_failures = 0

    for i in range(1, n_iter + 1):
        u = rng.standard_normal(q)
        th_prop = theta + S @ u
        lp_prop = model.log_prior(th_prop)
        accepted = False
        alpha_obs = 0.0
        if np.isfinite(lp_prop):
            try:
                if kind == "da":
                    inst = update_model(model, th_prop)
                    start = cur_approx.signal_mode
                    ap = gaussian_approximation(inst, start_signal=start)
                    log_r1 = lp_prop + ap.loglik - lp - ll_stage1
                    alpha_obs = math.exp(min(0.0, log_r1))
                    if rng.random() < alpha_obs:
                        stage1_accepts += 1
                        po = psi_apf(inst, ap, config.particles, rng)
                        log_w_prop = po.loglik_est - ap.loglik
                        alpha2 = math.exp(min(0.0, log_w_prop - log_w))
                        if rng.random() < alpha2:
                            accepted = True
                            theta, lp = th_prop, lp_prop
                            cur_approx, cur_po = ap, po
                            ll_stage1 = ap.loglik
                            log_w = log_w_prop
                            ll = po.loglik_est
                            aux = (ap, po)
                else:
                    ll_prop, aux_prop = evaluate(th_prop, aux)
                    log_r = lp_prop + ll_prop - lp - ll
                    alpha_obs = math.exp(min(0.0, log_r))
                    if rng.random() < alpha_obs:
                        accepted = True
                        theta, lp, ll, aux = th_prop, lp_prop, ll_prop, aux_prop
            except NumericalError:
                eval_failures += 1
                alpha_obs = 0.0
                accepted = False

        if i <= burnin:
            if accepted:
                accepted_burnin += 1
            step = min(1.0, q * float(i) ** (-config.gamma))
            S = ram_step(S, u, alpha_obs, target, step)
            if i == burnin and accepted_burnin == 0:
                warnings.warn(
                    "no proposals were accepted during burn-in; "
                    "the proposal scale may be far off",
                    RuntimeWarning,
                )
        else:
            if accepted:
                accepted_post += 1
            if accepted or not counts:
                rows_theta.append(theta.copy())
                rows_ll.append(ll)
                rows_lp.append(lp)
                counts.append(1)
                if config.store_states:
                    rows_states.append(draw_state(theta, aux))
            else:
                counts[-1] += 1

    states = np.stack(rows_states) if rows_states else None
    m = len(counts)
    state_names = getattr(model, "state_names", None) or tuple(
        f"alpha_{j + 1}" for j in range(states.shape[2] if states is not None else 0)
    )
    return McmcOutput(
        theta=np.vstack(rows_theta),
        counts=np.asarray(counts, dtype=np.int64),
        states=states,
        weights=np.ones(m),
        acceptance_rate=accepted_post / max(n_iter - burnin, 1),
        S_final=S,
        loglik_trace=np.asarray(rows_ll),
        logprior_trace=np.asarray(rows_lp),
        theta_names=tuple(model.theta_names),
        state_names=tuple(state_names),
        mcmc_type=kind,
        seed=config.seed,
        particles=config.particles if kind in ("da", "pm") else 0,
        info={
            "stage1_accepts": stage1_accepts,
            "accepted_post": accepted_post,
            "eval_failures": eval_failures,
        },
    )


def _seed_streams(rng, count):
    if isinstance(rng, (int, np.integer)):
        root = np.random.SeedSequence(int(rng))
    elif isinstance(rng, np.random.SeedSequence):
        root = rng
    elif isinstance(rng, np.random.Generator):
        root = np.random.SeedSequence(int(rng.integers(2**63)))
    else:
        raise ModelSpecError("rng must be a seed, SeedSequence, or Generator")
    return root.spawn(count)


def post_correct(output, model, N=10, rng=0, parallelism=1):
    """Importance-sampling correction of an approximate run.

    For every unique draw theta_j the twisted particle filter is run with
    ``N`` particles; the jump-chain row receives the weight
    ``exp(loglik_psi - loglik_approx)`` and its stored trajectory is
    replaced by an ancestry-traced draw. Weighted estimators over the
    corrected output are consistent for the exact joint posterior.

    Work is distributed over unique draws with per-draw random streams
    derived from ``(rng, j)``, so results do not depend on
    ``parallelism``.

    Parameters
    ----------
    output : McmcOutput
        Result of an approx-type run on ``model``.
    model : Lgssm
    N : int
        Particles per draw.
    rng : int, SeedSequence or Generator
        Master source for the per-draw streams.
    parallelism : int
        Worker threads.
    """
    if output.mcmc_type != "approx":
        raise ModelSpecError("post_correct requires an approx-type run")
    if not isinstance(model, Lgssm):
        raise ModelSpecError("post_correct requires linear state dynamics")
    m = output.theta.shape[0]
    streams = _seed_streams(rng, m)
    n, d = model.y.shape[0], model.n_states

    def task(j):
        rng_j = np.random.default_rng(streams[j])
        try:
            inst = update_model(model, output.theta[j])
            ap = gaussian_approximation(inst)
            po = psi_apf(inst, ap, N, rng_j)
            weight = math.exp(po.loglik_est - output.loglik_trace[j])
            trace = filter_smoother_trace(po, rng_j)
            return weight, trace, po.loglik_est
        except NumericalError:
            return 0.0, np.full((n, d), np.nan), -np.inf

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(task, range(m)))
    else:
        results = [task(j) for j in range(m)]

    weights = np.array([r[0] for r in results])
    states = np.stack([r[1] for r in results])
    n_failed = int(np.sum(weights == 0.0))
    if n_failed:
        warnings.warn(
            f"particle degeneracy at {n_failed} unique draws; "
            "their weights were set to zero",
            RuntimeWarning,
        )
    corrected = McmcOutput(
        theta=output.theta,
        counts=output.counts,
        states=states,
        weights=weights,
        acceptance_rate=output.acceptance_rate,
        S_final=output.S_final,
        loglik_trace=output.loglik_trace,
        logprior_trace=output.logprior_trace,
        theta_names=output.theta_names,
        state_names=output.state_names,
        mcmc_type=output.mcmc_type,
        seed=output.seed,
        particles=N,
        info=dict(output.info, post_corrected=True),
    )
    return corrected


def suggest_N(model, approx_output, ladder=(2, 4, 8, 16, 32, 64, 128),
              replications=100, rng=0):
    """Pick a particle count for the twisted filter.

    At the approximate MAP draw (highest stored posterior density), runs
    ``replications`` independent filters for each candidate N and returns
    the smallest one whose log-likelihood standard deviation is below
    one, together with the full (N, sd) table.
    """
    if approx_output.mcmc_type != "approx":
        raise ModelSpecError("suggest_N requires an approx-type run")
    j_map = int(np.argmax(approx_output.loglik_trace + approx_output.logprior_trace))
    theta = approx_output.theta[j_map]
    inst = update_model(model, theta)
    ap = gaussian_approximation(inst)
    streams = _seed_streams(rng, len(ladder) * replications)
    table = []
    chosen = None
    for idx, N in enumerate(ladder):
        lls = np.empty(replications)
        for r in range(replications):
            rng_r = np.random.default_rng(streams[idx * replications + r])
            lls[r] = psi_apf(inst, ap, N, rng_r).loglik_est
        sd = float(np.std(lls, ddof=1))
        table.append((int(N), sd))
        if chosen is None and sd < 1.0:
            chosen = int(N)
    if chosen is None:
        warnings.warn(
            "no candidate N achieved sd < 1; returning the largest",
            RuntimeWarning,
        )
        chosen = int(ladder[-1])
    return {"N": chosen, "sd_table": table}


def expand_sample(theta_unique, counts):
    """Expand a jump chain back to the full iteration-by-iteration chain."""
    theta_unique = np.asarray(theta_unique)
    counts = np.asarray(counts)
    if counts.ndim != 1 or theta_unique.shape[0] != counts.shape[0]:
        raise ModelSpecError("counts must have one entry per unique draw")
    if np.any(counts <= 0) or np.any(counts != np.round(counts)):
        raise ModelSpecError("counts must be positive integers")
    return np.repeat(theta_unique, counts.astype(np.int64), axis=0)


def compress_chain(x):
    """Compress a chain to consecutive unique values and stay counts."""
    x = np.asarray(x)
    if x.shape[0] == 0:
        return x.copy(), np.zeros(0, dtype=np.int64)
    flat = x.reshape(x.shape[0], -1)
    change = np.any(flat[1:] != flat[:-1], axis=1)
    starts = np.concatenate(([0], np.nonzero(change)[0] + 1))
    ends = np.concatenate((starts[1:], [x.shape[0]]))
    return x[starts], (ends - starts).astype(np.int64)


def _mcse_batch_means(x_full):
    n = x_full.shape[0]
    if n < 4:
        return np.full(x_full.shape[1], np.nan)
    b = max(int(math.floor(math.sqrt(n))), 1)
    nb = n // b
    trimmed = x_full[: nb * b].reshape(nb, b, -1)
    means = trimmed.mean(axis=1)
    var = means.var(axis=0, ddof=1)
    return np.sqrt(var * b / (nb * b))


def _mcse_weighted_blocks(x, wc):
    m = x.shape[0]
    if m < 4:
        return np.full(x.shape[1], np.nan)
    L = max(int(math.ceil(math.sqrt(m))), 1)
    nb = int(math.ceil(m / L))
    tot = wc.sum()
    mu = (wc[:, None] * x).sum(axis=0) / tot
    se2 = np.zeros(x.shape[1])
    for bidx in range(nb):
        sl = slice(bidx * L, min((bidx + 1) * L, m))
        A = (wc[sl, None] * x[sl]).sum(axis=0)
        B = wc[sl].sum()
        se2 += (A - mu * B) ** 2
    if nb > 1:
        se2 *= nb / (nb - 1.0)
    return np.sqrt(se2) / tot


def summarize(output, variable="theta"):
    """Weighted posterior summaries: mean, SD and MCSE per quantity.

    ``variable`` selects the hyperparameters (``theta``) or the stored
    state trajectories (``states``). Jump-chain rows are weighted by
    ``counts * weights``; the MCSE uses expanded-chain batch means for
    unweighted runs and a block delta-method ratio estimator for
    importance-weighted runs.

    Returns
    -------
    pandas.DataFrame
        Indexed by parameter name, or by (time, state) for states.
    """
    if variable == "theta":
        X = output.theta
        index = pd.Index(output.theta_names, name="parameter")
    elif variable == "states":
        if output.states is None:
            raise ModelSpecError("this run stored no state trajectories")
        m, n, d = output.states.shape
        X = output.states.reshape(m, n * d)
        index = pd.MultiIndex.from_product(
            [range(1, n + 1), output.state_names], names=["time", "state"]
        )
    else:
        raise ModelSpecError("variable must be 'theta' or 'states'")

    wc = output.counts * output.weights
    valid = wc > 0
    Xv = X[valid]
    wv = wc[valid]
    tot = wv.sum()
    if tot <= 0:
        raise NumericalError("all posterior weights are zero")
    mean = (wv[:, None] * Xv).sum(axis=0) / tot
    var = (wv[:, None] * (Xv - mean) ** 2).sum(axis=0) / tot
    sd = np.sqrt(var)

    if np.all(output.weights == 1.0):
        x_full = np.repeat(Xv, output.counts[valid].astype(np.int64), axis=0)
        mcse = _mcse_batch_means(x_full)
    else:
        mcse = _mcse_weighted_blocks(Xv, wv)

    return pd.DataFrame({"Mean": mean, "SD": sd, "MCSE": mcse}, index=index)
