"""Command-line front end.

Declarative JSON model configs, CSV data, seeded runs, CSV/JSON results.

Subcommands: simulate, filter, smooth, mcmc, post-correct, suggest-n,
summary. Flags: --config PATH, --seed U64, --threads INT, --out DIR.
Exit codes: 0 success, 2 config error, 3 numerical failure.

Supported declarative model families: bsm_lg (gaussian structural model),
bsm_ng (non-gaussian structural model), svm (stochastic volatility), and
ssm_custom (explicit matrices with a theta -> matrix-entry substitution
map). Nonlinear and diffusion models need code and are library-only.
"""

import argparse
import csv
import json
import math
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import priors as priors_mod
from .approx import gaussian_approximation
from .errors import ConfigError, ModelSpecError, NumericalError, SsmError
from .kalman import kalman_filter, kalman_smoother
from .mcmc import McmcOutput, post_correct, run_mcmc, suggest_N, summarize
from .models import Lgssm, simulate_data, sv_model, trend_model
from .families import NEEDS_PHI

_MISSING_TOKENS = {"", "na", "nan", "null"}

_PRIOR_KEYS = {
    "normal": ("mean", "sd"),
    "halfnormal": ("scale",),
    "tnormal": ("mean", "sd"),
    "gamma": ("shape", "rate"),
    "uniform": ("min", "max"),
}


def _fmt(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NA"
    return repr(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_float(tok):
    tok = tok.strip()
    if tok.lower() in _MISSING_TOKENS:
        return math.nan
    return float(tok)


def _read_table(path, where):
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"{where}: cannot read data file {path}: {exc}")
    except StopIteration:
        raise ConfigError(f"{where}: data file {path} is empty")
    header = [h.strip() for h in header]
    cols = {}
    for j, name in enumerate(header):
        try:
            cols[name] = np.array([_parse_float(r[j]) for r in rows])
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"{where}: column '{name}' in {path}: {exc}")
    return cols


def _get(cfg, key, where, required=True, default=None):
    if key not in cfg:
        if required:
            raise ConfigError(f"{where}: missing field '{key}'")
        return default
    return cfg[key]


def _parse_prior(obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: prior must be an object")
    family = _get(obj, "family", where)
    if family not in _PRIOR_KEYS:
        raise ConfigError(f"{where}: unknown prior family '{family}'")
    init = _get(obj, "init", where)
    try:
        if family == "normal":
            return priors_mod.normal(init, obj["mean"], obj["sd"])
        if family == "halfnormal":
            return priors_mod.halfnormal(init, obj["scale"])
        if family == "tnormal":
            return priors_mod.tnormal(
                init, obj["mean"], obj["sd"],
                min=obj.get("min", -math.inf), max=obj.get("max", math.inf),
            )
        if family == "gamma":
            return priors_mod.gamma(init, obj["shape"], obj["rate"])
        return priors_mod.uniform(init, obj["min"], obj["max"])
    except KeyError as exc:
        raise ConfigError(f"{where}: prior field {exc} is required")
    except ModelSpecError as exc:
        raise ConfigError(f"{where}: {exc}")


_TARGET_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)(?:\[([0-9,\s]*)\])?$")


def _parse_target(spec, where):
    m = _TARGET_RE.match(spec.strip())
    if not m:
        raise ConfigError(f"{where}: malformed substitution target '{spec}'")
    name = m.group(1)
    idx = m.group(2)
    if idx is None:
        return name, None
    try:
        return name, tuple(int(tok) for tok in idx.split(","))
    except ValueError:
        raise ConfigError(f"{where}: malformed indices in target '{spec}'")


def _load_y(cols, path, where):
    if "y" in cols:
        return cols["y"][:, None]
    multi = sorted(
        (int(k[1:]), k) for k in cols if re.fullmatch(r"y[0-9]+", k)
    )
    if not multi:
        raise ConfigError(f"{where}: {path} has no 'y' (or y1..yp) column")
    return np.column_stack([cols[k] for _i, k in multi])


def build_model(cfg, config_dir, where="model"):
    """Construct a model instance from a config dictionary."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where}: must be an object")
    family = _get(cfg, "family", where)
    known = ("bsm_lg", "bsm_ng", "svm", "ssm_custom")
    if family not in known:
        raise ConfigError(f"{where}.family: must be one of {known}")
    data_path = _get(cfg, "data", where)
    path = Path(data_path)
    if not path.is_absolute():
        path = Path(config_dir) / path
    cols = _read_table(path, f"{where}.data")
    y = _load_y(cols, path, f"{where}.data")

    def column(name, key):
        if name not in cols:
            raise ConfigError(
                f"{where}.{key}: column '{name}' not found in {path}"
            )
        return cols[name]

    pr_cfg = cfg.get("priors", {})

    def prior_of(name, required=False):
        if name not in pr_cfg:
            if required:
                raise ConfigError(f"{where}.priors: missing '{name}'")
            return None
        return _parse_prior(pr_cfg[name], f"{where}.priors.{name}")

    try:
        if family in ("bsm_lg", "bsm_ng"):
            if y.shape[1] != 1:
                raise ConfigError(f"{where}: structural models are univariate")
            xreg_names = cfg.get("xreg_columns", [])
            xreg = (
                np.column_stack([column(nm, "xreg_columns") for nm in xreg_names])
                if xreg_names
                else None
            )
            beta = None
            if xreg_names:
                bspec = _get(cfg, "priors", where).get("beta")
                if bspec is None:
                    raise ConfigError(f"{where}.priors: missing 'beta'")
                if isinstance(bspec, dict):
                    bspec = [bspec]
                beta = [
                    _parse_prior(b, f"{where}.priors.beta[{i}]")
                    for i, b in enumerate(bspec)
                ]
            dist = (
                "gaussian"
                if family == "bsm_lg"
                else _get(cfg, "distribution", where)
            )
            u = column(cfg["u_column"], "u_column") if "u_column" in cfg else None
            return trend_model(
                y[:, 0],
                sd_y=prior_of("sd_y", required=family == "bsm_lg"),
                sd_level=prior_of("sd_level", required=True),
                sd_slope=prior_of("sd_slope"),
                xreg=xreg,
                beta=beta,
                distribution=dist,
                phi=prior_of("phi", required=dist in NEEDS_PHI),
                u=u,
                a1=cfg.get("a1"),
                P1=cfg.get("P1"),
            )
        if family == "svm":
            if y.shape[1] != 1:
                raise ConfigError(f"{where}: svm is univariate")
            return sv_model(
                y[:, 0],
                mu=prior_of("mu", required=True),
                rho=prior_of("rho", required=True),
                sd_eta=prior_of("sd_eta", required=True),
            )
        return _build_custom(cfg, y, where)
    except ModelSpecError as exc:
        raise ConfigError(f"{where}: {exc}")


def _build_custom(cfg, y, where):
    mats = _get(cfg, "matrices", where)
    if not isinstance(mats, dict):
        raise ConfigError(f"{where}.matrices: must be an object")
    known = {"Z", "H", "T", "R", "c", "d", "a1", "P1"}
    base = {}
    for key, val in mats.items():
        if key not in known:
            raise ConfigError(f"{where}.matrices: unknown component '{key}'")
        base[key] = np.asarray(val, dtype=float)
    dist = cfg.get("distribution", "gaussian")
    phi0 = cfg.get("phi")
    u = np.asarray(cfg["u"], dtype=float) if "u" in cfg else None

    theta_cfg = cfg.get("theta", [])
    names, priors, targets = [], [], []
    for i, entry in enumerate(theta_cfg):
        wh = f"{where}.theta[{i}]"
        names.append(_get(entry, "name", wh))
        priors.append(_parse_prior(_get(entry, "prior", wh), wh))
        tlist = _get(entry, "targets", wh)
        if isinstance(tlist, str):
            tlist = [tlist]
        parsed = [_parse_target(t, wh) for t in tlist]
        for tname, tidx in parsed:
            if tname == "phi":
                if tidx is not None:
                    raise ConfigError(f"{wh}: phi takes no indices")
                continue
            if tname not in base:
                raise ConfigError(
                    f"{wh}: target '{tname}' is not among the model matrices"
                )
            arr = base[tname]
            if tidx is None or len(tidx) != arr.ndim:
                raise ConfigError(
                    f"{wh}: target '{tname}' needs {arr.ndim} indices"
                )
            if any(ix >= sz for ix, sz in zip(tidx, arr.shape)):
                raise ConfigError(f"{wh}: target '{tname}{list(tidx)}' out of range")
        targets.append(parsed)

    def update_fn(theta):
        out = {}
        arrays = {}
        new_phi = None
        for val, tgts in zip(theta, targets):
            for tname, tidx in tgts:
                if tname == "phi":
                    new_phi = float(val)
                    continue
                if tname not in arrays:
                    arrays[tname] = base[tname].copy()
                arrays[tname][tidx] = val
        out.update(arrays)
        if new_phi is not None:
            out["phi"] = new_phi
        return out

    return Lgssm(
        y,
        Z=base.get("Z"),
        H=base.get("H"),
        T=base.get("T"),
        R=base.get("R"),
        c=base.get("c"),
        d=base.get("d"),
        a1=base.get("a1"),
        P1=base.get("P1"),
        family=dist,
        phi=phi0,
        u=u,
        priors=priors,
        theta_names=names,
        update_fn=update_fn if priors else None,
    )


def _load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mcmc_config(cfg, args, where="mcmc"):
    mc = dict(_get(cfg, "mcmc", "config", required=True))
    if args.seed is not None:
        mc["seed"] = args.seed
    mc.setdefault("seed", 0)
    try:
        from .mcmc import McmcConfig

        return McmcConfig(**mc)
    except (TypeError, ModelSpecError) as exc:
        raise ConfigError(f"{where}: {exc}")


def cmd_simulate(args):
    cfg = _load_config(args.config)
    model_cfg = _get(cfg, "model", "config")
    model = build_model(model_cfg, Path(args.config).parent)
    sim = cfg.get("simulate", {})
    theta = sim.get("theta")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    y, alpha = simulate_data(model, theta=theta, rng=rng, include_states=True)
    out = _out_dir(args)
    p = y.shape[1]
    ycols = ["y"] if p == 1 else [f"y{j + 1}" for j in range(p)]
    # carry covariate/exposure columns through so the simulated file can
    # be used directly as model data downstream
    path = Path(model_cfg["data"])
    if not path.is_absolute():
        path = Path(args.config).parent / path
    cols = _read_table(path, "model.data")
    skip = set(ycols) | set(model.state_names) | {"t", "y"}
    extra = [k for k in cols if k not in skip]
    header = ["t"] + ycols + extra + list(model.state_names)
    rows = [
        [t + 1, *y[t], *(cols[k][t] for k in extra), *alpha[t]]
        for t in range(y.shape[0])
    ]
    _write_csv(out / "data.csv", header, rows)
    print(out / "data.csv")
    return 0


def _state_pass(args, smooth):
    cfg = _load_config(args.config)
    model = build_model(_get(cfg, "model", "config"), Path(args.config).parent)
    if model.family.kind == "gaussian":
        kind = "exact"
        target = model
        loglik = kalman_filter(model).loglik
    else:
        kind = "approximate"
        ap = gaussian_approximation(model)
        target = ap.model
        loglik = ap.loglik
    if smooth:
        sm = kalman_smoother(target)
        means, covs = sm.alphahat, sm.Vt
        stem = "smooth"
    else:
        fr = kalman_filter(target)
        means, covs = fr.att, fr.Ptt
        stem = "filter"
    out = _out_dir(args)
    header = ["t"]
    for name in model.state_names:
        header += [f"mean_{name}", f"var_{name}"]
    rows = []
    for t in range(model.n):
        row = [t + 1]
        for j in range(model.n_states):
            row += [means[t, j], covs[t, j, j]]
        rows.append(row)
    _write_csv(out / f"{stem}.csv", header, rows)
    _write_json(out / f"{stem}.json", {"loglik": loglik, "kind": kind})
    print(out / f"{stem}.csv")
    return 0


def cmd_filter(args):
    return _state_pass(args, smooth=False)


def cmd_smooth(args):
    return _state_pass(args, smooth=True)


def _save_run(out, result, cfg, elapsed):
    m, q = result.theta.shape
    header = ["draw", "count", "weight", "loglik", "logprior"] + list(
        result.theta_names
    )
    rows = [
        [
            j + 1,
            int(result.counts[j]),
            result.weights[j],
            result.loglik_trace[j],
            result.logprior_trace[j],
            *result.theta[j],
        ]
        for j in range(m)
    ]
    _write_csv(out / "theta.csv", header, rows)
    if result.states is not None:
        sh = ["draw", "time"] + list(result.state_names)
        srows = []
        for j in range(m):
            for t in range(result.states.shape[1]):
                srows.append([j + 1, t + 1, *result.states[j, t]])
        _write_csv(out / "states.csv", sh, srows)
    _write_json(
        out / "run.json",
        {
            "acceptance_rate": result.acceptance_rate,
            "mcmc_type": result.mcmc_type,
            "seed": result.seed,
            "particles": result.particles,
            "theta_names": list(result.theta_names),
            "state_names": list(result.state_names),
            "S_final": result.S_final.tolist(),
            "config": cfg,
            "timing_seconds": elapsed,
        },
    )


def _load_run(run_dir):
    run_dir = Path(run_dir)
    try:
        with open(run_dir / "run.json") as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{run_dir}: not a run directory: {exc}")
    cols = _read_table(run_dir / "theta.csv", str(run_dir))
    names = meta["theta_names"]
    theta = np.column_stack([cols[nm] for nm in names])
    states = None
    state_names = tuple(meta.get("state_names", ()))
    spath = run_dir / "states.csv"
    if spath.exists():
        scols = _read_table(spath, str(run_dir))
        m = theta.shape[0]
        n = int(scols["time"].max())
        d = len(state_names)
        states = np.empty((m, n, d))
        for j, nm in enumerate(state_names):
            states[:, :, j] = scols[nm].reshape(m, n)
    result = McmcOutput(
        theta=theta,
        counts=cols["count"].astype(np.int64),
        states=states,
        weights=cols["weight"],
        acceptance_rate=meta["acceptance_rate"],
        S_final=np.asarray(meta["S_final"]),
        loglik_trace=cols["loglik"],
        logprior_trace=cols["logprior"],
        theta_names=tuple(names),
        state_names=state_names,
        mcmc_type=meta["mcmc_type"],
        seed=meta["seed"],
        particles=meta.get("particles", 0),
    )
    return result, meta


def cmd_mcmc(args):
    cfg = _load_config(args.config)
    model = build_model(_get(cfg, "model", "config"), Path(args.config).parent)
    mcfg = _mcmc_config(cfg, args)
    start = time.perf_counter()
    result = run_mcmc(model, mcfg)
    elapsed = time.perf_counter() - start
    out = _out_dir(args)
    echo = dict(cfg)
    # resolve the data path so the echoed config works from any directory
    data = Path(cfg["model"]["data"])
    if not data.is_absolute():
        data = (Path(args.config).parent / data).resolve()
    echo["model"] = dict(cfg["model"], data=str(data))
    echo["mcmc"] = dict(cfg.get("mcmc", {}), seed=mcfg.seed)
    _save_run(out, result, echo, elapsed)
    print(out / "run.json")
    return 0


def cmd_post_correct(args):
    run, meta = _load_run(args.run_dir)
    if run.mcmc_type != "approx":
        raise ConfigError(
            f"{args.run_dir}: post-correct requires an approx-type run, "
            f"found '{run.mcmc_type}'"
        )
    cfg = meta["config"]
    model = build_model(
        _get(cfg, "model", "config"), Path(args.run_dir)
    )
    particles = args.particles
    if particles is None:
        particles = cfg.get("post_correct", {}).get("particles", 10)
    seed = args.seed if args.seed is not None else 0
    start = time.perf_counter()
    corrected = post_correct(
        run, model, N=particles, rng=seed, parallelism=args.threads
    )
    elapsed = time.perf_counter() - start
    out = _out_dir(args)
    echo = dict(cfg)
    echo["post_correct"] = {"particles": particles, "seed": seed}
    _save_run(out, corrected, echo, elapsed)
    print(out / "run.json")
    return 0


def cmd_suggest_n(args):
    run, meta = _load_run(args.run_dir)
    model = build_model(
        _get(meta["config"], "model", "config"), Path(args.run_dir)
    )
    seed = args.seed if args.seed is not None else 0
    res = suggest_N(model, run, rng=seed)
    out = _out_dir(args)
    payload = {
        "N": res["N"],
        "sd_table": [[n, sd] for n, sd in res["sd_table"]],
    }
    _write_json(out / "suggest_n.json", payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_summary(args):
    run, _meta = _load_run(args.run_dir)
    out = _out_dir(args)
    tables = {}
    th = summarize(run, "theta")
    _write_csv(
        out / "summary_theta.csv",
        ["parameter", "mean", "sd", "mcse"],
        [
            [name, row.Mean, row.SD, row.MCSE]
            for name, row in th.iterrows()
        ],
    )
    tables["theta"] = {
        name: {"mean": row.Mean, "sd": row.SD, "mcse": row.MCSE}
        for name, row in th.iterrows()
    }
    if run.states is not None:
        st = summarize(run, "states")
        _write_csv(
            out / "summary_states.csv",
            ["time", "state", "mean", "sd", "mcse"],
            [
                [t, name, row.Mean, row.SD, row.MCSE]
                for (t, name), row in st.iterrows()
            ],
        )
        tables["states"] = {
            f"{name}[{t}]": {"mean": row.Mean, "sd": row.SD, "mcse": row.MCSE}
            for (t, name), row in st.iterrows()
        }
    _write_json(out / "summary.json", tables)
    print(out / "summary.json")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="ssmbayes",
        description="Bayesian state space inference: filtering, smoothing, "
        "MCMC and importance-sampling post-correction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_config=True, needs_run_dir=False):
        p = sub.add_parser(name)
        if needs_config:
            p.add_argument("--config", required=True, help="JSON model config")
        if needs_run_dir:
            p.add_argument("run_dir", help="existing MCMC run directory")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("simulate", cmd_simulate)
    add("filter", cmd_filter)
    add("smooth", cmd_smooth)
    add("mcmc", cmd_mcmc)
    pc = add("post-correct", cmd_post_correct, needs_config=False, needs_run_dir=True)
    pc.add_argument("--particles", type=int, default=None)
    add("suggest-n", cmd_suggest_n, needs_config=False, needs_run_dir=True)
    add("summary", cmd_summary, needs_config=False, needs_run_dir=True)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ModelSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SsmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
