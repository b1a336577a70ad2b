"""Command-line harness: configured experiment runs, method comparisons,
simplex verification reports, and parameter studies.

Subcommands: run, compare, verify, study. Configuration is a TOML file with
a profile switch ("paper" or "desk") that expands to full hyperparameter
sets; every expanded value is echoed into the output directory. Outputs per
run: trial_<seed>.csv, aggregate.csv, one SVG per metric, config_echo.toml,
report.json.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
import threading

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .baselines import (
    LocationScaleMixing,
    TwoMoonsMixing,
    TwoMoonsSpec,
    langevin_run,
    mixture_data_gen,
    nll_gap,
    sample_potential_target,
    w1_distance,
)
from .flows import FlowModel, GaussianBase, deserialize, identity_init
from .functionals import (
    Dataset,
    GaussianLocationKernel,
    GaussianLocationScaleKernel,
    KLTargetFunctional,
    NPMLEFunctional,
    PotentialTarget,
)
from .simplex import (
    GridKLTarget,
    GridNPMLE,
    SimplexDistribution,
    implicit_step_exact,
    integrate_klgf,
    kl_divergence,
    kw_grid_solver,
    lemma_a1_slack,
    fit_theorem4_constant,
    verify_theorem2,
    verify_theorem4,
    verify_theorem5,
)
from .solver import (
    ComposeConfig,
    RUN_RECORD_FIELDS,
    SolverConfig,
    StochasticConfig,
    solve_algorithm1,
    solve_algorithm2,
    solve_stochastic,
)
from .svgplot import Series, line_chart

RUN_KINDS = ("npmle-location", "npmle-location-scale", "bayes-sampling")
STUDY_KINDS = ("step-size-study", "distill-study")
ALL_KINDS = RUN_KINDS + STUDY_KINDS + ("simplex-verify",)

TRIAL_FIELDS = RUN_RECORD_FIELDS + ["metric"]

SOLVER_FIELDS = {f.name for f in SolverConfig.__dataclass_fields__.values()}


class ConfigError(ValueError):
    pass


# profile -> solver/experiment defaults per experiment kind
PROFILES = {
    "npmle-location": {
        "paper": {
            "solver": dict(tau=5.0, beta2=1.15, gamma=1e-4, beta1=0.912, n_outer=25, n_inner=1000, M=3000, patience=200, grad_norm_tol=1e-4),
            "experiment": dict(n=5000, d=2, n_blocks=30, width=64, base_variance=4.0, m=500),
        },
        "desk": {
            "solver": dict(tau=5.0, beta2=1.15, gamma=3e-3, beta1=0.912, n_outer=15, n_inner=200, M=500, patience=80, grad_norm_tol=1e-4),
            "experiment": dict(n=500, d=2, n_blocks=10, width=64, base_variance=4.0, m=100),
        },
    },
    "npmle-location-scale": {
        "paper": {
            "solver": dict(tau=5.0, beta2=1.15, gamma=1e-4, beta1=0.912, n_outer=50, n_inner=1000, M=2041, patience=200, grad_norm_tol=1e-4),
            "experiment": dict(n=5000, d=2, n_blocks=30, width=64, base_variance=4.0, m=500),
        },
        "desk": {
            "solver": dict(tau=5.0, beta2=1.15, gamma=3e-3, beta1=0.912, n_outer=15, n_inner=200, M=500, patience=80, grad_norm_tol=1e-4),
            "experiment": dict(n=500, d=2, n_blocks=10, width=64, base_variance=4.0, m=100),
        },
    },
    "bayes-sampling": {
        "paper": {
            "solver": dict(tau=5.0, beta2=1.0, gamma=1e-4, beta1=0.912, n_outer=25, n_inner=1000, M=1000, patience=200, grad_norm_tol=1e-4),
            "experiment": dict(alpha=2.0, d=2, n_blocks=20, width=64, base_variance=9.0, langevin_dt=1e-2),
        },
        "desk": {
            "solver": dict(tau=5.0, beta2=1.0, gamma=3e-3, beta1=0.912, n_outer=15, n_inner=100, M=1000, patience=40, grad_norm_tol=1e-4),
            "experiment": dict(alpha=2.0, d=2, n_blocks=10, width=64, base_variance=9.0, langevin_dt=1e-2),
        },
    },
    "step-size-study": {
        "paper": {
            "solver": dict(tau=1.0, beta2=1.0, gamma=1e-3, beta1=1.0, n_outer=50, n_inner=5000, M=1000, patience=5000, grad_norm_tol=1e-4, lr_schedule="harmonic", zeta=0.05, zeta_k_scale=0.07, burn_in=2, use_inner_fv_stopping=True, use_outer_fv_stopping=True),
            "experiment": dict(n=1000, d=2, n_blocks=10, width=64, base_variance=1.0, separation=1.4, taus=[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]),
        },
        "desk": {
            "solver": dict(tau=1.0, beta2=1.0, gamma=1e-3, beta1=1.0, n_outer=12, n_inner=800, M=400, patience=800, grad_norm_tol=1e-5, lr_schedule="harmonic", zeta=0.05, zeta_k_scale=0.07, burn_in=2, use_inner_fv_stopping=True, use_outer_fv_stopping=True),
            "experiment": dict(n=500, d=2, n_blocks=10, width=64, base_variance=1.0, separation=1.4, taus=[1, 2, 4, 8], gammas=[1e-3, 1e-3, 1e-3, 1e-3]),
        },
    },
    "distill-study": {
        "paper": {
            "solver": dict(tau=5.0, beta2=1.15, gamma=1e-4, beta1=0.912, n_outer=25, n_inner=1000, M=3000, patience=200, grad_norm_tol=1e-4),
            "experiment": dict(n=5000, d=2, n_blocks=30, width=256, base_variance=4.0, k2=4, k1=40, k0=20, n3=3000, gamma_prime=1e-5, epsilon=1e-4),
        },
        "desk": {
            "solver": dict(tau=5.0, beta2=1.15, gamma=3e-3, beta1=0.912, n_outer=12, n_inner=150, M=500, patience=60, grad_norm_tol=1e-4),
            "experiment": dict(n=500, d=2, n_blocks=10, width=64, base_variance=4.0, k2=2, k1=8, k0=6, n3=1200, gamma_prime=2e-3, epsilon=5e-3),
        },
    },
    "simplex-verify": {
        "paper": {"solver": {}, "experiment": dict(grid=50, n=50, n_steps=200)},
        "desk": {"solver": {}, "experiment": dict(grid=20, n=50, n_steps=100)},
    },
}


def toml_dumps(config):
    """Minimal TOML emitter for one level of tables with scalar/list values."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        raise ConfigError(f"cannot serialize config value {v!r}")

    lines = []
    tables = []
    for key, val in config.items():
        if isinstance(val, dict):
            tables.append((key, val))
        else:
            lines.append(f"{key} = {fmt(val)}")
    for name, table in tables:
        lines.append("")
        lines.append(f"[{name}]")
        for key, val in table.items():
            lines.append(f"{key} = {fmt(val)}")
    return "\n".join(lines) + "\n"


def load_config(path, profile=None, seeds=None, out=None, strict=False):
    """Parse, validate, and profile-expand an experiment config file."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config parse error in {path}: {err}")

    kind = raw.get("kind")
    if kind not in ALL_KINDS:
        raise ConfigError(f"field 'kind': expected one of {ALL_KINDS}, got {kind!r}")
    prof = profile or raw.get("profile", "desk")
    if prof not in ("paper", "desk"):
        raise ConfigError(f"field 'profile': expected 'paper' or 'desk', got {prof!r}")
    seed_list = list(seeds) if seeds else list(raw.get("seeds", [0]))
    if not seed_list:
        raise ConfigError("field 'seeds': must be nonempty")

    expanded = PROFILES[kind][prof]
    solver = dict(expanded["solver"])
    solver.update(raw.get("solver", {}))
    unknown = set(solver) - SOLVER_FIELDS
    if unknown:
        raise ConfigError(f"table 'solver': unknown fields {sorted(unknown)}")
    experiment = dict(expanded["experiment"])
    experiment.update(raw.get("experiment", {}))

    return {
        "kind": kind,
        "profile": prof,
        "seeds": [int(s) for s in seed_list],
        "out": out or raw.get("out", "artifacts"),
        "strict": bool(strict or raw.get("strict", False)),
        "solver": solver,
        "experiment": experiment,
    }


def make_solver_config(config, **overrides):
    params = dict(config["solver"])
    params.update(overrides)
    params["strict"] = config["strict"]
    return SolverConfig(**params)


def build_problem(config, data_seed):
    """Dataset/functional, flow factory, and metric plumbing for one kind."""
    kind = config["kind"]
    exp = config["experiment"]
    d = int(exp.get("d", 2))
    rng = np.random.default_rng(1_000_003 * (data_seed + 1))
    if kind in ("npmle-location", "step-size-study", "distill-study"):
        mixing = TwoMoonsMixing(TwoMoonsSpec(separation=exp.get("separation", 1.0)))
        dataset, _ = mixture_data_gen(mixing, "location", int(exp["n"]), rng)
        functional = NPMLEFunctional(dataset, GaussianLocationKernel(d))
        param_dim = d
    elif kind == "npmle-location-scale":
        mixing = LocationScaleMixing(TwoMoonsMixing(TwoMoonsSpec(separation=exp.get("separation", 1.0))), d)
        dataset, _ = mixture_data_gen(mixing, "location-scale", int(exp["n"]), rng)
        functional = NPMLEFunctional(dataset, GaussianLocationScaleKernel(d))
        param_dim = 2 * d
    elif kind == "bayes-sampling":
        functional = KLTargetFunctional(PotentialTarget(float(exp["alpha"])))
        param_dim = d
    else:
        raise ConfigError(f"kind {kind!r} is not a runnable experiment")

    def flow_factory(seed):
        frng = np.random.default_rng(7_777_777 * (seed + 1))
        base = GaussianBase(param_dim, variance=float(exp["base_variance"]))
        return FlowModel(identity_init(param_dim, int(exp["n_blocks"]), int(exp["width"]), frng), base)

    return functional, flow_factory, param_dim


def reference_loss(config, functional, flow_factory, out_dir, data_seed):
    """NLL of a 4x-longer tightened run, cached per dataset seed."""
    cache = os.path.join(out_dir, f"reference_{data_seed}.json")
    if os.path.exists(cache):
        with open(cache) as fh:
            return json.load(fh)["loss"]
    cfg = make_solver_config(config)
    cfg.n_outer = 4 * cfg.n_outer
    cfg.grad_norm_tol = cfg.grad_norm_tol / 10.0
    flow = flow_factory(10_007)
    flow, _ = solve_algorithm1(functional, flow, cfg, np.random.default_rng(10_007))
    theta, _, _ = flow.sample(cfg.M, np.random.default_rng(31))
    loss = functional.loss_np(theta)
    with open(cache, "w") as fh:
        json.dump({"loss": loss}, fh)
    return loss


def run_trial(config, functional, flow_factory, seed, tau_override=None, stochastic=False):
    """One solver run; returns (records, checkpoints)."""
    cfg = make_solver_config(config)
    flow = flow_factory(seed)
    rng = np.random.default_rng(seed)
    checkpoints = []
    if stochastic:
        cfg.beta2 = 1.0
        cfg.lr_schedule = "inverse27"
        cfg.gamma = 1.0 if config["profile"] == "paper" else cfg.gamma
        sc = StochasticConfig(m=int(config["experiment"]["m"]))
        flow, records = solve_stochastic(functional, flow, cfg, sc, rng, seed=seed)
    else:
        flow, records = solve_algorithm1(
            functional, flow, cfg, rng, seed=seed, tau_override=tau_override, checkpoints=checkpoints
        )
    return flow, records, checkpoints


def bayes_w1_series(config, checkpoints, seed):
    exp = config["experiment"]
    alpha, d = float(exp["alpha"]), int(exp.get("d", 2))
    ref = sample_potential_target(alpha, d, 4000, np.random.default_rng(424_242))
    out = []
    for blob in checkpoints:
        flow = deserialize(blob)
        theta, _, _ = flow.sample(4000, np.random.default_rng(9_999 + seed))
        out.append(w1_distance(theta, ref, rng=np.random.default_rng(1), cap=2000, repeats=2))
    return out


def write_trial_csv(path, records, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_FIELDS)
        for rec, metric in zip(records, metrics):
            w.writerow(
                [rec.k, f"{rec.loss:.12g}", f"{rec.kl_step:.12g}", f"{rec.fv_var:.12g}",
                 rec.inner_iters, rec.stop_reason, f"{rec.wall_ms:.3f}", rec.seed, f"{metric:.12g}"]
            )


def two_pass_stderr(values):
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    mean = values.mean()
    var = np.sum((values - mean) ** 2) / (values.size - 1)
    return float(np.sqrt(var / values.size))


def aggregate_trials(per_trial):
    """per_trial: {seed: [(k, loss, metric), ...]} -> aggregate rows."""
    by_k = {}
    for rows in per_trial.values():
        for k, loss, metric in rows:
            by_k.setdefault(k, []).append((loss, metric))
    out = []
    for k in sorted(by_k):
        losses = [v[0] for v in by_k[k]]
        metrics = [v[1] for v in by_k[k]]
        out.append(
            dict(
                k=k,
                loss_mean=float(np.mean(losses)),
                loss_stderr=two_pass_stderr(losses),
                metric_mean=float(np.mean(metrics)),
                metric_stderr=two_pass_stderr(metrics),
                n_trials=len(by_k[k]),
            )
        )
    return out


AGGREGATE_FIELDS = ["k", "loss_mean", "loss_stderr", "metric_mean", "metric_stderr", "n_trials"]


def write_aggregate_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=AGGREGATE_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in r.items()})


def _ensure_out(config):
    out_dir = config["out"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_echo.toml"), "w") as fh:
        fh.write(toml_dumps(config))
    return out_dir


def _finish(out_dir, report):
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    return 0 if report.get("ok", True) else 1


def cmd_run(config, threads):
    if config["kind"] == "simplex-verify":
        return cmd_verify(config, threads)
    if config["kind"] in STUDY_KINDS:
        return cmd_study(config, threads)
    out_dir = _ensure_out(config)
    kind = config["kind"]
    functional, flow_factory, _ = build_problem(config, config["seeds"][0])
    ref = None
    if kind.startswith("npmle"):
        ref = reference_loss(config, functional, flow_factory, out_dir, config["seeds"][0])
    lock = threading.Lock()
    per_trial = {}

    def worker(seed):
        flow, records, checkpoints = run_trial(config, functional, flow_factory, seed)
        if kind == "bayes-sampling":
            metrics = bayes_w1_series(config, checkpoints, seed)
        else:
            metrics, _ = nll_gap([r.loss for r in records], ref)
        with lock:
            write_trial_csv(os.path.join(out_dir, f"trial_{seed}.csv"), records, metrics)
            per_trial[seed] = [(r.k, r.loss, m) for r, m in zip(records, metrics)]

    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(worker, config["seeds"]))

    rows = aggregate_trials(per_trial)
    write_aggregate_csv(os.path.join(out_dir, "aggregate.csv"), rows)
    metric_name = "w1" if kind == "bayes-sampling" else "log_gap"
    series = Series(
        metric_name,
        [r["k"] for r in rows],
        [r["metric_mean"] for r in rows],
        yerr=[r["metric_stderr"] for r in rows],
    )
    line_chart(
        [series],
        os.path.join(out_dir, f"{metric_name}.svg"),
        title=kind,
        xlabel="outer iteration k",
        ylabel=metric_name,
        logy=(metric_name == "w1"),
    )
    report = {
        "kind": kind,
        "seeds": config["seeds"],
        "terminal_metric_mean": rows[-1]["metric_mean"],
        "reference_loss": ref,
        "ok": True,
    }
    return _finish(out_dir, report)


def _kw_series(config, functional, n_steps):
    """Fixed-grid baseline series: NPMLE value per iteration."""
    exp = config["experiment"]
    d = int(exp.get("d", 2))
    X = functional.dataset.X
    L = float(np.max(np.abs(X)))
    g = int(round(exp.get("kw_grid_per_dim", 12)))
    if config["kind"] == "npmle-location-scale":
        axes = [np.linspace(-L, L, g)] * d + [np.linspace(np.log(0.01), np.log(4.0), g)] * d
    else:
        axes = [np.linspace(-L, L, g)] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    atoms = np.column_stack([m.ravel() for m in mesh])
    grid = GridNPMLE(functional.dataset, functional.kernel, atoms)
    rho0 = SimplexDistribution.uniform(atoms)
    traj = kw_grid_solver(grid, rho0, tau=1.0, n_steps=n_steps)
    return [grid.value(t.weights) for t in traj[1:]]


def cmd_compare(config, threads):
    out_dir = _ensure_out(config)
    kind = config["kind"]
    methods = config["experiment"].get("methods")
    if not methods:
        raise ConfigError("compare needs experiment.methods")
    runnable = {"iklpd", "iklpd-stochastic", "kw-grid", "langevin"}
    bad = set(methods) - runnable
    if bad:
        raise ConfigError(f"unknown methods {sorted(bad)}")
    if kind == "bayes-sampling" and ("kw-grid" in methods or "iklpd-stochastic" in methods):
        raise ConfigError(f"methods incompatible with kind {kind!r}")
    if kind.startswith("npmle") and "langevin" in methods:
        raise ConfigError(f"method 'langevin' incompatible with kind {kind!r}")

    functional, flow_factory, param_dim = build_problem(config, config["seeds"][0])
    ref = None
    if kind.startswith("npmle"):
        ref = reference_loss(config, functional, flow_factory, out_dir, config["seeds"][0])

    rows = []  # (method, k, trial, metric)
    summary = {}
    for method in methods:
        for seed in config["seeds"]:
            if method in ("iklpd", "iklpd-stochastic"):
                _, records, checkpoints = run_trial(
                    config, functional, flow_factory, seed, stochastic=(method == "iklpd-stochastic")
                )
                if kind == "bayes-sampling":
                    metrics = bayes_w1_series(config, checkpoints, seed)
                else:
                    metrics, _ = nll_gap([r.loss for r in records], ref)
                ks = [r.k for r in records]
            elif method == "kw-grid":
                n_steps = int(make_solver_config(config).n_outer)
                losses = _kw_series(config, functional, n_steps)
                metrics, _ = nll_gap(losses, ref)
                ks = list(range(1, n_steps + 1))
            else:  # langevin
                exp = config["experiment"]
                cfg = make_solver_config(config)
                alpha, d = float(exp["alpha"]), int(exp.get("d", 2))
                std = np.sqrt(float(exp["base_variance"]))
                n_lang = int(exp.get("langevin_steps", cfg.n_outer * cfg.n_inner))
                traj = langevin_run(
                    alpha, float(exp["langevin_dt"]), cfg.M, n_lang,
                    np.random.default_rng(seed),
                    lambda n, r: std * r.standard_normal((n, d)),
                )
                ref_cloud = sample_potential_target(alpha, d, 4000, np.random.default_rng(424_242))
                stride = max(1, n_lang // cfg.n_outer)
                ks, metrics = [], []
                for k in range(1, cfg.n_outer + 1):
                    cloud = traj[min(k * stride, n_lang)]
                    ks.append(k)
                    metrics.append(w1_distance(cloud, ref_cloud, rng=np.random.default_rng(1), cap=2000, repeats=2))
            for k, m in zip(ks, metrics):
                rows.append((method, k, seed, float(m)))
        vals = [m for mth, _, _, m in rows if mth == method]
        summary[method] = {"terminal_metric": vals[-1]}

    with open(os.path.join(out_dir, "compare.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "k", "trial", "metric"])
        for row in rows:
            w.writerow([row[0], row[1], row[2], f"{row[3]:.12g}"])

    series = []
    for method in methods:
        by_k = {}
        for mth, k, _, m in rows:
            if mth == method:
                by_k.setdefault(k, []).append(m)
        ks = sorted(by_k)
        series.append(Series(method, ks, [float(np.mean(by_k[k])) for k in ks]))
    metric_name = "w1" if kind == "bayes-sampling" else "log_gap"
    line_chart(series, os.path.join(out_dir, "compare.svg"), title=f"{kind} comparison",
               xlabel="outer iteration k", ylabel=metric_name, logy=(metric_name == "w1"))
    return _finish(out_dir, {"kind": kind, "methods": summary, "ok": True})


def cmd_verify(config, threads):
    """Simplex-lab bound reports for the convergence guarantees."""
    out_dir = _ensure_out(config)
    exp = config["experiment"]
    g = int(exp.get("grid", 20))
    atoms = np.linspace(-3.0, 3.0, g)[:, None]
    target = GridKLTarget(atoms, lambda a: 0.5 * (a**2).sum(axis=1))
    rho0 = SimplexDistribution.uniform(atoms)
    report = {"checks": {}}

    # continuous-flow decay (exponential contraction of KL to target)
    times, traj = integrate_klgf(target, rho0, dt=1e-3, t_final=5.0)
    d_start = kl_divergence(traj[len(traj) // 10], target.pi)
    d_end = kl_divergence(traj[-1], target.pi)
    t_span = times[-1] - times[len(traj) // 10]
    rate = (np.log(d_start) - np.log(d_end)) / t_span
    report["checks"]["theorem1_flow_decay"] = {"passed": bool(rate >= 0.5 * 0.95), "rate": rate}

    rows, _ = verify_theorem2(target, rho0, tau=1.0, n_steps=30)
    report["checks"]["theorem2_geometric"] = {
        "passed": bool(all(r.satisfied for r in rows)),
        "bounds": [[r.k, r.lhs, r.rhs] for r in rows],
    }

    rng = np.random.default_rng(0)
    X = rng.standard_normal((int(exp.get("n", 50)), 1)) * 1.3
    npmle = GridNPMLE(Dataset(X), GaussianLocationKernel(1), atoms)
    from .simplex import run_iklpd

    ref_traj, _ = run_iklpd(npmle, rho0, 1.0, 400)
    rows2, _ = verify_theorem2(npmle, rho0, tau=1.0, n_steps=int(exp.get("n_steps", 100)), rho_star=ref_traj[-1])
    report["checks"]["theorem2_sublinear"] = {"passed": bool(all(r.satisfied for r in rows2))}

    c_geo = fit_theorem4_constant(target, rho0, tau=1.0, n_steps=20, regime="geometric", eps=0.5, kappa=0.1)
    rows4g, _, _ = verify_theorem4(target, rho0, tau=1.0, n_steps=40, regime="geometric", eps=0.5, kappa=0.1, c_const=c_geo)
    c_poly = fit_theorem4_constant(target, rho0, tau=1.0, n_steps=20, regime="polynomial", eps=0.05, alpha=1.0)
    rows4p, _, _ = verify_theorem4(target, rho0, tau=1.0, n_steps=40, regime="polynomial", eps=0.05, alpha=1.0, c_const=c_poly)
    report["checks"]["theorem4_geometric"] = {"passed": bool(all(r.satisfied for r in rows4g)), "c": c_geo}
    report["checks"]["theorem4_polynomial"] = {"passed": bool(all(r.satisfied for r in rows4p)), "c": c_poly}

    rows5, _, l_sq = verify_theorem5(npmle, rho0, tau=1.0, m=5, n_steps=50, n_trials=5, rng=np.random.default_rng(1))
    report["checks"]["theorem5_stochastic"] = {"passed": bool(all(r.satisfied for r in rows5)), "l_sq": l_sq}

    slacks = []
    prng = np.random.default_rng(2)
    for functional in (target, npmle):
        stepped, _ = implicit_step_exact(functional, rho0, tau=2.0, eps_inner=1e-12)
        for _ in range(20):
            probe_w = np.maximum(prng.dirichlet(np.ones(g)), 1e-12)
            probe = rho0.replace(probe_w / probe_w.sum())
            slacks.append(lemma_a1_slack(functional, rho0, stepped, 2.0, probe))
    report["checks"]["lemma_a1"] = {"passed": bool(min(slacks) >= -1e-8), "min_slack": float(min(slacks))}

    report["ok"] = all(c["passed"] for c in report["checks"].values())
    return _finish(out_dir, report)


def _step_size_trial(config, functional, flow_factory, tau, gamma, seed):
    overrides = dict(tau=float(tau), beta2=1.0)
    if gamma is not None:
        overrides["gamma"] = float(gamma)
    cfg = make_solver_config(config, **overrides)
    flow = flow_factory(seed)
    _, records = solve_algorithm1(functional, flow, cfg, np.random.default_rng(seed), seed=seed)
    converged = all(r.converged for r in records)
    mean_inner = float(np.mean([r.inner_iters for r in records]))
    outer = len(records)
    return mean_inner, outer, converged


STUDY_FIELDS = ["tau", "gamma", "mean_inner", "mean_outer", "converged", "n_trials"]


def cmd_study(config, threads):
    out_dir = _ensure_out(config)
    kind = config["kind"]
    if kind == "step-size-study":
        functional, flow_factory, _ = build_problem(config, config["seeds"][0])
        taus = config["experiment"]["taus"]
        gammas = config["experiment"].get("gammas")
        if gammas is not None and len(gammas) != len(taus):
            raise ConfigError("experiment.gammas must have one learning rate per tau")
        if gammas is None:
            gammas = [None] * len(taus)
        table = []
        for tau, gamma in zip(taus, gammas):
            results = []
            with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [
                    pool.submit(_step_size_trial, config, functional, flow_factory, tau, gamma, seed)
                    for seed in config["seeds"]
                ]
                results = [f.result() for f in futures]
            converged = all(r[2] for r in results)
            table.append(
                dict(
                    tau=float(tau),
                    gamma=float(gamma) if gamma is not None else float(config["solver"]["gamma"]),
                    mean_inner=float(np.mean([r[0] for r in results])),
                    mean_outer=float(np.mean([r[1] for r in results])),
                    converged=converged,
                    n_trials=len(results),
                )
            )
        with open(os.path.join(out_dir, "study.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=STUDY_FIELDS)
            w.writeheader()
            for row in table:
                w.writerow(row)
        plotted = [row for row in table if row["converged"]]
        if plotted:
            line_chart(
                [
                    Series("mean inner iterations", [r["tau"] for r in plotted], [r["mean_inner"] for r in plotted]),
                    Series("mean outer iterations", [r["tau"] for r in plotted], [r["mean_outer"] for r in plotted]),
                ],
                os.path.join(out_dir, "study.svg"),
                title="step-size study",
                xlabel="tau",
                ylabel="iterations",
            )
        report = {"kind": kind, "table": table, "ok": True}
        return _finish(out_dir, report)

    if kind == "distill-study":
        exp = config["experiment"]
        functional, flow_factory, param_dim = build_problem(
            {**config, "kind": "npmle-location"}, config["seeds"][0]
        )
        ref = reference_loss({**config, "kind": "npmle-location"}, functional, flow_factory, out_dir, config["seeds"][0])
        seed = config["seeds"][0]
        cfg = make_solver_config(config)
        flow_full = flow_factory(seed)
        flow_full, rec_full = solve_algorithm1(functional, flow_full, cfg, np.random.default_rng(seed), seed=seed)
        base = GaussianBase(param_dim, variance=float(exp["base_variance"]))
        cc = ComposeConfig(
            k2=int(exp["k2"]), k1=int(exp["k1"]), k0=int(exp["k0"]), n3=int(exp["n3"]),
            gamma_prime=float(exp["gamma_prime"]), epsilon=float(exp["epsilon"]), width=int(exp["width"]),
        )
        cfg2 = make_solver_config(config)
        model, rec_comp = solve_algorithm2(functional, FlowModel([], base), cfg2, cc, np.random.default_rng(seed), seed=seed)
        with open(os.path.join(out_dir, "distill.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "k", "loss", "inner_iters", "stop_reason"])
            for r in rec_full:
                w.writerow(["retrain-full", r.k, f"{r.loss:.12g}", r.inner_iters, r.stop_reason])
            for r in rec_comp:
                w.writerow(["compose-distill", r.k, f"{r.loss:.12g}", r.inner_iters, r.stop_reason])
        gap_full = rec_full[-1].loss - ref
        gap_comp = rec_comp[-1].loss - ref
        line_chart(
            [
                Series("retrain-full", [r.k for r in rec_full], [r.loss for r in rec_full]),
                Series("compose-distill", [r.k for r in rec_comp], [r.loss for r in rec_comp]),
            ],
            os.path.join(out_dir, "distill.svg"),
            title="distillation study",
            xlabel="outer iteration k",
            ylabel="NLL",
        )
        report = {
            "kind": kind,
            "terminal_loss_full": rec_full[-1].loss,
            "terminal_loss_composed": rec_comp[-1].loss,
            "gap_full": gap_full,
            "gap_composed": gap_comp,
            "ok": True,
        }
        return _finish(out_dir, report)
    raise ConfigError(f"kind {kind!r} is not a study")


def build_parser():
    parser = argparse.ArgumentParser(prog="klflow", description="KL proximal descent experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "compare", "verify", "study"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--seed", type=int, action="append", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--profile", choices=("paper", "desk"), default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--strict", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = args.threads or int(os.environ.get("KLFLOW_THREADS", "1"))
    try:
        config = load_config(
            args.config, profile=args.profile, seeds=args.seed, out=args.out, strict=args.strict
        )
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    dispatch = {"run": cmd_run, "compare": cmd_compare, "verify": cmd_verify, "study": cmd_study}
    try:
        return dispatch[args.command](config, threads)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # solver failure: keep partial artifacts
        print(f"run failed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
