"""Outer/inner loop of implicit KL proximal descent with coupling flows.

The outer loop takes proximal steps rho_k = argmin F + (1/tau_k) KL(. || rho_{k-1});
each step is solved by Adam on the flow parameters with the previous flow
frozen as the prox anchor. Variants: grow-and-retrain (warm start the full
flow), composition of short flows with teacher-student compression, and a
mini-batch stochastic version.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .flows import FlowModel, compose, identity_init, serialize
from .functionals import SubproblemSpec, subproblem_loss_t


@dataclass
class SolverConfig:
    tau: float = 5.0
    beta2: float = 1.15  # step-size growth: tau_k = tau * beta2^(k-1)
    gamma: float = 1e-4
    beta1: float = 0.912  # learning-rate decay: gamma_k = gamma * beta1^(k-1)
    n_outer: int = 25
    n_inner: int = 1000
    M: int = 3000
    grad_norm_tol: float = 1e-4
    patience: int = 200
    zeta: float = 0.05  # outer first-variation variance threshold
    burn_in: int = 2
    lr_schedule: str = "geometric"  # geometric | harmonic | inverse27
    zeta_k_scale: float = 0.07  # zeta_k = zeta_k_scale * 20 / (19 + k)
    use_inner_fv_stopping: bool = False
    use_outer_fv_stopping: bool = False
    resample_base: bool = False
    track: str = "grad_norm"  # patience bookkeeping target: grad_norm | loss
    strict: bool = False
    keep_checkpoints: bool = False

    def learning_rate(self, k):
        if self.lr_schedule == "geometric":
            return self.gamma * self.beta1 ** (k - 1)
        if self.lr_schedule == "harmonic":
            return 20.0 * self.gamma / (19.0 + k)
        if self.lr_schedule == "inverse27":
            return self.gamma / (1.0 + k / 27.0)
        raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def step_size(self, k):
        return self.tau * self.beta2 ** (k - 1)

    def zeta_k(self, k):
        return self.zeta_k_scale * 20.0 / (19.0 + k)


@dataclass
class ComposeConfig:
    k2: int = 4  # short-flow length appended per outer iteration
    k1: int = 40  # max length before compression
    k0: int = 20  # compressed student length
    n3: int = 3000  # max compression iterations
    gamma_prime: float = 1e-5
    epsilon: float = 1e-4
    width: int = 256

    def __post_init__(self):
        if self.k0 > self.k1 or self.k2 < 1:
            raise ValueError("require k0 <= k1 and k2 >= 1")


@dataclass
class StochasticConfig:
    m: int = 500
    tau_schedule: str = "constant"  # constant | sqrt | lambda
    lam: float = 1.0

    def step_size(self, base_tau, k):
        if self.tau_schedule == "constant":
            return base_tau
        if self.tau_schedule == "sqrt":
            return base_tau / np.sqrt(k + 1.0)
        if self.tau_schedule == "lambda":
            return 2.0 / (self.lam * (k + 1.0))
        raise ValueError(f"unknown tau schedule {self.tau_schedule!r}")


@dataclass
class RunRecord:
    k: int
    loss: float
    kl_step: float
    fv_var: float
    inner_iters: int
    stop_reason: str
    wall_ms: float
    seed: int
    tau_k: float = 0.0
    converged: bool = True


RUN_RECORD_FIELDS = ["k", "loss", "kl_step", "fv_var", "inner_iters", "stop_reason", "wall_ms", "seed"]


def write_run_records(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_RECORD_FIELDS)
        for r in records:
            w.writerow(
                [r.k, f"{r.loss:.12g}", f"{r.kl_step:.12g}", f"{r.fv_var:.12g}", r.inner_iters, r.stop_reason, f"{r.wall_ms:.3f}", r.seed]
            )


def stopping_check(window, grad_norm_tol, patience, zeta_k=None, zeta=None, burn_in=2, outer_k=None):
    """First satisfied stop criterion over a window of inner diagnostics.

    `window` is a list of dicts with keys grad_norm and optionally fv_var.
    Returns (stop, reason); reason in {grad_norm, patience, fv_variance,
    outer_fv, none}.
    """
    if not window:
        raise ValueError("stopping_check needs a nonempty window")
    last = window[-1]
    if last["grad_norm"] < grad_norm_tol:
        return True, "grad_norm"
    if len(window) > patience:
        best = min(w["grad_norm"] for w in window[: -patience])
        if all(w["grad_norm"] >= best for w in window[-patience:]):
            return True, "patience"
    if zeta_k is not None and "fv_var" in last and last["fv_var"] <= zeta_k:
        return True, "fv_variance"
    if (
        zeta is not None
        and outer_k is not None
        and outer_k > burn_in
        and "fv_var" in last
        and last["fv_var"] <= zeta
    ):
        return True, "outer_fv"
    return False, "none"


class InnerDivergence(RuntimeError):
    pass


def _grad_norm(grads):
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def _fv_variance(functional, theta, log_rho):
    try:
        return functional.fv_variance(theta, log_rho=log_rho)
    except ValueError:
        return float("nan")


def _run_inner(flow, spec, base_points, config, k, optimizer, base_logq=None):
    """Adam on the subproblem until an early-stop criterion fires.

    Returns (diagnostics of last evaluation, inner_iters, stop_reason).
    """
    params = flow.trainable_parameters()
    lr = config.learning_rate(k)
    zeta_k = config.zeta_k(k) if config.use_inner_fv_stopping else None
    best_track = np.inf
    stall = 0
    stop_reason = "max_inner"
    r = 0
    diag_np = {}
    for r in range(1, config.n_inner + 1):
        ad.zero_grads(params)
        try:
            with Tape() as tape:
                loss, diag = subproblem_loss_t(spec, flow, base_points, base_logq=base_logq)
                tape.backward(loss)
        except FloatingPointError as err:
            raise InnerDivergence(f"inner divergence at outer {k}, inner {r}: {err}") from err
        grads = ad.leaf_grads(params)
        gnorm = _grad_norm(grads)
        loss_val = float(loss.data)
        diag_np = {
            "theta": diag["theta"].data,
            "log_rho_k": diag["log_rho_k"].data,
            "log_ratio": diag["log_ratio"].data,
            "f_term": float(diag["f_term"].data),
            "kl_term": float(diag["kl_term"].data),
            "loss": loss_val,
            "grad_norm": gnorm,
        }
        if not np.isfinite(loss_val):
            raise InnerDivergence(f"inner divergence at outer {k}, inner {r}: loss not finite")
        optimizer.step(grads, lr)
        if gnorm < config.grad_norm_tol:
            stop_reason = "grad_norm"
            break
        track = gnorm if config.track == "grad_norm" else loss_val
        if track < best_track:
            best_track = track
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                stop_reason = "patience"
                break
        if zeta_k is not None:
            from .functionals import subproblem_fv_variance

            if hasattr(spec.functional, "dataset"):
                v = subproblem_fv_variance(
                    diag_np["theta"],
                    spec.functional.dataset,
                    spec.functional.kernel,
                    diag_np["log_ratio"],
                    spec.tau,
                )
            else:
                v = _fv_variance(spec.functional, diag_np["theta"], diag_np["log_rho_k"])
            diag_np["sub_fv_var"] = v
            if v <= zeta_k:
                stop_reason = "fv_variance"
                break
    return diag_np, r, stop_reason


def _outer_metrics(functional, diag_np, config, k, seed, inner_iters, stop_reason, t0, tau_k, converged=True):
    fv_var = _fv_variance(functional, diag_np["theta"], diag_np["log_rho_k"])
    return RunRecord(
        k=k,
        loss=diag_np["f_term"],
        kl_step=float(np.mean(diag_np["log_ratio"])),
        fv_var=fv_var,
        inner_iters=inner_iters,
        stop_reason=stop_reason,
        wall_ms=1000.0 * (time.perf_counter() - t0),
        seed=seed,
        tau_k=tau_k,
        converged=converged,
    )


def solve_algorithm1(functional, flow, config, rng, seed=0, subsample=None, tau_override=None, checkpoints=None):
    """Grow-and-retrain IKLPD: warm-start the full flow each outer step.

    `subsample(k, rng)` optionally returns the functional for iteration k
    (mini-batch hook); `tau_override(k)` replaces the geometric schedule.
    Returns (flow, [RunRecord]).
    """
    records = []
    base_points = flow.base.sample(config.M, rng)
    for k in range(1, config.n_outer + 1):
        t0 = time.perf_counter()
        if config.resample_base and k > 1:
            base_points = flow.base.sample(config.M, rng)
        func_k = functional if subsample is None else subsample(k, rng)
        tau_k = config.step_size(k) if tau_override is None else tau_override(k)
        anchor = flow.copy(trainable=False)
        spec = SubproblemSpec(func_k, anchor, tau_k, config.M)
        flow.set_trainable(True)
        optimizer = Adam(flow.trainable_parameters())
        diag_np, inner_iters, stop_reason = _run_inner(flow, spec, base_points, config, k, optimizer)
        converged = not (config.use_inner_fv_stopping and stop_reason == "max_inner" and k > config.burn_in)
        if not converged and config.strict:
            raise InnerDivergence(f"inner loop failed to converge at outer {k} (tau={tau_k})")
        rec = _outer_metrics(functional, diag_np, config, k, seed, inner_iters, stop_reason, t0, tau_k, converged)
        records.append(rec)
        if checkpoints is not None:
            checkpoints.append(serialize(flow))
        if config.use_outer_fv_stopping and k > config.burn_in and rec.fv_var <= config.zeta:
            rec.stop_reason = rec.stop_reason + "+outer_fv"
            break
    return flow, records


def solve_stochastic(functional, flow, config, stochastic_config, rng, seed=0):
    """Stochastic IKLPD: fresh mini-batch each outer iteration.

    With m = n the hook is a no-op and the run reduces exactly to
    solve_algorithm1 under the same seed.
    """
    n = functional.dataset.n
    m = stochastic_config.m
    if not 1 <= m <= n:
        raise ValueError("mini-batch size out of range")
    subsample = None if m == n else (lambda k, r: functional.minibatch(m, r))
    tau_override = (
        None
        if stochastic_config.tau_schedule == "constant"
        else (lambda k: stochastic_config.step_size(config.tau, k))
    )
    return solve_algorithm1(
        functional, flow, config, rng, seed=seed, subsample=subsample, tau_override=tau_override
    )


def distill(teacher_out, base_points, student, config, seed_rng):
    """Teacher-student compression: fit the student flow's forward map to
    the teacher outputs on the retained base points (mean squared L2)."""
    params = student.trainable_parameters()
    optimizer = Adam(params)
    target = Tensor(np.asarray(teacher_out, dtype=float))
    best = np.inf
    best_state = serialize(student)
    loss_val = np.inf
    for _ in range(config.n3):
        ad.zero_grads(params)
        with Tape() as tape:
            out, _ = student.forward_t(Tensor(base_points))
            loss = ad.tmean(ad.tsum(ad.square(ad.add(out, -target)), axis=1))
            tape.backward(loss)
        loss_val = float(loss.data)
        if loss_val < best:
            best = loss_val
            best_state = serialize(student)
        if loss_val <= config.epsilon:
            return student, loss_val, True
        optimizer.step(ad.leaf_grads(params), config.gamma_prime)
    from .flows import deserialize

    student = deserialize(best_state)
    warnings.warn(
        f"distillation stopped at L2 loss {best:.3g} > epsilon {config.epsilon:.3g}; keeping best student"
    )
    return student, best, False


def solve_algorithm2(functional, flow, config, compose_config, rng, seed=0):
    """IKLPD by composing identity-initialized short flows, compressing the
    stack into a fixed-length student whenever it grows past k1 blocks."""
    records = []
    base = flow.base
    base_points = base.sample(config.M, rng)
    log_rho0 = base.log_density(base_points)
    model = flow.copy(trainable=False)
    for k in range(1, config.n_outer + 1):
        t0 = time.perf_counter()
        if config.resample_base and k > 1:
            base_points = base.sample(config.M, rng)
            log_rho0 = base.log_density(base_points)
        tau_k = config.step_size(k)
        anchor = model.copy(trainable=False)
        short = identity_init(base.dim, compose_config.k2, compose_config.width, rng)
        suffix = FlowModel(short, base)
        # the frozen prefix is constant across inner steps: fold it into the
        # retained base log-density once
        z_prime, logdet_prefix = anchor.forward_np(base_points)
        base_logq = log_rho0 - logdet_prefix
        spec = SubproblemSpec(functional, anchor, tau_k, config.M)
        optimizer = Adam(suffix.trainable_parameters())
        diag_np, inner_iters, stop_reason = _run_inner(
            suffix, spec, z_prime, config, k, optimizer, base_logq=base_logq
        )
        model = FlowModel(anchor.blocks + suffix.blocks, base)
        rec = _outer_metrics(functional, diag_np, config, k, seed, inner_iters, stop_reason, t0, tau_k)
        records.append(rec)
        if len(model.blocks) > compose_config.k1:
            teacher_out, _ = model.forward_np(base_points)
            student = FlowModel(identity_init(base.dim, compose_config.k0, compose_config.width, rng), base)
            student, l2, ok = distill(teacher_out, base_points, student, compose_config, rng)
            rec.stop_reason += "+distilled" if ok else "+distill_warn"
            model = student
        if config.use_outer_fv_stopping and k > config.burn_in and rec.fv_var <= config.zeta:
            rec.stop_reason += "+outer_fv"
            break
    return model, records
