"""Objective functionals over distributions, evaluated on particle clouds.

Two families: negative mixture log-likelihoods (NPMLE) with Gaussian
location or location-scale kernels, and potential-plus-entropy objectives
whose minimizer is a target density known up to a constant. Also the
proximal subproblem loss and pointwise first-variation evaluators.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = np.log(2.0 * np.pi)


class Dataset:
    """n x d_obs observation matrix."""

    def __init__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] < 1 or not np.all(np.isfinite(X)):
            raise ValueError("dataset must be nonempty and finite")
        self.X = X

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d_obs(self):
        return self.X.shape[1]

    def subsample(self, m, rng):
        """Mini-batch without replacement."""
        if not 1 <= m <= self.n:
            raise ValueError("mini-batch size out of range")
        idx = rng.choice(self.n, size=m, replace=False)
        return Dataset(self.X[idx])


class GaussianLocationKernel:
    """p(x | theta) = N(theta, I_d)."""

    def __init__(self, d):
        self.d = d
        self.param_dim = d

    def log_kernel(self, X, particles):
        """(M, n) matrix of log p(X_i | theta_j)."""
        sq = (
            (particles**2).sum(axis=1)[:, None]
            - 2.0 * particles @ X.T
            + (X**2).sum(axis=1)[None, :]
        )
        return -0.5 * sq - 0.5 * self.d * LOG_2PI

    def log_kernel_t(self, X, particles):
        xs2 = Tensor((X**2).sum(axis=1)[None, :])
        xt = Tensor(X.T)
        ps2 = ad.tsum(ad.square(particles), axis=1, keepdims=True)
        cross = ad.matmul(particles, xt)
        sq = ad.add(ad.add(ps2, cross * (-2.0)), xs2)
        return ad.add(sq * (-0.5), Tensor(-0.5 * self.d * LOG_2PI))


class GaussianLocationScaleKernel:
    """p(x | (mu, log sigma^2)) = N(mu, diag sigma^2).

    Particles live in flow coordinates (mu, log sigma^2); the exp map to
    sigma^2 is applied here at likelihood evaluation.
    """

    def __init__(self, d):
        self.d = d
        self.param_dim = 2 * d

    def _split(self, particles):
        return particles[:, : self.d], particles[:, self.d :]

    def log_kernel(self, X, particles):
        mu, u = self._split(particles)
        prec = np.exp(-u)  # 1 / sigma^2
        quad = (
            prec @ (X**2).T
            - 2.0 * (prec * mu) @ X.T
            + ((prec * mu * mu).sum(axis=1))[:, None]
        )
        return -0.5 * (quad + u.sum(axis=1)[:, None]) - 0.5 * self.d * LOG_2PI

    def log_kernel_t(self, X, particles):
        d = self.d
        sel_mu = np.eye(2 * d)[:, :d]
        sel_u = np.eye(2 * d)[:, d:]
        mu = ad.matmul(particles, Tensor(sel_mu))
        u = ad.matmul(particles, Tensor(sel_u))
        prec = ad.exp(-u)
        a = ad.matmul(prec, Tensor((X**2).T))
        b = ad.matmul(ad.mul(prec, mu), Tensor(X.T))
        c = ad.tsum(ad.mul(prec, ad.square(mu)), axis=1, keepdims=True)
        quad = ad.add(ad.add(a, b * (-2.0)), c)
        usum = ad.tsum(u, axis=1, keepdims=True)
        return ad.add(ad.add(quad, usum) * (-0.5), Tensor(-0.5 * d * LOG_2PI))


class PotentialTarget:
    """Target pi(theta) ~ exp(-V(theta)) with V = ||theta||^(2 alpha)/(2 alpha)."""

    def __init__(self, alpha):
        if alpha < 1:
            raise ValueError("alpha must be >= 1")
        self.alpha = float(alpha)

    def potential(self, theta):
        r2 = (np.asarray(theta, dtype=float) ** 2).sum(axis=-1)
        return r2**self.alpha / (2.0 * self.alpha)

    def potential_t(self, theta):
        r2 = ad.tsum(ad.square(theta), axis=1)
        if self.alpha == 1.0:
            return r2 * 0.5
        return ad.exp(ad.log(r2) * self.alpha) * (1.0 / (2.0 * self.alpha))


def npmle_loss_np(particles, dataset, kernel):
    """-(1/n) sum_i log((1/M) sum_j p(X_i | theta_j)), log-sum-exp stabilized."""
    lk = kernel.log_kernel(dataset.X, np.asarray(particles, dtype=float))
    M = lk.shape[0]
    ll = logsumexp(lk, axis=0) - np.log(M)
    if not np.all(np.isfinite(ll)):
        i = int(np.flatnonzero(~np.isfinite(ll))[0])
        raise FloatingPointError(f"mixture likelihood underflow at observation {i}")
    return -ll.mean()


def npmle_loss_t(particles, dataset, kernel):
    """Differentiable NPMLE loss; particles is an (M, p) Tensor."""
    lk = kernel.log_kernel_t(dataset.X, particles)  # (M, n)
    M = lk.data.shape[0]
    m = lk.data.max(axis=0, keepdims=True)  # detached shift
    e = ad.exp(ad.add(lk, Tensor(-m)))
    s = ad.tsum(e, axis=0)
    ll = ad.add(ad.log(s), Tensor(m[0] - np.log(M)))
    return -ad.tmean(ll)


def kl_target_loss_t(particles, log_rho, target):
    """(1/M) sum_j [V(theta_j) + log rho(theta_j)]; equals F(rho) up to
    Monte Carlo error and the unknown log-partition constant."""
    if log_rho is None:
        raise ValueError("kl_target_loss requires per-particle log-densities")
    return ad.add(ad.tmean(target.potential_t(particles)), ad.tmean(log_rho))


def kl_target_loss_np(particles, log_rho, target):
    if log_rho is None:
        raise ValueError("kl_target_loss requires per-particle log-densities")
    return float(np.mean(target.potential(particles)) + np.mean(log_rho))


def first_variation_npmle(eval_points, dataset, particles, kernel):
    """delta L_n / delta rho at each eval point:
    -(1/n) sum_i p(X_i|theta) / ((1/M) sum_j p(X_i|theta_j))."""
    lk = kernel.log_kernel(dataset.X, np.asarray(particles, dtype=float))
    M = lk.shape[0]
    log_denom = logsumexp(lk, axis=0) - np.log(M)  # (n,)
    if not np.all(np.isfinite(log_denom)):
        i = int(np.flatnonzero(~np.isfinite(log_denom))[0])
        raise FloatingPointError(f"mixture denominator underflow at observation {i}")
    lk_eval = kernel.log_kernel(dataset.X, np.asarray(eval_points, dtype=float))
    ratio = np.exp(lk_eval - log_denom[None, :])
    return -ratio.mean(axis=1)


def sample_variance(values):
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("variance estimator needs at least 2 points")
    return float(values.var(ddof=1))


def fv_variance(particles, dataset, kernel):
    """Sample variance of the NPMLE first variation over the particles."""
    fv = first_variation_npmle(particles, dataset, particles, kernel)
    return sample_variance(fv)


def subproblem_fv_variance(particles, dataset, kernel, log_ratio, tau):
    """Variance of the subproblem first variation: FV + (1/tau) log(rho/rho_prev)."""
    fv = first_variation_npmle(particles, dataset, particles, kernel)
    return sample_variance(fv + np.asarray(log_ratio, dtype=float) / tau)


class NPMLEFunctional:
    """Averaged negative mixture log-likelihood over a dataset."""

    needs_log_rho = False

    def __init__(self, dataset, kernel):
        self.dataset = dataset
        self.kernel = kernel

    def loss_t(self, particles, log_rho=None):
        return npmle_loss_t(particles, self.dataset, self.kernel)

    def loss_np(self, particles, log_rho=None):
        return npmle_loss_np(particles, self.dataset, self.kernel)

    def fv(self, eval_points, particles, log_rho=None):
        return first_variation_npmle(eval_points, self.dataset, particles, self.kernel)

    def fv_variance(self, particles, log_rho=None):
        return fv_variance(particles, self.dataset, self.kernel)

    def minibatch(self, m, rng):
        return NPMLEFunctional(self.dataset.subsample(m, rng), self.kernel)


class KLTargetFunctional:
    """F(rho) = int V d rho + int rho log rho, target known up to a constant."""

    needs_log_rho = True

    def __init__(self, target):
        self.target = target

    def loss_t(self, particles, log_rho=None):
        return kl_target_loss_t(particles, log_rho, self.target)

    def loss_np(self, particles, log_rho=None):
        return kl_target_loss_np(particles, log_rho, self.target)

    def fv(self, eval_points, particles, log_rho=None):
        # delta F / delta rho = V + log rho + 1; log_rho here is at eval points
        if log_rho is None:
            raise ValueError("KL-target first variation needs log-densities")
        return self.target.potential(eval_points) + np.asarray(log_rho) + 1.0

    def fv_variance(self, particles, log_rho=None):
        return sample_variance(self.fv(particles, particles, log_rho))


class ZeroFunctional:
    """F identically zero; the proximal step alone fixes the warm start."""

    needs_log_rho = False

    def loss_t(self, particles, log_rho=None):
        return ad.tmean(particles) * 0.0

    def loss_np(self, particles, log_rho=None):
        return 0.0

    def fv(self, eval_points, particles, log_rho=None):
        return np.zeros(len(eval_points))

    def fv_variance(self, particles, log_rho=None):
        return 0.0


class SubproblemSpec:
    """One proximal step: minimize F(T_# rho0) + (1/tau) KL(T_# rho0 || prev)."""

    def __init__(self, functional, prev_flow, tau, M):
        if tau <= 0:
            raise ValueError("tau must be positive")
        if M < 2:
            raise ValueError("need at least 2 particles")
        self.functional = functional
        self.prev_flow = prev_flow
        self.tau = tau
        self.M = M


def subproblem_loss_t(spec, flow, base_points, base_logq=None):
    """Differentiable subproblem objective on fixed base draws.

    log rho_k is pathwise (retained base log-density minus the forward
    log-det); log rho_{k-1} runs the frozen flow's inverse. `base_logq`
    overrides the base log-density at the retained points (used when a
    frozen prefix has already been folded into them).
    Returns (loss Tensor, diagnostics dict).
    """
    z = Tensor(np.asarray(base_points, dtype=float))
    theta, logdet = flow.forward_t(z)
    if base_logq is None:
        base_logq = flow.base.log_density(base_points)
    log_rho_k = ad.add(Tensor(base_logq), -logdet)
    log_rho_prev = spec.prev_flow.log_density_t(theta)
    log_ratio = ad.add(log_rho_k, -log_rho_prev)
    kl_term = ad.tmean(log_ratio) * (1.0 / spec.tau)
    f_term = spec.functional.loss_t(theta, log_rho=log_rho_k)
    loss = ad.add(f_term, kl_term)
    diag = {
        "theta": theta,
        "log_rho_k": log_rho_k,
        "log_ratio": log_ratio,
        "f_term": f_term,
        "kl_term": kl_term,
    }
    return loss, diag
