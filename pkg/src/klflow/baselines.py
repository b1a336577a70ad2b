"""Particle Langevin baseline, distance metrics, and synthetic data.

Includes the unadjusted Langevin update for potentials ||theta||^(2 alpha)
/(2 alpha), exact-assignment W1 on (sub-sampled) particle clouds, NLL-gap
series, the two-moons mixing distribution, mixture data generation, and an
exact radial inverse-CDF sampler for the potential family targets.
"""

from __future__ import annotations

import csv

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import kstest

from .functionals import Dataset

W1_SUBSAMPLE_CAP = 512
W1_REPEATS = 8


def langevin_run(alpha, dt, n_particles, n_steps, rng, init_sampler):
    """Unadjusted Langevin for pi ~ exp(-||theta||^(2 alpha)/(2 alpha)):

        theta <- theta - dt ||theta||^(2 alpha - 2) theta + sqrt(2 dt) u.

    Returns the trajectory as a list of (M, d) clouds; raises on particle
    blow-up (the expected failure mode of too-large dt).
    """
    if dt <= 0 or alpha < 1:
        raise ValueError("need dt > 0 and alpha >= 1")
    theta = np.asarray(init_sampler(n_particles, rng), dtype=float)
    traj = [theta.copy()]
    for _ in range(n_steps):
        norm = np.linalg.norm(theta, axis=1, keepdims=True)
        drift = norm ** (2 * alpha - 2) * theta
        theta = theta - dt * drift + np.sqrt(2 * dt) * rng.standard_normal(theta.shape)
        if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) > 1e8:
            raise FloatingPointError("Langevin particles diverged; reduce dt")
        traj.append(theta.copy())
    return traj


def _assignment_w1(a, b):
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def w1_distance(cloud_a, cloud_b, rng=None, cap=W1_SUBSAMPLE_CAP, repeats=W1_REPEATS):
    """W1 between empirical clouds by exact optimal assignment.

    Clouds larger than `cap` are sub-sampled `repeats` times and the
    assignment costs averaged.
    """
    a = np.atleast_2d(np.asarray(cloud_a, dtype=float))
    b = np.atleast_2d(np.asarray(cloud_b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty cloud")
    k = min(a.shape[0], b.shape[0], cap)
    if a.shape[0] == b.shape[0] == k:
        return _assignment_w1(a, b)
    rng = rng if rng is not None else np.random.default_rng(0)
    vals = []
    for _ in range(repeats):
        ia = rng.choice(a.shape[0], size=k, replace=False)
        ib = rng.choice(b.shape[0], size=k, replace=False)
        vals.append(_assignment_w1(a[ia], b[ib]))
    return float(np.mean(vals))


def nll_gap(loss_trajectory, reference_loss, floor=1e-12):
    """log(L_n(rho_k) - L_n(ref)) per iteration; negative raw gaps are
    floored and flagged (finite-sample reference noise)."""
    gaps = np.asarray(loss_trajectory, dtype=float) - reference_loss
    flagged = gaps < floor
    return np.log(np.maximum(gaps, floor)), flagged


class TwoMoonsSpec:
    """Ring of radius 2 (width 0.2) modulated by two modes at theta_1 = +-2
    (width 0.3); the unnormalized density is

        exp(-((r-2)/0.2)^2 / 2) * [exp(-((x-2)/0.3)^2 / 2)
                                   + exp(-((x+2)/0.3)^2 / 2)].
    """

    def __init__(self, radius=2.0, radial_width=0.2, mode_offset=2.0, mode_width=0.3, separation=1.0):
        if radial_width <= 0 or mode_width <= 0:
            raise ValueError("widths must be positive")
        # the mode-separation multiplier stretches ring and modes together
        self.radius = radius * separation
        self.radial_width = radial_width
        self.mode_offset = mode_offset * separation
        self.mode_width = mode_width
        self.separation = separation

    def log_unnormalized(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        r = np.linalg.norm(theta, axis=1)
        radial = -0.5 * ((r - self.radius) / self.radial_width) ** 2
        x = theta[:, 0]
        m1 = -0.5 * ((x - self.mode_offset) / self.mode_width) ** 2
        m2 = -0.5 * ((x + self.mode_offset) / self.mode_width) ** 2
        return radial + np.logaddexp(m1, m2)


def two_moons_sample(spec, n, rng, batch=4096, min_acceptance=1e-3):
    """Rejection sampling from the two-moons density with a uniform box
    proposal wide enough that the truncated tail mass is negligible."""
    half = max(spec.radius, spec.mode_offset) + 8.0 * max(spec.radial_width, spec.mode_width)
    out = []
    proposed = accepted = 0
    while sum(len(o) for o in out) < n:
        cand = rng.uniform(-half, half, size=(batch, 2))
        logp = spec.log_unnormalized(cand)
        keep = rng.uniform(size=batch) < np.exp(logp)  # log density <= 0
        proposed += batch
        accepted += int(keep.sum())
        out.append(cand[keep])
        if proposed >= 50 * batch and accepted / proposed < min_acceptance:
            raise RuntimeError(f"two-moons acceptance rate {accepted/proposed:.2e} too low for spec")
    return np.concatenate(out)[:n]


class DeltaMixing:
    """Point-mass mixing distribution (degenerate mixture)."""

    def __init__(self, location):
        self.location = np.atleast_1d(np.asarray(location, dtype=float))

    def sample(self, n, rng):
        return np.tile(self.location, (n, 1))


class TwoMoonsMixing:
    def __init__(self, spec=None):
        self.spec = spec if spec is not None else TwoMoonsSpec()

    def sample(self, n, rng):
        return two_moons_sample(self.spec, n, rng)


class LocationScaleMixing:
    """Product mixing law: locations from `location_mixing`, variances from
    independent chi-square(1) draws per coordinate. Returns (mu, sigma^2)."""

    def __init__(self, location_mixing, d):
        self.location_mixing = location_mixing
        self.d = d

    def sample(self, n, rng):
        mu = self.location_mixing.sample(n, rng)
        sigma2 = rng.chisquare(1, size=(n, self.d))
        return np.concatenate([mu, sigma2], axis=1)


def mixture_data_gen(mixing, kernel_kind, n, rng):
    """Two-stage draw: theta_i from the mixing law, X_i | theta_i from the
    Gaussian kernel. `kernel_kind`: 'location' or 'location-scale'."""
    if n < 1:
        raise ValueError("n must be >= 1")
    theta = mixing.sample(n, rng)
    if kernel_kind == "location":
        x = theta + rng.standard_normal(theta.shape)
    elif kernel_kind == "location-scale":
        d = theta.shape[1] // 2
        mu, sigma2 = theta[:, :d], theta[:, d:]
        x = mu + np.sqrt(sigma2) * rng.standard_normal(mu.shape)
    else:
        raise ValueError(f"unknown kernel kind {kernel_kind!r}")
    return Dataset(x), theta


def sample_potential_target(alpha, d, n, rng, r_max=None, grid=20_000):
    """Exact sampler for pi ~ exp(-r^(2 alpha)/(2 alpha)) in R^d via radial
    inverse-CDF (density ~ r^(d-1) exp(-r^(2 alpha)/(2 alpha))) and a
    uniform direction."""
    if r_max is None:
        r_max = (2 * alpha * 40.0) ** (1.0 / (2 * alpha))  # exp(-40) tail
    r = np.linspace(0, r_max, grid)
    logpdf = (d - 1) * np.log(np.maximum(r, 1e-300)) - r ** (2 * alpha) / (2 * alpha)
    pdf = np.exp(logpdf - logpdf.max())
    cdf = np.cumsum(pdf)
    cdf /= cdf[-1]
    u = rng.uniform(size=n)
    radii = np.interp(u, cdf, r)
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return radii[:, None] * direction


def ks_against_standard_normal(samples):
    """One-dimensional KS p-value, for degenerate-mixing sanity checks."""
    return kstest(np.asarray(samples, dtype=float).ravel(), "norm").pvalue


def cloud_to_csv(cloud, path):
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([cloud.shape[1]])
        for row in cloud:
            w.writerow([f"{v:.17g}" for v in row])


def cloud_from_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    d = int(rows[0][0])
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    if data.shape[1] != d:
        raise ValueError("column count does not match header dimension")
    return data
