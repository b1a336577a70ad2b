import numpy as np
import pytest
from scipy.stats import kstest

from klflow.baselines import (
    DeltaMixing,
    LocationScaleMixing,
    TwoMoonsMixing,
    TwoMoonsSpec,
    cloud_from_csv,
    cloud_to_csv,
    ks_against_standard_normal,
    langevin_run,
    mixture_data_gen,
    nll_gap,
    sample_potential_target,
    two_moons_sample,
    w1_distance,
)


def test_langevin_validation(rng):
    with pytest.raises(ValueError):
        langevin_run(2.0, -0.1, 10, 5, rng, lambda n, r: r.standard_normal((n, 2)))


def test_langevin_gaussian_target_moments(rng):
    """alpha = 1 makes the target N(0, I); long-run second moment should be
    close to 1 up to O(dt) discretization bias."""
    traj = langevin_run(1.0, 1e-2, 2000, 600, rng, lambda n, r: r.standard_normal((n, 2)))
    late = np.concatenate(traj[-50:])
    assert np.mean(late**2) == pytest.approx(1.0, abs=0.05)


def test_langevin_divergence_raises(rng):
    with pytest.raises(FloatingPointError, match="diverged"):
        langevin_run(3.0, 0.5, 50, 200, rng, lambda n, r: 3.0 + r.standard_normal((n, 2)))


def test_w1_identical_clouds_is_zero(rng):
    cloud = rng.standard_normal((100, 2))
    assert w1_distance(cloud, cloud) == 0.0


def test_w1_translation(rng):
    cloud = rng.standard_normal((80, 2))
    shifted = cloud + np.array([3.0, 0.0])
    assert w1_distance(cloud, shifted) == pytest.approx(3.0, abs=1e-12)


def test_w1_two_points():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 1.0], [1.0, 1.0]])
    assert w1_distance(a, b) == pytest.approx(1.0)


def test_w1_subsampled_close_to_exact(rng):
    a = rng.standard_normal((700, 2))
    b = rng.standard_normal((700, 2)) + 2.0
    sub = w1_distance(a, b, rng=np.random.default_rng(0))
    exact = w1_distance(a[:500], b[:500])
    assert abs(sub - exact) < 0.15


def test_w1_empty_raises():
    with pytest.raises(ValueError):
        w1_distance(np.zeros((0, 2)), np.zeros((3, 2)))


def test_nll_gap_floor_and_flags():
    gaps, flagged = nll_gap([1.5, 1.0 + 1e-16, 1.1], reference_loss=1.0)
    assert gaps[0] == pytest.approx(np.log(0.5))
    assert flagged[1] and not flagged[0] and not flagged[2]
    assert gaps[1] == pytest.approx(np.log(1e-12))


def test_two_moons_density_shape():
    spec = TwoMoonsSpec()
    on_mode = np.array([[2.0, 0.0], [-2.0, 0.0]])
    off_ring = np.array([[0.0, 0.0]])
    on_ring_top = np.array([[0.0, 2.0]])
    lp_mode = spec.log_unnormalized(on_mode)
    assert lp_mode[0] == pytest.approx(lp_mode[1], abs=1e-12)  # symmetry
    assert lp_mode[0] > spec.log_unnormalized(on_ring_top)[0]
    assert spec.log_unnormalized(off_ring)[0] < lp_mode[0] - 50.0


def test_two_moons_sampler_statistics(rng):
    spec = TwoMoonsSpec()
    pts = two_moons_sample(spec, 4000, rng)
    assert pts.shape == (4000, 2)
    r = np.linalg.norm(pts, axis=1)
    assert abs(np.median(r) - 2.0) < 0.1
    # both modes occupied
    assert (pts[:, 0] > 0).mean() == pytest.approx(0.5, abs=0.1)


def test_two_moons_separation_scales():
    spec = TwoMoonsSpec(separation=1.5)
    assert spec.radius == pytest.approx(3.0)
    assert spec.mode_offset == pytest.approx(3.0)


def test_delta_mixing(rng):
    mix = DeltaMixing([1.0, -2.0])
    s = mix.sample(5, rng)
    np.testing.assert_array_equal(s, np.tile([1.0, -2.0], (5, 1)))


def test_mixture_data_gen_location(rng):
    dataset, theta = mixture_data_gen(DeltaMixing([0.0, 0.0]), "location", 3000, rng)
    assert dataset.n == 3000 and dataset.d_obs == 2
    # X | delta_0 is standard normal
    assert ks_against_standard_normal(dataset.X[:, 0]) > 0.01


def test_mixture_data_gen_location_scale(rng):
    mix = LocationScaleMixing(DeltaMixing([0.0]), d=1)
    dataset, theta = mixture_data_gen(mix, "location-scale", 5000, rng)
    assert theta.shape == (5000, 2)
    sigma2 = theta[:, 1]
    # chi-square(1) variances have mean 1
    assert sigma2.mean() == pytest.approx(1.0, abs=0.1)
    # marginal of X is a scale mixture, heavier-tailed than N(0, 1)
    assert np.mean(dataset.X**4) > 3.0


def test_mixture_data_gen_rejects_unknown_kernel(rng):
    with pytest.raises(ValueError, match="kernel kind"):
        mixture_data_gen(DeltaMixing([0.0]), "poisson", 10, rng)


def test_two_moons_mixing_roundtrip(rng):
    dataset, theta = mixture_data_gen(TwoMoonsMixing(), "location", 500, rng)
    assert theta.shape == (500, 2)
    assert dataset.n == 500


def test_potential_target_sampler_alpha1(rng):
    """alpha = 1 target is exactly N(0, I); KS test on each coordinate."""
    pts = sample_potential_target(1.0, 2, 20_000, rng)
    assert kstest(pts[:, 0], "norm").pvalue > 0.01
    assert kstest(pts[:, 1], "norm").pvalue > 0.01


def test_potential_target_sampler_alpha2_radial(rng):
    """For alpha = 2 in d = 2 the radial density is r exp(-r^4/4); its
    mean is computable by quadrature."""
    from scipy.integrate import quad

    z, _ = quad(lambda r: r * np.exp(-(r**4) / 4.0), 0, 10)
    mean_r, _ = quad(lambda r: r * r * np.exp(-(r**4) / 4.0), 0, 10)
    pts = sample_potential_target(2.0, 2, 40_000, rng)
    r = np.linalg.norm(pts, axis=1)
    assert r.mean() == pytest.approx(mean_r / z, abs=0.01)


def test_cloud_csv_roundtrip(tmp_path, rng):
    cloud = rng.standard_normal((20, 3))
    path = tmp_path / "cloud.csv"
    cloud_to_csv(cloud, path)
    back = cloud_from_csv(path)
    np.testing.assert_array_equal(back, cloud)
