import numpy as np
import pytest
from scipy.stats import multivariate_normal

from klflow.autodiff import Tape, Tensor
from klflow.flows import FlowModel, GaussianBase, identity_init
from klflow.functionals import (
    Dataset,
    GaussianLocationKernel,
    GaussianLocationScaleKernel,
    KLTargetFunctional,
    NPMLEFunctional,
    PotentialTarget,
    SubproblemSpec,
    ZeroFunctional,
    first_variation_npmle,
    fv_variance,
    npmle_loss_np,
    npmle_loss_t,
    sample_variance,
    subproblem_fv_variance,
    subproblem_loss_t,
)

from conftest import finite_difference


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]))
    d = Dataset(np.zeros((5, 2)))
    assert d.n == 5 and d.d_obs == 2
    sub = d.subsample(3, np.random.default_rng(0))
    assert sub.n == 3
    with pytest.raises(ValueError):
        d.subsample(6, np.random.default_rng(0))


def test_location_kernel_matches_scipy(rng):
    X = rng.standard_normal((4, 2))
    theta = rng.standard_normal((3, 2))
    lk = GaussianLocationKernel(2).log_kernel(X, theta)
    for j in range(3):
        for i in range(4):
            ref = multivariate_normal(mean=theta[j], cov=np.eye(2)).logpdf(X[i])
            assert lk[j, i] == pytest.approx(ref, abs=1e-10)


def test_location_scale_kernel_matches_scipy(rng):
    X = rng.standard_normal((4, 2))
    mu = rng.standard_normal((3, 2))
    u = rng.uniform(-1, 1, size=(3, 2))  # log sigma^2
    theta = np.concatenate([mu, u], axis=1)
    lk = GaussianLocationScaleKernel(2).log_kernel(X, theta)
    for j in range(3):
        for i in range(4):
            ref = multivariate_normal(mean=mu[j], cov=np.diag(np.exp(u[j]))).logpdf(X[i])
            assert lk[j, i] == pytest.approx(ref, abs=1e-10)


@pytest.mark.parametrize("kernel_cls,pdim", [(GaussianLocationKernel, 2), (GaussianLocationScaleKernel, 4)])
def test_kernel_tensor_path_matches_numpy(rng, kernel_cls, pdim):
    kernel = kernel_cls(2)
    X = rng.standard_normal((5, 2))
    theta = rng.uniform(-1, 1, size=(3, pdim))
    with Tape():
        lk_t = kernel.log_kernel_t(X, Tensor(theta))
    np.testing.assert_allclose(lk_t.data, kernel.log_kernel(X, theta), rtol=1e-12)


def test_npmle_loss_direct_summation(rng):
    X = rng.standard_normal((6, 2))
    theta = rng.standard_normal((4, 2))
    kernel = GaussianLocationKernel(2)
    dataset = Dataset(X)
    # direct, unstabilized evaluation
    lk = kernel.log_kernel(X, theta)
    direct = -np.mean(np.log(np.exp(lk).mean(axis=0)))
    assert npmle_loss_np(theta, dataset, kernel) == pytest.approx(direct, abs=1e-12)
    with Tape():
        loss_t = npmle_loss_t(Tensor(theta), dataset, kernel)
    assert float(loss_t.data) == pytest.approx(direct, abs=1e-12)


def test_npmle_loss_stable_for_far_particles():
    X = np.zeros((3, 2))
    theta = np.array([[0.0, 0.0], [40.0, 40.0]])
    kernel = GaussianLocationKernel(2)
    val = npmle_loss_np(theta, Dataset(X), kernel)
    # far particle contributes ~0 to the mixture; loss ~ -log(phi(0)/2)
    ref = -np.log(0.5 * np.exp(-np.log(2 * np.pi)))
    assert val == pytest.approx(ref, abs=1e-6)


def test_npmle_underflow_raises():
    X = np.zeros((2, 2))
    theta = np.full((3, 2), 1e200)
    with pytest.raises(FloatingPointError, match="observation"):
        npmle_loss_np(theta, Dataset(np.zeros((2, 2))), GaussianLocationKernel(2))


def test_npmle_gradient_matches_finite_differences(rng):
    X = rng.standard_normal((5, 2))
    theta0 = rng.standard_normal((4, 2))
    kernel = GaussianLocationKernel(2)
    dataset = Dataset(X)
    t = Tensor(theta0, requires_grad=True)
    with Tape() as tape:
        tape.backward(npmle_loss_t(t, dataset, kernel))
    fd = finite_difference(lambda v: npmle_loss_np(v, dataset, kernel), theta0)
    np.testing.assert_allclose(t.grad, fd, rtol=1e-5, atol=1e-8)


def test_first_variation_mean_is_minus_one(rng):
    """Integrating the first variation against the mixture itself gives -1
    exactly; the particle average obeys this identity by construction."""
    X = rng.standard_normal((8, 2))
    theta = rng.standard_normal((5, 2))
    fv = first_variation_npmle(theta, Dataset(X), theta, GaussianLocationKernel(2))
    assert fv.mean() == pytest.approx(-1.0, abs=1e-12)


def test_first_variation_directional_derivative(rng):
    """fv at a new point equals the Gateaux derivative of the loss toward a
    point mass there: d/dt L((1-t) rho + t delta_y) at t=0 is fv(y) - fv-bar."""
    X = rng.standard_normal((6, 1))
    theta = rng.standard_normal((4, 1))
    y = np.array([[0.3]])
    kernel = GaussianLocationKernel(1)
    dataset = Dataset(X)

    def mixture_loss(weight_on_y, t):
        lk_theta = kernel.log_kernel(X, theta)
        lk_y = kernel.log_kernel(X, y)
        mix = (1 - t) * np.exp(lk_theta).mean(axis=0) + t * np.exp(lk_y)[0]
        return -np.mean(np.log(mix))

    h = 1e-6
    num = (mixture_loss(y, h) - mixture_loss(y, -h)) / (2 * h)
    fv_y = first_variation_npmle(y, dataset, theta, kernel)[0]
    fv_bar = first_variation_npmle(theta, dataset, theta, kernel).mean()
    assert num == pytest.approx(fv_y - fv_bar, abs=1e-6)


def test_sample_variance():
    assert sample_variance([1.0, 2.0, 3.0]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        sample_variance([1.0])


def test_fv_variance_nonnegative(rng):
    X = rng.standard_normal((6, 2))
    theta = rng.standard_normal((5, 2))
    v = fv_variance(theta, Dataset(X), GaussianLocationKernel(2))
    assert v >= 0.0


def test_potential_target_values_and_grad(rng):
    t2 = PotentialTarget(2.0)
    theta = np.array([[1.0, 1.0]])
    assert t2.potential(theta)[0] == pytest.approx(4.0 / 4.0)
    x = Tensor(rng.uniform(0.5, 1.5, size=(3, 2)), requires_grad=True)
    with Tape() as tape:
        from klflow import autodiff as ad

        tape.backward(ad.tsum(t2.potential_t(x)))
    fd = finite_difference(lambda v: PotentialTarget(2.0).potential(v).sum(), x.data)
    np.testing.assert_allclose(x.grad, fd, rtol=1e-5)
    # alpha = 1 shortcut agrees with the general formula at alpha -> 1
    t1 = PotentialTarget(1.0)
    assert t1.potential(theta)[0] == pytest.approx(1.0)


def test_kl_target_functional_fv(rng):
    target = PotentialTarget(1.0)
    func = KLTargetFunctional(target)
    pts = rng.standard_normal((4, 2))
    log_rho = rng.standard_normal(4)
    fv = func.fv(pts, pts, log_rho)
    np.testing.assert_allclose(fv, target.potential(pts) + log_rho + 1.0)
    with pytest.raises(ValueError):
        func.fv(pts, pts, None)


def test_kl_target_loss_gaussian_reference(rng):
    """For rho = N(0, I) and V = r^2/2 the exact value of
    int V d rho + int rho log rho is d/2 - d/2 log(2 pi) - d/2 = -log(2 pi)."""
    func = KLTargetFunctional(PotentialTarget(1.0))
    base = GaussianBase(2)
    pts = base.sample(200_000, rng)
    val = func.loss_np(pts, base.log_density(pts))
    assert val == pytest.approx(-np.log(2 * np.pi), abs=2e-2)


def test_zero_functional(rng):
    f = ZeroFunctional()
    pts = rng.standard_normal((3, 2))
    assert f.loss_np(pts) == 0.0
    with Tape():
        assert float(f.loss_t(Tensor(pts)).data) == 0.0
    np.testing.assert_array_equal(f.fv(pts, pts), np.zeros(3))


def test_subproblem_spec_validation():
    flow = FlowModel(identity_init(2, 2, 4, np.random.default_rng(0)), GaussianBase(2))
    with pytest.raises(ValueError):
        SubproblemSpec(ZeroFunctional(), flow, tau=0.0, M=10)
    with pytest.raises(ValueError):
        SubproblemSpec(ZeroFunctional(), flow, tau=1.0, M=1)


def test_subproblem_warm_start_kl_term_zero(rng):
    """At the warm start (current flow == previous flow) the averaged
    log-ratio term is zero up to float round-off."""
    flow = FlowModel(identity_init(2, 4, 8, rng), GaussianBase(2, variance=4.0))
    for p in flow.parameters():
        p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)
    prev = flow.copy(trainable=False)
    dataset = Dataset(rng.standard_normal((10, 2)))
    spec = SubproblemSpec(NPMLEFunctional(dataset, GaussianLocationKernel(2)), prev, tau=5.0, M=32)
    z = flow.base.sample(32, rng)
    with Tape():
        loss, diag = subproblem_loss_t(spec, flow, z)
    assert abs(float(diag["kl_term"].data)) < 1e-9
    f_direct = npmle_loss_np(diag["theta"].data, dataset, spec.functional.kernel)
    assert float(diag["f_term"].data) == pytest.approx(f_direct, abs=1e-10)
    assert float(loss.data) == pytest.approx(f_direct + float(diag["kl_term"].data), abs=1e-12)


def test_subproblem_kl_term_estimates_kl(rng):
    """With F = 0 and distinct flows, tau * kl_term estimates
    KL(rho_k || rho_prev) over the retained base draws."""
    rng2 = np.random.default_rng(77)
    cur = FlowModel(identity_init(2, 2, 8, rng2), GaussianBase(2))
    prev = FlowModel([], GaussianBase(2, variance=2.0))
    spec = SubproblemSpec(ZeroFunctional(), prev, tau=1.0, M=50_000)
    z = cur.base.sample(50_000, rng)
    with Tape():
        _, diag = subproblem_loss_t(spec, cur, z)
    # closed form: KL(N(0, I) || N(0, 2 I)) = (d/2)(log 2 - 1/2)
    kl_exact = np.log(2.0) - 0.5
    assert float(diag["kl_term"].data) == pytest.approx(kl_exact, abs=2e-2)


def test_subproblem_base_logq_override(rng):
    flow = FlowModel(identity_init(2, 2, 8, rng), GaussianBase(2))
    prev = flow.copy(trainable=False)
    spec = SubproblemSpec(ZeroFunctional(), prev, tau=2.0, M=16)
    z = flow.base.sample(16, rng)
    shifted = flow.base.log_density(z) + 1.0
    with Tape():
        _, diag = subproblem_loss_t(spec, flow, z, base_logq=shifted)
    # shifting log q by a constant shifts the kl term by the same amount / tau
    assert float(diag["kl_term"].data) == pytest.approx(1.0 / 2.0, abs=1e-12)


def test_subproblem_fv_variance(rng):
    X = rng.standard_normal((6, 2))
    theta = rng.standard_normal((5, 2))
    log_ratio = rng.standard_normal(5)
    v = subproblem_fv_variance(theta, Dataset(X), GaussianLocationKernel(2), log_ratio, tau=5.0)
    fv = first_variation_npmle(theta, Dataset(X), theta, GaussianLocationKernel(2))
    assert v == pytest.approx(sample_variance(fv + log_ratio / 5.0))


def test_npmle_minibatch(rng):
    X = rng.standard_normal((20, 2))
    func = NPMLEFunctional(Dataset(X), GaussianLocationKernel(2))
    sub = func.minibatch(5, rng)
    assert sub.dataset.n == 5
    assert sub.kernel is func.kernel
