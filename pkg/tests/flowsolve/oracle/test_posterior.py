import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import trapezoid
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from flowsolve.guidance.pigdm import GuidanceConfig, Rt2Rule, correction_coefficient, pigdm_g, rt2
from flowsolve.model.denoisers import denoiser_to_vf
from flowsolve.model.gmm import GaussianMixture, gmm_denoiser, gmm_log_marginal
from flowsolve.operators.linear_operators import DenseOperator, InpaintMask
from flowsolve.oracle.posterior import (
    exact_conditional_denoiser,
    exact_conditional_vf,
    exact_posterior,
    log_evidence,
    sample_conditional_xt,
)
from flowsolve.paths.schedules import CondOTPath, VPPath
from flowsolve.solver.sampler import SolveRun, guided_field, resolve_denoiser
from flowsolve.utils.exceptions import ShapeMismatchError, SingularSystemError

OPERATOR = DenseOperator([[1.0, 0.5]])
SIGMA_Y = 0.1
Y = np.array([0.8])


def _gradient(fn, x, h=1e-5):
    grad = np.empty_like(x)
    for j in range(x.shape[-1]):
        shift = np.zeros_like(x)
        shift[..., j] = h
        grad[..., j] = (fn(x + shift) - fn(x - shift)) / (2 * h)
    return grad


@pytest.mark.parametrize("path", [CondOTPath(), VPPath()])
def test_conditional_field_is_the_prior_field_plus_the_evidence_gradient(mixture_2d, probe_states, path):
    """v(x_t | y) = v(x_t) + sigma^2 d ln(alpha / sigma) / dt * grad log q(y | x_t)."""
    prior_vf = denoiser_to_vf(gmm_denoiser(mixture_2d, path), path)
    for t, x_t in probe_states(mixture_2d, path, np.linspace(0.1, 0.9, 10), 5):
        grad = _gradient(lambda x: log_evidence(mixture_2d, OPERATOR, SIGMA_Y, path, t, x, Y), x_t)
        predicted = prior_vf(x_t, t) + correction_coefficient(path, t) * grad
        exact = exact_conditional_vf(mixture_2d, OPERATOR, SIGMA_Y, Y, path, t, x_t)
        error = np.linalg.norm(predicted - exact, axis=-1) / np.maximum(np.linalg.norm(exact, axis=-1), 1.0)
        assert np.all(error <= 1e-5)


def test_conditional_tweedie(mixture_2d, probe_states):
    """E[x_1 | x_t, y] = (x_t + sigma^2 grad log q(x_t | y)) / alpha."""
    path = CondOTPath()
    denoiser = exact_conditional_denoiser(mixture_2d, OPERATOR, SIGMA_Y, Y, path)
    for t, x_t in probe_states(mixture_2d, path, np.linspace(0.1, 0.9, 9), 5):
        sched = path.schedule(t)

        def log_joint(x):
            return log_evidence(mixture_2d, OPERATOR, SIGMA_Y, path, t, x, Y) + gmm_log_marginal(
                mixture_2d, path, t, x
            )

        tweedie = (x_t + sched.sigma**2 * _gradient(log_joint, x_t)) / sched.alpha
        assert_allclose(denoiser(x_t, t), tweedie, rtol=1e-5, atol=1e-5)


def test_gaussian_posterior_is_analytic(rng):
    gmm = GaussianMixture.standard_normal(3)
    op = DenseOperator(rng.standard_normal((2, 3)))
    y = rng.standard_normal(2)
    a = op.to_dense()
    evidence_cov = a @ a.T + 0.04 * np.eye(2)

    posterior = exact_posterior(gmm, op, 0.2, y)
    assert_allclose(posterior.weights, [1.0])
    assert_allclose(posterior.means[0], a.T @ np.linalg.solve(evidence_cov, y), atol=1e-12)
    assert_allclose(posterior.covariances[0], np.eye(3) - a.T @ np.linalg.solve(evidence_cov, a), atol=1e-12)
    assert_allclose(posterior.log_evidence, multivariate_normal(np.zeros(2), evidence_cov).logpdf(y))


def test_posterior_concentrates_on_the_explaining_component():
    gmm = GaussianMixture(weights=[0.5, 0.5], means=[[-5.0, 0.0], [5.0, 0.0]], isotropic=[1.0, 1.0])
    posterior = exact_posterior(gmm, DenseOperator.identity(2), 0.1, [5.0, 0.0])
    assert posterior.weights[1] > 0.99
    assert_allclose(posterior.mean(), [5.0, 0.0], atol=1e-3)


def test_noiseless_posterior(mixture_3d_isotropic):
    op = InpaintMask([0, 2], 3)
    posterior = exact_posterior(mixture_3d_isotropic, op, 0.0, [0.3, -0.2])
    for mean, cov in zip(posterior.means, posterior.covariances):
        assert_allclose(op.apply(mean), [0.3, -0.2], atol=1e-10)
        assert_allclose(cov[[0, 2]][:, [0, 2]], 0.0, atol=1e-10)

    rank_one = DenseOperator([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(SingularSystemError):
        exact_posterior(GaussianMixture.standard_normal(2), rank_one, 0.0, [1.0, 1.0])


def test_conditional_denoiser_averages_to_the_posterior_mean(mixture_2d):
    """E[E[x_1 | x_t, y] | y] = E[x_1 | y] for x_t drawn from q(x_t | y)."""
    path = CondOTPath()
    posterior = exact_posterior(mixture_2d, OPERATOR, SIGMA_Y, Y)
    denoiser = exact_conditional_denoiser(mixture_2d, OPERATOR, SIGMA_Y, Y, path)
    rng = np.random.default_rng(17)
    x_t = sample_conditional_xt(posterior, path, 0.5, 100000, rng)
    assert x_t.shape == (100000, 2)
    assert_allclose(x_t.mean(axis=0), 0.5 * posterior.mean(), atol=0.02)
    assert_allclose(denoiser(x_t, 0.5).mean(axis=0), posterior.mean(), atol=0.02)


def test_guidance_matches_the_oracle_for_a_standard_normal_prior(rng):
    gmm = GaussianMixture.standard_normal(4)
    op = InpaintMask([0, 3], 4)
    path = CondOTPath()
    y = np.array([1.2, -0.4])
    run = SolveRun(
        path=path, model=gmm_denoiser(gmm, path), operator=op, y=y, guidance=GuidanceConfig(sigma_y=0.05)
    )
    denoiser = resolve_denoiser(run)
    for t in [0.1, 0.5, 0.9]:
        x_t = path.sample_xt(gmm.sample(5, rng), t, rng)
        exact = exact_conditional_vf(gmm, op, 0.05, y, path, t, x_t)
        assert_allclose(guided_field(run, denoiser, x_t, t).v, exact, rtol=1e-6, atol=1e-6)


def test_input_checks(mixture_2d):
    with pytest.raises(ShapeMismatchError):
        exact_posterior(mixture_2d, DenseOperator.identity(3), 0.1, [0.0, 0.0, 0.0])
    with pytest.raises(ShapeMismatchError):
        exact_posterior(mixture_2d, OPERATOR, 0.1, [0.0, 0.0])


def test_log_evidence_is_normalized_in_one_dimension():
    gmm = GaussianMixture(weights=[0.4, 0.6], means=[[-1.0], [1.5]], isotropic=[0.3, 0.5])
    op = DenseOperator([[0.8]])
    path = CondOTPath()
    grid = np.linspace(-12.0, 12.0, 4801)[:, None]
    for t in [0.2, 0.6, 0.9]:
        for x in [-1.0, 0.4, 2.0]:
            x_t = np.full((grid.shape[0], 1), x)
            density = np.exp(log_evidence(gmm, op, 0.2, path, t, x_t, grid))
            assert_allclose(trapezoid(density, grid[:, 0]), 1.0, atol=1e-8)


def test_log_evidence_is_normalized_in_two_dimensions(mixture_2d):
    op = DenseOperator([[1.0, 0.5], [-0.3, 0.8]])
    path = CondOTPath()
    axis = np.linspace(-9.0, 9.0, 361)
    y = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    for t, x in [(0.3, [0.5, -0.2]), (0.7, [-1.2, -0.6])]:
        x_t = np.broadcast_to(np.array(x), y.shape)
        density = np.exp(log_evidence(mixture_2d, op, 0.3, path, t, x_t, y)).reshape(axis.size, axis.size)
        assert_allclose(trapezoid(trapezoid(density, axis, axis=1), axis), 1.0, atol=1e-6)


def test_posterior_moments_match_importance_sampling(mixture_2d):
    rng = np.random.default_rng(41)
    op = DenseOperator([[1.0, 0.5]])
    y = np.array([0.8])
    sigma_y = 0.3
    posterior = exact_posterior(mixture_2d, op, sigma_y, y)
    x1 = mixture_2d.sample(1000000, rng)
    log_w = -0.5 * np.sum((y - op.apply(x1)) ** 2, axis=-1) / sigma_y**2
    w = np.exp(log_w - logsumexp(log_w))
    mean = w @ x1
    centred = x1 - mean
    stderr = np.sqrt(w**2 @ centred**2)
    assert np.all(np.abs(posterior.mean() - mean) <= 4 * stderr + 1e-4)
    assert_allclose(posterior.covariance(), (w[:, None] * centred).T @ centred, atol=0.02)


def test_uninformative_observation_returns_the_prior(mixture_2d):
    posterior = exact_posterior(mixture_2d, DenseOperator([[1.0, 0.5]]), 1e6, [0.8])
    assert_allclose(posterior.weights, mixture_2d.weights, atol=1e-9)
    assert_allclose(posterior.means, mixture_2d.means, atol=1e-9)
    assert_allclose(posterior.covariances, mixture_2d.covariances, atol=1e-9)


def test_zero_operator_gives_no_guidance(mixture_2d, rng):
    op = DenseOperator(np.zeros((1, 2)))
    assert op.rank == 0
    y = np.array([0.8])
    path = CondOTPath()
    posterior = exact_posterior(mixture_2d, op, 0.1, y)
    assert_allclose(posterior.weights, mixture_2d.weights, atol=1e-12)
    assert_allclose(posterior.means, mixture_2d.means, atol=1e-12)

    denoiser = gmm_denoiser(mixture_2d, path)
    for t in [0.2, 0.5, 0.8]:
        x_t = path.sample_xt(mixture_2d.sample(6, rng), t, rng)
        x1_hat = denoiser(x_t, t)
        g = pigdm_g(op, y, x1_hat, lambda c: denoiser.vjp(x_t, t, c), rt2(Rt2Rule.FLOW, path, t), 0.1)
        assert_allclose(g, 0.0, atol=1e-15)
        exact = exact_conditional_vf(mixture_2d, op, 0.1, y, path, t, x_t)
        assert_allclose(exact, denoiser_to_vf(denoiser, path)(x_t, t), rtol=1e-10, atol=1e-10)
