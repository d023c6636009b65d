import numpy as np
import pytest
from numpy.testing import assert_allclose

from flowsolve.model.denoisers import (
    Denoiser,
    VectorFieldModel,
    denoiser_to_vf,
    finite_difference_vjp,
    retime,
    vf_coefficients,
    vf_from_x1_hat,
    vf_to_denoiser,
    x1_hat_from_vf,
)
from flowsolve.model.gmm import gmm_denoiser
from flowsolve.paths.schedules import CondOTPath, CustomPath, VEPath, VPPath
from flowsolve.utils.exceptions import RangeUnattainableError, SingularityError

PROBE_TIMES = np.linspace(0.05, 0.95, 10)


def _general_cond_ot():
    """The conditional OT schedule without the closed-form shortcuts."""
    return CustomPath(
        alpha_fn=lambda t: t,
        sigma_fn=lambda t: 1.0 - t,
        dalpha_fn=lambda t: 1.0,
        dsigma_fn=lambda t: -1.0,
    )


def test_vf_coefficients_cond_ot():
    assert_allclose(vf_coefficients(CondOTPath(), 0.25), (4.0 / 3.0, -4.0 / 3.0))
    assert_allclose(vf_coefficients(_general_cond_ot(), 0.25), (4.0 / 3.0, -4.0 / 3.0))


def test_vf_from_x1_hat_matches_general_formula(rng):
    x_t, x1_hat = rng.standard_normal((2, 5, 3))
    for t in PROBE_TIMES:
        assert_allclose(
            vf_from_x1_hat(CondOTPath(), t, x_t, x1_hat),
            vf_from_x1_hat(_general_cond_ot(), t, x_t, x1_hat),
            rtol=1e-12,
        )


def test_conversions_are_singular_at_the_ends():
    with pytest.raises(SingularityError):
        vf_from_x1_hat(CondOTPath(), 1.0, np.zeros(2), np.zeros(2))
    with pytest.raises(SingularityError):
        x1_hat_from_vf(CondOTPath(), 0.0, np.zeros(2), np.zeros(2))
    with pytest.raises(SingularityError):
        vf_coefficients(VPPath(), 1.0)


@pytest.mark.parametrize("path", [CondOTPath(), VPPath(), VEPath()])
def test_denoiser_vf_round_trip(mixture_2d, probe_states, path):
    denoiser = gmm_denoiser(mixture_2d, path)
    round_trip = vf_to_denoiser(denoiser_to_vf(denoiser, path), path)
    for t, x_t in probe_states(mixture_2d, path, PROBE_TIMES, 10):
        assert_allclose(round_trip(x_t, t), denoiser(x_t, t), atol=1e-10, rtol=1e-10)


def test_round_trip_keeps_the_vjp(mixture_2d, rng):
    path = VPPath()
    denoiser = gmm_denoiser(mixture_2d, path)
    round_trip = vf_to_denoiser(denoiser_to_vf(denoiser, path), path)
    x_t, cotangent = rng.standard_normal((2, 4, 2))
    assert round_trip.has_analytic_vjp
    assert_allclose(round_trip.vjp(x_t, 0.6, cotangent), denoiser.vjp(x_t, 0.6, cotangent), atol=1e-10)


def test_retimed_vp_matches_native_cond_ot(mixture_2d, probe_states):
    """A VP-trained model run on the OT path gives the OT model's vector field."""
    target = CondOTPath()
    native = denoiser_to_vf(gmm_denoiser(mixture_2d, target), target)
    retimed = denoiser_to_vf(gmm_denoiser(mixture_2d, VPPath()), target)
    for t, x_t in probe_states(mixture_2d, target, PROBE_TIMES, 10):
        assert_allclose(retimed(x_t, t), native(x_t, t), atol=1e-8, rtol=1e-8)


def test_retimed_ve_matches_native_cond_ot(mixture_3d_isotropic, probe_states):
    target = CondOTPath()
    native = gmm_denoiser(mixture_3d_isotropic, target)
    retimed = retime(gmm_denoiser(mixture_3d_isotropic, VEPath(sigma_min=1e-4, sigma_max=100.0)), target)
    for t, x_t in probe_states(mixture_3d_isotropic, target, PROBE_TIMES, 10):
        assert_allclose(retimed(x_t, t), native(x_t, t), atol=1e-8, rtol=1e-8)


def test_retime_to_same_path_is_identity(mixture_2d):
    denoiser = gmm_denoiser(mixture_2d, CondOTPath())
    assert retime(denoiser, CondOTPath()) is denoiser


def test_retime_time_map(mixture_2d):
    retimed = retime(gmm_denoiser(mixture_2d, VPPath()), CondOTPath())
    t_native, scale = retimed.time_map(0.5)
    vp = VPPath().schedule(t_native)
    # SNR 1 on the VP path means alpha = sigma = 1 / sqrt(2)
    assert_allclose(vp.alpha, vp.sigma, rtol=1e-10)
    assert_allclose(scale, vp.alpha / 0.5, rtol=1e-10)


def test_retime_outside_the_native_range_names_the_window(mixture_2d):
    retimed = retime(gmm_denoiser(mixture_2d, VEPath(sigma_min=0.001, sigma_max=5.0)), CondOTPath())
    retimed(np.zeros(2), 0.5)
    with pytest.raises(RangeUnattainableError) as excinfo:
        retimed(np.zeros(2), 0.05)
    assert_allclose(excinfo.value.window, (0.2 / 1.2, 1000.0 / 1001.0))


def test_vector_field_without_vjp(mixture_2d, rng):
    path = CondOTPath()
    exact = denoiser_to_vf(gmm_denoiser(mixture_2d, path), path)
    bare = VectorFieldModel(exact.evaluator, path)
    assert not bare.has_vjp
    with pytest.raises(NotImplementedError):
        bare.vjp(np.zeros(2), 0.5, np.ones(2))

    denoiser = vf_to_denoiser(bare, path)
    assert not denoiser.has_analytic_vjp
    x_t, cotangent = rng.standard_normal((2, 2))
    reference = gmm_denoiser(mixture_2d, path).vjp(x_t, 0.5, cotangent)
    assert_allclose(denoiser.vjp(x_t, 0.5, cotangent), reference, rtol=1e-4, atol=1e-5)


def test_finite_difference_vjp_of_a_linear_map(rng):
    matrix = rng.standard_normal((3, 3))
    vjp = finite_difference_vjp(lambda x, t: x @ matrix.T)
    x, cotangent = rng.standard_normal((2, 3))
    assert_allclose(vjp(x, 0.5, cotangent), cotangent @ matrix, rtol=1e-8)


def test_denoiser_batches_over_leading_axes(mixture_2d, rng):
    denoiser = gmm_denoiser(mixture_2d, CondOTPath())
    x_t = rng.standard_normal((3, 4, 2))
    batched = denoiser(x_t, 0.4)
    assert batched.shape == (3, 4, 2)
    assert_allclose(batched[1, 2], denoiser(x_t[1, 2], 0.4))
    assert isinstance(denoiser, Denoiser)
