import warnings

import numpy as np
import pytest

import volsplat.gradients as gradients_module
from volsplat.appearance import C0
from volsplat.exceptions import ConfigurationError, UsageError
from volsplat.gradients import (
    _segment_partials,
    backward_march,
    backward_splat_satn,
    backward_splat_taylor,
    finite_difference_check,
    weighted_image_loss,
)
from volsplat.models import AmplitudeModel, ParamGradients, Ray
from volsplat.raymarching import intersect_1d
from volsplat.renderers import backward_variant, gradcheck_scene, gradcheck_variant, render_variant, variant_spec
from volsplat.schemas import BlendMode, GradientMode, MarchOptions, SplatOptions, Variant
from volsplat.splatting import rasterize

SPLAT_VARIANTS = [Variant.GS3D, Variant.GS3D_STP, Variant.OTS, Variant.OTS_SATN]
MARCH_VARIANTS = [Variant.GS3D_MARCHER, Variant.OTS_MARCHER]


# seed 9 puts sort swaps inside the FD stencil for the global-sort variants
@pytest.mark.parametrize("seed", [0, 1, 9])
@pytest.mark.parametrize("variant", SPLAT_VARIANTS)
def test_splat_gradients_match_finite_differences(variant, seed):
    result = gradcheck_variant(variant, seed)
    assert result.passed, result.report.groups
    assert result.report.non_finite == 0


@pytest.mark.parametrize("variant", MARCH_VARIANTS)
def test_march_gradients_match_finite_differences_on_overlapping_mixture(variant):
    scene, _ = gradcheck_scene(variant, 2)
    result = gradcheck_variant(variant, 2)
    assert result.passed, (result.report.groups, result.notes)
    assert result.notes[0].startswith("detached")
    assert result.report.groups[0].count == 3 * len(scene)


def test_gradcheck_scene_draws_overlapping_anisotropic_mixture():
    scene, cam = gradcheck_scene(Variant.GS3D, 9)
    assert 5 <= len(scene) <= 20
    assert np.all(np.abs(scene.positions) <= 0.5)
    assert scene.sh_coeffs.shape[1] == 4
    assert np.ptp(scene.log_scales, axis=1).max() > 0
    assert (cam.width, cam.height) == (16, 16)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("variant", SPLAT_VARIANTS + MARCH_VARIANTS)
def test_gradients_over_many_seeds(variant, seed):
    assert gradcheck_variant(variant, seed).passed


def test_corrupted_gradient_is_detected():
    result = gradcheck_variant(Variant.OTS, 0, corrupt=True)
    assert result.corrupted
    assert not result.passed
    assert result.report.max_rel_error >= 0.1 / 1.1 * 0.99


def test_impossible_tolerance_fails():
    assert not gradcheck_variant(Variant.GS3D, 0, tolerance=1e-8, perturbation=1e-7).passed


def test_attached_mode_reports_its_assumption():
    result = gradcheck_variant(Variant.OTS_MARCHER, 0, gradient_mode=GradientMode.ATTACHED, gaussians=[0])
    assert result.gradient_mode is GradientMode.ATTACHED
    assert result.report.non_finite == 0
    assert np.isfinite(result.report.max_rel_error)
    assert "attached" in result.notes[0]


@pytest.mark.parametrize("perturbation", [1e-8, 1e-2])
def test_perturbation_outside_range_rejected(perturbation):
    scene, _ = gradcheck_scene(Variant.OTS, 0)
    with pytest.raises(ConfigurationError):
        finite_difference_check(lambda s: 0.0, scene, perturbation, ParamGradients.zeros_like(scene))


def test_finite_difference_of_linear_loss_is_exact():
    scene, _ = gradcheck_scene(Variant.OTS, 1)
    weights = np.arange(1.0, scene.positions.size + 1.0).reshape(scene.positions.shape)
    analytic = ParamGradients.zeros_like(scene)
    analytic.positions = weights
    report = finite_difference_check(
        lambda s: float(np.sum(weights * s.positions)), scene, 1e-4, analytic, params=["positions"],
    )
    assert report.max_rel_error < 1e-9
    assert report.groups[0].count == scene.positions.size


def _splat_forward(variant: Variant):
    scene, cam = gradcheck_scene(variant, 2)
    spec = variant_spec(variant)
    opts = SplatOptions(blend_mode=spec.blend_mode, sort_mode=spec.sort_mode)
    return scene, cam, spec, opts, rasterize(scene, cam, spec.model, opts)


def test_backward_needs_forward_cache():
    scene, cam, spec, opts, _ = _splat_forward(Variant.OTS)
    with pytest.raises(UsageError):
        backward_splat_taylor(scene, cam, spec.model, opts, np.zeros((cam.height, cam.width, 3)), None)


def test_backward_rejects_wrong_loss_shape():
    scene, cam, spec, opts, forward = _splat_forward(Variant.OTS)
    with pytest.raises(UsageError):
        backward_splat_taylor(scene, cam, spec.model, opts, np.zeros((3, 3, 3)), forward)


def test_backward_rejects_mismatched_blend_mode():
    scene, cam, spec, opts, forward = _splat_forward(Variant.OTS)
    satn = opts.model_copy(update={"blend_mode": BlendMode.SELF_ATTENUATION})
    loss_grad = np.zeros((cam.height, cam.width, 3))
    with pytest.raises(ConfigurationError):
        backward_splat_taylor(scene, cam, spec.model, satn, loss_grad, forward)
    with pytest.raises(ConfigurationError):
        backward_splat_satn(scene, cam, opts, loss_grad, forward)


def test_zero_loss_gradient_gives_zero_parameter_gradients():
    scene, cam, spec, opts, forward = _splat_forward(Variant.OTS_SATN)
    grads = backward_splat_satn(scene, cam, opts, np.zeros((cam.height, cam.width, 3)), forward)
    for _, value in grads.items():
        np.testing.assert_array_equal(value, 0.0)


def test_march_gradient_on_pixel_subset():
    scene, cam = gradcheck_scene(Variant.OTS_MARCHER, 0)
    rng = np.random.default_rng(4)
    weights = rng.uniform(-1.0, 1.0, size=(cam.height, cam.width, 3))
    forward = render_variant(scene, cam, Variant.OTS_MARCHER)
    opts = MarchOptions()
    full = backward_march(scene, cam, None, AmplitudeModel.OPACITY_THIN_SIDE, opts, weights, forward)
    pixels = np.array([[x, y] for y in range(cam.height) for x in range(cam.width)])
    split = backward_march(scene, cam, pixels[:20], AmplitudeModel.OPACITY_THIN_SIDE, opts, weights, forward) + backward_march(
        scene, cam, pixels[20:], AmplitudeModel.OPACITY_THIN_SIDE, opts, weights, forward
    )
    for name, value in full.items():
        np.testing.assert_allclose(getattr(split, name), value, atol=1e-12)


def test_weighted_image_loss():
    weights = np.full((2, 2, 3), 0.5)
    assert weighted_image_loss(weights)(np.ones((2, 2, 3))) == pytest.approx(6.0)


def test_marcher_shortfall_is_reported_in_notes():
    result = gradcheck_variant(Variant.OTS_MARCHER, 2, tolerance=1e-12, gaussians=[0])
    assert not result.passed
    assert any("border gap" in note and "512 bins" in note for note in result.notes)


def _linear_loss_setup(seed: int = 1):
    scene, _ = gradcheck_scene(Variant.OTS, seed)
    weights = np.arange(1.0, scene.positions.size + 1.0).reshape(scene.positions.shape)
    analytic = ParamGradients.zeros_like(scene)
    analytic.positions = weights.copy()
    return scene, weights, analytic


def test_jump_inside_the_stencil_is_judged_one_sided():
    scene, weights, analytic = _linear_loss_setup()
    h = 1e-4
    edge = scene.positions[0, 0] + 0.5 * h

    def step_loss(s):
        return float(np.sum(weights * s.positions)) + (1.0 if s.positions[0, 0] > edge else 0.0)

    guarded = finite_difference_check(step_loss, scene, h, analytic, params=["positions"], tolerance=1e-4)
    assert guarded.discontinuities == 1
    assert guarded.groups[0].discontinuities == 1
    assert guarded.max_rel_error < 1e-6

    plain = finite_difference_check(step_loss, scene, h, analytic, params=["positions"])
    assert plain.discontinuities == 0
    assert plain.max_rel_error > 0.5


def test_wrong_gradient_of_smooth_loss_is_not_excused():
    scene, weights, analytic = _linear_loss_setup()
    analytic.positions = weights * 1.1
    report = finite_difference_check(
        lambda s: float(np.sum(weights * s.positions)), scene, 1e-4, analytic, params=["positions"], tolerance=1e-4,
    )
    assert report.discontinuities == 0
    assert report.max_rel_error == pytest.approx(0.1 / 1.1, rel=1e-6)
    assert not report.passed(1e-4)


def test_step_sweep_error_is_v_shaped():
    scene, _ = gradcheck_scene(Variant.OTS, 1)
    analytic = ParamGradients.zeros_like(scene)
    analytic.positions = 5.0 * np.exp(5.0 * scene.positions)
    errors = {
        h: finite_difference_check(
            lambda s: float(np.sum(np.exp(5.0 * s.positions))), scene, h, analytic, params=["positions"],
        ).max_rel_error
        for h in (1e-3, 1e-5, 1e-7)
    }
    # truncation dominates on the left, rounding on the right
    assert errors[1e-5] < errors[1e-3]
    assert errors[1e-5] < errors[1e-7]
    assert min(errors.values()) < 1e-4


@pytest.mark.parametrize("hidden", ["zero_theta", "off_screen"])
@pytest.mark.parametrize("variant", SPLAT_VARIANTS)
def test_gaussian_without_blend_weight_gets_no_colour_gradient(variant, hidden):
    scene, cam = gradcheck_scene(variant, 3)
    if hidden == "zero_theta":
        theta_raw = scene.theta_raw.copy()
        theta_raw[0] = -800.0
        scene = scene.with_params(theta_raw=theta_raw)
    else:
        positions = scene.positions.copy()
        positions[0] = [40.0, 0.0, 0.0]
        scene = scene.with_params(positions=positions)
    weights = np.random.default_rng(5).uniform(-1.0, 1.0, size=(cam.height, cam.width, 3))
    forward = render_variant(scene, cam, variant)
    grads = backward_variant(scene, cam, variant, weights, forward)
    np.testing.assert_array_equal(grads.sh_coeffs[0], 0.0)
    assert np.any(grads.sh_coeffs[1:] != 0.0)


@pytest.mark.parametrize("pixel", [(4, 4), (3, 5), (5, 2)])
def test_single_gaussian_march_colour_gradient_is_closed_form(mixture, front_camera, pixel):
    scene = mixture(3, 1, theta_range=(0.8, 0.8))
    cam = front_camera()
    loss_grad = np.zeros((cam.height, cam.width, 3))
    loss_grad[pixel[1], pixel[0]] = 1.0
    grads = backward_march(scene, cam, None, AmplitudeModel.OPACITY_THIN_SIDE, MarchOptions(), loss_grad)
    origins, directions = cam.pixel_rays(np.array([pixel[0]]), np.array([pixel[1]]))
    hit = intersect_1d(scene.gaussian(0), Ray(origins[0], directions[0]), AmplitudeModel.OPACITY_THIN_SIDE)
    mass = hit.amplitude_1d * hit.sigma_t * np.sqrt(2 * np.pi)
    # d radiance / d colour = 1 − e^{−f₀}, and colour = C0·DC + 0.5
    np.testing.assert_allclose(grads.sh_coeffs[0, 0], np.full(3, C0 * -np.expm1(-mass)), atol=1e-3)


def test_detached_gradient_ignores_border_partials(monkeypatch):
    scene, cam = gradcheck_scene(Variant.OTS_MARCHER, 1)
    weights = np.random.default_rng(6).uniform(-1.0, 1.0, size=(cam.height, cam.width, 3))
    forward = render_variant(scene, cam, Variant.OTS_MARCHER)
    model = AmplitudeModel.OPACITY_THIN_SIDE
    detached = MarchOptions()
    attached = MarchOptions(gradient_mode=GradientMode.ATTACHED)
    base_detached = backward_march(scene, cam, None, model, detached, weights, forward)
    base_attached = backward_march(scene, cam, None, model, attached, weights, forward)

    original = gradients_module._segment_partials

    def moved_borders(*args):
        per_amp, d_peak, d_sigma, d_t0, d_t1 = original(*args)
        return per_amp, d_peak, d_sigma, d_t0 + 1.0, d_t1 - 1.0

    monkeypatch.setattr(gradients_module, "_segment_partials", moved_borders)
    moved_detached = backward_march(scene, cam, None, model, detached, weights, forward)
    moved_attached = backward_march(scene, cam, None, model, attached, weights, forward)
    for name, value in base_detached.items():
        np.testing.assert_array_equal(getattr(moved_detached, name), value)
    assert any(not np.allclose(getattr(moved_attached, name), value) for name, value in base_attached.items())


def test_segment_partials_with_open_trailing_bin_are_quiet():
    amp = np.array([0.7, 1.3])
    sigma = np.array([0.2, 0.05])
    peak = np.array([1.0, 1.4])
    t0 = np.array([0.9, 1.35])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        open_ended = _segment_partials(amp, sigma, peak, t0, np.full(2, np.inf))
    closed = _segment_partials(amp, sigma, peak, t0, peak + 60.0 * sigma)
    for got, expected in zip(open_ended, closed):
        assert np.all(np.isfinite(got))
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-15)
