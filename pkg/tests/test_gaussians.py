import numpy as np
import pytest

from volsplat.exceptions import DomainError
from volsplat.gaussians import (
    amplitude2d,
    amplitude_to_weight,
    antialias_filter,
    covariance_3d,
    evaluate_density,
    footprint_mass,
    normalization_constant,
    project,
    quaternion_to_rotation,
    rotation_to_quaternion,
    screen_jacobian,
    thin_side_constant,
    weight_to_amplitude,
)
from volsplat.models import AmplitudeModel, Gaussian3D, ThetaActivation
from volsplat.schemas import Projection
from volsplat.synthetic import make_camera, rotation_about_y


def gaussian(scales=(1.0, 1.0, 1.0), position=(0.0, 0.0, 0.0), theta_raw=0.0, rotation=(1.0, 0.0, 0.0, 0.0)):
    return Gaussian3D(
        position=np.asarray(position, dtype=np.float64),
        rotation=np.asarray(rotation, dtype=np.float64),
        log_scales=np.log(np.asarray(scales, dtype=np.float64)),
        theta_raw=theta_raw,
        sh_coeffs=np.zeros((1, 3)),
        activation=ThetaActivation.SIGMOID,
    )


def test_normalization_constant_identity():
    assert normalization_constant(np.eye(3), 3) == pytest.approx((2 * np.pi) ** 1.5, rel=1e-12)
    assert normalization_constant(np.eye(2), 2) == pytest.approx(2 * np.pi, rel=1e-12)


def test_normalization_constant_rejects_non_spd():
    with pytest.raises(DomainError):
        normalization_constant(np.diag([1.0, -1.0, 1.0]), 3)


def test_weight_and_amplitude_are_inverse():
    cov = np.diag([0.5, 2.0, 3.0])
    a = weight_to_amplitude(0.7, cov, 3)
    assert amplitude_to_weight(a, cov, 3) == pytest.approx(0.7, rel=1e-12)


def test_thin_side_constant_uses_two_largest_variances():
    assert thin_side_constant(np.diag([1.0, 4.0, 9.0])) == pytest.approx(2 * np.pi * 6.0, rel=1e-12)


def test_rotation_quaternion_consistency():
    R = rotation_about_y(0.7)
    q = rotation_to_quaternion(R)
    np.testing.assert_allclose(quaternion_to_rotation(q), R, atol=1e-12)


def test_density_at_mean_per_model():
    g = gaussian(scales=(2.0, 1.0, 0.5))
    theta = 0.5
    ots = evaluate_density(g, g.position, AmplitudeModel.OPACITY_THIN_SIDE)
    assert ots == pytest.approx(theta / (np.sqrt(2 * np.pi) * 0.5), rel=1e-12)
    ewa = evaluate_density(g, g.position, AmplitudeModel.EWA_MASS)
    assert ewa == pytest.approx(theta / normalization_constant(covariance_3d(g.rotation, g.log_scales), 3), rel=1e-12)


def test_opacity_amplitude_needs_a_view():
    with pytest.raises(DomainError):
        evaluate_density(gaussian(), np.zeros(3), AmplitudeModel.OPACITY_AMPLITUDE)


def test_condition_cap_is_enforced():
    with pytest.raises(DomainError):
        evaluate_density(gaussian(scales=(1.0, 1.0, 1e-9)), np.zeros(3), AmplitudeModel.EWA_MASS)


def test_non_finite_point_rejected():
    with pytest.raises(DomainError):
        evaluate_density(gaussian(), np.array([np.nan, 0.0, 0.0]), AmplitudeModel.EWA_MASS)


def test_project_centre_of_image():
    cam = make_camera(np.array([0.0, 0.0, 5.0]), np.zeros(3), (32, 32), 40.0)
    p = project(gaussian(), cam, AmplitudeModel.OPACITY_AMPLITUDE)
    np.testing.assert_allclose(p.mean2d, [16.0, 16.0], atol=1e-9)
    assert p.depth == pytest.approx(5.0)
    assert p.amplitude2d == pytest.approx(0.5)


def test_project_behind_camera_is_culled():
    cam = make_camera(np.array([0.0, 0.0, 5.0]), np.zeros(3), (32, 32), 40.0)
    assert project(gaussian(position=(0.0, 0.0, 8.0)), cam) is None


def test_amplitude2d_opacity_model_keeps_theta():
    a = amplitude2d(AmplitudeModel.OPACITY_AMPLITUDE, np.array(0.3), None, np.eye(2) * 7.0, np.array(9.0))
    assert float(a) == 0.3


def test_antialias_filter_preserves_mass():
    cam = make_camera(np.array([0.0, 0.0, 5.0]), np.zeros(3), (32, 32), 40.0)
    p = project(gaussian(scales=(0.3, 0.1, 0.2)), cam, AmplitudeModel.OPACITY_THIN_SIDE)
    filtered = antialias_filter(p, 0.3)
    assert footprint_mass(filtered) == pytest.approx(footprint_mass(p), rel=1e-12)
    assert filtered.amplitude2d < p.amplitude2d
    with pytest.raises(DomainError):
        antialias_filter(p, -1.0)


def _affine_view(direction):
    eye = 5.0 * np.asarray(direction, dtype=np.float64) / np.linalg.norm(direction)
    return make_camera(eye, np.zeros(3), (64, 64), 30.0, Projection.AFFINE)


def test_ots_thin_side_view_gives_theta():
    g = gaussian(scales=(0.6, 0.4, 0.2), theta_raw=0.0)
    p = project(g, _affine_view([0.0, 0.0, 1.0]), AmplitudeModel.OPACITY_THIN_SIDE)
    assert p.amplitude2d == pytest.approx(0.5, rel=1e-12)


def test_ots_footprint_mass_is_view_invariant():
    g = gaussian(scales=(0.6, 0.2, 0.2), rotation=rotation_to_quaternion(rotation_about_y(0.3)))
    rng = np.random.default_rng(3)
    masses = [
        footprint_mass(project(g, _affine_view(d), AmplitudeModel.OPACITY_THIN_SIDE))
        for d in rng.normal(size=(100, 3))
    ]
    assert max(masses) / min(masses) - 1.0 < 1e-6


def test_opacity_model_peak_fixed_but_mass_varies():
    g = gaussian(scales=(0.6, 0.2, 0.2))
    rng = np.random.default_rng(4)
    directions = np.vstack([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], rng.normal(size=(98, 3))])
    projected = [project(g, _affine_view(d), AmplitudeModel.OPACITY_AMPLITUDE) for d in directions]
    assert all(p.amplitude2d == 0.5 for p in projected)
    masses = [footprint_mass(p) for p in projected]
    assert max(masses) / min(masses) > 1.5


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return quaternion_to_rotation(q / np.linalg.norm(q))


def _random_spd(rng, dim: int) -> np.ndarray:
    a = rng.normal(size=(dim, dim))
    cov = a @ a.T + 0.1 * np.eye(dim)
    return 0.5 * (cov + cov.T)


def test_weight_amplitude_round_trip_over_random_covariances():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(10_000):
        dim = int(rng.integers(1, 4))
        cov = _random_spd(rng, dim)
        w = rng.uniform(0.0, 5.0)
        back = amplitude_to_weight(weight_to_amplitude(w, cov, dim), cov, dim)
        worst = max(worst, abs(back - w) / max(w, 1e-300))
    assert worst <= 1e-12


def test_ewa_mass_footprint_integrates_to_weight():
    g = gaussian(scales=(0.3, 0.1, 0.2), rotation=rotation_to_quaternion(rotation_about_y(0.4)))
    cam = _affine_view([0.2, 0.3, 1.0])
    p = project(g, cam, AmplitudeModel.EWA_MASS)
    spread = np.sqrt(np.linalg.eigvalsh(p.cov2d))
    step = spread[0] / 10.0
    axis = np.arange(-10.0 * spread[1], 10.0 * spread[1] + step, step)
    dx, dy = np.meshgrid(axis, axis)
    conic = np.linalg.inv(p.cov2d)
    m = conic[0, 0] * dx ** 2 + 2.0 * conic[0, 1] * dx * dy + conic[1, 1] * dy ** 2
    pixel_mass = p.amplitude2d * np.exp(-0.5 * m).sum() * step * step
    # pixels per world unit squared
    world_mass = pixel_mass / (cam.fx * cam.fy)
    assert world_mass == pytest.approx(0.5, rel=1e-4)


def test_thin_side_constant_bounds_every_orthographic_normalizer():
    rng = np.random.default_rng(12)
    cov = covariance_3d(rotation_to_quaternion(_random_rotation(rng)), np.log([0.7, 0.3, 0.1]))
    bound = thin_side_constant(cov)
    for v in rng.normal(size=(1000, 3)):
        v /= np.linalg.norm(v)
        basis = np.linalg.svd(v[None, :])[2][1:]
        marginal = basis @ cov @ basis.T
        assert normalization_constant(0.5 * (marginal + marginal.T), 2) <= bound * (1.0 + 1e-12)


def test_thin_side_constant_is_rotation_invariant():
    rng = np.random.default_rng(13)
    for _ in range(20):
        R = _random_rotation(rng)
        cov = R @ np.diag([9.0, 4.0, 1.0]) @ R.T
        assert thin_side_constant(0.5 * (cov + cov.T)) == pytest.approx(2 * np.pi * 6.0, abs=1e-9)


@pytest.mark.parametrize("model", [AmplitudeModel.EWA_MASS, AmplitudeModel.OPACITY_THIN_SIDE])
def test_density_is_rotation_equivariant(model):
    rng = np.random.default_rng(14)
    g = gaussian(scales=(0.5, 0.2, 0.1), position=(0.3, -0.1, 0.2), rotation=rotation_to_quaternion(_random_rotation(rng)))
    for _ in range(50):
        R = _random_rotation(rng)
        point = g.position + rng.normal(scale=0.3, size=3)
        turned = gaussian(
            scales=(0.5, 0.2, 0.1),
            position=R @ g.position,
            rotation=rotation_to_quaternion(R @ quaternion_to_rotation(g.rotation)),
        )
        assert evaluate_density(turned, R @ point, model) == pytest.approx(evaluate_density(g, point, model), rel=1e-9)


def test_on_axis_screen_block_is_quarter_identity():
    cam = make_camera(np.array([0.0, 0.0, 2.0]), np.zeros(3), (32, 32), 40.0)
    J2 = screen_jacobian(np.array([[0.0, 0.0, 2.0]]), cam)[0]
    np.testing.assert_allclose(J2 @ J2.T, np.diag([0.25, 0.25]), atol=1e-15)
    p = project(gaussian(), cam, AmplitudeModel.OPACITY_AMPLITUDE)
    np.testing.assert_allclose(p.cov2d, np.diag([cam.fx ** 2 / 4.0, cam.fy ** 2 / 4.0]), rtol=1e-12, atol=1e-12)


def test_off_axis_footprint_stretches_radially():
    cam = make_camera(np.array([0.0, 0.0, 5.0]), np.zeros(3), (64, 64), 40.0)
    on_axis = project(gaussian(scales=(0.2, 0.2, 0.2)), cam, AmplitudeModel.OPACITY_AMPLITUDE)
    off_axis = project(gaussian(scales=(0.2, 0.2, 0.2), position=(1.0, 0.0, 0.0)), cam, AmplitudeModel.OPACITY_AMPLITUDE)
    np.testing.assert_allclose(on_axis.cov2d[0, 0], on_axis.cov2d[1, 1], rtol=1e-12)
    z = off_axis.depth
    expected_xx = 0.04 * cam.fx ** 2 * (1.0 / z ** 2 + 1.0 / z ** 4)
    assert off_axis.cov2d[0, 0] == pytest.approx(expected_xx, rel=1e-9)
    assert off_axis.cov2d[1, 1] == pytest.approx(0.04 * cam.fy ** 2 / z ** 2, rel=1e-9)
    assert off_axis.cov2d[0, 0] > off_axis.cov2d[1, 1]
