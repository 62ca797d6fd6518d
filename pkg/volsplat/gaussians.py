"""Gaussian algebra shared by every renderer.

Normalization constants, quaternion/scale parameterization, the three amplitude
models and the locally-affine projection to screen space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from volsplat.activations import activate_theta
from volsplat.appearance import eval_sh_batch
from volsplat.config import settings
from volsplat.exceptions import DomainError
from volsplat.models import AmplitudeModel, Gaussian3D, Scene
from volsplat.schemas import Camera, JacobianMode

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
SQRT_TWO_PI = np.sqrt(TWO_PI)


# ---------------------------------------------------------------------------
# Parameterization
# ---------------------------------------------------------------------------

def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """(…, 4) quaternions (w, x, y, z), normalized first, to (…, 3, 3) rotations."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Inverse of quaternion_to_rotation for a single proper rotation; w ≥ 0."""
    R = np.asarray(R, dtype=np.float64)
    trace = np.trace(R)
    if trace > 0:
        s = np.sqrt(trace + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def covariance_factor(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """M = R·diag(σ) so that Σ = M·Mᵀ."""
    R = quaternion_to_rotation(rotations)
    return R * np.exp(np.asarray(log_scales, dtype=np.float64))[..., None, :]


def covariance_3d(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    M = covariance_factor(rotations, log_scales)
    return M @ np.swapaxes(M, -1, -2)


def precision_3d(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Σ⁻¹ = R·diag(σ⁻²)·Rᵀ, built from the factors so it never inverts Σ."""
    R = quaternion_to_rotation(rotations)
    Ninv = R * np.exp(-np.asarray(log_scales, dtype=np.float64))[..., None, :]
    return Ninv @ np.swapaxes(Ninv, -1, -2)


# ---------------------------------------------------------------------------
# Normalization and amplitude conversions
# ---------------------------------------------------------------------------

def _spd_determinant(cov: np.ndarray, dim: int) -> float:
    if dim not in (1, 2, 3):
        raise DomainError(f"Dimension must be 1, 2 or 3, got {dim}")
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape != (dim, dim):
        raise DomainError(f"Expected a {dim}×{dim} covariance, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
        raise DomainError("Covariance is not symmetric")
    eigenvalues = np.linalg.eigvalsh(cov)
    if eigenvalues[0] <= 0:
        raise DomainError(f"Covariance is not positive definite (min eigenvalue {eigenvalues[0]:.3e})")
    return float(np.linalg.det(cov))


def normalization_constant(cov: np.ndarray, dim: int) -> float:
    """I_D(Σ) = sqrt((2π)^D · det Σ), the integral of the unnormalized Gaussian."""
    return float(np.sqrt(TWO_PI ** dim * _spd_determinant(cov, dim)))


def weight_to_amplitude(w: float, cov: np.ndarray, dim: int) -> float:
    return w / normalization_constant(cov, dim)


def amplitude_to_weight(a: float, cov: np.ndarray, dim: int) -> float:
    return a * normalization_constant(cov, dim)


def thin_side_constant(cov: np.ndarray) -> float:
    """I₂*(Σ) = 2π·sqrt(λ₁λ₂) over the two largest eigenvalues: the largest 2D normalizer."""
    _spd_determinant(cov, 3)
    eigenvalues = np.linalg.eigvalsh(np.asarray(cov, dtype=np.float64))
    return float(TWO_PI * np.sqrt(eigenvalues[2] * eigenvalues[1]))


def thin_side_constant_from_scales(log_scales: np.ndarray) -> np.ndarray:
    """I₂* from log-scales: 2π times the product of the two largest σ."""
    s = np.sort(np.exp(np.asarray(log_scales, dtype=np.float64)), axis=-1)
    return TWO_PI * s[..., 2] * s[..., 1]


def amplitude_3d(
    model: AmplitudeModel,
    theta: np.ndarray,
    log_scales: np.ndarray,
    precision: np.ndarray | None = None,
    view_dirs: np.ndarray | None = None,
) -> np.ndarray:
    """Peak value a of the 3D density for each model.

    EwaMass a = θ/I₃, OpacityThinSide a = θ·I₂*/I₃ = θ/(√(2π)·σ_min),
    OpacityAmplitude a = θ·I₂(Σ′)/I₃ where Σ′ marginalizes Σ along the view
    direction v, which reduces to θ·sqrt(vᵀΣ⁻¹v)/√(2π).
    """
    model = AmplitudeModel(model)
    theta = np.asarray(theta, dtype=np.float64)
    log_scales = np.asarray(log_scales, dtype=np.float64)
    if model is AmplitudeModel.EWA_MASS:
        return theta / (TWO_PI ** 1.5 * np.exp(log_scales.sum(axis=-1)))
    if model is AmplitudeModel.OPACITY_THIN_SIDE:
        return theta / (SQRT_TWO_PI * np.exp(log_scales.min(axis=-1)))
    if precision is None or view_dirs is None:
        raise DomainError("OpacityAmplitude needs a view: its 3D amplitude is view-dependent")
    quad = np.einsum("...i,...ij,...j->...", view_dirs, precision, view_dirs)
    return theta * np.sqrt(quad) / SQRT_TWO_PI


def _check_condition(log_scales: np.ndarray) -> None:
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    condition = s2.max() / s2.min()
    if condition > settings.condition_cap:
        raise DomainError(f"Covariance condition number {condition:.3e} exceeds cap {settings.condition_cap:.1e}")


def evaluate_density(
    g: Gaussian3D,
    point: np.ndarray,
    model: AmplitudeModel,
    view: Camera | None = None,
) -> float:
    """a·exp(−½ (x−μ)ᵀΣ⁻¹(x−μ)) with a chosen by the amplitude model."""
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise DomainError("Query point must be finite")
    _check_condition(g.log_scales)
    P = precision_3d(g.rotation, g.log_scales)
    view_dir = None
    if AmplitudeModel(model) is AmplitudeModel.OPACITY_AMPLITUDE:
        if view is None:
            raise DomainError("OpacityAmplitude needs a view: its 3D amplitude is view-dependent")
        view_dir = view.view_directions(g.position[None])[0]
    a = amplitude_3d(model, g.theta, g.log_scales, P, view_dir)
    d = point - g.position
    return float(a * np.exp(-0.5 * d @ P @ d))


def amplitude2d(
    model: AmplitudeModel,
    theta: np.ndarray,
    cov3d: np.ndarray | None,
    cov2d: np.ndarray,
    jac_det: np.ndarray,
    thin_side: np.ndarray | None = None,
) -> np.ndarray:
    """Projected peak a′ with Σ′ in pixels² and jac_det = |det| of the pixel map.

    OpacityAmplitude keeps a′ = θ; EwaMass a′ = θ·D/I₂(Σ′);
    OpacityThinSide a′ = θ·I₂*(Σ)·D/I₂(Σ′).
    """
    model = AmplitudeModel(model)
    theta = np.asarray(theta, dtype=np.float64)
    if model is AmplitudeModel.OPACITY_AMPLITUDE:
        return theta.copy()
    i2 = TWO_PI * np.sqrt(_det2(np.asarray(cov2d, dtype=np.float64)))
    a = theta * jac_det / i2
    if model is AmplitudeModel.OPACITY_THIN_SIDE:
        if thin_side is None:
            thin_side = thin_side_constant(cov3d)
        a = a * thin_side
    return a


def _det2(c: np.ndarray) -> np.ndarray:
    return c[..., 0, 0] * c[..., 1, 1] - c[..., 0, 1] * c[..., 1, 0]


def _inv2(c: np.ndarray) -> np.ndarray:
    det = _det2(c)
    inv = np.empty_like(c)
    inv[..., 0, 0] = c[..., 1, 1] / det
    inv[..., 1, 1] = c[..., 0, 0] / det
    inv[..., 0, 1] = -c[..., 0, 1] / det
    inv[..., 1, 0] = -c[..., 1, 0] / det
    return inv


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    amplitude2d: float
    rgb: np.ndarray
    source_index: int


@dataclass
class ProjectedScene:
    """Per-view footprints of a whole scene plus what the backward pass reuses.

    Arrays cover every Gaussian; ``visible`` marks those in front of the near plane.
    ``cov2d`` and ``amplitude2d`` are after the anti-aliasing convolution.
    """

    visible: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    amplitude2d: np.ndarray
    rgb: np.ndarray
    cam_points: np.ndarray
    cov3d: np.ndarray
    cov2d_raw: np.ndarray
    screen_map: np.ndarray  # A = F·J₂·R_w, (N, 2, 3)
    jac_det: np.ndarray
    theta: np.ndarray
    amplitude2d_raw: np.ndarray
    view_dirs: np.ndarray
    rgb_clamped: np.ndarray
    precision: np.ndarray
    means3d: np.ndarray

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(self.visible)


def jacobian_determinant(cam_points: np.ndarray, cam: Camera, mode: JacobianMode) -> np.ndarray:
    """D = |det| of the locally-affine pixel map around each camera-space point."""
    t = np.asarray(cam_points, dtype=np.float64).reshape(-1, 3)
    if cam.is_affine:
        return np.full(t.shape[0], cam.fx * cam.fy)
    tz = t[:, 2]
    if JacobianMode(mode) is JacobianMode.FULL:
        return cam.fx * cam.fy * np.linalg.norm(t, axis=1) / tz ** 3
    return cam.fx * cam.fy / tz ** 2


def screen_jacobian(cam_points: np.ndarray, cam: Camera) -> np.ndarray:
    """Top two rows J₂ of the locally-affine projection, (N, 2, 3).

    The third (depth) row never reaches the 2×2 screen block of J·W·Σ·Wᵀ·Jᵀ.
    """
    t = np.asarray(cam_points, dtype=np.float64).reshape(-1, 3)
    J = np.zeros((t.shape[0], 2, 3))
    if cam.is_affine:
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        return J
    inv_z = 1.0 / t[:, 2]
    J[:, 0, 0] = inv_z
    J[:, 1, 1] = inv_z
    J[:, 0, 2] = -t[:, 0] * inv_z ** 2
    J[:, 1, 2] = -t[:, 1] * inv_z ** 2
    return J


def project_points(cam_points: np.ndarray, cam: Camera) -> np.ndarray:
    t = np.asarray(cam_points, dtype=np.float64).reshape(-1, 3)
    if cam.is_affine:
        return np.stack([cam.fx * t[:, 0] + cam.cx, cam.fy * t[:, 1] + cam.cy], axis=1)
    return np.stack([cam.fx * t[:, 0] / t[:, 2] + cam.cx, cam.fy * t[:, 1] / t[:, 2] + cam.cy], axis=1)


def project_scene(
    scene: Scene,
    cam: Camera,
    model: AmplitudeModel,
    jacobian_mode: JacobianMode = JacobianMode.SCREEN_BLOCK,
    filter_variance: float | None = None,
) -> ProjectedScene:
    """Project every Gaussian of the scene; culled ones keep zero amplitude."""
    if filter_variance is None:
        filter_variance = settings.filter_variance
    n = len(scene)
    R_w = cam.R
    cam_points = scene.positions @ R_w.T + cam.T
    visible = cam_points[:, 2] > settings.near_plane if n else np.zeros(0, dtype=bool)
    # culled Gaussians get a dummy depth so the algebra below stays finite
    safe_points = np.where(visible[:, None], cam_points, np.array([0.0, 0.0, 1.0]))

    cov3d = covariance_3d(scene.rotations, scene.log_scales)
    precision = precision_3d(scene.rotations, scene.log_scales)
    J2 = screen_jacobian(safe_points, cam)
    F = np.array([[cam.fx, 0.0], [0.0, cam.fy]])
    A = F @ J2 @ R_w
    cov2d_raw = A @ cov3d @ np.swapaxes(A, -1, -2)
    cov2d_raw = 0.5 * (cov2d_raw + np.swapaxes(cov2d_raw, -1, -2))
    jac_det = jacobian_determinant(safe_points, cam, jacobian_mode)
    theta = activate_theta(scene.theta_raw, scene.activation)

    thin_side = thin_side_constant_from_scales(scene.log_scales) if n else np.zeros(0)
    a_raw = amplitude2d(model, theta, cov3d, cov2d_raw, jac_det, thin_side=thin_side)
    cov2d = cov2d_raw + filter_variance * np.eye(2)
    a = a_raw * np.sqrt(_det2(cov2d_raw) / _det2(cov2d)) if n else a_raw

    view_dirs = cam.view_directions(scene.positions) if n else np.zeros((0, 3))
    rgb_unclamped = eval_sh_batch(scene.sh_coeffs, view_dirs, scene.active_sh_degree)
    rgb = np.maximum(rgb_unclamped, 0.0)

    a = np.where(visible, a, 0.0)
    return ProjectedScene(
        visible=visible,
        mean2d=project_points(safe_points, cam),
        cov2d=cov2d,
        conic=_inv2(cov2d) if n else np.zeros((0, 2, 2)),
        depth=cam_points[:, 2].copy(),
        amplitude2d=a,
        rgb=rgb,
        cam_points=safe_points,
        cov3d=cov3d,
        cov2d_raw=cov2d_raw,
        screen_map=A,
        jac_det=jac_det,
        theta=theta,
        amplitude2d_raw=np.where(visible, a_raw, 0.0),
        view_dirs=view_dirs,
        rgb_clamped=rgb_unclamped < 0.0,
        precision=precision,
        means3d=scene.positions,
    )


def project(
    g: Gaussian3D,
    cam: Camera,
    model: AmplitudeModel = AmplitudeModel.OPACITY_AMPLITUDE,
    jacobian_mode: JacobianMode = JacobianMode.SCREEN_BLOCK,
    source_index: int = 0,
) -> ProjectedGaussian | None:
    """Unfiltered footprint of one Gaussian; None when it lies behind the near plane."""
    scene = Scene.from_gaussians([g], model=model)
    proj = project_scene(scene, cam, model, jacobian_mode, filter_variance=0.0)
    if not proj.visible[0]:
        logger.debug("Gaussian %d culled at depth %.4f", source_index, proj.depth[0])
        return None
    return ProjectedGaussian(
        mean2d=proj.mean2d[0],
        cov2d=proj.cov2d_raw[0],
        depth=float(proj.depth[0]),
        amplitude2d=float(proj.amplitude2d_raw[0]),
        rgb=proj.rgb[0],
        source_index=source_index,
    )


def antialias_filter(p: ProjectedGaussian, filter_variance: float) -> ProjectedGaussian:
    """Convolve the footprint with an isotropic pixel filter, preserving its integral."""
    if filter_variance < 0:
        raise DomainError("filter_variance must be >= 0")
    if filter_variance == 0:
        return p
    filtered = p.cov2d + filter_variance * np.eye(2)
    scale = np.sqrt(_det2(p.cov2d) / _det2(filtered))
    return replace(p, cov2d=filtered, amplitude2d=float(p.amplitude2d * scale))


def footprint_mass(p: ProjectedGaussian) -> float:
    """Screen integral of a′·exp(−½ΔᵀΣ′⁻¹Δ) in pixel units."""
    return float(p.amplitude2d * TWO_PI * np.sqrt(_det2(p.cov2d)))
