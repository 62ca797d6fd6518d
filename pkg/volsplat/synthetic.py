"""Deterministic analysis scenes and orbiting camera rigs."""

from __future__ import annotations

import enum
import logging

import numpy as np

from volsplat.activations import inverse_activation
from volsplat.appearance import rgb_to_sh
from volsplat.exceptions import ConfigurationError
from volsplat.gaussians import quaternion_to_rotation, rotation_to_quaternion
from volsplat.models import AmplitudeModel, Scene, ThetaActivation
from volsplat.schemas import Camera, Projection, SyntheticParams

logger = logging.getLogger(__name__)


class SyntheticKind(str, enum.Enum):
    SINGLE_GAUSSIAN = "single_gaussian"
    CROSSED_PAIR = "crossed_pair"
    ANISOTROPIC_TRIPLET = "anisotropic_triplet"
    BLOB_CLOUD = "blob_cloud"


DEFAULT_THETA = {
    SyntheticKind.SINGLE_GAUSSIAN: 0.5,
    SyntheticKind.CROSSED_PAIR: 0.8,
    SyntheticKind.ANISOTROPIC_TRIPLET: 0.6,
    SyntheticKind.BLOB_CLOUD: 0.3,
}


def rotation_about_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, T) with x right, y down, z towards the target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ConfigurationError("Camera eye and target coincide")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, forward)) > 1.0 - 1e-9:
        up = np.array([0.0, 0.0, 1.0])
    down = -(up - np.dot(up, forward) * forward)
    down /= np.linalg.norm(down)
    right = np.cross(down, forward)
    R = np.stack([right, down, forward])
    return R, -R @ eye


def make_camera(
    eye: np.ndarray,
    target: np.ndarray,
    resolution: tuple[int, int],
    fov_degrees: float,
    projection: Projection = Projection.PERSPECTIVE,
) -> Camera:
    R, T = look_at(eye, target)
    width = resolution[0]
    half = np.tan(np.radians(fov_degrees) / 2.0)
    if Projection(projection) is Projection.AFFINE:
        # same field of view at the target distance, in pixels per world unit
        focal = width / (2.0 * half * np.linalg.norm(np.asarray(target) - np.asarray(eye)))
    else:
        focal = width / (2.0 * half)
    return Camera(
        focal=(focal, focal),
        resolution=resolution,
        rotation=tuple(map(tuple, R.tolist())),
        translation=tuple(T.tolist()),
        projection=projection,
    )


def orbit_rig(params: SyntheticParams, target: np.ndarray = (0.0, 0.0, 0.0)) -> list[Camera]:
    """Cameras evenly spaced in azimuth on a circle around the target; the first looks down −z."""
    elevation = np.radians(params.elevation_degrees)
    cameras = []
    for k in range(params.views):
        azimuth = 2.0 * np.pi * k / params.views
        eye = np.asarray(target) + params.radius * np.array([
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
            np.cos(elevation) * np.cos(azimuth),
        ])
        cameras.append(make_camera(eye, target, params.resolution, params.fov_degrees, params.projection))
    return cameras


def _scene(
    positions: np.ndarray,
    rotations: list[np.ndarray],
    scales: np.ndarray,
    theta: np.ndarray,
    colors: np.ndarray,
    params: SyntheticParams,
    model: AmplitudeModel,
    background: np.ndarray,
) -> Scene:
    activation = params.activation or ThetaActivation.SIGMOID
    sh = rgb_to_sh(np.asarray(colors, dtype=np.float64))[:, None, :]
    return Scene(
        positions=positions,
        rotations=np.stack([rotation_to_quaternion(R) for R in rotations]),
        log_scales=np.log(scales),
        theta_raw=inverse_activation(theta, activation),
        sh_coeffs=sh,
        background=background,
        activation=activation,
        model=model,
    )


def make_synthetic(kind: SyntheticKind | str, params: SyntheticParams | None = None) -> tuple[Scene, list[Camera]]:
    """Scene plus orbit rig for one of the analysis setups."""
    try:
        kind = SyntheticKind(kind)
    except ValueError:
        valid = ", ".join(k.value for k in SyntheticKind)
        raise ConfigurationError(f"Unknown synthetic scene '{kind}', expected one of: {valid}") from None
    params = params or SyntheticParams()
    theta = params.theta if params.theta is not None else DEFAULT_THETA[kind]
    model = params.model or AmplitudeModel.OPACITY_THIN_SIDE
    black = np.zeros(3)

    if kind is SyntheticKind.SINGLE_GAUSSIAN:
        scene = _scene(
            np.zeros((1, 3)), [np.eye(3)], np.ones((1, 3)), np.array([theta]),
            np.array([[1.0, 0.6, 0.2]]), params, model, black,
        )
    elif kind is SyntheticKind.CROSSED_PAIR:
        # long axes along (1, 0, 1)/√2 and (1, 0, −1)/√2
        scene = _scene(
            np.zeros((2, 3)),
            [rotation_about_y(-np.pi / 4), rotation_about_y(np.pi / 4)],
            np.array([[1.0, 0.25, 0.25], [1.0, 0.25, 0.25]]),
            np.full(2, theta),
            np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
            params, model, black,
        )
    elif kind is SyntheticKind.ANISOTROPIC_TRIPLET:
        scene = _scene(
            np.array([[-2.5, 0.0, 0.0], [0.0, 0.0, 0.0], [2.5, 0.0, 0.0]]),
            [rotation_about_y(angle) for angle in (0.0, np.pi / 4, np.pi / 2)],
            np.tile([1.0, 1.0, 0.1], (3, 1)),
            np.full(3, theta),
            np.array([[0.9, 0.3, 0.3], [0.3, 0.9, 0.3], [0.3, 0.3, 0.9]]),
            params, model, black,
        )
    else:
        rng = np.random.default_rng(params.seed)
        n = params.count
        direction = rng.normal(size=(n, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        positions = direction * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)
        quats = rng.normal(size=(n, 4))
        rotations = list(quaternion_to_rotation(quats))
        scales = np.exp(rng.uniform(np.log(0.05), np.log(0.2), size=(n, 3)))
        thetas = theta * rng.uniform(0.5, 1.5, size=n)
        colors = rng.uniform(0.1, 0.9, size=(n, 3))
        scene = _scene(positions, rotations, scales, thetas, colors, params, model, np.ones(3))

    logger.info("Built synthetic scene %s with %d Gaussians", kind.value, len(scene))
    return scene, orbit_rig(params)
