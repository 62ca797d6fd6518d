from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from volsplat.exceptions import ConfigurationError, UsageError


class AmplitudeModel(str, enum.Enum):
    EWA_MASS = "ewa_mass"
    OPACITY_AMPLITUDE = "opacity_amplitude"
    OPACITY_THIN_SIDE = "opacity_thin_side"


class ThetaActivation(str, enum.Enum):
    SIGMOID = "sigmoid"
    SOFTPLUS_BETA2 = "softplus_beta2"


MAX_SH_DEGREE = 3


def sh_coefficient_count(degree: int) -> int:
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ConfigurationError(f"SH degree must be in 0..{MAX_SH_DEGREE}, got {degree}")
    return (degree + 1) ** 2


def sh_degree_for_count(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if (degree + 1) ** 2 != count:
        raise ConfigurationError(f"{count} SH coefficients do not match any degree")
    sh_coefficient_count(degree)
    return degree


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Unit quaternions; rows already unit to 1e-12 are returned untouched so reloading is lossless."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ConfigurationError("Zero-length quaternion cannot be normalized")
    return np.where(np.abs(norm - 1.0) > 1e-12, q / norm, q)


@dataclass(frozen=True, eq=False)
class Gaussian3D:
    """One primitive. θ = activation(theta_raw)."""

    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    log_scales: np.ndarray
    theta_raw: float
    sh_coeffs: np.ndarray  # (K, 3)
    activation: ThetaActivation = ThetaActivation.SIGMOID

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def theta(self) -> float:
        from volsplat.activations import activate_theta

        return float(activate_theta(self.theta_raw, self.activation))

    @property
    def sh_degree(self) -> int:
        return sh_degree_for_count(self.sh_coeffs.shape[0])


@dataclass(frozen=True, eq=False)
class Scene:
    """Ordered Gaussian mixture stored as parameter arrays plus a background color.

    Quaternions are renormalized on construction, so every Scene built from
    updated parameters keeps unit rotations.
    """

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) w, x, y, z
    log_scales: np.ndarray  # (N, 3)
    theta_raw: np.ndarray  # (N,)
    sh_coeffs: np.ndarray  # (N, K, 3)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    activation: ThetaActivation = ThetaActivation.SIGMOID
    model: AmplitudeModel = AmplitudeModel.OPACITY_AMPLITUDE
    active_sh_degree: int | None = None

    def __post_init__(self) -> None:
        n = np.asarray(self.positions).reshape(-1, 3).shape[0]
        positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        theta_raw = np.asarray(self.theta_raw, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[2] != 3:
            raise UsageError(f"sh_coeffs must have shape (N, K, 3), got {sh.shape}")
        degree = sh_degree_for_count(sh.shape[1])
        active = degree if self.active_sh_degree is None else int(self.active_sh_degree)
        if not 0 <= active <= degree:
            raise ConfigurationError(f"Active SH degree {active} exceeds stored degree {degree}")
        background = np.asarray(self.background, dtype=np.float64).reshape(3)

        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "rotations", normalize_quaternions(rotations) if n else rotations)
        object.__setattr__(self, "log_scales", log_scales)
        object.__setattr__(self, "theta_raw", theta_raw)
        object.__setattr__(self, "sh_coeffs", sh)
        object.__setattr__(self, "background", background)
        object.__setattr__(self, "activation", ThetaActivation(self.activation))
        object.__setattr__(self, "model", AmplitudeModel(self.model))
        object.__setattr__(self, "active_sh_degree", active)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_for_count(self.sh_coeffs.shape[1])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def theta(self) -> np.ndarray:
        from volsplat.activations import activate_theta

        return activate_theta(self.theta_raw, self.activation)

    def gaussian(self, index: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[index].copy(),
            rotation=self.rotations[index].copy(),
            log_scales=self.log_scales[index].copy(),
            theta_raw=float(self.theta_raw[index]),
            sh_coeffs=self.sh_coeffs[index].copy(),
            activation=self.activation,
        )

    def with_params(self, **params: Any) -> Scene:
        return replace(self, **params)

    def permuted(self, order: np.ndarray) -> Scene:
        order = np.asarray(order, dtype=np.int64)
        return self.with_params(
            positions=self.positions[order],
            rotations=self.rotations[order],
            log_scales=self.log_scales[order],
            theta_raw=self.theta_raw[order],
            sh_coeffs=self.sh_coeffs[order],
        )

    def with_float32_params(self) -> Scene:
        """Round every parameter through 32-bit floats, as a PLY file stores them."""
        return self.with_params(**{
            name: getattr(self, name).astype(np.float32).astype(np.float64)
            for name in PARAMETER_NAMES
        })

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D], **kwargs: Any) -> Scene:
        if not gaussians:
            degree = kwargs.pop("sh_degree", 0)
            k = sh_coefficient_count(degree)
            return cls(
                positions=np.zeros((0, 3)),
                rotations=np.zeros((0, 4)),
                log_scales=np.zeros((0, 3)),
                theta_raw=np.zeros(0),
                sh_coeffs=np.zeros((0, k, 3)),
                **kwargs,
            )
        kwargs.pop("sh_degree", None)
        kwargs.setdefault("activation", gaussians[0].activation)
        return cls(
            positions=np.stack([g.position for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            log_scales=np.stack([g.log_scales for g in gaussians]),
            theta_raw=np.array([g.theta_raw for g in gaussians]),
            sh_coeffs=np.stack([g.sh_coeffs for g in gaussians]),
            **kwargs,
        )

    @classmethod
    def empty(cls, sh_degree: int = 0, **kwargs: Any) -> Scene:
        return cls.from_gaussians([], sh_degree=sh_degree, **kwargs)


PARAMETER_NAMES = ("positions", "rotations", "log_scales", "theta_raw", "sh_coeffs")


@dataclass
class ParamGradients:
    """Per-Gaussian gradients, same shapes as the Scene parameter arrays."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    theta_raw: np.ndarray
    sh_coeffs: np.ndarray

    @classmethod
    def zeros_like(cls, scene: Scene) -> ParamGradients:
        return cls(**{name: np.zeros_like(value) for name, value in scene.parameters().items()})

    def items(self):
        return ((name, getattr(self, name)) for name in PARAMETER_NAMES)

    def __add__(self, other: ParamGradients) -> ParamGradients:
        return ParamGradients(**{name: value + getattr(other, name) for name, value in self.items()})

    def scaled(self, factor: float) -> ParamGradients:
        return ParamGradients(**{name: value * factor for name, value in self.items()})

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(value))) for _, value in self.items())


@dataclass
class Checkpoint:
    """Scene parameters plus optimizer state; serialized by the storage service."""

    scene: Scene
    iteration: int
    config: dict[str, Any]
    config_hash: str
    optimizer_state: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    optimizer_step: int = 0
    rng_state: dict[str, Any] | None = None
    trace: list[dict[str, Any]] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64).reshape(3))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction
