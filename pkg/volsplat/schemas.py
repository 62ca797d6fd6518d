from __future__ import annotations

import enum
import hashlib
import json

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from volsplat.config import settings
from volsplat.models import AmplitudeModel, ThetaActivation


class BlendMode(str, enum.Enum):
    TAYLOR_3DGS = "taylor_3dgs"
    TAYLOR_OTS = "taylor_ots"
    SELF_ATTENUATION = "self_attenuation"


class SortMode(str, enum.Enum):
    GLOBAL_MEAN_DEPTH = "global_mean_depth"
    PER_PIXEL_DEPTH = "per_pixel_depth"


class GradientMode(str, enum.Enum):
    DETACHED = "detached"
    ATTACHED = "attached"


class JacobianMode(str, enum.Enum):
    SCREEN_BLOCK = "screen_block"  # fx·fy / z²
    FULL = "full"  # fx·fy · l / z³


class Projection(str, enum.Enum):
    PERSPECTIVE = "perspective"
    AFFINE = "affine"


class Variant(str, enum.Enum):
    GS3D = "3dgs"
    GS3D_STP = "3dgs+stp"
    OTS = "ots"
    OTS_SATN = "ots+satn"
    GS3D_MARCHER = "3dgs-marcher"
    OTS_MARCHER = "ots-marcher"


class Camera(BaseModel):
    """Pinhole (or affine) camera with an OpenCV-style world-to-camera transform.

    x points right, y down, z forward. Pixel (i, j) is sampled at (i + 0.5, j + 0.5).
    """

    model_config = ConfigDict(frozen=True)

    focal: tuple[float, float]
    resolution: tuple[int, int]  # (width, height)
    principal_point: tuple[float, float] | None = None
    rotation: tuple[tuple[float, float, float], ...] = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    projection: Projection = Projection.PERSPECTIVE

    @field_validator("focal")
    @classmethod
    def _focal_positive(cls, v: tuple[float, float]) -> tuple[float, float]:
        if min(v) <= 0:
            raise ValueError(f"focal lengths must be > 0, got {v}")
        return v

    @field_validator("resolution")
    @classmethod
    def _resolution_positive(cls, v: tuple[int, int]) -> tuple[int, int]:
        if min(v) <= 0:
            raise ValueError(f"resolution must be positive, got {v}")
        return v

    @field_validator("rotation")
    @classmethod
    def _rotation_orthonormal(cls, v: tuple[tuple[float, float, float], ...]):
        r = np.asarray(v, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3×3")
        if not np.allclose(r @ r.T, np.eye(3), rtol=0.0, atol=1e-9) or np.linalg.det(r) <= 0:
            raise ValueError("rotation must be orthonormal with det +1 (within 1e-9)")
        return v

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def fx(self) -> float:
        return self.focal[0]

    @property
    def fy(self) -> float:
        return self.focal[1]

    @property
    def cx(self) -> float:
        return self.width / 2.0 if self.principal_point is None else self.principal_point[0]

    @property
    def cy(self) -> float:
        return self.height / 2.0 if self.principal_point is None else self.principal_point[1]

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64)

    @property
    def T(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.T

    @property
    def forward(self) -> np.ndarray:
        return self.R[2].copy()

    @property
    def is_affine(self) -> bool:
        return self.projection is Projection.AFFINE

    def view_directions(self, points: np.ndarray) -> np.ndarray:
        """Unit directions from the camera to each point (the forward axis for affine cameras)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.is_affine:
            return np.broadcast_to(self.forward, points.shape).copy()
        d = points - self.center
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def pixel_rays(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space ray origins and unit directions through pixel centres."""
        xs = np.asarray(xs, dtype=np.float64).ravel()
        ys = np.asarray(ys, dtype=np.float64).ravel()
        u = (xs + 0.5 - self.cx) / self.fx
        v = (ys + 0.5 - self.cy) / self.fy
        R, T = self.R, self.T
        if self.is_affine:
            local = np.stack([u, v, np.zeros_like(u)], axis=1)
            origins = (local - T) @ R
            directions = np.broadcast_to(R[2], origins.shape).copy()
            return origins, directions
        local = np.stack([u, v, np.ones_like(u)], axis=1)
        local /= np.linalg.norm(local, axis=1, keepdims=True)
        directions = local @ R
        origins = np.broadcast_to(self.center, directions.shape).copy()
        return origins, directions


class SplatOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    blend_mode: BlendMode = BlendMode.TAYLOR_3DGS
    sort_mode: SortMode = SortMode.GLOBAL_MEAN_DEPTH
    tile_size: int = Field(default_factory=lambda: settings.tile_size, ge=1)
    alpha_clamp_max: float = Field(default_factory=lambda: settings.alpha_clamp_max)
    termination_transmittance: float | None = None
    footprint_cutoff: float = Field(default_factory=lambda: settings.footprint_cutoff, gt=0)
    filter_variance: float = Field(default_factory=lambda: settings.filter_variance, ge=0)
    jacobian_mode: JacobianMode = JacobianMode.SCREEN_BLOCK

    @model_validator(mode="after")
    def _check_ranges(self) -> SplatOptions:
        if not 0.0 < self.alpha_clamp_max < 1.0:
            raise ValueError("alpha_clamp_max must lie in (0, 1)")
        t = self.termination_transmittance
        if t is not None and not 0.0 < t < 1.0:
            raise ValueError("termination_transmittance must lie in (0, 1)")
        return self

    @property
    def effective_termination(self) -> float:
        if self.termination_transmittance is not None:
            return self.termination_transmittance
        if self.blend_mode is BlendMode.SELF_ATTENUATION:
            return settings.satn_termination_transmittance
        return settings.termination_transmittance


class MarchOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    bins_per_batch: int = Field(default_factory=lambda: settings.bins_per_batch, ge=1)
    bins_per_gaussian: int = Field(default_factory=lambda: settings.bins_per_gaussian, ge=1)
    section_extent_sigmas: float = Field(default_factory=lambda: settings.section_extent_sigmas, gt=0)
    section_buffer_capacity: int = Field(default_factory=lambda: settings.section_buffer_capacity, ge=1)
    termination_opacity: float = Field(default_factory=lambda: settings.termination_opacity, gt=0, lt=1)
    gradient_mode: GradientMode = GradientMode.DETACHED
    line_mass_cull: float = Field(default_factory=lambda: settings.line_mass_cull, ge=0)


class LearningRates(BaseModel):
    model_config = ConfigDict(extra="forbid")

    position: float = Field(default=1.6e-4, ge=0)
    position_final: float = Field(default=1.6e-6, ge=0)
    sh_dc: float = Field(default=2.5e-3, ge=0)
    sh_rest: float = Field(default=2.5e-3 / 20.0, ge=0)
    theta: float = Field(default=0.05, ge=0)
    log_scales: float = Field(default=5e-3, ge=0)
    rotation: float = Field(default=1e-3, ge=0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: Variant = Variant.GS3D
    gaussian_count: int = Field(default=4000, ge=1)
    iterations: int = Field(default=3000, ge=1)
    learning_rates: LearningRates = Field(default_factory=LearningRates)
    ots_theta_lr_factor: float = Field(default=0.5, gt=0)
    theta_activation: ThetaActivation | None = None
    ssim_weight: float = Field(default=0.2, ge=0, le=1)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-15, gt=0)
    eval_interval: int = Field(default=500, ge=1)
    checkpoint_interval: int = Field(default=1000, ge=1)
    seed: int = 0
    sh_degree: int = Field(default=3, ge=0, le=3)
    sh_warmup_interval: int = Field(default=1000, ge=1)
    init_extent: float = Field(default=1.0, gt=0)
    init_theta: float | None = Field(default=None, gt=0)
    init_scale: float | None = Field(default=None, gt=0)
    filter_variance: float = Field(default_factory=lambda: settings.filter_variance, ge=0)
    march: MarchOptions = Field(default_factory=MarchOptions)

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class SyntheticParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    count: int = Field(default=64, ge=1)
    views: int = Field(default=8, ge=1)
    resolution: tuple[int, int] = (64, 64)
    fov_degrees: float = Field(default=40.0, gt=0, lt=180)
    radius: float = Field(default=4.0, gt=0)
    elevation_degrees: float = Field(default=15.0, gt=-90, lt=90)
    projection: Projection = Projection.PERSPECTIVE
    theta: float | None = Field(default=None, gt=0)
    model: AmplitudeModel | None = None
    activation: ThetaActivation | None = None


class ParamErrorSummary(BaseModel):
    name: str
    count: int
    max_rel_error: float
    mean_rel_error: float
    non_finite: int = 0
    discontinuities: int = 0


class FdReport(BaseModel):
    perturbation: float
    floor: float
    groups: list[ParamErrorSummary]
    max_rel_error: float
    mean_rel_error: float
    non_finite: int = 0
    discontinuities: int = 0  # entries whose stencil straddles a jump or kink

    def passed(self, tolerance: float) -> bool:
        return self.non_finite == 0 and self.max_rel_error <= tolerance


class GradcheckReport(BaseModel):
    variant: Variant
    seed: int
    tolerance: float
    passed: bool
    corrupted: bool = False
    gradient_mode: GradientMode | None = None
    report: FdReport
    notes: list[str] = []


class MetricRow(BaseModel):
    iteration: int
    loss: float
    test_psnr: float | None = None
    test_ssim: float | None = None
    wall_time: float


class CompareRow(BaseModel):
    variant: Variant
    gaussian_count: int
    test_psnr: float | None = None
    test_ssim: float | None = None
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None


class RenderSidecar(BaseModel):
    variant: Variant
    options_hash: str
    timing_s: float
    width: int
    height: int
    gaussian_count: int
    source: str
