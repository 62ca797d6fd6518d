"""Analytic backward passes for every renderer and the finite-difference harness.

Taylor blends are differentiated back to front from the stored final
transmittance; exponential blends (self-attenuation and the marcher) front to
back. Per-tile partial gradients are merged in tile order, so results do not
depend on the worker count.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from volsplat.activations import activation_derivative
from volsplat.appearance import sh_basis, sh_basis_grad
from volsplat.exceptions import ConfigurationError, UsageError
from volsplat.executor import map_ordered
from volsplat.gaussians import SQRT_TWO_PI, TWO_PI, ProjectedScene, _inv2, quaternion_to_rotation
from volsplat.models import PARAMETER_NAMES, AmplitudeModel, ParamGradients, Scene
from volsplat.raymarching import (
    BORDER_END,
    BORDER_START,
    SQRT_HALF_PI,
    SQRT_TWO,
    LineParams,
    MarchCache,
    MarchContext,
    RayRecord,
    in_bin_factor_derivative,
    march_line,
    prepare_march,
    restrict_to_rays,
)
from volsplat.schemas import (
    BlendMode,
    Camera,
    FdReport,
    GradientMode,
    JacobianMode,
    MarchOptions,
    ParamErrorSummary,
    SortMode,
    SplatOptions,
)
from volsplat.splatting import RenderOutput, SplatCache, TileTerms, column_order_for, make_tiles, tile_terms

logger = logging.getLogger(__name__)

TAYLOR_MODES = (BlendMode.TAYLOR_3DGS, BlendMode.TAYLOR_OTS)
FD_PERTURBATION_RANGE = (1e-7, 1e-3)


# ---------------------------------------------------------------------------
# Parameter chain shared by all renderers
# ---------------------------------------------------------------------------

def rotation_backward(rotations: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. stored quaternions from dL/dR, projected through normalization."""
    norm = np.linalg.norm(rotations, axis=1, keepdims=True)
    q = rotations / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = d_rot
    dw = 2.0 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1]
        - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
        + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
        - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    dq = np.stack([dw, dx, dy, dz], axis=1)
    return (dq - q * np.sum(q * dq, axis=1, keepdims=True)) / norm


def _symmetric(g: np.ndarray) -> np.ndarray:
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def covariance_backward(rotations: np.ndarray, log_scales: np.ndarray, d_cov: np.ndarray):
    """Σ = M·Mᵀ with M = R·diag(σ); returns (d_rotations, d_log_scales)."""
    G = _symmetric(d_cov)
    R = quaternion_to_rotation(rotations)
    s = np.exp(log_scales)
    dM = 2.0 * G @ (R * s[:, None, :])
    d_scales = np.sum(dM * R, axis=1)
    return rotation_backward(rotations, dM * s[:, None, :]), d_scales * s


def precision_backward(rotations: np.ndarray, log_scales: np.ndarray, d_prec: np.ndarray):
    """Σ⁻¹ = N·Nᵀ with N = R·diag(1/σ); returns (d_rotations, d_log_scales)."""
    G = _symmetric(d_prec)
    R = quaternion_to_rotation(rotations)
    inv_s = np.exp(-log_scales)
    dN = 2.0 * G @ (R * inv_s[:, None, :])
    d_inv = np.sum(dN * R, axis=1)
    return rotation_backward(rotations, dN * inv_s[:, None, :]), -d_inv * inv_s


def theta_backward(scene: Scene, d_theta: np.ndarray) -> np.ndarray:
    return d_theta * activation_derivative(scene.theta_raw, scene.activation)


def color_backward(
    scene: Scene,
    cam: Camera,
    view_dirs: np.ndarray,
    clamped: np.ndarray,
    d_rgb: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Through rgb = max(SH(dir) + 0.5, 0); returns (d_sh_coeffs, d_positions)."""
    degree = scene.active_sh_degree
    k = (degree + 1) ** 2
    d_raw = np.where(clamped, 0.0, d_rgb)
    d_sh = np.zeros_like(scene.sh_coeffs)
    d_pos = np.zeros_like(scene.positions)
    if len(scene) == 0:
        return d_sh, d_pos
    d_sh[:, :k, :] = sh_basis(view_dirs, degree)[:, :, None] * d_raw[:, None, :]
    if degree > 0 and not cam.is_affine:
        basis_grad = sh_basis_grad(view_dirs, degree)
        d_dir = np.einsum("nkc,nc,nkj->nj", scene.sh_coeffs[:, :k, :], d_raw, basis_grad)
        dist = np.linalg.norm(scene.positions - cam.center, axis=1, keepdims=True)
        d_pos = (d_dir - view_dirs * np.sum(view_dirs * d_dir, axis=1, keepdims=True)) / dist
    return d_sh, d_pos


@dataclass
class FootprintGradients:
    """dL w.r.t. the filtered screen footprints of every Gaussian."""

    amplitude: np.ndarray  # (N,) a″
    mean2d: np.ndarray  # (N, 2)
    conic: np.ndarray  # (N, 2, 2) Σ″⁻¹
    rgb: np.ndarray  # (N, 3) clamped color

    @classmethod
    def zeros(cls, n: int) -> FootprintGradients:
        return cls(np.zeros(n), np.zeros((n, 2)), np.zeros((n, 2, 2)), np.zeros((n, 3)))

    def add_at(self, index: np.ndarray, other: FootprintGradients) -> None:
        self.amplitude[index] += other.amplitude
        self.mean2d[index] += other.mean2d
        self.conic[index] += other.conic
        self.rgb[index] += other.rgb


def projection_backward(
    scene: Scene,
    cam: Camera,
    proj: ProjectedScene,
    model: AmplitudeModel,
    jacobian_mode: JacobianMode,
    grads: FootprintGradients,
) -> ParamGradients:
    """Chain footprint gradients through filtering, amplitude, EWA projection and color."""
    model = AmplitudeModel(model)
    out = ParamGradients.zeros_like(scene)
    if len(scene) == 0:
        return out
    visible = proj.visible
    d_a = np.where(visible, grads.amplitude, 0.0)
    d_mean2d = np.where(visible[:, None], grads.mean2d, 0.0)
    conic = proj.conic
    d_cov2d = -conic @ np.where(visible[:, None, None], grads.conic, 0.0) @ conic

    a = proj.amplitude2d
    cov_raw = proj.cov2d_raw
    det_raw = cov_raw[:, 0, 0] * cov_raw[:, 1, 1] - cov_raw[:, 0, 1] * cov_raw[:, 1, 0]
    det_filtered = proj.cov2d[:, 0, 0] * proj.cov2d[:, 1, 1] - proj.cov2d[:, 0, 1] * proj.cov2d[:, 1, 0]
    d_log_scales = np.zeros_like(scene.log_scales)
    d_log_det = np.zeros(len(scene))
    if model is AmplitudeModel.OPACITY_AMPLITUDE:
        d_theta = d_a * np.sqrt(det_raw / det_filtered)
        d_cov2d = d_cov2d + (0.5 * d_a * a)[:, None, None] * (_inv2(cov_raw) - conic)
    else:
        per_theta = proj.jac_det / (TWO_PI * np.sqrt(det_filtered))
        if model is AmplitudeModel.OPACITY_THIN_SIDE:
            per_theta = per_theta * TWO_PI * np.prod(np.sort(scene.scales, axis=1)[:, 1:], axis=1)
            largest = np.argsort(scene.log_scales, axis=1, kind="stable")[:, 1:]
            np.put_along_axis(d_log_scales, largest, (d_a * a)[:, None], axis=1)
        d_theta = d_a * per_theta
        d_cov2d = d_cov2d - (0.5 * d_a * a)[:, None, None] * conic
        d_log_det = d_a * a

    G = _symmetric(d_cov2d)
    A = proj.screen_map
    d_cov3d = np.swapaxes(A, -1, -2) @ G @ A
    d_A = 2.0 * G @ A @ proj.cov3d
    F = np.array([cam.fx, cam.fy])
    d_J = F[None, :, None] * d_A @ cam.R.T

    t = proj.cam_points
    d_t = np.zeros_like(t)
    if cam.is_affine:
        d_t[:, 0] = d_mean2d[:, 0] * cam.fx
        d_t[:, 1] = d_mean2d[:, 1] * cam.fy
    else:
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        d_t[:, 0] = -d_J[:, 0, 2] / tz ** 2 + d_mean2d[:, 0] * cam.fx / tz
        d_t[:, 1] = -d_J[:, 1, 2] / tz ** 2 + d_mean2d[:, 1] * cam.fy / tz
        d_t[:, 2] = (
            -(d_J[:, 0, 0] + d_J[:, 1, 1]) / tz ** 2
            + 2.0 * (tx * d_J[:, 0, 2] + ty * d_J[:, 1, 2]) / tz ** 3
            - (d_mean2d[:, 0] * cam.fx * tx + d_mean2d[:, 1] * cam.fy * ty) / tz ** 2
        )
        if JacobianMode(jacobian_mode) is JacobianMode.FULL:
            d_t += d_log_det[:, None] * t / np.sum(t * t, axis=1, keepdims=True)
            d_t[:, 2] -= 3.0 * d_log_det / tz
        else:
            d_t[:, 2] -= 2.0 * d_log_det / tz
    d_t = np.where(visible[:, None], d_t, 0.0)

    d_rot, d_ls_cov = covariance_backward(scene.rotations, scene.log_scales, d_cov3d)
    d_sh, d_pos_color = color_backward(scene, cam, proj.view_dirs, proj.rgb_clamped, grads.rgb)
    out.positions = d_t @ cam.R + d_pos_color
    out.rotations = d_rot
    out.log_scales = d_ls_cov + d_log_scales
    out.theta_raw = theta_backward(scene, d_theta)
    out.sh_coeffs = d_sh
    return out


# ---------------------------------------------------------------------------
# Splatting
# ---------------------------------------------------------------------------

def _kept_contributions(values: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """The first ``counts`` nonzero entries of each row, as blended in the forward pass."""
    nonzero = values > 0
    return nonzero & (np.cumsum(nonzero, axis=1) <= counts[:, None])


def taylor_blend_backward(
    values: np.ndarray,
    colors: np.ndarray,
    background: np.ndarray,
    final_transmittance: np.ndarray,
    counts: np.ndarray,
    alpha_clamp_max: float,
    d_radiance: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Back-to-front gradient of the Taylor blend w.r.t. (g, rgb) per row entry.

    Transmittances are rebuilt by dividing the stored final transmittance by the
    suffix products of (1 − α). Entries at the clamp get a zero gradient.
    """
    p, m = values.shape
    if m == 0:
        return np.zeros((p, 0)), np.zeros((p, 0, 3))
    kept = _kept_contributions(values, counts)
    alpha = np.where(kept, np.minimum(values, alpha_clamp_max), 0.0)
    factor = 1.0 - alpha
    suffix = np.cumprod(factor[:, ::-1], axis=1)[:, ::-1]
    t_before = final_transmittance[:, None] / suffix
    weights = alpha * t_before
    cw = weights[..., None] * colors
    behind = np.cumsum(cw[:, ::-1], axis=1)[:, ::-1] - cw
    behind = behind + final_transmittance[:, None, None] * background
    d_alpha = np.einsum("pmc,pc->pm", colors * t_before[..., None] - behind / factor[..., None], d_radiance)
    d_values = np.where(kept & (values < alpha_clamp_max), d_alpha, 0.0)
    d_colors = d_radiance[:, None, :] * weights[..., None]
    return d_values, d_colors


def satn_blend_backward(
    values: np.ndarray,
    colors: np.ndarray,
    background: np.ndarray,
    counts: np.ndarray,
    d_radiance: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Front-to-back gradient of the self-attenuation blend w.r.t. (f, rgb)."""
    p, m = values.shape
    if m == 0:
        return np.zeros((p, 0)), np.zeros((p, 0, 3))
    kept = _kept_contributions(values, counts)
    f = np.where(kept, values, 0.0)
    after = np.cumprod(np.exp(-f), axis=1)
    before = np.concatenate([np.ones((p, 1)), after[:, :-1]], axis=1)
    weights = -np.expm1(-f) * before
    prefix = np.cumsum(weights[..., None] * colors, axis=1)
    radiance = prefix[:, -1] + after[:, -1:] * background
    rest = radiance[:, None, :] - prefix
    d_f = np.einsum("pmc,pc->pm", colors * after[..., None] - rest, d_radiance)
    d_values = np.where(kept, d_f, 0.0)
    d_colors = d_radiance[:, None, :] * weights[..., None]
    return d_values, d_colors


def _footprint_partials(
    terms: TileTerms,
    proj: ProjectedScene,
    d_values: np.ndarray,
    d_colors: np.ndarray,
    per_pixel_order: bool,
) -> FootprintGradients:
    """Per-candidate footprint gradients of one tile, summed over its pixels."""
    if per_pixel_order:
        # back from blend order to candidate columns
        inverse = np.argsort(terms.order, axis=1)
        d_values = np.take_along_axis(d_values, inverse, axis=1)
        d_colors = np.take_along_axis(d_colors, inverse[..., None], axis=1)
        gauss = np.take_along_axis(terms.gauss, inverse, axis=1)
        values = np.take_along_axis(terms.values, inverse, axis=1)
        delta = np.take_along_axis(terms.delta, inverse[..., None], axis=1)
    else:
        gauss, values, delta = terms.gauss, terms.values, terms.delta
    coeff = d_values * values
    conic = proj.conic[terms.candidates]
    return FootprintGradients(
        amplitude=np.sum(d_values * gauss, axis=0),
        mean2d=np.einsum("pm,mij,pmj->mi", coeff, conic, delta),
        conic=-0.5 * np.einsum("pm,pmi,pmj->mij", coeff, delta, delta),
        rgb=np.sum(d_colors, axis=0),
    )


def _require_splat_cache(forward: RenderOutput | None) -> SplatCache:
    if forward is None or not isinstance(forward.cache, SplatCache):
        raise UsageError("Splatting backward pass needs the forward output of rasterize()")
    return forward.cache


def _check_loss_grad(loss_grad: np.ndarray, cam: Camera) -> np.ndarray:
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (cam.height, cam.width, 3):
        raise UsageError(f"loss_grad must have shape {(cam.height, cam.width, 3)}, got {loss_grad.shape}")
    return loss_grad


def _backward_splat(
    scene: Scene,
    cam: Camera,
    cache: SplatCache,
    loss_grad: np.ndarray,
) -> ParamGradients:
    proj = cache.projection
    opts = cache.options
    columns = column_order_for(proj, opts.sort_mode)
    background = scene.background

    def tile_backward(tile):
        terms = tile_terms(tile, proj, cam, opts, columns)
        d_out = loss_grad[terms.ys, terms.xs]
        counts = cache.contributors[terms.ys, terms.xs]
        if opts.blend_mode is BlendMode.SELF_ATTENUATION:
            d_values, d_colors = satn_blend_backward(terms.values, terms.colors, background, counts, d_out)
        else:
            d_values, d_colors = taylor_blend_backward(
                terms.values,
                terms.colors,
                background,
                cache.final_transmittance[terms.ys, terms.xs],
                counts,
                opts.alpha_clamp_max,
                d_out,
            )
        per_pixel = opts.sort_mode is SortMode.PER_PIXEL_DEPTH
        return terms.candidates, _footprint_partials(terms, proj, d_values, d_colors, per_pixel)

    total = FootprintGradients.zeros(len(scene))
    for candidates, partial in map_ordered(tile_backward, make_tiles(cam.width, cam.height, opts.tile_size)):
        total.add_at(candidates, partial)
    return projection_backward(scene, cam, proj, cache.model, opts.jacobian_mode, total)


def backward_splat_taylor(
    scene: Scene,
    cam: Camera,
    model: AmplitudeModel,
    opts: SplatOptions,
    loss_grad: np.ndarray,
    forward: RenderOutput | None = None,
) -> ParamGradients:
    cache = _require_splat_cache(forward)
    if opts.blend_mode not in TAYLOR_MODES:
        raise ConfigurationError(f"backward_splat_taylor cannot differentiate '{opts.blend_mode.value}'")
    if AmplitudeModel(model) is not cache.model:
        raise UsageError("Amplitude model differs from the one used in the forward pass")
    return _backward_splat(scene, cam, cache, _check_loss_grad(loss_grad, cam))


def backward_splat_satn(
    scene: Scene,
    cam: Camera,
    opts: SplatOptions,
    loss_grad: np.ndarray,
    forward: RenderOutput | None = None,
) -> ParamGradients:
    cache = _require_splat_cache(forward)
    if opts.blend_mode is not BlendMode.SELF_ATTENUATION:
        raise ConfigurationError(f"backward_splat_satn cannot differentiate '{opts.blend_mode.value}'")
    return _backward_splat(scene, cam, cache, _check_loss_grad(loss_grad, cam))


# ---------------------------------------------------------------------------
# Ray marching
# ---------------------------------------------------------------------------

@dataclass
class RayGradients:
    """dL w.r.t. the 3D quantities of the Gaussians active on one ray."""

    active: np.ndarray
    amplitude: np.ndarray  # (n,) 3D peak a
    precision: np.ndarray  # (n, 3, 3)
    position: np.ndarray  # (n, 3)
    rgb: np.ndarray  # (n, 3)


def _segment_partials(amp, sigma, peak, t0, t1):
    """(∂/∂amp, ∂/∂peak, ∂/∂σ, ∂/∂t0, ∂/∂t1) of the segment integral."""
    z0 = (t0 - peak) / (sigma * SQRT_TWO)
    z1 = (t1 - peak) / (sigma * SQRT_TWO)
    e0 = np.exp(-z0 * z0)
    e1 = np.exp(-z1 * z1)
    # the trailing bin ends at +inf, where z·e^{−z²} → 0
    z0e0 = np.where(np.isfinite(z0), z0, 0.0) * e0
    z1e1 = np.where(np.isfinite(z1), z1, 0.0) * e1
    per_amp = sigma * SQRT_HALF_PI * (erf(z1) - erf(z0))
    d_peak = amp * (e0 - e1)
    d_sigma = amp * per_amp / sigma - amp * SQRT_TWO * (z1e1 - z0e0)
    return per_amp, d_peak, d_sigma, -amp * e0, amp * e1


def march_ray_backward(
    record: RayRecord,
    line: LineParams,
    row: int,
    ctx: MarchContext,
    origin: np.ndarray,
    direction: np.ndarray,
    d_radiance: np.ndarray,
    opts: MarchOptions,
) -> RayGradients | None:
    """Front-to-back gradient of one marched ray.

    Detached mode treats bin borders as constants. Attached mode also chains
    dL/dborder to the peaks and widths that placed each border; which Gaussian
    wins a merged section stays fixed.
    """
    active = record.active
    if active.size == 0 or not record.batches:
        return None
    batches = record.batches
    rho_ik = np.concatenate([b.rho_ik[b.included] for b in batches])
    rho = np.concatenate([b.rho[b.included] for b in batches])
    gamma = np.concatenate([b.gamma[b.included] for b in batches])
    h = np.concatenate([b.h[b.included] for b in batches])
    t_before = np.concatenate([b.t_before[b.included] for b in batches])
    t0 = np.concatenate([b.borders.values[:-1][b.included] for b in batches])
    t1 = np.concatenate([b.borders.values[1:][b.included] for b in batches])

    colors = ctx.rgb[active]
    contrib = gamma * (h * t_before)[:, None]
    rest = record.rgb[None, :] - np.cumsum(contrib, axis=0)
    d_gamma = d_radiance[None, :] * (h * t_before)[:, None]
    d_rho = (gamma * (in_bin_factor_derivative(rho) * t_before)[:, None] - rest) @ d_radiance
    d_rho_ik = d_rho[:, None] + d_gamma @ colors.T
    d_rgb = rho_ik.T @ d_gamma

    amp, sigma, peak = record.amp, record.sigma, record.peak
    per_amp, dpk, dsg, dt0, dt1 = _segment_partials(amp[None, :], sigma[None, :], peak[None, :], t0[:, None], t1[:, None])
    d_amp = np.sum(d_rho_ik * per_amp, axis=0)
    d_peak = np.sum(d_rho_ik * dpk, axis=0)
    d_sigma = np.sum(d_rho_ik * dsg, axis=0)

    if opts.gradient_mode is GradientMode.ATTACHED:
        k = opts.section_extent_sigmas
        width_per_step = 2.0 * k / opts.bins_per_gaussian
        d_t0 = np.sum(d_rho_ik * dt0, axis=1)
        d_t1 = np.sum(d_rho_ik * dt1, axis=1)
        offset = 0
        for batch in batches:
            used = int(batch.included.sum())
            d_border = np.zeros(len(batch.borders))
            d_border[:used] += d_t0[offset:offset + used]
            d_border[1:used + 1] += d_t1[offset:offset + used]
            offset += used
            b = batch.borders
            for kind, sign in ((BORDER_START, -1.0), (BORDER_END, 1.0)):
                sel = b.kind == kind
                np.add.at(d_peak, b.source[sel], d_border[sel])
                np.add.at(d_sigma, b.source[sel], sign * k * d_border[sel])
            stepped = (b.winner >= 0) & (b.step > 0)
            np.add.at(d_sigma, b.winner[stepped], b.step[stepped] * width_per_step * d_border[stepped])

    alpha = line.alpha[row, active]
    beta = line.beta[row, active]
    envelope = line.envelope[row, active]
    d_alpha = (
        -d_peak * beta / alpha ** 2
        - 0.5 * d_sigma * alpha ** -1.5
        - 0.5 * d_amp * amp * beta ** 2 / alpha ** 2
    )
    d_beta = d_peak / alpha + d_amp * amp * beta / alpha
    d_gamma0 = -0.5 * d_amp * amp

    offsets = ctx.means[active] - origin
    P = ctx.precision[active]
    dd = np.outer(direction, direction)
    dm = np.einsum("i,nj->nij", direction, offsets)
    d_prec = (
        d_alpha[:, None, None] * dd
        + 0.5 * d_beta[:, None, None] * (dm + np.swapaxes(dm, 1, 2))
        + d_gamma0[:, None, None] * np.einsum("ni,nj->nij", offsets, offsets)
    )
    d_pos = d_beta[:, None] * (P @ direction) + 2.0 * d_gamma0[:, None] * np.einsum("nij,nj->ni", P, offsets)
    return RayGradients(active, d_amp * envelope, d_prec, d_pos, d_rgb)


def amplitude3d_backward(
    ctx: MarchContext,
    d_amplitude: np.ndarray,
    d_prec: np.ndarray,
    d_pos: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Through the 3D amplitude model; returns d_theta, d_log_scales (updates d_prec/d_pos in place)."""
    scene = ctx.scene
    a = ctx.amplitude
    d_log_scales = np.zeros_like(scene.log_scales)
    if ctx.model is AmplitudeModel.EWA_MASS:
        d_theta = d_amplitude / (TWO_PI ** 1.5 * np.exp(scene.log_scales.sum(axis=1)))
        d_log_scales -= (d_amplitude * a)[:, None]
    elif ctx.model is AmplitudeModel.OPACITY_THIN_SIDE:
        d_theta = d_amplitude / (SQRT_TWO_PI * np.exp(scene.log_scales.min(axis=1)))
        thinnest = np.argmin(scene.log_scales, axis=1)
        d_log_scales[np.arange(len(scene)), thinnest] -= d_amplitude * a
    else:
        v = ctx.view_dirs
        Pv = np.einsum("nij,nj->ni", ctx.precision, v)
        quad = np.sum(v * Pv, axis=1)
        d_theta = d_amplitude * np.sqrt(quad) / SQRT_TWO_PI
        d_quad = d_amplitude * a / (2.0 * quad)
        d_prec += d_quad[:, None, None] * np.einsum("ni,nj->nij", v, v)
        if not ctx.cam.is_affine:
            d_v = 2.0 * d_quad[:, None] * Pv
            dist = np.linalg.norm(scene.positions - ctx.cam.center, axis=1, keepdims=True)
            d_pos += (d_v - v * np.sum(v * d_v, axis=1, keepdims=True)) / dist
    return d_theta, d_log_scales


def backward_march(
    scene: Scene,
    cam: Camera,
    pixels: np.ndarray | None,
    model: AmplitudeModel,
    opts: MarchOptions,
    loss_grad: np.ndarray,
    forward: RenderOutput | None = None,
    tile_size: int = 16,
) -> ParamGradients:
    """Gradient of the marched image restricted to ``pixels`` ((P, 2) x, y); None means all pixels."""
    loss_grad = _check_loss_grad(loss_grad, cam)
    if forward is not None and isinstance(forward.cache, MarchCache):
        ctx = forward.cache.context
    else:
        ctx = prepare_march(scene, cam, model)
    n = len(scene)
    if pixels is None:
        ys, xs = np.mgrid[0:cam.height, 0:cam.width]
        pixels = np.stack([xs.ravel(), ys.ravel()], axis=1)
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    chunks = [pixels[i:i + tile_size * tile_size] for i in range(0, pixels.shape[0], tile_size * tile_size)]

    def chunk_backward(chunk: np.ndarray):
        origins, directions = cam.pixel_rays(chunk[:, 0], chunk[:, 1])
        line = restrict_to_rays(ctx.means, ctx.precision, ctx.amplitude, origins, directions)
        d_amp = np.zeros(n)
        d_prec = np.zeros((n, 3, 3))
        d_pos = np.zeros((n, 3))
        d_rgb = np.zeros((n, 3))
        for row, (x, y) in enumerate(chunk):
            d_out = loss_grad[y, x]
            if not np.any(d_out):
                continue
            record = march_line(ctx, line, row, opts)
            ray = march_ray_backward(record, line, row, ctx, origins[row], directions[row], d_out, opts)
            if ray is None:
                continue
            d_amp[ray.active] += ray.amplitude
            d_prec[ray.active] += ray.precision
            d_pos[ray.active] += ray.position
            d_rgb[ray.active] += ray.rgb
        return d_amp, d_prec, d_pos, d_rgb

    d_amp = np.zeros(n)
    d_prec = np.zeros((n, 3, 3))
    d_pos = np.zeros((n, 3))
    d_rgb = np.zeros((n, 3))
    for part in map_ordered(chunk_backward, chunks):
        d_amp += part[0]
        d_prec += part[1]
        d_pos += part[2]
        d_rgb += part[3]

    out = ParamGradients.zeros_like(scene)
    if n == 0:
        return out
    d_theta, d_ls_amp = amplitude3d_backward(ctx, d_amp, d_prec, d_pos)
    d_rot, d_ls_prec = precision_backward(scene.rotations, scene.log_scales, d_prec)
    d_sh, d_pos_color = color_backward(scene, cam, ctx.view_dirs, ctx.rgb_unclamped < 0.0, d_rgb)
    out.positions = d_pos + d_pos_color
    out.rotations = d_rot
    out.log_scales = d_ls_amp + d_ls_prec
    out.theta_raw = theta_backward(scene, d_theta)
    out.sh_coeffs = d_sh
    return out


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def weighted_image_loss(weights: np.ndarray) -> Callable[[np.ndarray], float]:
    """L(image) = Σ weights·image; its image gradient is ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    return lambda image: float(np.sum(weights * image))


def _rel_error(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(
    loss_fn: Callable[[Scene], float],
    scene: Scene,
    perturbation: float,
    analytic: ParamGradients,
    gaussians: Sequence[int] | None = None,
    params: Sequence[str] = PARAMETER_NAMES,
    floor: float = 1e-8,
    tolerance: float | None = None,
) -> FdReport:
    """Central differences per scalar parameter against an analytic gradient.

    Relative error uses the denominator max(|analytic|, |numeric|, floor).
    Non-finite losses are counted in the report rather than raised.

    With a ``tolerance``, entries that miss it are looked at again with
    second-order one-sided stencils on [x−2h, x] and [x, x+2h]. When the two
    sides disagree the loss is not smooth inside the central stencil (a sort
    swap, a clamp): the entry counts as a discontinuity and is judged on the
    closer side. Smooth entries keep their central error, so a wrong gradient
    still fails.
    """
    lo, hi = FD_PERTURBATION_RANGE
    if not lo <= perturbation <= hi:
        raise ConfigurationError(f"Perturbation must lie in [{lo:g}, {hi:g}], got {perturbation:g}")
    indices = range(len(scene)) if gaussians is None else gaussians
    h = perturbation
    f_base: float | None = None
    groups: list[ParamErrorSummary] = []
    all_errors: list[float] = []
    non_finite_total = 0
    jumps_total = 0
    for name in params:
        base = getattr(scene, name)
        grad = getattr(analytic, name)

        def loss_at(element, offset):
            shifted = base.copy()
            shifted[element] += offset
            return loss_fn(scene.with_params(**{name: shifted}))

        errors: list[float] = []
        non_finite = 0
        jumps = 0
        for i in indices:
            for flat in range(base[i].size):
                element = (i, *np.unravel_index(flat, base[i].shape))
                f_plus = loss_at(element, h)
                f_minus = loss_at(element, -h)
                numeric = (f_plus - f_minus) / (2.0 * h)
                exact = float(grad[element])
                if not (np.isfinite(numeric) and np.isfinite(exact)):
                    non_finite += 1
                    continue
                error = _rel_error(exact, numeric, floor)
                if tolerance is not None and error > tolerance:
                    if f_base is None:
                        f_base = loss_fn(scene)
                    ahead = (-3.0 * f_base + 4.0 * f_plus - loss_at(element, 2.0 * h)) / (2.0 * h)
                    behind = (3.0 * f_base - 4.0 * f_minus + loss_at(element, -2.0 * h)) / (2.0 * h)
                    one_sided = min(_rel_error(exact, ahead, floor), _rel_error(exact, behind, floor))
                    if _rel_error(ahead, behind, floor) > 10.0 * tolerance:
                        jumps += 1
                        error = one_sided
                errors.append(error)
        groups.append(ParamErrorSummary(
            name=name,
            count=len(errors),
            max_rel_error=max(errors, default=0.0),
            mean_rel_error=float(np.mean(errors)) if errors else 0.0,
            non_finite=non_finite,
            discontinuities=jumps,
        ))
        all_errors.extend(errors)
        non_finite_total += non_finite
        jumps_total += jumps
        logger.debug(
            "FD %s: max rel error %.3e over %d entries, %d across a discontinuity",
            name, groups[-1].max_rel_error, len(errors), jumps,
        )
    return FdReport(
        perturbation=perturbation,
        floor=floor,
        groups=groups,
        max_rel_error=max(all_errors, default=0.0),
        mean_rel_error=float(np.mean(all_errors)) if all_errors else 0.0,
        non_finite=non_finite_total,
        discontinuities=jumps_total,
    )
