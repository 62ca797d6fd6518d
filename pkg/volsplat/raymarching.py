"""Extinction-correct ray marching through the full Gaussian mixture.

Each pixel ray is intersected with every Gaussian (giving 1D Gaussians along
the ray), the ±kσ supports are merged into an ordered density-section buffer,
sections are cut into bins, and bins are blended with exact transmittance.
A dense midpoint quadrature serves as the test oracle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from volsplat.activations import activate_theta
from volsplat.appearance import eval_sh_batch
from volsplat.exceptions import ConfigurationError, DomainError
from volsplat.executor import map_ordered
from volsplat.gaussians import SQRT_TWO_PI, amplitude_3d, precision_3d
from volsplat.models import AmplitudeModel, Gaussian3D, Ray, Scene
from volsplat.schemas import Camera, MarchOptions
from volsplat.splatting import RenderOutput, Tile, make_tiles

logger = logging.getLogger(__name__)

SQRT_HALF_PI = math.sqrt(math.pi / 2.0)
SQRT_TWO = math.sqrt(2.0)
ORACLE_EXTENT_SIGMAS = 8.0
ORACLE_STEP_GUARD = 20.0
ORACLE_CHUNK = 4096

# Border provenance kinds: a border sits at base + j·(2kσ_winner / bins_per_gaussian).
BORDER_CONSTANT = 0
BORDER_START = 1  # base = peak − kσ of the source Gaussian
BORDER_END = 2  # base = peak + kσ of the source Gaussian


@dataclass(frozen=True)
class Ray1DGaussian:
    peak_t: float
    sigma_t: float
    amplitude_1d: float
    source_index: int = 0


@dataclass(frozen=True)
class DensitySection:
    start: float
    end: float
    density: float


@dataclass(frozen=True, eq=False)
class Bin:
    t0: float
    t1: float
    rho: float
    gamma: np.ndarray


# ---------------------------------------------------------------------------
# 1D restriction
# ---------------------------------------------------------------------------

@dataclass
class LineParams:
    """Restriction of the mixture to rays: arrays shaped (P rays, N Gaussians)."""

    alpha: np.ndarray  # dᵀPd
    beta: np.ndarray  # dᵀP(μ−o)
    gamma0: np.ndarray  # (μ−o)ᵀP(μ−o)
    peak: np.ndarray
    sigma: np.ndarray
    envelope: np.ndarray  # exp(−½(γ₀ − β²/α))
    amplitude: np.ndarray  # a·envelope


def restrict_to_rays(
    means: np.ndarray,
    precision: np.ndarray,
    amplitude: np.ndarray,
    origins: np.ndarray,
    directions: np.ndarray,
) -> LineParams:
    offsets = means[None, :, :] - origins[:, None, :]
    Pd = np.einsum("nij,pj->pni", precision, directions)
    alpha = np.einsum("pni,pi->pn", Pd, directions)
    beta = np.einsum("pni,pni->pn", Pd, offsets)
    gamma0 = np.einsum("pni,nij,pnj->pn", offsets, precision, offsets)
    peak = beta / alpha
    sigma = 1.0 / np.sqrt(alpha)
    envelope = np.exp(-0.5 * np.maximum(gamma0 - beta * beta / alpha, 0.0))
    return LineParams(alpha, beta, gamma0, peak, sigma, envelope, amplitude[None, :] * envelope)


def _check_ray(ray: Ray) -> None:
    norm = np.linalg.norm(ray.direction)
    if not np.isfinite(norm) or norm == 0.0 or abs(norm - 1.0) > 1e-6:
        raise DomainError(f"Ray direction must be unit length, got norm {norm}")


def intersect_1d(g: Gaussian3D, ray: Ray, model: AmplitudeModel, view: Camera | None = None) -> Ray1DGaussian:
    """Restrict a·exp(−½qᵀΣ⁻¹q) to the line o + t·d."""
    _check_ray(ray)
    P = precision_3d(g.rotation, g.log_scales)
    view_dir = None
    if AmplitudeModel(model) is AmplitudeModel.OPACITY_AMPLITUDE:
        if view is None:
            raise DomainError("OpacityAmplitude needs a view: its 3D amplitude is view-dependent")
        view_dir = view.view_directions(g.position[None])[0]
    a = amplitude_3d(model, g.theta, g.log_scales, P, view_dir)
    line = restrict_to_rays(g.position[None], P[None], np.atleast_1d(a), ray.origin[None], ray.direction[None])
    return Ray1DGaussian(float(line.peak[0, 0]), float(line.sigma[0, 0]), float(line.amplitude[0, 0]))


def segment_integrals(amp, sigma, peak, t0, t1) -> np.ndarray:
    """∫_{t0}^{t1} amp·exp(−½((t−peak)/σ)²) dt, broadcasting; infinite bounds allowed."""
    z0 = (np.asarray(t0, dtype=np.float64) - peak) / (sigma * SQRT_TWO)
    z1 = (np.asarray(t1, dtype=np.float64) - peak) / (sigma * SQRT_TWO)
    return amp * sigma * SQRT_HALF_PI * (erf(z1) - erf(z0))


def gaussian_segment_integral(g1d: Ray1DGaussian, t0: float, t1: float) -> float:
    if t1 < t0:
        raise DomainError(f"Segment bounds out of order: {t0} > {t1}")
    return float(segment_integrals(g1d.amplitude_1d, g1d.sigma_t, g1d.peak_t, t0, t1))


# ---------------------------------------------------------------------------
# Density sections and bins
# ---------------------------------------------------------------------------

@dataclass
class Borders:
    """Bin borders plus where each came from (used by attached gradients)."""

    values: np.ndarray
    kind: np.ndarray
    source: np.ndarray
    winner: np.ndarray
    step: np.ndarray

    @classmethod
    def single(cls, value: float, kind: int = BORDER_CONSTANT, source: int = -1, winner: int = -1, step: int = 0):
        return cls(
            np.array([value], dtype=np.float64),
            np.array([kind]),
            np.array([source]),
            np.array([winner]),
            np.array([step]),
        )

    def __len__(self) -> int:
        return self.values.shape[0]

    def take(self, index) -> Borders:
        return Borders(self.values[index], self.kind[index], self.source[index], self.winner[index], self.step[index])

    @staticmethod
    def concat(parts: list[Borders]) -> Borders:
        return Borders(*(np.concatenate([getattr(p, name) for p in parts]) for name in ("values", "kind", "source", "winner", "step")))


@dataclass
class SectionBuffer:
    """Ordered, non-overlapping sections with provenance of their ends and winners."""

    start: Borders
    end: Borders
    density: np.ndarray
    winner: np.ndarray
    deferred: np.ndarray  # local Gaussian indices whose support runs past the buffer

    def sections(self) -> list[DensitySection]:
        return [
            DensitySection(float(s), float(e), float(d))
            for s, e, d in zip(self.start.values, self.end.values, self.density)
        ]

    def __len__(self) -> int:
        return self.density.shape[0]


def _proposals(peak: np.ndarray, sigma: np.ndarray, opts: MarchOptions):
    k = opts.section_extent_sigmas
    start = peak - k * sigma
    end = peak + k * sigma
    density = opts.bins_per_gaussian / (2.0 * k * sigma)
    return start, end, density


def build_section_buffer(
    peak: np.ndarray,
    sigma: np.ndarray,
    opts: MarchOptions,
    window: Borders,
) -> SectionBuffer:
    """Upper density envelope of the ±kσ proposals beyond the window start.

    Elementary intervals between consecutive proposal ends take the highest
    covering density; equal-density neighbours merge. The result depends only
    on the set of proposals, never on their order.
    """
    window_start = float(window.values[0])
    start, end, density = _proposals(np.asarray(peak, dtype=np.float64), np.asarray(sigma, dtype=np.float64), opts)
    clipped = start < window_start
    start_c = np.where(clipped, window_start, start)
    valid = end > start_c
    idx = np.flatnonzero(valid)
    empty = Borders(np.zeros(0), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
    if idx.size == 0:
        return SectionBuffer(empty, empty, np.zeros(0), np.zeros(0, int), np.zeros(0, int))

    # breakpoints with provenance; ties keep the first entry after a stable sort
    bp_values = np.concatenate([start_c[idx], end[idx]])
    bp_kind = np.concatenate([np.where(clipped[idx], -1, BORDER_START), np.full(idx.size, BORDER_END)])
    bp_source = np.concatenate([idx, idx])
    order = np.lexsort((bp_source, bp_kind, bp_values))
    bp_values, bp_kind, bp_source = bp_values[order], bp_kind[order], bp_source[order]
    unique_values, first = np.unique(bp_values, return_index=True)
    bp_kind, bp_source = bp_kind[first], bp_source[first]

    lo, hi = unique_values[:-1], unique_values[1:]
    covers = (start_c[idx][None, :] <= lo[:, None]) & (end[idx][None, :] >= hi[:, None])
    dens = np.where(covers, density[idx][None, :], 0.0)
    best = np.argmax(dens, axis=1)
    interval_density = dens[np.arange(lo.size), best]
    interval_winner = idx[best]

    starts, ends, densities, winners = [], [], [], []
    for j in range(lo.size):
        d = interval_density[j]
        if d <= 0.0:
            continue
        if densities and ends[-1] == j and densities[-1] == d:
            ends[-1] = j + 1
            continue
        starts.append(j)
        ends.append(j + 1)
        densities.append(d)
        winners.append(interval_winner[j])

    capacity = opts.section_buffer_capacity
    kept = slice(0, min(capacity, len(starts)))
    s_idx = np.array(starts[kept], dtype=int)
    e_idx = np.array(ends[kept], dtype=int)

    def borders_at(points: np.ndarray) -> Borders:
        kind = bp_kind[points]
        inherited = kind == -1
        return Borders(
            unique_values[points],
            np.where(inherited, window.kind[0], kind),
            np.where(inherited, window.source[0], bp_source[points]),
            np.where(inherited, window.winner[0], -1),
            np.where(inherited, window.step[0], 0),
        )

    start_b = borders_at(s_idx)
    end_b = borders_at(e_idx)
    deferred = np.zeros(0, dtype=int)
    if len(starts) > capacity:
        last_end = end_b.values[-1]
        deferred = idx[end[idx] > last_end]
        logger.debug("Section buffer full: %d sections, %d Gaussians deferred", len(starts), deferred.size)
    return SectionBuffer(start_b, end_b, np.array(densities[kept]), np.array(winners[kept], dtype=int), deferred)


def build_sections(
    g1ds: list[Ray1DGaussian],
    opts: MarchOptions | None = None,
    window_start: float = 0.0,
) -> tuple[list[DensitySection], list[int]]:
    """Ordered, non-overlapping sections plus the source indices deferred to the next batch."""
    opts = opts or MarchOptions()
    if not g1ds:
        return [], []
    peak = np.array([g.peak_t for g in g1ds])
    sigma = np.array([g.sigma_t for g in g1ds])
    buffer = build_section_buffer(peak, sigma, opts, Borders.single(window_start))
    return buffer.sections(), [g1ds[i].source_index for i in buffer.deferred]


def _section_count(length: float, density: float) -> int:
    raw = length * density
    nearest = round(raw)
    if abs(raw - nearest) <= 1e-9 * max(1.0, raw):
        return max(int(nearest), 1)
    return max(int(math.ceil(raw)), 1)


def section_borders(buffer: SectionBuffer, opts: MarchOptions) -> Borders:
    """Borders covering all sections, with one gap bin between non-touching sections."""
    k = opts.section_extent_sigmas
    parts: list[Borders] = []
    for s in range(len(buffer)):
        start = buffer.start.take(slice(s, s + 1))
        end = buffer.end.take(slice(s, s + 1))
        density = buffer.density[s]
        count = _section_count(end.values[0] - start.values[0], density)
        j = np.arange(count)
        winner = buffer.winner[s]
        # an inherited start already stepped by the same winner keeps counting
        carried = start.step[0] if start.winner[0] == winner else 0
        inner = Borders(
            start.values[0] + j / density,
            np.full(count, start.kind[0]),
            np.full(count, start.source[0]),
            np.where(j == 0, start.winner[0], winner),
            np.where(j == 0, start.step[0], j + carried),
        )
        if parts and parts[-1].values[-1] == inner.values[0]:
            parts[-1] = parts[-1].take(slice(0, -1))
        parts.append(inner)
        parts.append(end)
    if not parts:
        return Borders(np.zeros(0), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
    borders = Borders.concat(parts)
    # drop borders produced twice when one section ends exactly where the next begins
    keep = np.concatenate([[True], np.diff(borders.values) > 0])
    return borders.take(keep)


def sections_to_bins(
    sections: list[DensitySection],
    opts: MarchOptions | None = None,
) -> list[list[tuple[float, float]]]:
    """Bins of width 1/density per section (last one truncated), chained into batches."""
    opts = opts or MarchOptions()
    if not sections:
        return []
    buffer = SectionBuffer(
        Borders(np.array([s.start for s in sections]), *(np.zeros(len(sections), int) for _ in range(4))),
        Borders(np.array([s.end for s in sections]), *(np.zeros(len(sections), int) for _ in range(4))),
        np.array([s.density for s in sections]),
        np.zeros(len(sections), int),
        np.zeros(0, int),
    )
    values = section_borders(buffer, opts).values
    bins = list(zip(values[:-1].tolist(), values[1:].tolist()))
    size = opts.bins_per_batch
    return [bins[i:i + size] for i in range(0, len(bins), size)]


# ---------------------------------------------------------------------------
# Marching
# ---------------------------------------------------------------------------

def in_bin_factor(rho: np.ndarray) -> np.ndarray:
    """h(ρ) = (1 − e^{−ρ})/ρ, the fraction of a bin's emission surviving its own extinction.

    h → 1 as ρ → 0, so with fine bins the march reduces to the plain sum
    Σ γ_i·Π_{j<i} e^{−ρ_j}; the factor keeps coarse bins exact for one Gaussian.
    """
    rho = np.asarray(rho, dtype=np.float64)
    small = rho < 1e-4
    safe = np.where(small, 1.0, rho)
    return np.where(small, 1.0 - rho / 2.0 + rho * rho / 6.0, -np.expm1(-safe) / safe)


def in_bin_factor_derivative(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    small = rho < 1e-3
    safe = np.where(small, 1.0, rho)
    exact = (safe * np.exp(-safe) + np.expm1(-safe)) / (safe * safe)
    return np.where(small, -0.5 + rho / 3.0 - rho * rho / 8.0, exact)


@dataclass
class BatchRecord:
    borders: Borders
    rho_ik: np.ndarray  # (B, n)
    rho: np.ndarray
    gamma: np.ndarray  # (B, 3) Σ c_k ρ_ik
    h: np.ndarray
    t_before: np.ndarray
    included: np.ndarray  # (B,) bool


@dataclass
class RayRecord:
    rgb: np.ndarray
    transmittance: float
    active: np.ndarray  # scene indices of the Gaussians on this ray
    peak: np.ndarray
    sigma: np.ndarray
    amp: np.ndarray
    batches: list[BatchRecord] = field(default_factory=list)


@dataclass
class MarchContext:
    """Per-view Gaussian data shared by every ray of a render."""

    scene: Scene
    cam: Camera
    model: AmplitudeModel
    means: np.ndarray
    precision: np.ndarray
    theta: np.ndarray
    amplitude: np.ndarray
    view_dirs: np.ndarray
    rgb: np.ndarray
    rgb_unclamped: np.ndarray
    background: np.ndarray


def prepare_march(scene: Scene, cam: Camera, model: AmplitudeModel) -> MarchContext:
    model = AmplitudeModel(model)
    n = len(scene)
    precision = precision_3d(scene.rotations, scene.log_scales) if n else np.zeros((0, 3, 3))
    theta = activate_theta(scene.theta_raw, scene.activation)
    view_dirs = cam.view_directions(scene.positions) if n else np.zeros((0, 3))
    amplitude = amplitude_3d(model, theta, scene.log_scales, precision, view_dirs) if n else np.zeros(0)
    rgb_unclamped = eval_sh_batch(scene.sh_coeffs, view_dirs, scene.active_sh_degree)
    return MarchContext(
        scene=scene,
        cam=cam,
        model=model,
        means=scene.positions,
        precision=precision,
        theta=theta,
        amplitude=amplitude,
        view_dirs=view_dirs,
        rgb=np.maximum(rgb_unclamped, 0.0),
        rgb_unclamped=rgb_unclamped,
        background=scene.background,
    )


def _active_on_ray(line: LineParams, row: int, opts: MarchOptions, window_start: float) -> np.ndarray:
    mass = line.amplitude[row] * line.sigma[row] * SQRT_TWO_PI
    reach = line.peak[row] + ORACLE_EXTENT_SIGMAS * line.sigma[row]
    keep = np.isfinite(mass) & (mass >= opts.line_mass_cull) & (mass > 0) & (reach > window_start)
    return np.flatnonzero(keep)


def march_line(
    ctx: MarchContext,
    line: LineParams,
    row: int,
    opts: MarchOptions,
    window_start: float = 0.0,
) -> RayRecord:
    """March one ray whose 1D restriction is row ``row`` of ``line``."""
    active = _active_on_ray(line, row, opts, window_start)
    peak = line.peak[row, active]
    sigma = line.sigma[row, active]
    amp = line.amplitude[row, active]
    colors = ctx.rgb[active]
    record = RayRecord(ctx.background.copy(), 1.0, active, peak, sigma, amp)
    if active.size == 0:
        return record

    rgb = np.zeros(3)
    transmittance = 1.0
    window = Borders.single(window_start)
    stop_at = opts.termination_opacity
    while True:
        buffer = build_section_buffer(peak, sigma, opts, window)
        if len(buffer) == 0:
            borders = Borders.concat([window, Borders.single(np.inf)])
        else:
            parts = [window] if buffer.start.values[0] > window.values[0] else []
            parts.append(section_borders(buffer, opts))
            if buffer.deferred.size == 0:
                parts.append(Borders.single(np.inf))
            borders = Borders.concat(parts)
            borders = borders.take(slice(0, opts.bins_per_batch + 1))

        t0 = borders.values[:-1, None]
        t1 = borders.values[1:, None]
        rho_ik = segment_integrals(amp[None, :], sigma[None, :], peak[None, :], t0, t1)
        rho = rho_ik.sum(axis=1)
        gamma = rho_ik @ colors
        h = in_bin_factor(rho)
        t_after = transmittance * np.cumprod(np.exp(-rho))
        t_before = np.concatenate([[transmittance], t_after[:-1]])
        crossed = np.flatnonzero(t_after < stop_at)
        included = np.ones(rho.size, dtype=bool)
        if crossed.size:
            included[crossed[0] + 1:] = False
        contrib = (gamma * (h * t_before)[:, None])[included]
        rgb = rgb + np.cumsum(contrib, axis=0)[-1]
        transmittance = float(t_after[included][-1])
        record.batches.append(BatchRecord(borders, rho_ik, rho, gamma, h, t_before, included))

        if crossed.size or np.isinf(borders.values[-1]):
            break
        window = borders.take(slice(-1, None))

    record.rgb = rgb + transmittance * ctx.background
    record.transmittance = transmittance
    return record


def _pixel_rays(cam: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    return cam.pixel_rays(pixels[:, 0], pixels[:, 1])


def march(
    scene: Scene,
    cam: Camera,
    pixel: tuple[int, int],
    model: AmplitudeModel,
    opts: MarchOptions | None = None,
) -> tuple[np.ndarray, float]:
    """Radiance and final transmittance of one pixel (x, y)."""
    opts = opts or MarchOptions()
    ctx = prepare_march(scene, cam, model)
    origins, directions = _pixel_rays(cam, np.array([pixel]))
    line = restrict_to_rays(ctx.means, ctx.precision, ctx.amplitude, origins, directions)
    record = march_line(ctx, line, 0, opts)
    return record.rgb, record.transmittance


@dataclass
class MarchCache:
    context: MarchContext
    options: MarchOptions


def render_march(
    scene: Scene,
    cam: Camera,
    model: AmplitudeModel,
    opts: MarchOptions | None = None,
    tile_size: int = 16,
) -> RenderOutput:
    """March every pixel; tiles are independent work items."""
    opts = opts or MarchOptions()
    ctx = prepare_march(scene, cam, model)

    def march_tile(tile: Tile):
        xs, ys = tile.pixels()
        origins, directions = cam.pixel_rays(xs, ys)
        line = restrict_to_rays(ctx.means, ctx.precision, ctx.amplitude, origins, directions)
        records = [march_line(ctx, line, row, opts) for row in range(xs.size)]
        return xs, ys, records

    h, w = cam.height, cam.width
    radiance = np.empty((h, w, 3))
    transmittance = np.empty((h, w))
    counts = np.zeros((h, w), dtype=np.int64)
    for xs, ys, records in map_ordered(march_tile, make_tiles(w, h, tile_size)):
        radiance[ys, xs] = np.stack([r.rgb for r in records])
        transmittance[ys, xs] = [r.transmittance for r in records]
        counts[ys, xs] = [r.active.size for r in records]
    logger.debug("Marched %d Gaussians at %dx%d", len(scene), w, h)
    return RenderOutput(radiance, transmittance, counts, MarchCache(ctx, opts))


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------

def quadrature_oracle(
    scene: Scene,
    cam: Camera,
    pixel: tuple[int, int],
    model: AmplitudeModel,
    step: float,
) -> np.ndarray:
    """Uniform-step midpoint composition of the volume rendering integral along a pixel ray."""
    if step <= 0:
        raise ConfigurationError("Quadrature step must be > 0")
    ctx = prepare_march(scene, cam, model)
    origins, directions = _pixel_rays(cam, np.array([pixel]))
    line = restrict_to_rays(ctx.means, ctx.precision, ctx.amplitude, origins, directions)
    opts = MarchOptions(line_mass_cull=0.0)
    active = _active_on_ray(line, 0, opts, 0.0)
    if active.size == 0:
        return ctx.background.copy()
    peak, sigma, amp = line.peak[0, active], line.sigma[0, active], line.amplitude[0, active]
    colors = ctx.rgb[active]
    if step > sigma.min() / ORACLE_STEP_GUARD:
        raise ConfigurationError(
            f"Quadrature step {step:.3e} exceeds min σ_t/{ORACLE_STEP_GUARD:g} = {sigma.min() / ORACLE_STEP_GUARD:.3e}"
        )
    lo = max(0.0, float(np.min(peak - ORACLE_EXTENT_SIGMAS * sigma)))
    hi = float(np.max(peak + ORACLE_EXTENT_SIGMAS * sigma))
    count = int(math.ceil((hi - lo) / step))
    delta = (hi - lo) / count

    rgb = np.zeros(3)
    transmittance = 1.0
    for first in range(0, count, ORACLE_CHUNK):
        t = lo + (np.arange(first, min(first + ORACLE_CHUNK, count)) + 0.5) * delta
        f_k = amp[None, :] * np.exp(-0.5 * ((t[:, None] - peak[None, :]) / sigma[None, :]) ** 2)
        f = f_k.sum(axis=1)
        c = np.divide(f_k @ colors, f[:, None], out=np.zeros((t.size, 3)), where=f[:, None] > 0)
        t_after = transmittance * np.exp(-np.cumsum(f * delta))
        t_before = np.concatenate([[transmittance], t_after[:-1]])
        rgb = rgb + ((-np.expm1(-f * delta) * t_before)[:, None] * c).sum(axis=0)
        transmittance = float(t_after[-1])
    return rgb + transmittance * ctx.background
