"""Tile-based forward splatting.

Three blending laws (3DGS opacity, OTS extinction with Taylor transmittance,
OTS with exact self-attenuation) and two visibility orders (global mean depth,
exact per-pixel peak depth).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from volsplat.config import settings
from volsplat.exceptions import ConfigurationError
from volsplat.executor import map_ordered
from volsplat.gaussians import ProjectedGaussian, ProjectedScene, project_scene
from volsplat.models import AmplitudeModel, Ray, Scene
from volsplat.schemas import BlendMode, Camera, SortMode, SplatOptions

logger = logging.getLogger(__name__)

COMPATIBLE_MODELS = {
    BlendMode.TAYLOR_3DGS: {AmplitudeModel.OPACITY_AMPLITUDE},
    BlendMode.TAYLOR_OTS: {AmplitudeModel.OPACITY_THIN_SIDE, AmplitudeModel.EWA_MASS},
    BlendMode.SELF_ATTENUATION: {AmplitudeModel.OPACITY_THIN_SIDE, AmplitudeModel.EWA_MASS},
}


def check_compatibility(model: AmplitudeModel, blend_mode: BlendMode) -> None:
    if AmplitudeModel(model) not in COMPATIBLE_MODELS[BlendMode(blend_mode)]:
        raise ConfigurationError(
            f"Blend mode '{BlendMode(blend_mode).value}' cannot render amplitude model "
            f"'{AmplitudeModel(model).value}'"
        )


@dataclass
class RenderOutput:
    radiance: np.ndarray  # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    per_pixel_contributor_count: np.ndarray  # (H, W)
    cache: object | None = None


@dataclass
class SplatCache:
    projection: ProjectedScene
    model: AmplitudeModel
    options: SplatOptions
    final_transmittance: np.ndarray
    contributors: np.ndarray  # blended Gaussians per pixel, in blend order
    last_contributor: np.ndarray  # source index of the last blended Gaussian, -1 if none


@dataclass(frozen=True)
class Tile:
    x0: int
    y0: int
    x1: int
    y1: int

    def pixels(self) -> tuple[np.ndarray, np.ndarray]:
        ys, xs = np.mgrid[self.y0:self.y1, self.x0:self.x1]
        return xs.ravel(), ys.ravel()


def make_tiles(width: int, height: int, tile_size: int) -> list[Tile]:
    return [
        Tile(x0, y0, min(x0 + tile_size, width), min(y0 + tile_size, height))
        for y0 in range(0, height, tile_size)
        for x0 in range(0, width, tile_size)
    ]


# ---------------------------------------------------------------------------
# Ordering
# ---------------------------------------------------------------------------

def sort_global(projected: list[ProjectedGaussian] | np.ndarray, source_index: np.ndarray | None = None) -> np.ndarray:
    """Stable front-to-back permutation by view depth, ties broken by source index."""
    if len(projected) and isinstance(projected[0], ProjectedGaussian):
        depths = np.array([p.depth for p in projected], dtype=np.float64)
        source_index = np.array([p.source_index for p in projected])
    else:
        depths = np.asarray(projected, dtype=np.float64)
    if source_index is None:
        source_index = np.arange(depths.shape[0])
    return np.lexsort((np.asarray(source_index), depths))


def peak_depths(
    means: np.ndarray,
    precisions: np.ndarray,
    origins: np.ndarray,
    directions: np.ndarray,
) -> np.ndarray:
    """Ray parameter of maximum density, (P rays, M Gaussians)."""
    Pd = np.einsum("mij,pj->pmi", precisions, directions)
    den = np.einsum("pmi,pi->pm", Pd, directions)
    num = np.einsum("pmi,pmi->pm", Pd, means[None, :, :] - origins[:, None, :])
    return num / den


def sort_per_pixel(
    means: np.ndarray,
    precisions: np.ndarray,
    source_index: np.ndarray,
    ray: Ray,
) -> np.ndarray:
    """Permutation of one pixel's contributors by peak depth along its ray."""
    peak = peak_depths(
        np.asarray(means).reshape(-1, 3),
        np.asarray(precisions).reshape(-1, 3, 3),
        ray.origin[None],
        ray.direction[None],
    )[0]
    return np.lexsort((np.asarray(source_index), peak))


# ---------------------------------------------------------------------------
# Blending
# ---------------------------------------------------------------------------

@dataclass
class BlendResult:
    radiance: np.ndarray  # (P, 3)
    transmittance: np.ndarray  # (P,)
    alpha: np.ndarray  # (P, M) effective blend factor, 0 where not blended
    weights: np.ndarray  # (P, M)
    kept: np.ndarray  # (P, M)


def blend_rows(
    values: np.ndarray,
    colors: np.ndarray,
    background: np.ndarray,
    blend_mode: BlendMode,
    alpha_clamp_max: float,
    termination: float,
) -> BlendResult:
    """Front-to-back compositing of ordered rows of footprint values.

    Taylor modes blend α = min(g, clamp) and skip the contribution that would
    push transmittance below the threshold (3DGS rule). Self-attenuation
    blends 1 − e^{−f}; it keeps the contribution that crosses the threshold
    and stops after it, so a single dense Gaussian is never dropped.
    Cumulative sums and products run sequentially along each row, so zero
    entries never change the bits of the result.
    """
    values = np.asarray(values)
    p, m = values.shape
    background = np.asarray(background, dtype=values.dtype)
    if m == 0:
        radiance = np.broadcast_to(background, (p, 3)).copy()
        empty = np.zeros((p, 0), dtype=values.dtype)
        return BlendResult(radiance, np.ones(p, dtype=values.dtype), empty, empty, empty.astype(bool))

    if BlendMode(blend_mode) is BlendMode.SELF_ATTENUATION:
        alpha = -np.expm1(-values)
        factor = np.exp(-values)
        after = np.cumprod(factor, axis=1)
        before = np.concatenate([np.ones((p, 1), dtype=values.dtype), after[:, :-1]], axis=1)
        kept = before >= termination
    else:
        alpha = np.minimum(values, alpha_clamp_max)
        factor = 1.0 - alpha
        kept = np.cumprod(factor, axis=1) >= termination

    alpha = np.where(kept, alpha, 0.0)
    factor = np.where(kept, factor, 1.0)
    after = np.cumprod(factor, axis=1)
    before = np.concatenate([np.ones((p, 1), dtype=values.dtype), after[:, :-1]], axis=1)
    weights = alpha * before
    transmittance = after[:, -1]
    radiance = np.cumsum(weights[..., None] * colors, axis=1)[:, -1] + transmittance[:, None] * background
    return BlendResult(radiance, transmittance, alpha, weights, kept)


def blend_front_to_back(
    contribs: np.ndarray,
    colors: np.ndarray,
    background: np.ndarray,
    blend_mode: BlendMode,
    alpha_clamp_max: float | None = None,
    termination: float | None = None,
) -> tuple[np.ndarray, float]:
    """Blend one ordered list of (g or f, rgb); returns (rgb, final transmittance)."""
    if alpha_clamp_max is None:
        alpha_clamp_max = settings.alpha_clamp_max
    if termination is None:
        termination = SplatOptions(blend_mode=blend_mode).effective_termination
    values = np.asarray(contribs, dtype=np.float64).reshape(1, -1)
    colors = np.asarray(colors, dtype=np.float64).reshape(1, -1, 3)
    result = blend_rows(values, colors, background, blend_mode, alpha_clamp_max, termination)
    return result.radiance[0], float(result.transmittance[0])


# ---------------------------------------------------------------------------
# Per-tile footprint evaluation
# ---------------------------------------------------------------------------

@dataclass
class TileTerms:
    tile: Tile
    xs: np.ndarray
    ys: np.ndarray
    candidates: np.ndarray  # source indices, one per column
    order: np.ndarray  # (P, M) column permutation, front to back
    delta: np.ndarray  # (P, M, 2) pixel minus mean, ordered
    gauss: np.ndarray  # (P, M) exp(−½ΔᵀQΔ), 0 outside the cutoff, ordered
    values: np.ndarray  # (P, M) a″·gauss, ordered
    colors: np.ndarray  # (P, M, 3) ordered

    @property
    def ordered_sources(self) -> np.ndarray:
        return self.candidates[self.order]


def tile_candidates(tile: Tile, proj: ProjectedScene, cutoff: float, column_order: np.ndarray) -> np.ndarray:
    """Visible Gaussians whose cutoff ellipse box overlaps the tile's pixel centres."""
    idx = column_order
    if idx.size == 0:
        return idx
    radius = cutoff * np.sqrt(np.stack([proj.cov2d[idx, 0, 0], proj.cov2d[idx, 1, 1]], axis=1))
    mean = proj.mean2d[idx]
    lo = mean - radius
    hi = mean + radius
    hit = (
        (hi[:, 0] >= tile.x0 + 0.5)
        & (lo[:, 0] <= tile.x1 - 0.5)
        & (hi[:, 1] >= tile.y0 + 0.5)
        & (lo[:, 1] <= tile.y1 - 0.5)
    )
    return idx[hit]


def tile_terms(
    tile: Tile,
    proj: ProjectedScene,
    cam: Camera,
    opts: SplatOptions,
    column_order: np.ndarray,
) -> TileTerms:
    """Footprint values of the tile's candidates at every tile pixel, in blend order.

    ``column_order`` lists visible Gaussians front to back (global mode) or by
    source index (per-pixel mode, where each row is then sorted by peak depth).
    """
    xs, ys = tile.pixels()
    cand = tile_candidates(tile, proj, opts.footprint_cutoff, column_order)
    pix = np.stack([xs + 0.5, ys + 0.5], axis=1)
    delta = pix[:, None, :] - proj.mean2d[cand][None, :, :]
    Q = proj.conic[cand]
    m = (
        Q[None, :, 0, 0] * delta[..., 0] ** 2
        + 2.0 * Q[None, :, 0, 1] * delta[..., 0] * delta[..., 1]
        + Q[None, :, 1, 1] * delta[..., 1] ** 2
    )
    inside = m <= opts.footprint_cutoff ** 2
    gauss = np.where(inside, np.exp(-0.5 * np.where(inside, m, 0.0)), 0.0)

    if opts.sort_mode is SortMode.PER_PIXEL_DEPTH and cand.size:
        origins, directions = cam.pixel_rays(xs, ys)
        peak = peak_depths(proj.means3d[cand], proj.precision[cand], origins, directions)
        order = np.argsort(peak, axis=1, kind="stable")
    else:
        order = np.broadcast_to(np.arange(cand.size), (xs.size, cand.size))

    delta = np.take_along_axis(delta, order[..., None], axis=1)
    gauss = np.take_along_axis(gauss, order, axis=1)
    values = proj.amplitude2d[cand][order] * gauss
    colors = proj.rgb[cand][order]
    return TileTerms(tile, xs, ys, cand, order, delta, gauss, values, colors)


def column_order_for(proj: ProjectedScene, sort_mode: SortMode) -> np.ndarray:
    visible = proj.visible_indices
    if SortMode(sort_mode) is SortMode.PER_PIXEL_DEPTH:
        return visible
    return visible[sort_global(proj.depth[visible], visible)]


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def rasterize(
    scene: Scene,
    cam: Camera,
    model: AmplitudeModel,
    opts: SplatOptions | None = None,
) -> RenderOutput:
    """Render a scene; the returned output carries the cache the backward passes need."""
    opts = opts or SplatOptions()
    check_compatibility(model, opts.blend_mode)
    dtype = np.dtype(settings.render_precision)
    proj = project_scene(scene, cam, model, opts.jacobian_mode, opts.filter_variance)
    columns = column_order_for(proj, opts.sort_mode)
    termination = opts.effective_termination
    background = scene.background.astype(dtype)

    def render_tile(tile: Tile):
        terms = tile_terms(tile, proj, cam, opts, columns)
        blend = blend_rows(
            terms.values.astype(dtype),
            terms.colors.astype(dtype),
            background,
            opts.blend_mode,
            opts.alpha_clamp_max,
            termination,
        )
        blended = blend.kept & (terms.values > 0)
        count = blended.sum(axis=1)
        last = np.full(terms.xs.size, -1, dtype=np.int64)
        if terms.candidates.size:
            tail = blended.shape[1] - 1 - np.argmax(blended[:, ::-1], axis=1)
            rows = np.flatnonzero(count > 0)
            last[rows] = terms.ordered_sources[rows, tail[rows]]
        return terms, blend, count, last

    h, w = cam.height, cam.width
    radiance = np.empty((h, w, 3), dtype=dtype)
    transmittance = np.empty((h, w), dtype=dtype)
    counts = np.zeros((h, w), dtype=np.int64)
    last_contributor = np.full((h, w), -1, dtype=np.int64)
    for terms, blend, count, last in map_ordered(render_tile, make_tiles(w, h, opts.tile_size)):
        radiance[terms.ys, terms.xs] = blend.radiance
        transmittance[terms.ys, terms.xs] = blend.transmittance
        counts[terms.ys, terms.xs] = count
        last_contributor[terms.ys, terms.xs] = last

    logger.debug(
        "Splatted %d/%d Gaussians at %dx%d (%s, %s)",
        int(proj.visible.sum()), len(scene), w, h, opts.blend_mode.value, opts.sort_mode.value,
    )
    cache = SplatCache(
        projection=proj,
        model=AmplitudeModel(model),
        options=opts,
        final_transmittance=transmittance.astype(np.float64),
        contributors=counts,
        last_contributor=last_contributor,
    )
    return RenderOutput(radiance, transmittance, counts, cache)
