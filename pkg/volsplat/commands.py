"""Command handlers behind the ``volsplat`` CLI: render, fit, gradcheck, compare, make-scene."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ValidationError
from tqdm import tqdm

from volsplat.dataset import Dataset, load_dataset, render_dataset, write_dataset
from volsplat.exceptions import EXIT_NUMERICAL, EXIT_OK, ConfigurationError, NumericalError, VolsplatError
from volsplat.models import Checkpoint, Scene
from volsplat.renderers import VARIANTS, RenderOptions, gradcheck_variant, render_variant, variant_spec
from volsplat.schemas import (
    Camera,
    CompareRow,
    GradientMode,
    MarchOptions,
    RenderSidecar,
    SplatOptions,
    SyntheticParams,
    TrainConfig,
    Variant,
)
from volsplat.storage import storage_service
from volsplat.synthetic import make_synthetic, orbit_rig
from volsplat.training import evaluate, fit

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["iteration", "loss", "test_psnr", "test_ssim", "wall_time"]
COMPARE_COLUMNS = list(CompareRow.model_fields)
CHECKPOINT_NAME = "checkpoint.vsck"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def validated(model: type[BaseModel], data: Any) -> Any:
    """model_validate with the offending keys named in a ConfigurationError."""
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigurationError(f"Invalid {model.__name__}: {problems}") from None


def parse_override(text: str) -> tuple[list[str], Any]:
    """``key.sub=value`` with the value parsed as JSON when possible."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"Override '{text}' is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    for text in overrides:
        path, value = parse_override(text)
        target = data
        for part in path[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigurationError(f"Override '{text}' descends into a non-object value")
        target[path[-1]] = value
    return data


def render_options(args: argparse.Namespace) -> RenderOptions:
    splat: dict[str, Any] = {}
    march: dict[str, Any] = {}
    if getattr(args, "jacobian_mode", None):
        splat["jacobian_mode"] = args.jacobian_mode
    if getattr(args, "bins_per_gaussian", None):
        march["bins_per_gaussian"] = args.bins_per_gaussian
    return RenderOptions(
        splat=validated(SplatOptions, splat),
        march=validated(MarchOptions, march),
        filter_variance=getattr(args, "filter_variance", None),
    )


def options_hash(variant: Variant, options: RenderOptions) -> str:
    spec = variant_spec(variant)
    payload = {"variant": spec.variant.value}
    if spec.marcher:
        payload["march"] = options.march_for().model_dump(mode="json")
    else:
        payload["splat"] = options.splat_for(spec).model_dump(mode="json")
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def synthetic_params(args: argparse.Namespace, **extra: Any) -> SyntheticParams:
    data: dict[str, Any] = {"seed": args.seed, **extra}
    for name in ("count", "views", "resolution", "theta"):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = tuple(value) if isinstance(value, list) else value
    return validated(SyntheticParams, data)


def load_scene(source: str, variant: Variant) -> Scene:
    """A PLY file (read under the variant's θ convention) or a checkpoint."""
    path = Path(source)
    spec = variant_spec(variant)
    if path.suffix.lower() == ".ply":
        return storage_service.import_ply(path, model=spec.model, activation=spec.activation)
    scene = storage_service.load_checkpoint(path).scene
    if scene.model is not spec.model:
        logger.warning(
            "Checkpoint %s was fitted with amplitude model '%s' but is rendered as '%s'",
            path, scene.model.value, spec.model.value,
        )
    return scene


def load_cameras(path: str | Path) -> list[Camera]:
    payload = storage_service.read_json(path)
    items = payload if isinstance(payload, list) else [payload]
    return [validated(Camera, item) for item in items]


def dataset_from_args(args: argparse.Namespace) -> Dataset:
    if args.dataset:
        return load_dataset(args.dataset, background=args.background, downscale=args.downscale)
    scene, rig = make_synthetic(args.synthetic, synthetic_params(args))
    return render_dataset(
        scene, rig, args.reference_variant, name=args.synthetic, test_every=args.test_every, options=RenderOptions(),
    )


def write_metrics(trace: list[dict[str, Any]], path: Path) -> Path:
    return storage_service.write_csv(trace, path, METRIC_COLUMNS)


def image_grid(rows: list[list[np.ndarray]], gap: int = 2) -> np.ndarray:
    """Tile equally sized images; the gap is white."""
    h, w = rows[0][0].shape[:2]
    cols = max(len(r) for r in rows)
    grid = np.ones((len(rows) * (h + gap) - gap, cols * (w + gap) - gap, 3))
    for i, row in enumerate(rows):
        for j, image in enumerate(row):
            grid[i * (h + gap):i * (h + gap) + h, j * (w + gap):j * (w + gap) + w] = image
    return grid


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_render(args: argparse.Namespace) -> int:
    """Render one view to PNG with a JSON sidecar beside it."""
    variant = Variant(args.variant)
    if args.scene:
        scene = load_scene(args.scene, variant)
        source = str(args.scene)
        rig = None
    else:
        scene, rig = make_synthetic(args.synthetic, synthetic_params(args))
        source = f"synthetic:{args.synthetic}"
    if args.camera:
        cameras = load_cameras(args.camera)
    else:
        cameras = rig if rig is not None else orbit_rig(synthetic_params(args))
    if not 0 <= args.view < len(cameras):
        raise ConfigurationError(f"View {args.view} out of range for {len(cameras)} cameras")
    cam = cameras[args.view]
    options = render_options(args)

    started = time.perf_counter()
    output = render_variant(scene, cam, variant, options)
    timing = time.perf_counter() - started

    out = storage_service.write_png(output.radiance, args.output)
    sidecar = RenderSidecar(
        variant=variant,
        options_hash=options_hash(variant, options),
        timing_s=timing,
        width=cam.width,
        height=cam.height,
        gaussian_count=len(scene),
        source=source,
    )
    storage_service.write_json(sidecar.model_dump(mode="json"), out.with_suffix(".json"))
    logger.info("Rendered %s (%dx%d, %d Gaussians) to %s in %.2fs", variant.value, cam.width, cam.height, len(scene), out, timing)
    return EXIT_OK


def train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    data: dict[str, Any] = storage_service.read_json(args.config) if args.config else {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file {args.config} must hold a JSON object")
    for flag, key in (("variant", "variant"), ("gaussians", "gaussian_count"), ("iterations", "iterations"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    return validated(TrainConfig, apply_overrides(data, args.set or []))


def cmd_fit(args: argparse.Namespace) -> int:
    """Fit a fixed-size scene; writes checkpoint, PLY, metrics CSV and the effective config."""
    config = train_config_from_args(args)
    out_dir = Path(args.output)
    storage_service.write_json(config.model_dump(mode="json"), out_dir / "effective_config.json")
    dataset = dataset_from_args(args)
    resume = storage_service.load_checkpoint(args.resume) if args.resume else None
    checkpoint_path = out_dir / CHECKPOINT_NAME

    def on_checkpoint(checkpoint: Checkpoint) -> None:
        storage_service.save_checkpoint(checkpoint, checkpoint_path)
        write_metrics(checkpoint.trace, out_dir / "metrics.csv")

    try:
        result = fit(config, dataset, resume=resume, on_checkpoint=on_checkpoint, progress=args.progress)
    except NumericalError as exc:
        if exc.checkpoint is not None:
            storage_service.save_checkpoint(exc.checkpoint, out_dir / "diverged.vsck")
            logger.error("Last finite state saved to %s", out_dir / "diverged.vsck")
        raise
    storage_service.save_checkpoint(result, checkpoint_path)
    storage_service.export_ply(result.scene, out_dir / "scene.ply")
    write_metrics(result.trace, out_dir / "metrics.csv")
    final = result.trace[-1] if result.trace else {}
    logger.info("Fit finished: loss %s, test PSNR %s", final.get("loss"), final.get("test_psnr"))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference check of one or all variants; nonzero exit when any check fails."""
    variants = list(VARIANTS) if args.variant == "all" else [Variant(args.variant)]
    seeds = range(args.seed, args.seed + args.seeds)
    reports = []
    for variant in variants:
        for seed in seeds:
            reports.append(gradcheck_variant(
                variant,
                seed,
                tolerance=args.tolerance,
                perturbation=args.perturbation,
                corrupt=args.corrupt,
                gradient_mode=GradientMode(args.gradient_mode),
            ))
    storage_service.write_json([r.model_dump(mode="json") for r in reports], args.report)
    failed = [r for r in reports if not r.passed]
    for report in failed:
        logger.error(
            "Gradcheck failed for %s seed %d: max rel error %.3e > %.1e",
            report.variant.value, report.seed, report.report.max_rel_error, report.tolerance,
        )
    logger.info("Gradcheck: %d/%d passed, report at %s", len(reports) - len(failed), len(reports), args.report)
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    """Fit every (variant, N) pair on one dataset; one CSV row each, failures recorded per row."""
    variants = [Variant(v) for v in args.variants]
    out_dir = Path(args.output)
    dataset = dataset_from_args(args)
    base: dict[str, Any] = storage_service.read_json(args.config) if args.config else {}
    base = apply_overrides(dict(base), args.set or [])
    base.update(iterations=args.iterations, seed=args.seed)
    storage_service.write_json(base, out_dir / "effective_config.json")

    preview = (dataset.test or dataset.train)[0]
    rows: list[CompareRow] = []
    grid: dict[int, list[np.ndarray]] = {}
    pairs = [(n, v) for n in args.counts for v in variants]
    for count, variant in tqdm(pairs, disable=not args.progress, desc="compare"):
        started = time.perf_counter()
        tile = np.full_like(preview.image, 0.5)
        try:
            config = validated(TrainConfig, {**base, "variant": variant.value, "gaussian_count": count})
            result = fit(config, dataset)
            options = RenderOptions(march=config.march, filter_variance=config.filter_variance)
            test_psnr, test_ssim = evaluate(result.scene, dataset, variant, options)
            tile = render_variant(result.scene, preview.camera, variant, options).radiance
            row = CompareRow(
                variant=variant, gaussian_count=count, test_psnr=test_psnr, test_ssim=test_ssim,
                wall_time=time.perf_counter() - started,
            )
        except Exception as exc:
            if isinstance(exc, VolsplatError):
                logger.error("compare row %s N=%d failed: %s", variant.value, count, exc)
            else:
                logger.exception("compare row %s N=%d failed", variant.value, count)
            row = CompareRow(
                variant=variant, gaussian_count=count, wall_time=time.perf_counter() - started,
                status="failed", error=str(exc),
            )
        rows.append(row)
        grid.setdefault(count, [preview.image]).append(np.clip(tile, 0.0, 1.0))

    storage_service.write_csv([r.model_dump(mode="json") for r in rows], out_dir / "compare.csv", COMPARE_COLUMNS)
    storage_service.write_png(image_grid([grid[n] for n in args.counts]), out_dir / f"grid_{dataset.name}.png")
    failed = sum(r.status != "ok" for r in rows)
    logger.info("Compare finished: %d rows, %d failed, results in %s", len(rows), failed, out_dir)
    return EXIT_OK


def cmd_make_scene(args: argparse.Namespace) -> int:
    """Write a synthetic scene as PLY plus its camera rig; optionally render it as a dataset."""
    extra: dict[str, Any] = {}
    if args.model:
        extra["model"] = args.model
    scene, rig = make_synthetic(args.kind, synthetic_params(args, **extra))
    out_dir = Path(args.output)
    storage_service.export_ply(scene, out_dir / f"{args.kind}.ply")
    storage_service.write_json([cam.model_dump(mode="json") for cam in rig], out_dir / "cameras.json")
    if args.render_dataset:
        dataset = render_dataset(
            scene, rig, args.reference_variant, name=args.kind, test_every=args.test_every, options=RenderOptions(),
        )
        write_dataset(dataset, out_dir / "dataset")
    return EXIT_OK
