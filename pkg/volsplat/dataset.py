"""NeRF-synthetic style datasets: loading, writing, and rendering from a synthetic scene."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from volsplat.exceptions import DataError, UsageError
from volsplat.executor import map_ordered
from volsplat.models import Scene
from volsplat.renderers import RenderOptions, render_variant
from volsplat.schemas import Camera, Variant
from volsplat.storage import storage_service

logger = logging.getLogger(__name__)

BACKGROUNDS = {"white": np.ones(3), "black": np.zeros(3)}
SPLITS = ("train", "test")


@dataclass(frozen=True, eq=False)
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) in [0, 1]


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    train: tuple[View, ...]
    test: tuple[View, ...]
    background: np.ndarray

    @property
    def resolution(self) -> tuple[int, int] | None:
        views = self.train or self.test
        return views[0].camera.resolution if views else None


def background_color(background: str | np.ndarray) -> np.ndarray:
    if isinstance(background, str):
        try:
            return BACKGROUNDS[background].copy()
        except KeyError:
            raise UsageError(f"Unknown background '{background}', expected white or black") from None
    color = np.asarray(background, dtype=np.float64).reshape(3)
    return color


# ---------------------------------------------------------------------------
# Camera conversion
# ---------------------------------------------------------------------------

def camera_from_transform(matrix: Any, width: int, height: int, focal: float) -> Camera:
    """OpenGL camera-to-world matrix → OpenCV world-to-camera Camera."""
    c2w = np.asarray(matrix, dtype=np.float64)
    if c2w.shape == (3, 4):
        c2w = np.vstack([c2w, [0.0, 0.0, 0.0, 1.0]])
    if c2w.shape != (4, 4) or not np.all(np.isfinite(c2w)):
        raise DataError(f"transform_matrix must be a finite 4x4 matrix, got shape {c2w.shape}")
    c2w = c2w.copy()
    c2w[:3, 1:3] *= -1.0
    rotation = c2w[:3, :3].T
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    if np.linalg.det(rotation) < 0:
        raise DataError("transform_matrix is not a proper rotation")
    translation = -rotation @ c2w[:3, 3]
    return Camera(
        focal=(focal, focal),
        resolution=(width, height),
        rotation=tuple(map(tuple, rotation.tolist())),
        translation=tuple(translation.tolist()),
    )


def transform_from_camera(cam: Camera) -> list[list[float]]:
    c2w = np.eye(4)
    c2w[:3, :3] = cam.R.T
    c2w[:3, 3] = cam.center
    c2w[:3, 1:3] *= -1.0
    return c2w.tolist()


def focal_from_angle(camera_angle_x: float, width: int) -> float:
    return width / (2.0 * np.tan(camera_angle_x / 2.0))


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _resolve_image(root: Path, file_path: str) -> Path:
    candidate = (root / file_path).resolve()
    for path in (candidate, candidate.with_name(candidate.name + ".png")):
        if path.is_file():
            return path
    raise DataError(f"Image '{file_path}' not found under {root}")


def _composite(image: np.ndarray, background: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if image.shape[2] == 4:
        alpha = image[..., 3:]
        return image[..., :3] * alpha + background * (1.0 - alpha)
    if image.shape[2] != 3:
        raise DataError(f"Unsupported channel count {image.shape[2]}")
    return image


def _downscale(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return image
    h, w = (image.shape[0] // factor) * factor, (image.shape[1] // factor) * factor
    blocks = image[:h, :w].reshape(h // factor, factor, w // factor, factor, image.shape[2])
    return blocks.mean(axis=(1, 3))


def _load_split(root: Path, split: str, background: np.ndarray, downscale: int) -> list[View] | None:
    path = root / f"transforms_{split}.json"
    if not path.is_file():
        return None
    meta = storage_service.read_json(path)
    if not isinstance(meta, dict) or "frames" not in meta or "camera_angle_x" not in meta:
        raise DataError(f"{path.name} needs 'camera_angle_x' and 'frames'")
    frames = meta["frames"]
    if not isinstance(frames, list):
        raise DataError(f"{path.name}: 'frames' must be a list")
    for index, frame in enumerate(frames):
        if not isinstance(frame, dict) or "file_path" not in frame or "transform_matrix" not in frame:
            raise DataError(f"{path.name}: frame {index} needs 'file_path' and 'transform_matrix'")
    angle = float(meta["camera_angle_x"])

    def load_frame(frame: dict[str, Any]) -> View:
        image = storage_service.read_image(_resolve_image(root, frame["file_path"]))
        image = _downscale(_composite(image, background), downscale)
        height, width = image.shape[:2]
        cam = camera_from_transform(frame["transform_matrix"], width, height, focal_from_angle(angle, width))
        return View(camera=cam, image=image)

    views = map_ordered(load_frame, frames)
    sizes = {v.camera.resolution for v in views}
    if len(sizes) > 1:
        raise DataError(f"Split '{split}' mixes image resolutions: {sorted(sizes)}")
    logger.info("Loaded %d %s views from %s", len(views), split, root)
    return views


def load_dataset(path: str | Path, background: str | np.ndarray = "white", downscale: int = 1) -> Dataset:
    """Read transforms_{train,test}.json plus images; alpha is composited onto the background."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"Dataset directory {root} does not exist")
    if downscale < 1:
        raise UsageError(f"downscale must be >= 1, got {downscale}")
    bg = background_color(background)
    train = _load_split(root, "train", bg, downscale)
    if train is None:
        raise DataError(f"{root} has no transforms_train.json")
    test = _load_split(root, "test", bg, downscale)
    if test is None:
        logger.warning("%s has no test split; continuing without test views", root)
        test = []
    return Dataset(name=root.name, train=tuple(train), test=tuple(test), background=bg)


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

def render_dataset(
    scene: Scene,
    cameras: list[Camera],
    variant: Variant | str = Variant.OTS_MARCHER,
    name: str = "synthetic",
    test_every: int = 8,
    options: RenderOptions | None = None,
) -> Dataset:
    """Reference images rendered from a scene; every ``test_every``-th view is held out."""
    if test_every < 1:
        raise UsageError(f"test_every must be >= 1, got {test_every}")

    def render_one(cam: Camera) -> View:
        image = render_variant(scene, cam, variant, options).radiance.astype(np.float64)
        return View(camera=cam, image=np.clip(image, 0.0, 1.0))

    views = [render_one(cam) for cam in cameras]
    test = tuple(v for i, v in enumerate(views) if i % test_every == test_every - 1)
    train = tuple(v for i, v in enumerate(views) if i % test_every != test_every - 1)
    logger.info("Rendered dataset '%s': %d train, %d test views with %s", name, len(train), len(test), Variant(variant).value)
    return Dataset(name=name, train=train, test=test, background=scene.background.copy())


def write_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write PNGs and NeRF-synthetic transforms files that load_dataset reads back."""
    root = Path(directory)
    for split in SPLITS:
        views = getattr(dataset, split)
        if not views:
            continue
        cam = views[0].camera
        frames = []
        for index, view in enumerate(views):
            relative = f"./{split}/r_{index}"
            storage_service.write_png(view.image, root / f"{split}/r_{index}.png")
            frames.append({"file_path": relative, "transform_matrix": transform_from_camera(view.camera)})
        meta = {"camera_angle_x": float(2.0 * np.arctan(cam.width / (2.0 * cam.fx))), "frames": frames}
        storage_service.write_json(meta, root / f"transforms_{split}.json")
    logger.info("Wrote dataset '%s' to %s", dataset.name, root)
    return root
