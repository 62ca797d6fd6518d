import csv
import json
import logging
import os
import re
import struct
import tempfile
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import imageio.v3 as iio
import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from volsplat.exceptions import DataError
from volsplat.models import (
    MAX_SH_DEGREE,
    PARAMETER_NAMES,
    AmplitudeModel,
    Checkpoint,
    Scene,
    ThetaActivation,
    sh_coefficient_count,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VSCK"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")  # magic, version, header length

PLY_REST_PER_CHANNEL = sh_coefficient_count(MAX_SH_DEGREE) - 1
PLY_REQUIRED = (
    ["x", "y", "z", "opacity"]
    + [f"f_dc_{c}" for c in range(3)]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)
PLY_OPTIONAL = {"nx", "ny", "nz"}
_TAG = re.compile(r"^volsplat model=(\S+) activation=(\S+) sh_degree=(\d+)$")
_BACKGROUND = re.compile(r"^background (\S+) (\S+) (\S+)$")


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class StorageService:
    """Reads and writes every file format the tool produces or consumes."""

    # -- PLY ---------------------------------------------------------------

    def export_ply(self, scene: Scene, path: str | Path) -> Path:
        """Binary little-endian PLY with 3DGS field names; θ is stored pre-activation."""
        for name, value in scene.parameters().items():
            if not np.all(np.isfinite(value)):
                raise DataError(f"Cannot export non-finite {name}")
        path = Path(path)
        n = len(scene)
        degree = scene.sh_degree
        k = sh_coefficient_count(degree)
        fields = ["x", "y", "z", "nx", "ny", "nz"]
        fields += [f"f_dc_{c}" for c in range(3)]
        fields += [f"f_rest_{i}" for i in range(3 * PLY_REST_PER_CHANNEL)]
        fields += ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
        data = np.zeros(n, dtype=[(f, "<f4") for f in fields])
        for axis, name in enumerate("xyz"):
            data[name] = scene.positions[:, axis]
        for c in range(3):
            data[f"f_dc_{c}"] = scene.sh_coeffs[:, 0, c]
            # channel-major rest block, zero-filled past the stored degree
            for j in range(1, k):
                data[f"f_rest_{c * PLY_REST_PER_CHANNEL + j - 1}"] = scene.sh_coeffs[:, j, c]
        data["opacity"] = scene.theta_raw
        for i in range(3):
            data[f"scale_{i}"] = scene.log_scales[:, i]
        for i in range(4):
            data[f"rot_{i}"] = scene.rotations[:, i]

        bg = " ".join(repr(float(v)) for v in scene.background)
        comments = [
            f"volsplat model={scene.model.value} activation={scene.activation.value} sh_degree={degree}",
            f"background {bg}",
        ]
        ply = PlyData([PlyElement.describe(data, "vertex")], text=False, byte_order="<", comments=comments)
        path.parent.mkdir(parents=True, exist_ok=True)
        ply.write(str(path))
        logger.info("Exported %d Gaussians to %s", n, path)
        return path

    def import_ply(
        self,
        path: str | Path,
        model: AmplitudeModel | None = None,
        activation: ThetaActivation | None = None,
    ) -> Scene:
        """Read a 3DGS-style PLY; a θ-convention mismatch with the requested model is warned about."""
        path = Path(path)
        try:
            ply = PlyData.read(str(path))
            vertex = ply["vertex"].data
        except (OSError, KeyError, ValueError, PlyParseError) as exc:
            raise DataError(f"Cannot read PLY {path}: {exc}") from exc
        names = set(vertex.dtype.names)
        missing = [f for f in PLY_REQUIRED if f not in names]
        if missing:
            raise DataError(f"PLY {path} lacks required fields: {', '.join(missing)}")
        rest_fields = sorted((f for f in names if f.startswith("f_rest_")), key=lambda f: int(f.split("_")[-1]))
        unknown = names - set(PLY_REQUIRED) - PLY_OPTIONAL - set(rest_fields)
        if unknown:
            logger.warning("Ignoring unknown PLY fields: %s", ", ".join(sorted(unknown)))
        if len(rest_fields) % 3:
            raise DataError(f"PLY {path} has {len(rest_fields)} f_rest fields, not a multiple of 3")
        per_channel = len(rest_fields) // 3

        tag_model, tag_activation, degree = None, None, None
        background = np.zeros(3)
        for comment in ply.comments:
            if match := _TAG.match(comment):
                tag_model = AmplitudeModel(match.group(1))
                tag_activation = ThetaActivation(match.group(2))
                degree = int(match.group(3))
            elif match := _BACKGROUND.match(comment):
                background = np.array([float(v) for v in match.groups()])
        if degree is None:
            degree = int(round(np.sqrt(per_channel + 1))) - 1
        if sh_coefficient_count(degree) - 1 > per_channel:
            raise DataError(f"PLY {path} stores too few f_rest fields for SH degree {degree}")
        if model is not None and tag_model is not None and AmplitudeModel(model) is not tag_model:
            logger.warning(
                "PLY %s was written for amplitude model '%s' but is read as '%s'; θ conventions differ",
                path, tag_model.value, AmplitudeModel(model).value,
            )
        if activation is not None and tag_activation is not None and ThetaActivation(activation) is not tag_activation:
            logger.warning(
                "PLY %s stores θ for activation '%s' but is read with '%s'",
                path, tag_activation.value, ThetaActivation(activation).value,
            )

        n = vertex.shape[0]
        k = sh_coefficient_count(degree)
        sh = np.zeros((n, k, 3))
        for c in range(3):
            sh[:, 0, c] = vertex[f"f_dc_{c}"]
            for j in range(1, k):
                sh[:, j, c] = vertex[f"f_rest_{c * per_channel + j - 1}"]

        def columns(prefix: str, count: int) -> np.ndarray:
            return np.stack([np.asarray(vertex[f"{prefix}{i}"], dtype=np.float64) for i in range(count)], axis=1)

        scene = Scene(
            positions=np.stack([np.asarray(vertex[a], dtype=np.float64) for a in "xyz"], axis=1),
            rotations=columns("rot_", 4),
            log_scales=columns("scale_", 3),
            theta_raw=np.asarray(vertex["opacity"], dtype=np.float64),
            sh_coeffs=sh,
            background=background,
            activation=activation or tag_activation or ThetaActivation.SIGMOID,
            model=model or tag_model or AmplitudeModel.OPACITY_AMPLITUDE,
        )
        logger.info("Imported %d Gaussians from %s", n, path)
        return scene

    # -- checkpoints --------------------------------------------------------

    def save_checkpoint(self, checkpoint: Checkpoint, path: str | Path) -> Path:
        """Versioned container: prefix, JSON header, then raw float64 arrays (write-then-rename)."""
        path = Path(path)
        scene = checkpoint.scene
        arrays: list[tuple[str, np.ndarray]] = [(f"scene/{n}", getattr(scene, n)) for n in PARAMETER_NAMES]
        arrays.append(("scene/background", scene.background))
        for name in sorted(checkpoint.optimizer_state):
            for moment in ("m", "v"):
                arrays.append((f"adam/{name}/{moment}", checkpoint.optimizer_state[name][moment]))

        manifest = []
        offset = 0
        for name, value in arrays:
            nbytes = int(np.asarray(value).size * 8)
            manifest.append({"name": name, "shape": list(np.shape(value)), "offset": offset, "nbytes": nbytes})
            offset += nbytes
        header = {
            "iteration": checkpoint.iteration,
            "config": checkpoint.config,
            "config_hash": checkpoint.config_hash,
            "optimizer_step": checkpoint.optimizer_step,
            "rng_state": checkpoint.rng_state,
            "trace": checkpoint.trace,
            "scene": {
                "activation": scene.activation.value,
                "model": scene.model.value,
                "active_sh_degree": scene.active_sh_degree,
            },
            "arrays": manifest,
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        body = b"".join(np.ascontiguousarray(value, dtype="<f8").tobytes() for _, value in arrays)
        _atomic_write(path, _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + body)
        logger.info("Saved checkpoint at iteration %d to %s", checkpoint.iteration, path)
        return path

    def load_checkpoint(self, path: str | Path) -> Checkpoint:
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise DataError(f"Cannot read checkpoint {path}: {exc}") from exc
        if len(raw) < _PREFIX.size:
            raise DataError(f"{path} is too short to be a checkpoint")
        magic, version, header_len = _PREFIX.unpack_from(raw)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path} is not a checkpoint (magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise DataError(f"Unsupported checkpoint version {version}")
        try:
            header = json.loads(raw[_PREFIX.size:_PREFIX.size + header_len])
        except json.JSONDecodeError as exc:
            raise DataError(f"Corrupt checkpoint header in {path}: {exc}") from exc
        body = memoryview(raw)[_PREFIX.size + header_len:]
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
            if stop > len(body):
                raise DataError(f"Checkpoint {path} is truncated")
            arrays[entry["name"]] = np.frombuffer(body[start:stop], dtype="<f8").reshape(entry["shape"]).copy()

        meta = header["scene"]
        scene = Scene(
            **{n: arrays[f"scene/{n}"] for n in PARAMETER_NAMES},
            background=arrays["scene/background"],
            activation=ThetaActivation(meta["activation"]),
            model=AmplitudeModel(meta["model"]),
            active_sh_degree=meta["active_sh_degree"],
        )
        state: dict[str, dict[str, np.ndarray]] = {}
        for name, value in arrays.items():
            if name.startswith("adam/"):
                _, param, moment = name.split("/")
                state.setdefault(param, {})[moment] = value
        return Checkpoint(
            scene=scene,
            iteration=header["iteration"],
            config=header["config"],
            config_hash=header["config_hash"],
            optimizer_state=state,
            optimizer_step=header["optimizer_step"],
            rng_state=header["rng_state"],
            trace=header["trace"],
        )

    # -- images and tables ----------------------------------------------------

    def read_image(self, path: str | Path) -> np.ndarray:
        """PNG as floats in [0, 1]; 8- and 16-bit inputs supported, alpha kept."""
        path = Path(path)
        try:
            image = iio.imread(path)
        except (OSError, ValueError) as exc:
            raise DataError(f"Cannot read image {path}: {exc}") from exc
        if image.dtype == np.uint8:
            return image.astype(np.float64) / 255.0
        if image.dtype == np.uint16:
            return image.astype(np.float64) / 65535.0
        raise DataError(f"Unsupported pixel type {image.dtype} in {path}")

    def write_png(self, image: np.ndarray, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pixels = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
        iio.imwrite(path, pixels)
        return path

    def write_csv(self, rows: Iterable[dict[str, Any]], path: str | Path, columns: list[str]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: "" if row.get(k) is None else row.get(k) for k in columns})
        return path

    def write_json(self, payload: Any, path: str | Path) -> Path:
        path = Path(path)
        _atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        return path

    def read_json(self, path: str | Path) -> Any:
        path = Path(path)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"Cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"Malformed JSON in {path}: {exc}") from exc


storage_service = StorageService()
