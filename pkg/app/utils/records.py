"""
Text Records
============
Human-readable file formats of the engine.

- Calibration: JSON object with fx, fy, cx, cy, width, height, cam_from_world
- Scene: one line per statement (``box``, ``ground``, ``extent``); ``#`` comments
- Augmentation record: ``flip_x,flip_y,scale,rotation_z,tx,ty,tz`` on one line
- Manifest: JSON map of artifact name to sha256
- Tables: CSV written with pandas
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, List, Union

import pandas as pd
from pydantic import ValidationError

from app.exceptions import IoError, ParseError
from app.services.augment_service import AugmentationParams
from app.services.geometry_service import CameraCalibration
from app.services.scene_service import SceneBox, SceneSpec

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"


def _read_text(path: PathLike) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write_text(path: PathLike, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _first_error(exc: ValidationError) -> str:
    error = exc.errors()[0]
    location = ".".join(str(part) for part in error["loc"])
    return f"{location}: {error['msg']}" if location else error["msg"]


# ==================== Calibration ====================

def write_calibration(path: PathLike, calib: CameraCalibration) -> None:
    _write_text(path, json.dumps(calib.model_dump(), indent=2) + "\n")


def read_calibration(path: PathLike) -> CameraCalibration:
    """
    Load and validate a calibration JSON file.

    Raises:
        ParseError: On malformed JSON or a calibration that fails validation
    """
    text = _read_text(path)
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, str(path), exc.lineno) from exc
    if not isinstance(payload, dict):
        raise ParseError("calibration must be a JSON object", str(path))
    payload.setdefault("name", Path(path).stem.replace("_calib", ""))
    try:
        return CameraCalibration.model_validate(payload)
    except ValidationError as exc:
        raise ParseError(_first_error(exc), str(path)) from exc


# ==================== Scene ====================

def parse_scene(text: str, path: str = "<scene>") -> SceneSpec:
    """
    Parse scene text.

    Statements:
        box cx cy cz sx sy sz yaw class
        ground z
        extent e

    Raises:
        ParseError: With the offending line number
    """
    boxes: List[SceneBox] = []
    ground_z = None
    extent = None

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *fields = line.split()
        try:
            if keyword == "box":
                if len(fields) != 8:
                    raise ParseError(f"box needs 8 values, got {len(fields)}", path, number)
                values = [float(f) for f in fields[:7]]
                class_id = int(fields[7])
                boxes.append(SceneBox(
                    center=tuple(values[0:3]),
                    size=tuple(values[3:6]),
                    yaw=values[6],
                    class_id=class_id,
                ))
            elif keyword in ("ground", "extent"):
                if len(fields) != 1:
                    raise ParseError(f"{keyword} needs 1 value, got {len(fields)}", path, number)
                if keyword == "ground":
                    ground_z = float(fields[0])
                else:
                    extent = float(fields[0])
            else:
                raise ParseError(f"unknown statement '{keyword}'", path, number)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            message = _first_error(exc) if isinstance(exc, ValidationError) else str(exc)
            raise ParseError(message, path, number) from exc

    try:
        if extent is None:
            return SceneSpec(boxes=boxes, ground_z=ground_z)
        return SceneSpec(boxes=boxes, ground_z=ground_z, extent=extent)
    except ValidationError as exc:
        raise ParseError(_first_error(exc), path) from exc


def read_scene(path: PathLike) -> SceneSpec:
    return parse_scene(_read_text(path), str(path))


def format_scene(scene: SceneSpec) -> str:
    lines = []
    if scene.ground_z is not None:
        lines.append(f"ground {scene.ground_z!r}")
    lines.append(f"extent {scene.extent!r}")
    for box in scene.boxes:
        values = " ".join(repr(float(v)) for v in (*box.center, *box.size, box.yaw))
        lines.append(f"box {values} {box.class_id}")
    return "\n".join(lines) + "\n"


# ==================== Augmentation record ====================

def format_params(params: AugmentationParams) -> str:
    """One-line record; floats use the shortest exact repr."""
    fields = [
        str(int(params.flip_x)),
        str(int(params.flip_y)),
        repr(params.scale),
        repr(params.rotation_z),
        *(repr(t) for t in params.translation),
    ]
    return ",".join(fields)


def parse_params(text: str, path: str = "<record>") -> AugmentationParams:
    """
    Raises:
        ParseError: If the record does not have seven valid fields
    """
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if len(lines) != 1:
        raise ParseError(f"expected one record line, found {len(lines)}", path)
    fields = [f.strip() for f in lines[0].split(",")]
    if len(fields) != 7:
        raise ParseError(f"record needs 7 fields, got {len(fields)}", path, 1)
    if fields[0] not in ("0", "1") or fields[1] not in ("0", "1"):
        raise ParseError("flip fields must be 0 or 1", path, 1)
    try:
        numbers = [float(f) for f in fields[2:]]
        return AugmentationParams(
            flip_x=fields[0] == "1",
            flip_y=fields[1] == "1",
            scale=numbers[0],
            rotation_z=numbers[1],
            translation=tuple(numbers[2:]),
        )
    except ValidationError as exc:
        raise ParseError(_first_error(exc), path, 1) from exc
    except ValueError as exc:
        raise ParseError(str(exc), path, 1) from exc


def read_params(path: PathLike) -> AugmentationParams:
    return parse_params(_read_text(path), str(path))


def write_params(path: PathLike, params: AugmentationParams) -> None:
    _write_text(path, format_params(params) + "\n")


# ==================== Manifest and tables ====================

def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as handle:
            for block in iter(lambda: handle.read(1 << 20), b""):
                digest.update(block)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return digest.hexdigest()


def write_manifest(out_dir: PathLike, names: Iterable[str]) -> Dict[str, str]:
    """Checksum the named artifacts of ``out_dir`` into manifest.json."""
    out_dir = Path(out_dir)
    manifest = {name: sha256_file(out_dir / name) for name in sorted(names)}
    _write_text(out_dir / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def write_table(path: PathLike, table: pd.DataFrame) -> None:
    try:
        table.to_csv(path, index=False)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc
