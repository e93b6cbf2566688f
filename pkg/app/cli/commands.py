"""
Command Handlers
================
One handler per command of ``python -m app.main``.

Each handler takes the parsed ``argparse`` namespace plus the resolved
Settings, writes its artifacts, prints a short human summary and returns
the summary as a dict (used by the tests and the demo driver).

Frame directory layout (written by ``simulate``, read by the others):
    cloud.cffp
    cam{i}_calib.json
    cam{i}_heatmap.cfft      (K, H, W)
    cam{i}_features.cfft     (C, H, W)
    cam{i}_gt_depth.cfft     (2, H, W) depth and in-range mask
    manifest.json
"""

import json
import logging
import math
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.config import Settings
from app.exceptions import ConfigError, FormatError, IoError
from app.services.augment_service import get_augment_service
from app.services.bev_service import LIDAR_CHANNELS
from app.services.depth_service import DenseDepthMap, DepthService
from app.services.geometry_service import CameraCalibration, get_geometry_service
from app.services.heatmap_service import FeatureMap, KeypointHeatmap
from app.services.pipeline_service import (
    CameraFrame,
    FrameInput,
    get_pipeline_service,
    stats_table,
)
from app.services.scene_service import get_scene_service
from app.utils import records, tensor_io

logger = logging.getLogger(__name__)

CLOUD_FILE = "cloud.cffp"
CALIB_PATTERN = re.compile(r"^cam(\d+)_calib\.json$")


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc.strerror or exc}") from exc
    return path


def _load_array(path: Path, build, what: str):
    """Read a CFFT file and wrap it, naming the file on a shape or value error."""
    array = tensor_io.read_tensor(path)
    try:
        return build(array)
    except ValueError as exc:
        raise FormatError(f"invalid {what}: {exc}", str(path)) from exc


def discover_cameras(frame_dir: Path) -> List[Tuple[int, Path]]:
    """``cam{i}_calib.json`` files of a frame directory, ordered by index."""
    if not frame_dir.is_dir():
        raise IoError(f"frame directory not found: {frame_dir}")
    found = []
    for path in frame_dir.iterdir():
        match = CALIB_PATTERN.match(path.name)
        if match:
            found.append((int(match.group(1)), path))
    if not found:
        raise FormatError("no cam*_calib.json files", str(frame_dir))
    return sorted(found)


def load_frame(frame_dir, settings: Settings, gt_depth: bool = False) -> FrameInput:
    """
    Read a frame directory into a FrameInput configured from ``settings``.

    Args:
        frame_dir: Directory produced by ``simulate`` (or laid out the same way)
        settings: Grid, depth, stride and threshold come from here
        gt_depth: Inject ``cam{i}_gt_depth.cfft`` instead of completing depth

    Raises:
        FormatError / ParseError: Naming the offending file
    """
    frame_dir = Path(frame_dir)
    cloud = tensor_io.read_cloud(frame_dir / CLOUD_FILE)

    cameras = []
    for index, calib_path in discover_cameras(frame_dir):
        calib = records.read_calibration(calib_path)
        heatmap = _load_array(
            frame_dir / f"cam{index}_heatmap.cfft",
            lambda a: KeypointHeatmap(scores=a, stride=settings.stride),
            "heatmap",
        )
        features = _load_array(
            frame_dir / f"cam{index}_features.cfft", lambda a: FeatureMap(values=a), "feature map"
        )
        depth = None
        if gt_depth:
            depth = _load_array(
                frame_dir / f"cam{index}_gt_depth.cfft", DenseDepthMap.from_planes, "depth planes"
            )
        cameras.append(CameraFrame(
            name=calib.name, calib=calib, heatmap=heatmap, features=features, depth=depth,
        ))

    logger.info("Loaded frame %s: %d points, %d cameras", frame_dir, len(cloud), len(cameras))
    return FrameInput(
        cloud=cloud,
        cameras=cameras,
        grid=settings.grid,
        depth_config=settings.depth,
        threshold=settings.threshold,
        stride=settings.stride,
    )


def parse_thresholds(text: str) -> List[float]:
    """``"0.5,0.1,0.0"`` -> [0.5, 0.1, 0.0]"""
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad threshold list '{text}': {exc}") from exc
    if not values:
        raise ConfigError("threshold list is empty")
    return values


# ==================== simulate ====================

def cmd_simulate(args, settings: Settings) -> Dict[str, Any]:
    """Ray-cast a scene file into a frame directory and checksum it."""
    scene = records.read_scene(args.scene)
    out_dir = _ensure_dir(Path(args.out))

    rig = settings.rig
    if getattr(args, "cameras", None) is not None:
        if args.cameras < 1:
            raise ConfigError(f"--cameras must be >= 1, got {args.cameras}")
        rig = rig.model_copy(update={"num_cameras": args.cameras})

    geometry = get_geometry_service()
    cameras = geometry.make_camera_rig(rig)
    frame = get_scene_service().simulate_frame(
        scene,
        cameras,
        lidar=settings.lidar,
        num_classes=settings.num_classes,
        stride=settings.stride,
        seed=settings.seed,
        inject_gt_depth=True,
    )

    written = [CLOUD_FILE]
    tensor_io.write_cloud(out_dir / CLOUD_FILE, frame.cloud)
    for index, cam in enumerate(frame.cameras):
        prefix = f"cam{index}"
        records.write_calibration(out_dir / f"{prefix}_calib.json", cam.calib)
        tensor_io.write_tensor(out_dir / f"{prefix}_heatmap.cfft", cam.heatmap.scores)
        tensor_io.write_tensor(out_dir / f"{prefix}_features.cfft", cam.features.values)
        tensor_io.write_tensor(out_dir / f"{prefix}_gt_depth.cfft", cam.depth.to_planes())
        written += [f"{prefix}_calib.json", f"{prefix}_heatmap.cfft",
                    f"{prefix}_features.cfft", f"{prefix}_gt_depth.cfft"]

    manifest = records.write_manifest(out_dir, written)
    print(f"🛰️  Simulated {len(scene.boxes)} boxes: {len(frame.cloud)} LiDAR points, "
          f"{len(frame.cameras)} cameras")
    print(f"📁 {len(manifest)} artifacts written to {out_dir}")
    return {"points": len(frame.cloud), "cameras": len(frame.cameras), "manifest": manifest}


# ==================== project ====================

def cmd_project(args, settings: Settings) -> Dict[str, Any]:
    """Fuse one frame and write the BEV grids plus its stats row."""
    frame = load_frame(args.frame, settings, gt_depth=getattr(args, "gt_depth", False))
    frame.completion = getattr(args, "completion", None) or "ipbasic"
    if getattr(args, "augment", None):
        frame.augmentation = records.read_params(args.augment)
    frame.augment_mode = getattr(args, "augment_mode", None) or "aligned"

    result = get_pipeline_service().fuse_frame(frame)
    out_dir = _ensure_dir(Path(args.out))

    tensor_io.write_tensor(out_dir / "camera_bev.cfft", result.camera.to_tensor())
    tensor_io.write_tensor(out_dir / "lidar_bev.cfft", result.lidar.to_tensor())
    tensor_io.write_tensor(out_dir / "fused_bev.cfft", result.fused.to_tensor())

    meta = {
        "grid": settings.grid.model_dump(),
        "nx": settings.grid.nx,
        "ny": settings.grid.ny,
        "camera_channels": result.camera.channels,
        "lidar_channels": list(LIDAR_CHANNELS),
        "threshold": frame.threshold,
        "completion": frame.completion,
        "augmented": frame.augmentation is not None,
        "augment_mode": frame.augment_mode,
    }
    try:
        (out_dir / "bev_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {out_dir / 'bev_meta.json'}: {exc.strerror or exc}") from exc
    records.write_table(out_dir / "frame_stats.csv", stats_table([result.stats]))

    if getattr(args, "pgm", False):
        tensor_io.write_pgm(out_dir / "occupancy.pgm", result.camera.occupancy)

    stats = result.stats
    print(f"🎯 Threshold {stats.threshold:g}: {stats.pixels_total} pixels selected, "
          f"{stats.pooled} pseudo-points pooled into {stats.cells_occupied} cells")
    print(f"⏱️  Projection {stats.latency_ms:.2f} ms (depth completion {stats.depth_ms:.2f} ms)")
    return {"stats": stats.to_row(), "out": str(out_dir)}


# ==================== bench ====================

def cmd_bench(args, settings: Settings) -> Dict[str, Any]:
    """Threshold sweep over one frame, written as threshold,pixels,latency_ms."""
    thresholds = parse_thresholds(args.thresholds)
    frame = load_frame(args.frame, settings)
    frame.completion = getattr(args, "completion", None) or "ipbasic"

    table = get_pipeline_service().threshold_sweep(frame, thresholds, args.repetitions)
    records.write_table(args.out, table)

    print(f"📊 Threshold sweep ({args.repetitions} repetitions, depth {table.attrs['depth_ms']:.1f} ms once)")
    for row in table.itertuples(index=False):
        print(f"   {row.threshold:<8g} {row.pixels:>8d} px  {row.latency_ms:9.3f} ms")
    return {"rows": table.to_dict(orient="records"), "depth_ms": table.attrs["depth_ms"]}


# ==================== augment ====================

def cmd_augment(args, settings: Settings) -> Dict[str, Any]:
    """Apply a recorded or seed-sampled augmentation to a cloud and pseudo-points."""
    augment = get_augment_service()
    if getattr(args, "record", None):
        params = records.read_params(args.record)
    else:
        params = augment.sample_params(settings.seed, settings.augment)
    if getattr(args, "invert", False):
        params = augment.invert_params(params)

    out_dir = _ensure_dir(Path(args.out))
    cloud = tensor_io.read_cloud(args.cloud)
    tensor_io.write_cloud(out_dir / "cloud_aug.cffp", augment.apply_to_cloud(cloud, params))

    num_points: Optional[int] = None
    if getattr(args, "points", None):
        table = tensor_io.read_tensor(args.points)
        if table.ndim != 2 or table.shape[1] < 5:
            raise FormatError(f"pseudo-point table must be (N, 5 + C), got {table.shape}", str(args.points))
        tensor_io.write_tensor(out_dir / "points_aug.cfft", augment.apply_to_points(table, params))
        num_points = int(table.shape[0])

    records.write_params(out_dir / "params.txt", params)
    print(f"🔀 Augmentation {records.format_params(params)}")
    print(f"📁 {len(cloud)} LiDAR points"
          + (f" and {num_points} pseudo-points" if num_points is not None else "")
          + f" written to {out_dir}")
    return {"params": params, "cloud": len(cloud), "points": num_points}


# ==================== depth ====================

def cmd_depth(args, settings: Settings) -> Dict[str, Any]:
    """Complete depth for one or all cameras and score it against ground truth."""
    frame_dir = Path(args.frame)
    method = getattr(args, "method", None) or "ipbasic"

    cameras = discover_cameras(frame_dir)
    if getattr(args, "camera", None) is not None:
        cameras = [(i, p) for i, p in cameras if i == args.camera]
        if not cameras:
            raise ConfigError(f"camera {args.camera} not found in {frame_dir}")

    out_dir = _ensure_dir(Path(args.out) if getattr(args, "out", None) else frame_dir)

    cloud = tensor_io.read_cloud(frame_dir / CLOUD_FILE)
    geometry = get_geometry_service()
    depth = DepthService(settings.depth)

    results = {}
    for index, calib_path in cameras:
        calib: CameraCalibration = records.read_calibration(calib_path)
        sparse = geometry.render_sparse_depth(cloud, calib, settings.stride)
        if method == "nn":
            dense = depth.nn_complete(sparse, settings.depth.max_gap)
        else:
            dense = depth.ipbasic_complete(sparse, settings.depth)
        tensor_io.write_tensor(out_dir / f"cam{index}_depth.cfft", dense.to_planes())

        rmse = None
        truth_path = frame_dir / f"cam{index}_gt_depth.cfft"
        if truth_path.is_file():
            truth = _load_array(truth_path, DenseDepthMap.from_planes, "depth planes")
            rmse = depth.depth_rmse(dense, truth)

        coverage = float(dense.in_range_mask.mean())
        results[f"cam{index}"] = {"samples": sparse.num_valid, "coverage": coverage, "rmse": rmse}
        score = "no ground truth" if rmse is None else (
            "no overlap" if math.isnan(rmse) else f"RMSE {rmse:.3f} m"
        )
        print(f"📏 cam{index} [{method}]: {sparse.num_valid} samples, "
              f"{100 * coverage:.1f}% in range, {score}")

    valid = [r["rmse"] for r in results.values() if r["rmse"] is not None and not math.isnan(r["rmse"])]
    if valid:
        print(f"📈 Mean RMSE {float(np.mean(valid)):.3f} m over {len(valid)} cameras")
    return {"method": method, "cameras": results}
