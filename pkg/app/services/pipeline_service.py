"""
Pipeline Service
================
Runs one frame through the selective projection pipeline and benchmarks
projection latency across heatmap thresholds.

Per camera:
    render_sparse_depth -> interpolation_mask -> completion
    -> select_pixels -> lift_pixels
Then, over the union of all cameras:
    (replay augmentation) -> range_filter -> bev_max_pool
And for the LiDAR branch:
    (apply augmentation) -> rasterize_lidar_bev -> concat_bev

The augmentation mode decides which branches move:
    none        neither branch is augmented
    lidar_only  only the LiDAR cloud moves; camera features stay put
    aligned     the same params move both branches

Depth is always rendered from the unaugmented cloud; the camera geometry
lives in the original sensor frame.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd

from app.exceptions import CFFError, ConfigError, DimensionMismatch, FrameError
from app.services.augment_service import AugmentationParams, AugmentService, get_augment_service
from app.services.bev_service import BevFeatureGrid, BevGridConfig, BevService, PseudoPoints, get_bev_service
from app.services.depth_service import DenseDepthMap, DepthFillConfig, DepthService, get_depth_service
from app.services.geometry_service import CameraCalibration, GeometryService, PointCloud, get_geometry_service
from app.services.heatmap_service import FeatureMap, HeatmapService, KeypointHeatmap, get_heatmap_service

logger = logging.getLogger(__name__)

STAGES = ("depth", "select", "lift", "augment", "range", "pool", "lidar", "concat")

# Minimum timing repetitions per threshold
MIN_REPETITIONS = 3

AugmentMode = Literal["none", "lidar_only", "aligned"]
AUGMENT_MODES = ("none", "lidar_only", "aligned")


@dataclass
class CameraFrame:
    """
    One camera's inputs.

    ``depth``, when given, replaces depth completion (ground-truth injection).
    """

    name: str
    calib: CameraCalibration
    heatmap: KeypointHeatmap
    features: FeatureMap
    depth: Optional[DenseDepthMap] = None


@dataclass
class FrameInput:
    """Everything needed to fuse one frame."""

    cloud: PointCloud
    cameras: List[CameraFrame]
    grid: BevGridConfig = field(default_factory=BevGridConfig)
    depth_config: DepthFillConfig = field(default_factory=DepthFillConfig)
    augmentation: Optional[AugmentationParams] = None
    threshold: float = 0.1
    stride: int = 4
    completion: Literal["ipbasic", "nn"] = "ipbasic"
    augment_mode: AugmentMode = "aligned"

    @property
    def channels(self) -> int:
        return self.cameras[0].features.channels if self.cameras else 0

    @property
    def augments_lidar(self) -> bool:
        return self.augmentation is not None and self.augment_mode != "none"

    @property
    def augments_camera(self) -> bool:
        return self.augmentation is not None and self.augment_mode == "aligned"


@dataclass
class FrameStats:
    """Per-stage counts and wall times of one fused frame."""

    threshold: float
    pixels_selected: Dict[str, int] = field(default_factory=dict)
    lifted: int = 0
    dropped_guard: int = 0
    dropped_range: int = 0
    pooled: int = 0
    cells_occupied: int = 0
    stage_ms: Dict[str, float] = field(default_factory=lambda: {stage: 0.0 for stage in STAGES})

    @property
    def pixels_total(self) -> int:
        return sum(self.pixels_selected.values())

    @property
    def depth_ms(self) -> float:
        return self.stage_ms["depth"]

    @property
    def latency_ms(self) -> float:
        """Projection latency: selection, lifting and pooling."""
        return self.stage_ms["select"] + self.stage_ms["lift"] + self.stage_ms["pool"]

    def to_row(self) -> Dict[str, float]:
        """Flat record for the stats CSV."""
        row: Dict[str, float] = {
            "threshold": self.threshold,
            "pixels": self.pixels_total,
            "latency_ms": self.latency_ms,
            "depth_ms": self.depth_ms,
            "lifted": self.lifted,
            "dropped_guard": self.dropped_guard,
            "dropped_range": self.dropped_range,
            "pooled": self.pooled,
            "cells_occupied": self.cells_occupied,
        }
        for stage in STAGES:
            row[f"{stage}_ms"] = self.stage_ms[stage]
        for name, count in self.pixels_selected.items():
            row[f"pixels_{name}"] = count
        return row


@dataclass
class FrameResult:
    camera: BevFeatureGrid
    lidar: BevFeatureGrid
    fused: BevFeatureGrid
    stats: FrameStats

    def __iter__(self):
        return iter((self.camera, self.lidar, self.fused, self.stats))


@contextmanager
def camera_errors(name: str):
    """Re-raise domain errors of a per-camera stage as FrameError."""
    try:
        yield
    except FrameError:
        raise
    except CFFError as exc:
        raise FrameError(name, exc) from exc


class _StageTimer:
    """Accumulates milliseconds into FrameStats.stage_ms."""

    def __init__(self, stats: FrameStats, stage: str):
        self.stats = stats
        self.stage = stage

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.stats.stage_ms[self.stage] += (time.perf_counter() - self.start) * 1000.0
        return False


class PipelineService:
    """
    Service orchestrating the full frame flow.

    Composes the geometry, depth, heatmap, BEV and augmentation services.
    """

    def __init__(
        self,
        geometry: Optional[GeometryService] = None,
        depth: Optional[DepthService] = None,
        heatmap: Optional[HeatmapService] = None,
        bev: Optional[BevService] = None,
        augment: Optional[AugmentService] = None,
    ):
        self.geometry = geometry or get_geometry_service()
        self.depth = depth or get_depth_service()
        self.heatmap = heatmap or get_heatmap_service()
        self.bev = bev or (BevService(self.geometry) if geometry else get_bev_service())
        self.augment = augment or get_augment_service()

    def validate(self, frame: FrameInput) -> None:
        """
        Check the frame before any work is done.

        Raises:
            InvalidThreshold: If the threshold is outside [0, 1]
            ConfigError: If there is no camera, the stride is not positive or
                the augmentation mode is unknown
            DimensionMismatch: If a camera's grids disagree with its calibration
        """
        self.heatmap.validate_threshold(frame.threshold)
        if not frame.cameras:
            raise ConfigError("a frame needs at least one camera")
        if frame.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {frame.stride}")
        if frame.augment_mode not in AUGMENT_MODES:
            raise ConfigError(f"augment_mode must be one of {AUGMENT_MODES}, got {frame.augment_mode!r}")

        channels = frame.channels
        for cam in frame.cameras:
            expected = cam.calib.grid_shape(frame.stride)
            if cam.heatmap.stride != frame.stride:
                raise DimensionMismatch(
                    f"camera '{cam.name}': heatmap stride {cam.heatmap.stride} != {frame.stride}"
                )
            if tuple(cam.heatmap.grid_shape) != expected:
                raise DimensionMismatch(
                    f"camera '{cam.name}': heatmap grid {cam.heatmap.grid_shape} != {expected}"
                )
            if cam.features.channels != channels:
                raise DimensionMismatch(
                    f"camera '{cam.name}': {cam.features.channels} feature channels, expected {channels}"
                )
            if cam.depth is not None and cam.depth.depth.shape != expected:
                raise DimensionMismatch(
                    f"camera '{cam.name}': depth grid {cam.depth.depth.shape} != {expected}"
                )

    def complete_depths(self, frame: FrameInput, stats: FrameStats) -> List[DenseDepthMap]:
        """Dense depth per camera, from injected depth or LiDAR completion."""
        dense_maps = []
        for cam in frame.cameras:
            with _StageTimer(stats, "depth"), camera_errors(cam.name):
                if cam.depth is not None:
                    dense_maps.append(cam.depth)
                    continue
                sparse = self.geometry.render_sparse_depth(frame.cloud, cam.calib, frame.stride)
                if frame.completion == "nn":
                    dense = self.depth.nn_complete(sparse, frame.depth_config.max_gap)
                else:
                    dense = self.depth.ipbasic_complete(sparse, frame.depth_config)
                dense_maps.append(dense)
        return dense_maps

    def project(
        self,
        frame: FrameInput,
        dense_maps: Sequence[DenseDepthMap],
        threshold: float,
        stats: FrameStats,
    ) -> BevFeatureGrid:
        """
        Selection, lifting, augmentation replay, range filtering and pooling.

        Returns:
            Camera BEV grid; counts and timings are written into ``stats``
        """
        parts: List[PseudoPoints] = []
        for cam, dense in zip(frame.cameras, dense_maps):
            with camera_errors(cam.name):
                with _StageTimer(stats, "select"):
                    selection = self.heatmap.select_pixels(cam.heatmap, cam.features, threshold)
                with _StageTimer(stats, "lift"):
                    points, dropped = self.bev.lift_pixels(selection, dense, cam.calib, frame.stride)
            stats.pixels_selected[cam.name] = len(selection)
            stats.dropped_guard += dropped
            parts.append(points)

        with _StageTimer(stats, "lift"):
            points = PseudoPoints.concat(parts, frame.channels)
        stats.lifted = len(points)

        if frame.augments_camera:
            with _StageTimer(stats, "augment"):
                points = self.augment.replay_on_pseudo_points(points, frame.augmentation)

        with _StageTimer(stats, "range"):
            kept = self.bev.range_filter(points, frame.grid)
        stats.pooled = len(kept)
        stats.dropped_range = stats.lifted - stats.pooled

        with _StageTimer(stats, "pool"):
            grid = self.bev.bev_max_pool(kept, frame.grid)
        stats.cells_occupied = grid.cells_occupied
        return grid

    def fuse_frame(self, frame: FrameInput) -> FrameResult:
        """
        Fuse one frame into camera, LiDAR and concatenated BEV grids.

        Args:
            frame: Validated frame inputs

        Returns:
            FrameResult (unpacks as camera, lidar, fused, stats)

        Raises:
            FrameError: If a per-camera stage fails; names the camera
        """
        self.validate(frame)
        stats = FrameStats(threshold=frame.threshold)

        dense_maps = self.complete_depths(frame, stats)
        camera_grid = self.project(frame, dense_maps, frame.threshold, stats)

        cloud = frame.cloud
        if frame.augments_lidar:
            with _StageTimer(stats, "augment"):
                cloud = self.augment.apply_to_cloud(cloud, frame.augmentation)
        with _StageTimer(stats, "lidar"):
            lidar_grid = self.bev.rasterize_lidar_bev(cloud, frame.grid)
        with _StageTimer(stats, "concat"):
            fused = self.bev.concat_bev(camera_grid, lidar_grid)

        logger.info(
            "Frame fused: %d pixels selected, %d pooled, %d cells occupied (%.2f ms projection)",
            stats.pixels_total, stats.pooled, stats.cells_occupied, stats.latency_ms,
        )
        return FrameResult(camera=camera_grid, lidar=lidar_grid, fused=fused, stats=stats)

    def threshold_sweep(
        self,
        frame: FrameInput,
        thresholds: Sequence[float],
        repetitions: int = MIN_REPETITIONS,
    ) -> pd.DataFrame:
        """
        Measure selected pixels and projection latency per threshold.

        Depth completion runs once and is reported in ``attrs["depth_ms"]``.

        Args:
            frame: Frame inputs (its own threshold is ignored)
            thresholds: Thresholds in [0, 1], reported in the given order
            repetitions: Timing repetitions per threshold; the median is kept

        Returns:
            DataFrame with columns threshold, pixels, latency_ms
        """
        for threshold in thresholds:
            self.heatmap.validate_threshold(threshold)
        if repetitions < MIN_REPETITIONS:
            raise ConfigError(f"repetitions must be >= {MIN_REPETITIONS}, got {repetitions}")
        self.validate(frame)

        depth_stats = FrameStats(threshold=float("nan"))
        dense_maps = self.complete_depths(frame, depth_stats)

        rows = []
        for threshold in thresholds:
            latencies = []
            pixels = None
            for _ in range(repetitions):
                stats = FrameStats(threshold=threshold)
                self.project(frame, dense_maps, threshold, stats)
                latencies.append(stats.latency_ms)
                pixels = stats.pixels_total
            rows.append({
                "threshold": float(threshold),
                "pixels": int(pixels),
                "latency_ms": float(np.median(latencies)),
            })
            logger.info("threshold %.3f: %d pixels, %.3f ms", threshold, pixels, rows[-1]["latency_ms"])

        table = pd.DataFrame(rows, columns=["threshold", "pixels", "latency_ms"])
        table.attrs["depth_ms"] = depth_stats.depth_ms
        return table


def stats_table(stats: Sequence[FrameStats]) -> pd.DataFrame:
    """One CSV-ready row per FrameStats."""
    return pd.DataFrame([s.to_row() for s in stats])


# Singleton instance
_pipeline_service_instance = None

def get_pipeline_service() -> PipelineService:
    """
    Get singleton instance of PipelineService.

    Returns:
        PipelineService instance
    """
    global _pipeline_service_instance
    if _pipeline_service_instance is None:
        _pipeline_service_instance = PipelineService()
    return _pipeline_service_instance
