"""
BEV Service
===========
Lifts selected camera features into 3D pseudo-points and aggregates them in
a bird's-eye-view grid.

This service provides:
- lift_pixels: back-project selected pixels at their completed depth
- range_filter: keep points inside the detection range
- bev_max_pool: channel-wise max of all pseudo-point features per cell
- rasterize_lidar_bev: hand-crafted LiDAR cell statistics
- concat_bev: camera channels followed by LiDAR channels

Grid values are laid out (nx, ny, C) with cell (ix, iy) covering
[x_min + ix * cell, x_min + (ix + 1) * cell) and likewise in y.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from app.exceptions import DimensionMismatch, PointOutOfRange
from app.services.depth_service import DenseDepthMap
from app.services.geometry_service import CameraCalibration, GeometryService, PointCloud, get_geometry_service
from app.services.heatmap_service import PixelSelection

logger = logging.getLogger(__name__)

# Relative tolerance for "range width is a whole number of cells"
GRID_TOLERANCE = 1e-6

LIDAR_CHANNELS = ("log_count", "max_z", "mean_intensity", "mean_z")


class BevGridConfig(BaseModel):
    """Detection range and BEV cell size."""

    x_range: Tuple[float, float] = (-54.0, 54.0)
    y_range: Tuple[float, float] = (-54.0, 54.0)
    z_range: Tuple[float, float] = (-5.0, 3.0)
    cell_size: float = Field(default=0.6, gt=0)
    channels: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _check_grid(self) -> "BevGridConfig":
        for name in ("x_range", "y_range", "z_range"):
            low, high = getattr(self, name)
            if not (math.isfinite(low) and math.isfinite(high) and low < high):
                raise ValueError(f"{name} must be finite and well-ordered, got {(low, high)}")
        for name in ("x_range", "y_range"):
            low, high = getattr(self, name)
            cells = (high - low) / self.cell_size
            if abs(cells - round(cells)) > GRID_TOLERANCE * max(1.0, cells):
                raise ValueError(
                    f"{name} width {high - low} is not a multiple of cell_size {self.cell_size}"
                )
        return self

    @property
    def nx(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def ny(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))


class FeaturePseudoPoint(NamedTuple):
    x: float
    y: float
    z: float
    feature: np.ndarray
    class_id: int
    score: float


@dataclass
class PseudoPoints:
    """
    Columnar pseudo-point cloud.

    Attributes:
        xyz: (N, 3) world coordinates in meters
        features: (N, C) camera features
        class_id: (N,) class of the selected pixel
        score: (N,) heatmap score of the selected pixel
    """

    xyz: np.ndarray
    features: np.ndarray
    class_id: np.ndarray
    score: np.ndarray

    @classmethod
    def empty(cls, channels: int) -> "PseudoPoints":
        return cls(
            xyz=np.zeros((0, 3)),
            features=np.zeros((0, channels)),
            class_id=np.zeros(0, dtype=np.int64),
            score=np.zeros(0),
        )

    @classmethod
    def concat(cls, parts: List["PseudoPoints"], channels: int) -> "PseudoPoints":
        """Merge per-camera clouds, preserving camera order."""
        if not parts:
            return cls.empty(channels)
        return cls(
            xyz=np.concatenate([p.xyz for p in parts]),
            features=np.concatenate([p.features for p in parts]),
            class_id=np.concatenate([p.class_id for p in parts]),
            score=np.concatenate([p.score for p in parts]),
        )

    @classmethod
    def from_array(cls, table: np.ndarray) -> "PseudoPoints":
        """Inverse of ``to_array``: columns x, y, z, class_id, score, features."""
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[1] < 5:
            raise ValueError(f"pseudo-point table must be (N, 5 + C), got {table.shape}")
        return cls(
            xyz=table[:, :3].copy(),
            features=table[:, 5:].copy(),
            class_id=table[:, 3].astype(np.int64),
            score=table[:, 4].copy(),
        )

    def to_array(self) -> np.ndarray:
        return np.column_stack([self.xyz, self.class_id, self.score, self.features])

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def subset(self, keep: np.ndarray) -> "PseudoPoints":
        return PseudoPoints(
            xyz=self.xyz[keep],
            features=self.features[keep],
            class_id=self.class_id[keep],
            score=self.score[keep],
        )

    def with_xyz(self, xyz: np.ndarray) -> "PseudoPoints":
        """Same features, class and score at new coordinates."""
        return PseudoPoints(xyz=xyz, features=self.features, class_id=self.class_id, score=self.score)

    def __len__(self) -> int:
        return int(self.xyz.shape[0])

    def __iter__(self) -> Iterator[FeaturePseudoPoint]:
        for i in range(len(self)):
            x, y, z = self.xyz[i]
            yield FeaturePseudoPoint(
                float(x), float(y), float(z),
                self.features[i], int(self.class_id[i]), float(self.score[i]),
            )


@dataclass
class BevFeatureGrid:
    """Per-cell features (nx, ny, C) and pooled point counts (nx, ny)."""

    values: np.ndarray
    occupancy: np.ndarray

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def cells_occupied(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def to_tensor(self) -> np.ndarray:
        """(nx, ny, C + 1) with occupancy as the last channel."""
        return np.concatenate([self.values, self.occupancy[..., np.newaxis].astype(np.float64)], axis=-1)

    @classmethod
    def from_tensor(cls, tensor: np.ndarray) -> "BevFeatureGrid":
        tensor = np.asarray(tensor, dtype=np.float64)
        if tensor.ndim != 3 or tensor.shape[2] < 1:
            raise ValueError(f"BEV tensor must be (nx, ny, C + 1), got {tensor.shape}")
        return cls(values=tensor[..., :-1].copy(), occupancy=tensor[..., -1].astype(np.int64))


class BevService:
    """
    Service for lifting and pooling camera features in the BEV frame.
    """

    def __init__(self, geometry: Optional[GeometryService] = None):
        """
        Initialize BevService.

        Args:
            geometry: Projection service used for back-projection
        """
        self.geometry = geometry or GeometryService()

    def lift_pixels(
        self,
        selection: PixelSelection,
        dense: DenseDepthMap,
        calib: CameraCalibration,
        stride: int,
    ) -> Tuple[PseudoPoints, int]:
        """
        Back-project selected pixel centers at their completed depth.

        Pixels outside the interpolation range, or without a finite positive
        depth, are skipped.

        Args:
            selection: Selected pixels on the stride grid
            dense: Completed depth on the same grid
            calib: Camera calibration
            stride: Feature-map stride s

        Returns:
            (pseudo-points, number of pixels dropped by the range guard)
        """
        u_s, v_s = selection.u_s, selection.v_s
        if len(selection) and (
            u_s.min() < 0 or v_s.min() < 0
            or u_s.max() >= dense.width_s or v_s.max() >= dense.height_s
        ):
            raise DimensionMismatch(
                f"selected pixels exceed depth grid {dense.height_s}x{dense.width_s}"
            )

        depth = dense.depth[v_s, u_s]
        keep = dense.in_range_mask[v_s, u_s] & np.isfinite(depth) & (depth > 0)
        dropped = int(len(selection) - np.count_nonzero(keep))

        u_center = (u_s[keep] + 0.5) * stride
        v_center = (v_s[keep] + 0.5) * stride
        if np.count_nonzero(keep):
            xyz = self.geometry.image_to_world(u_center, v_center, depth[keep], calib)
        else:
            xyz = np.zeros((0, 3))

        points = PseudoPoints(
            xyz=xyz.reshape(-1, 3),
            features=selection.features[keep],
            class_id=selection.class_id[keep],
            score=selection.score[keep],
        )
        logger.debug("%s: lifted %d pixels, guard dropped %d", calib.name, len(points), dropped)
        return points, dropped

    def in_range(self, xyz: np.ndarray, config: BevGridConfig) -> np.ndarray:
        """Closed-lower, open-upper containment test per point."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        keep = np.ones(xyz.shape[0], dtype=bool)
        for axis, (low, high) in enumerate((config.x_range, config.y_range, config.z_range)):
            keep &= (xyz[:, axis] >= low) & (xyz[:, axis] < high)
        return keep

    def range_filter(self, points: PseudoPoints, config: BevGridConfig) -> PseudoPoints:
        """Drop pseudo-points outside the detection range."""
        return points.subset(self.in_range(points.xyz, config))

    def cell_of(self, x, y, config: BevGridConfig) -> Tuple[np.ndarray, np.ndarray]:
        """
        Cell index of in-range coordinates.

        The index is clipped to the last cell so that rounding in the
        division never pushes a point just below the upper bound out.
        """
        ix = np.floor((np.asarray(x, dtype=np.float64) - config.x_range[0]) / config.cell_size)
        iy = np.floor((np.asarray(y, dtype=np.float64) - config.y_range[0]) / config.cell_size)
        ix = np.clip(ix, 0, config.nx - 1).astype(np.int64)
        iy = np.clip(iy, 0, config.ny - 1).astype(np.int64)
        return ix, iy

    def bev_max_pool(self, points: PseudoPoints, config: BevGridConfig) -> BevFeatureGrid:
        """
        Channel-wise max of pseudo-point features per BEV cell.

        Args:
            points: Range-filtered pseudo-points
            config: Grid configuration

        Returns:
            BevFeatureGrid; empty cells are zero with occupancy 0

        Raises:
            PointOutOfRange: If any point lies outside the grid
            DimensionMismatch: If the feature width disagrees with config.channels
        """
        channels = points.channels
        if config.channels is not None and config.channels != channels:
            raise DimensionMismatch(
                f"features have {channels} channels, grid expects {config.channels}"
            )

        inside = self.in_range(points.xyz, config)
        if not inside.all():
            bad = points.xyz[np.argmin(inside)]
            raise PointOutOfRange(f"point {tuple(bad)} is outside the BEV grid")

        values = np.zeros((config.nx, config.ny, channels))
        occupancy = np.zeros((config.nx, config.ny), dtype=np.int64)
        if len(points) == 0:
            return BevFeatureGrid(values=values, occupancy=occupancy)

        ix, iy = self.cell_of(points.xyz[:, 0], points.xyz[:, 1], config)
        flat = ix * config.ny + iy

        # Group by cell, then reduce each run with a max
        order = np.argsort(flat, kind="stable")
        flat_sorted = flat[order]
        starts = np.flatnonzero(np.r_[True, flat_sorted[1:] != flat_sorted[:-1]])
        cells = flat_sorted[starts]

        if channels:
            flat_values = values.reshape(-1, channels)
            flat_values[cells] = np.maximum.reduceat(points.features[order], starts, axis=0)
        occupancy.reshape(-1)[cells] = np.diff(np.r_[starts, len(flat_sorted)])

        logger.debug("Pooled %d pseudo-points into %d cells", len(points), len(cells))
        return BevFeatureGrid(values=values, occupancy=occupancy)

    def rasterize_lidar_bev(self, cloud: PointCloud, config: BevGridConfig) -> BevFeatureGrid:
        """
        Hand-crafted LiDAR BEV features per cell.

        Channels: log1p(point count), max z, mean intensity, mean z.
        Points outside the detection range are ignored.
        """
        values = np.zeros((config.nx, config.ny, len(LIDAR_CHANNELS)))
        occupancy = np.zeros((config.nx, config.ny), dtype=np.int64)

        points = cloud.points[self.in_range(cloud.xyz, config)]
        if points.shape[0] == 0:
            return BevFeatureGrid(values=values, occupancy=occupancy)

        ix, iy = self.cell_of(points[:, 0], points[:, 1], config)
        flat = ix * config.ny + iy
        size = config.nx * config.ny

        counts = np.bincount(flat, minlength=size)
        z_sum = np.bincount(flat, weights=points[:, 2], minlength=size)
        intensity_sum = np.bincount(flat, weights=points[:, 3], minlength=size)
        z_max = np.full(size, -np.inf)
        np.maximum.at(z_max, flat, points[:, 2])

        occupied = counts > 0
        flat_values = values.reshape(size, -1)
        flat_values[occupied, 0] = np.log1p(counts[occupied])
        flat_values[occupied, 1] = z_max[occupied]
        flat_values[occupied, 2] = intensity_sum[occupied] / counts[occupied]
        flat_values[occupied, 3] = z_sum[occupied] / counts[occupied]
        occupancy.reshape(-1)[:] = counts
        return BevFeatureGrid(values=values, occupancy=occupancy)

    def concat_bev(self, camera: BevFeatureGrid, lidar: BevFeatureGrid) -> BevFeatureGrid:
        """
        Concatenate camera and LiDAR channels.

        Raises:
            DimensionMismatch: If the grids have different (nx, ny)
        """
        if (camera.nx, camera.ny) != (lidar.nx, lidar.ny):
            raise DimensionMismatch(
                f"camera grid {camera.nx}x{camera.ny} != lidar grid {lidar.nx}x{lidar.ny}"
            )
        return BevFeatureGrid(
            values=np.concatenate([camera.values, lidar.values], axis=-1),
            occupancy=np.maximum(camera.occupancy, lidar.occupancy),
        )


# Singleton instance
_bev_service_instance = None

def get_bev_service() -> BevService:
    """Get singleton instance of BevService."""
    global _bev_service_instance
    if _bev_service_instance is None:
        _bev_service_instance = BevService(get_geometry_service())
    return _bev_service_instance
