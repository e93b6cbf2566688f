"""
Geometry Service
================
Pinhole camera model and rigid transforms.

This service provides:
- world -> camera -> image mappings and their exact inverse
- LiDAR-to-image sparse depth rendering at feature-map stride
- a synthetic multi-camera rig around the ego origin

Conventions:
- World frame: x forward, y left, z up (meters).
- Camera frame: x right, y down, z forward along the optical axis.
- Depth is the camera-frame z, never the ray length.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.exceptions import BehindCamera, ConfigError, NonPositiveDepth

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]

# Rotation blocks must be orthonormal to this tolerance on load
ORTHONORMAL_TOLERANCE = 1e-9


class CameraCalibration(BaseModel):
    """
    Pinhole intrinsics plus the rigid camera-from-world extrinsics of one camera.

    ``cam_from_world`` holds the 16 row-major values of a 4x4 rigid transform.
    """

    model_config = ConfigDict(frozen=True)

    name: str = "cam"
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    cam_from_world: List[float]

    @field_validator("cam_from_world")
    @classmethod
    def _sixteen_finite_values(cls, values: List[float]) -> List[float]:
        if len(values) != 16:
            raise ValueError(f"cam_from_world needs 16 values, got {len(values)}")
        if not all(math.isfinite(v) for v in values):
            raise ValueError("cam_from_world contains non-finite values")
        return values

    @model_validator(mode="after")
    def _check_invariants(self) -> "CameraCalibration":
        if not (0 <= self.cx < self.width):
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")

        matrix = np.asarray(self.cam_from_world, dtype=np.float64).reshape(4, 4)
        rotation = matrix[:3, :3]
        gram_error = np.abs(rotation @ rotation.T - np.eye(3)).max()
        if gram_error > ORTHONORMAL_TOLERANCE:
            raise ValueError(f"rotation block is not orthonormal (error {gram_error:.3e})")
        determinant = np.linalg.det(rotation)
        if abs(determinant - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ValueError(f"rotation determinant is {determinant}, expected +1")
        if not np.array_equal(matrix[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last row of cam_from_world must be [0, 0, 0, 1]")
        return self

    @property
    def matrix(self) -> np.ndarray:
        """4x4 camera-from-world transform."""
        return np.asarray(self.cam_from_world, dtype=np.float64).reshape(4, 4)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera optical center in world coordinates."""
        return -self.rotation.T @ self.translation

    def grid_shape(self, stride: int) -> Tuple[int, int]:
        """(rows, cols) of the feature grid at the given stride."""
        return self.height // stride, self.width // stride


class CameraRigConfig(BaseModel):
    """Level cameras spaced evenly in yaw around the ego vertical axis."""

    num_cameras: int = Field(default=6, ge=1)
    width: int = Field(default=800, gt=0)
    height: int = Field(default=448, gt=0)
    horizontal_fov_deg: float = Field(default=70.0, gt=0, lt=180)
    mount_radius: float = Field(default=0.8, ge=0)
    mount_height: float = 1.5
    yaw_offset_deg: float = 0.0


@dataclass
class PointCloud:
    """LiDAR points as an (N, 4) array of x, y, z (meters) and intensity."""

    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 4)
        if points.ndim != 2 or points.shape[1] != 4:
            raise ValueError(f"point cloud must be (N, 4), got {points.shape}")
        if not np.isfinite(points).all():
            raise ValueError("point cloud contains NaN or Inf")
        self.points = points

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4)))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        """Copy of this cloud with replaced coordinates and the same intensities."""
        return PointCloud(np.column_stack([xyz, self.intensity]))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class SparseDepthMap:
    """Per-pixel LiDAR depth on the stride grid; 0 means no sample."""

    depth: np.ndarray
    stride: int = 1

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        return self.depth > 0

    @property
    def num_valid(self) -> int:
        return int(np.count_nonzero(self.valid_mask))

    @property
    def valid_fraction(self) -> float:
        return self.num_valid / self.depth.size if self.depth.size else 0.0


class GeometryService:
    """
    Pinhole projection service.

    All methods are pure: they accept a single point or an (N, 3) batch and
    return the matching shape.
    """

    def world_to_camera(self, points: ArrayLike, calib: CameraCalibration) -> np.ndarray:
        """
        Apply the rigid camera-from-world transform.

        Args:
            points: World point (3,) or points (N, 3), meters
            calib: Camera calibration

        Returns:
            Camera-frame point(s), same shape as the input
        """
        p = np.asarray(points, dtype=np.float64)
        return p @ calib.rotation.T + calib.translation

    def camera_to_image(
        self,
        points_cam: ArrayLike,
        calib: CameraCalibration,
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Project camera-frame points with the pinhole model.

        No bounds clamp is applied; callers filter out-of-image results.

        Returns:
            (u, v, depth) in pixels, pixels and meters

        Raises:
            BehindCamera: If any point has z <= 0
        """
        pc = np.asarray(points_cam, dtype=np.float64)
        z = pc[..., 2]
        if np.any(~(z > 0)):
            raise BehindCamera("camera-frame point has z <= 0")

        u = calib.fx * pc[..., 0] / z + calib.cx
        v = calib.fy * pc[..., 1] / z + calib.cy
        return u, v, z.copy()

    def image_to_world(
        self,
        u: ArrayLike,
        v: ArrayLike,
        depth: ArrayLike,
        calib: CameraCalibration,
    ) -> np.ndarray:
        """
        Back-project pixel(s) at the given camera-frame depth to world coordinates.

        Exact inverse of ``camera_to_image(world_to_camera(p))``.

        Raises:
            NonPositiveDepth: If any depth is <= 0 or NaN
        """
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d = np.asarray(depth, dtype=np.float64)
        if np.any(~(d > 0)):
            raise NonPositiveDepth("back-projection requires depth > 0")

        x = (u - calib.cx) / calib.fx * d
        y = (v - calib.cy) / calib.fy * d
        pc = np.stack(np.broadcast_arrays(x, y, d), axis=-1)
        # R^T (pc - t), written as a right-multiply for row vectors
        return (pc - calib.translation) @ calib.rotation

    def render_sparse_depth(
        self,
        cloud: PointCloud,
        calib: CameraCalibration,
        stride: int = 4,
    ) -> SparseDepthMap:
        """
        Z-buffer LiDAR points into a depth image at feature-map stride.

        Points behind the camera or projecting outside the image are dropped;
        when several points land in one grid pixel the nearest depth wins.

        Args:
            cloud: LiDAR point cloud in world coordinates
            calib: Camera calibration
            stride: Feature-map downsampling factor s

        Returns:
            SparseDepthMap of shape (height // s, width // s)
        """
        if stride < 1:
            raise ConfigError(f"stride must be >= 1, got {stride}")

        rows, cols = calib.grid_shape(stride)
        zbuffer = np.full((rows, cols), np.inf)

        if len(cloud) > 0:
            pc = self.world_to_camera(cloud.xyz, calib)
            pc = pc[pc[:, 2] > 0]
            z = pc[:, 2]
            with np.errstate(over="ignore", invalid="ignore"):
                u = calib.fx * pc[:, 0] / z + calib.cx
                v = calib.fy * pc[:, 1] / z + calib.cy
            inside = (u >= 0) & (u < calib.width) & (v >= 0) & (v < calib.height)

            us = np.floor(u[inside] / stride).astype(np.int64)
            vs = np.floor(v[inside] / stride).astype(np.int64)
            z = z[inside]
            on_grid = (us < cols) & (vs < rows)
            np.minimum.at(zbuffer, (vs[on_grid], us[on_grid]), z[on_grid])

        zbuffer[np.isinf(zbuffer)] = 0.0
        sparse = SparseDepthMap(depth=zbuffer, stride=stride)
        logger.debug(
            "%s: %d sparse samples (%.2f%% of grid)",
            calib.name, sparse.num_valid, 100.0 * sparse.valid_fraction,
        )
        if sparse.num_valid == 0:
            logger.warning("%s: no LiDAR sample projects into the image", calib.name)
        return sparse

    def make_calibration(
        self,
        name: str,
        position: ArrayLike,
        yaw: float,
        width: int,
        height: int,
        horizontal_fov_deg: float,
    ) -> CameraCalibration:
        """
        Build a level pinhole camera at ``position`` looking along ``yaw`` (radians).
        """
        fx = (width / 2.0) / math.tan(math.radians(horizontal_fov_deg) / 2.0)
        sin_yaw, cos_yaw = math.sin(yaw), math.cos(yaw)
        # Rows are the camera x (right), y (down) and z (forward) axes in world
        rotation = np.array([
            [sin_yaw, -cos_yaw, 0.0],
            [0.0, 0.0, -1.0],
            [cos_yaw, sin_yaw, 0.0],
        ])
        matrix = np.eye(4)
        matrix[:3, :3] = rotation
        matrix[:3, 3] = -rotation @ np.asarray(position, dtype=np.float64)
        return CameraCalibration(
            name=name,
            fx=fx,
            fy=fx,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
            cam_from_world=matrix.ravel().tolist(),
        )

    def make_camera_rig(self, rig: CameraRigConfig) -> List[CameraCalibration]:
        """Cameras evenly spaced in yaw, first camera looking along +x."""
        cameras = []
        for index in range(rig.num_cameras):
            yaw = math.radians(rig.yaw_offset_deg + index * 360.0 / rig.num_cameras)
            position = (
                rig.mount_radius * math.cos(yaw),
                rig.mount_radius * math.sin(yaw),
                rig.mount_height,
            )
            cameras.append(self.make_calibration(
                name=f"cam{index}",
                position=position,
                yaw=yaw,
                width=rig.width,
                height=rig.height,
                horizontal_fov_deg=rig.horizontal_fov_deg,
            ))
        return cameras


# Singleton instance
_geometry_service_instance = None

def get_geometry_service() -> GeometryService:
    """
    Get singleton instance of GeometryService.

    Returns:
        GeometryService instance
    """
    global _geometry_service_instance
    if _geometry_service_instance is None:
        _geometry_service_instance = GeometryService()
    return _geometry_service_instance
