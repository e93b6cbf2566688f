"""
Scene Service
=============
Synthetic scenes that stand in for real sensor data and neural backbones.

This service provides:
- Ray-cast LiDAR against yawed boxes and a bounded ground plane
- Analytic ground-truth depth per feature-grid pixel
- Gaussian-splatted keypoint heatmaps at visible box centers
- One-hot class plus pixel-coordinate feature maps
- Random scene generation and full FrameInput assembly

Boxes are intersected in their local frame with the slab method; only yaw
rotation is modeled.
"""

import logging
import math
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from app.services.depth_service import SENTINEL_DEPTH, DenseDepthMap
from app.services.geometry_service import CameraCalibration, GeometryService, PointCloud
from app.services.heatmap_service import FeatureMap, KeypointHeatmap
from app.services.pipeline_service import CameraFrame, FrameInput

logger = logging.getLogger(__name__)

# Surface ids returned by cast_rays
NO_HIT = -1
GROUND = -2

BOX_INTENSITY = 0.5
GROUND_INTENSITY = 0.2

# Splat strength at which a box claims a feature-map pixel
DOMINANCE_LEVEL = 0.05


def default_elevations() -> List[float]:
    """32 beams evenly spaced over [-30, +10] degrees."""
    return np.radians(np.linspace(-30.0, 10.0, 32)).tolist()


class SceneBox(BaseModel):
    """Box with center, size (l, w, h), yaw about z and class id."""

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    yaw: float = 0.0
    class_id: int = Field(default=0, ge=0)

    @field_validator("size")
    @classmethod
    def _positive_size(cls, size):
        if not all(s > 0 for s in size):
            raise ValueError(f"box sizes must be positive, got {size}")
        return size


class SceneSpec(BaseModel):
    """Boxes, an optional ground plane and the ground extent (|x|, |y| <= extent)."""

    boxes: List[SceneBox] = Field(default_factory=list)
    ground_z: Optional[float] = None
    extent: float = Field(default=60.0, gt=0)

    def check_classes(self, num_classes: int) -> None:
        for box in self.boxes:
            if box.class_id >= num_classes:
                raise ValueError(f"box class {box.class_id} >= number of classes {num_classes}")


class LidarConfig(BaseModel):
    """Spinning LiDAR: beam elevations, azimuth step, range, origin, range noise."""

    elevations: List[float] = Field(default_factory=default_elevations)
    azimuth_resolution: float = Field(default=math.radians(0.2), gt=0)
    max_range: float = Field(default=70.0, gt=0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 1.84)
    noise_std: float = Field(default=0.0, ge=0)

    @field_validator("elevations")
    @classmethod
    def _at_least_one_beam(cls, elevations):
        if len(elevations) < 1:
            raise ValueError("LiDAR needs at least one beam")
        return elevations

    @property
    def num_azimuths(self) -> int:
        return max(1, int(round(2 * math.pi / self.azimuth_resolution)))

    def directions(self) -> np.ndarray:
        """Unit ray directions, beam-major then azimuth-minor."""
        elevation = np.asarray(self.elevations, dtype=np.float64)[:, np.newaxis]
        azimuth = (np.arange(self.num_azimuths) * self.azimuth_resolution)[np.newaxis, :]
        dirs = np.stack(np.broadcast_arrays(
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ), axis=-1)
        return dirs.reshape(-1, 3)


class VisibleCenter(NamedTuple):
    box_index: int
    u_s: int
    v_s: int
    class_id: int
    depth: float
    sigma: float


class SceneService:
    """
    Service rendering sensor data from a SceneSpec.

    Every method is a pure function of (scene, configuration, seed).
    """

    def __init__(self, geometry: Optional[GeometryService] = None):
        self.geometry = geometry or GeometryService()

    # ==================== Ray casting ====================

    def cast_rays(
        self,
        origin: Sequence[float],
        directions: np.ndarray,
        scene: SceneSpec,
        max_t: float = math.inf,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Nearest hit along each ray.

        Args:
            origin: Shared ray origin (3,)
            directions: (M, 3) ray directions; t is measured in their units
            scene: Scene to intersect
            max_t: Hits beyond this parameter are discarded

        Returns:
            (t, surface): hit parameter (inf for none) and surface id
            (box index, GROUND or NO_HIT)
        """
        origin = np.asarray(origin, dtype=np.float64)
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        t_best = np.full(directions.shape[0], np.inf)
        surface = np.full(directions.shape[0], NO_HIT, dtype=np.int64)

        for index, box in enumerate(scene.boxes):
            t = self._intersect_box(origin, directions, box)
            closer = t < t_best
            t_best[closer] = t[closer]
            surface[closer] = index

        if scene.ground_z is not None:
            t = self._intersect_ground(origin, directions, scene.ground_z, scene.extent)
            closer = t < t_best
            t_best[closer] = t[closer]
            surface[closer] = GROUND

        beyond = t_best > max_t
        t_best[beyond] = np.inf
        surface[beyond] = NO_HIT
        return t_best, surface

    @staticmethod
    def _intersect_box(origin: np.ndarray, directions: np.ndarray, box: SceneBox) -> np.ndarray:
        cos_y, sin_y = math.cos(box.yaw), math.sin(box.yaw)
        rel = origin - np.asarray(box.center)
        # Rotate into the box frame by -yaw
        o_local = np.array([
            cos_y * rel[0] + sin_y * rel[1],
            -sin_y * rel[0] + cos_y * rel[1],
            rel[2],
        ])
        d_local = np.column_stack([
            cos_y * directions[:, 0] + sin_y * directions[:, 1],
            -sin_y * directions[:, 0] + cos_y * directions[:, 1],
            directions[:, 2],
        ])
        half = np.asarray(box.size) / 2.0

        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o_local) / d_local
            t2 = (half - o_local) / d_local
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)

        # Rays parallel to a slab either always or never lie inside it
        parallel = d_local == 0
        outside = np.broadcast_to(np.abs(o_local) > half, d_local.shape)
        near = np.where(parallel, np.where(outside, np.inf, -np.inf), near)
        far = np.where(parallel, np.where(outside, -np.inf, np.inf), far)

        t_near = near.max(axis=1)
        t_far = far.min(axis=1)
        hit = (t_near <= t_far) & (t_near > 0)
        return np.where(hit, t_near, np.inf)

    @staticmethod
    def _intersect_ground(origin: np.ndarray, directions: np.ndarray, ground_z: float, extent: float) -> np.ndarray:
        dz = directions[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ground_z - origin[2]) / dz
        t = np.where((dz != 0) & (t > 0), t, np.inf)
        finite = np.isfinite(t)
        x = origin[0] + np.where(finite, t, 0.0) * directions[:, 0]
        y = origin[1] + np.where(finite, t, 0.0) * directions[:, 1]
        inside = finite & (np.abs(x) <= extent) & (np.abs(y) <= extent)
        return np.where(inside, t, np.inf)

    def raycast_lidar(self, scene: SceneSpec, lidar: LidarConfig, seed: int = 0) -> PointCloud:
        """
        Simulate one LiDAR sweep.

        Points come out beam-major, azimuth-minor. Range noise, when
        configured, is drawn from a Philox stream in output order.

        Returns:
            PointCloud with intensity 0.5 on boxes and 0.2 on the ground
        """
        directions = lidar.directions()
        origin = np.asarray(lidar.origin, dtype=np.float64)
        t, surface = self.cast_rays(origin, directions, scene, lidar.max_range)

        hit = surface != NO_HIT
        t = t[hit]
        if lidar.noise_std > 0 and t.size:
            rng = np.random.Generator(np.random.Philox(seed))
            t = t + rng.normal(0.0, lidar.noise_std, size=t.size)

        xyz = origin + t[:, np.newaxis] * directions[hit]
        intensity = np.where(surface[hit] == GROUND, GROUND_INTENSITY, BOX_INTENSITY)
        logger.debug("LiDAR sweep: %d rays, %d returns", directions.shape[0], xyz.shape[0])
        return PointCloud(np.column_stack([xyz, intensity]))

    # ==================== Camera rendering ====================

    def pixel_rays(self, calib: CameraCalibration, stride: int) -> np.ndarray:
        """
        World directions through every grid-pixel center, row-major.

        Each direction has unit camera-frame z, so the ray parameter of a
        hit equals its camera depth.
        """
        rows, cols = calib.grid_shape(stride)
        v_s, u_s = np.indices((rows, cols))
        x = ((u_s + 0.5) * stride - calib.cx) / calib.fx
        y = ((v_s + 0.5) * stride - calib.cy) / calib.fy
        d_cam = np.stack([x.ravel(), y.ravel(), np.ones(rows * cols)], axis=-1)
        return d_cam @ calib.rotation

    def render_depth(self, scene: SceneSpec, calib: CameraCalibration, stride: int = 4) -> DenseDepthMap:
        """Ground-truth camera depth per grid pixel; SENTINEL_DEPTH where nothing is hit."""
        rows, cols = calib.grid_shape(stride)
        t, _ = self.cast_rays(calib.center, self.pixel_rays(calib, stride), scene)
        depth = t.reshape(rows, cols)
        mask = np.isfinite(depth)
        return DenseDepthMap(depth=np.where(mask, depth, SENTINEL_DEPTH), in_range_mask=mask)

    def visible_box_centers(
        self,
        scene: SceneSpec,
        calib: CameraCalibration,
        stride: int = 4,
        num_classes: Optional[int] = None,
    ) -> List[VisibleCenter]:
        """
        Boxes whose center lies in front of the camera and inside the image.

        The splat sigma is max(1, projected box diagonal / 6) in grid pixels.
        Boxes with class_id >= num_classes are skipped.
        """
        rows, cols = calib.grid_shape(stride)
        focal = 0.5 * (calib.fx + calib.fy)
        visible = []
        for index, box in enumerate(scene.boxes):
            if num_classes is not None and box.class_id >= num_classes:
                continue
            pc = self.geometry.world_to_camera(box.center, calib)
            if pc[2] <= 0:
                continue
            u, v, depth = self.geometry.camera_to_image(pc, calib)
            if not (0 <= u < calib.width and 0 <= v < calib.height):
                continue
            u_s, v_s = int(u // stride), int(v // stride)
            if u_s >= cols or v_s >= rows:
                continue
            diagonal = math.sqrt(sum(s * s for s in box.size)) * focal / (float(depth) * stride)
            visible.append(VisibleCenter(index, u_s, v_s, box.class_id, float(depth), max(1.0, diagonal / 6.0)))
        return visible

    def _splats(self, centers: Sequence[VisibleCenter], rows: int, cols: int) -> np.ndarray:
        """(B, rows, cols) Gaussian per visible center, peak 1 at its grid pixel."""
        v_s, u_s = np.indices((rows, cols))
        splats = np.zeros((len(centers), rows, cols))
        for i, c in enumerate(centers):
            dist2 = (u_s - c.u_s) ** 2 + (v_s - c.v_s) ** 2
            splats[i] = np.exp(-dist2 / (2.0 * c.sigma ** 2))
        return splats

    def render_heatmap(
        self,
        scene: SceneSpec,
        calib: CameraCalibration,
        stride: int = 4,
        num_classes: int = 3,
    ) -> KeypointHeatmap:
        """Per-class elementwise max of the visible boxes' Gaussian splats."""
        rows, cols = calib.grid_shape(stride)
        scores = np.zeros((num_classes, rows, cols))
        centers = self.visible_box_centers(scene, calib, stride, num_classes)
        for center, splat in zip(centers, self._splats(centers, rows, cols)):
            np.maximum(scores[center.class_id], splat, out=scores[center.class_id])
        return KeypointHeatmap(scores=scores, stride=stride)

    def render_features(
        self,
        scene: SceneSpec,
        calib: CameraCalibration,
        stride: int = 4,
        num_classes: int = 3,
    ) -> FeatureMap:
        """
        K + 2 channels: one-hot class of the dominating box, then the
        normalized pixel-center coordinates (u / width, v / height).

        A box dominates a pixel when its splat is the strongest there and
        reaches DOMINANCE_LEVEL; ties go to the nearer box.
        """
        rows, cols = calib.grid_shape(stride)
        values = np.zeros((num_classes + 2, rows, cols))

        v_s, u_s = np.indices((rows, cols))
        values[num_classes] = (u_s + 0.5) * stride / calib.width
        values[num_classes + 1] = (v_s + 0.5) * stride / calib.height

        centers = sorted(
            self.visible_box_centers(scene, calib, stride, num_classes),
            key=lambda c: (c.depth, c.box_index),
        )
        if centers:
            splats = self._splats(centers, rows, cols)
            winner = np.argmax(splats, axis=0)
            dominated = splats.max(axis=0) >= DOMINANCE_LEVEL
            classes = np.array([c.class_id for c in centers])[winner]
            pv, pu = np.nonzero(dominated)
            values[classes[pv, pu], pv, pu] = 1.0
        return FeatureMap(values=values)

    # ==================== Scenes and frames ====================

    def random_scene(
        self,
        rng: np.random.Generator,
        num_boxes: int,
        distance_range: Tuple[float, float] = (8.0, 40.0),
        azimuth_range: Tuple[float, float] = (-math.pi, math.pi),
        num_classes: int = 3,
        ground_z: Optional[float] = 0.0,
        extent: float = 60.0,
    ) -> SceneSpec:
        """
        Boxes at random ranges and bearings around the origin, resting on
        the ground plane (or on z = 0 without one).
        """
        base = 0.0 if ground_z is None else ground_z
        boxes = []
        for _ in range(num_boxes):
            distance = rng.uniform(*distance_range)
            azimuth = rng.uniform(*azimuth_range)
            length = rng.uniform(1.0, 4.5)
            width = rng.uniform(0.8, 2.2)
            height = rng.uniform(1.2, 2.0)
            boxes.append(SceneBox(
                center=(distance * math.cos(azimuth), distance * math.sin(azimuth), base + height / 2),
                size=(length, width, height),
                yaw=rng.uniform(-math.pi, math.pi),
                class_id=int(rng.integers(num_classes)),
            ))
        return SceneSpec(boxes=boxes, ground_z=ground_z, extent=extent)

    def rig_scene(
        self,
        rng: np.random.Generator,
        cameras: Sequence[CameraCalibration],
        boxes_per_camera: int,
        distance_range: Tuple[float, float] = (8.0, 40.0),
        num_classes: int = 3,
        fov_fraction: float = 0.8,
    ) -> SceneSpec:
        """Random scene with a fixed number of boxes inside each camera's view."""
        boxes: List[SceneBox] = []
        for calib in cameras:
            axis = calib.rotation[2]
            yaw = math.atan2(axis[1], axis[0])
            half_fov = math.atan(calib.width / (2.0 * calib.fx)) * fov_fraction
            part = self.random_scene(
                rng, boxes_per_camera, distance_range, (yaw - half_fov, yaw + half_fov), num_classes
            )
            boxes.extend(part.boxes)
        return SceneSpec(boxes=boxes, ground_z=0.0)

    def simulate_frame(
        self,
        scene: SceneSpec,
        cameras: Sequence[CameraCalibration],
        lidar: Optional[LidarConfig] = None,
        num_classes: int = 3,
        stride: int = 4,
        seed: int = 0,
        threshold: float = 0.1,
        inject_gt_depth: bool = False,
    ) -> FrameInput:
        """
        Assemble a FrameInput: LiDAR sweep plus per-camera heatmap and features.

        With ``inject_gt_depth`` each camera carries its ground-truth depth,
        which replaces completion in the pipeline.
        """
        lidar = lidar or LidarConfig()
        cloud = self.raycast_lidar(scene, lidar, seed)
        frames = []
        for calib in cameras:
            frames.append(CameraFrame(
                name=calib.name,
                calib=calib,
                heatmap=self.render_heatmap(scene, calib, stride, num_classes),
                features=self.render_features(scene, calib, stride, num_classes),
                depth=self.render_depth(scene, calib, stride) if inject_gt_depth else None,
            ))
        return FrameInput(cloud=cloud, cameras=frames, threshold=threshold, stride=stride)


# Singleton instance
_scene_service_instance = None

def get_scene_service() -> SceneService:
    """Get singleton instance of SceneService."""
    global _scene_service_instance
    if _scene_service_instance is None:
        _scene_service_instance = SceneService()
    return _scene_service_instance
