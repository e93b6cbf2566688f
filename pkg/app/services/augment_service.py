"""
Augment Service
===============
Global point-cloud augmentation whose parameters are saved once and
replayed on camera pseudo-points, so both modalities stay aligned.

Transform order (fixed): flip_x (negate y), flip_y (negate x), uniform
scale about the origin, rotation about world z, translation.
"""

import logging
import math
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from app.exceptions import InvalidRange
from app.services.bev_service import PseudoPoints
from app.services.geometry_service import PointCloud

logger = logging.getLogger(__name__)


class AugmentationParams(BaseModel):
    """One sampled global transform."""

    model_config = ConfigDict(frozen=True)

    flip_x: bool = False
    flip_y: bool = False
    scale: float = 1.0
    rotation_z: float = 0.0
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @field_validator("scale")
    @classmethod
    def _positive_scale(cls, scale: float) -> float:
        if not (math.isfinite(scale) and scale > 0):
            raise ValueError(f"scale must be finite and > 0, got {scale}")
        return scale

    @field_validator("rotation_z")
    @classmethod
    def _finite_rotation(cls, rotation: float) -> float:
        if not math.isfinite(rotation):
            raise ValueError("rotation_z must be finite")
        return rotation

    @field_validator("translation")
    @classmethod
    def _finite_translation(cls, translation: Tuple[float, float, float]):
        if not all(math.isfinite(t) for t in translation):
            raise ValueError("translation must be finite")
        return translation

    @property
    def is_identity(self) -> bool:
        return (
            not self.flip_x
            and not self.flip_y
            and self.scale == 1.0
            and self.rotation_z == 0.0
            and all(t == 0.0 for t in self.translation)
        )


class AugmentationRanges(BaseModel):
    """Sampling ranges for AugmentationParams."""

    flip_probability: float = 0.5
    scale_range: Tuple[float, float] = (0.95, 1.05)
    rotation_bound: float = math.pi / 4
    translation_std: float = 0.5


class AugmentService:
    """
    Service implementing parameter sampling and the shared transform.

    The transform is evaluated element by element rather than as a matrix
    product, so a coordinate gets the same bits whether it belongs to a
    LiDAR point or a pseudo-point and whatever the batch size.
    """

    def validate_ranges(self, ranges: AugmentationRanges) -> AugmentationRanges:
        """
        Raises:
            InvalidRange: If any range is malformed
        """
        low, high = ranges.scale_range
        if not (0.0 <= ranges.flip_probability <= 1.0):
            raise InvalidRange(f"flip_probability must be in [0, 1], got {ranges.flip_probability}")
        if not (math.isfinite(low) and math.isfinite(high) and 0 < low <= high):
            raise InvalidRange(f"scale_range must satisfy 0 < low <= high, got {(low, high)}")
        if not (math.isfinite(ranges.rotation_bound) and ranges.rotation_bound >= 0):
            raise InvalidRange(f"rotation_bound must be >= 0, got {ranges.rotation_bound}")
        if not (math.isfinite(ranges.translation_std) and ranges.translation_std >= 0):
            raise InvalidRange(f"translation_std must be >= 0, got {ranges.translation_std}")
        return ranges

    def sample_params(self, seed: int, ranges: Optional[AugmentationRanges] = None) -> AugmentationParams:
        """
        Draw augmentation parameters from a Philox stream.

        Draw order: flip_x, flip_y, scale, rotation, tx, ty, tz.

        Args:
            seed: Non-negative integer seed
            ranges: Sampling ranges (defaults when None)

        Returns:
            AugmentationParams, identical for identical (seed, ranges)
        """
        ranges = self.validate_ranges(ranges or AugmentationRanges())
        rng = np.random.Generator(np.random.Philox(seed))

        flip_x = bool(rng.random() < ranges.flip_probability)
        flip_y = bool(rng.random() < ranges.flip_probability)
        scale = float(rng.uniform(*ranges.scale_range))
        rotation = float(rng.uniform(-ranges.rotation_bound, ranges.rotation_bound))
        translation = rng.normal(0.0, ranges.translation_std, size=3)

        params = AugmentationParams(
            flip_x=flip_x,
            flip_y=flip_y,
            scale=scale,
            rotation_z=rotation,
            translation=tuple(float(t) for t in translation),
        )
        logger.debug("Sampled augmentation for seed %d: %s", seed, params)
        return params

    def transform_xyz(self, xyz: np.ndarray, params: AugmentationParams) -> np.ndarray:
        """The shared coordinate transform, applied to an (N, 3) array."""
        xyz = np.asarray(xyz, dtype=np.float64)
        if params.is_identity:
            return xyz.copy()

        x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
        if params.flip_x:
            y = -y
        if params.flip_y:
            x = -x

        s = params.scale
        x, y, z = x * s, y * s, z * s

        cos_r = math.cos(params.rotation_z)
        sin_r = math.sin(params.rotation_z)
        x, y = cos_r * x - sin_r * y, sin_r * x + cos_r * y

        tx, ty, tz = params.translation
        return np.stack([x + tx, y + ty, z + tz], axis=-1)

    def apply_to_points(self, points: np.ndarray, params: AugmentationParams) -> np.ndarray:
        """
        Transform the first three columns of a point array.

        Any further columns (intensity, features) are copied unchanged.
        """
        points = np.asarray(points, dtype=np.float64)
        out = points.copy()
        out[..., :3] = self.transform_xyz(points[..., :3], params)
        return out

    def apply_to_cloud(self, cloud: PointCloud, params: AugmentationParams) -> PointCloud:
        return PointCloud(self.apply_to_points(cloud.points, params))

    def replay_on_pseudo_points(self, points: PseudoPoints, params: AugmentationParams) -> PseudoPoints:
        """Move pseudo-points with the LiDAR transform; features are shared, not copied."""
        return points.with_xyz(self.transform_xyz(points.xyz, params))

    def invert_params(self, params: AugmentationParams) -> AugmentationParams:
        """
        Closed-form inverse in the same fixed transform order.

        Forward is q = R(theta) s F p + t. The inverse keeps F, uses 1/s,
        and needs R(theta) when exactly one flip is set (a reflection
        conjugates the rotation) and R(-theta) otherwise.
        """
        single_flip = params.flip_x != params.flip_y
        rotation = params.rotation_z if single_flip else -params.rotation_z
        inverse_scale = 1.0 / params.scale

        partial = AugmentationParams(
            flip_x=params.flip_x,
            flip_y=params.flip_y,
            scale=inverse_scale,
            rotation_z=rotation,
        )
        shifted = self.transform_xyz(np.asarray([params.translation]), partial)[0]
        return AugmentationParams(
            flip_x=params.flip_x,
            flip_y=params.flip_y,
            scale=inverse_scale,
            rotation_z=rotation,
            translation=tuple(float(-t) for t in shifted),
        )


# Singleton instance
_augment_service_instance = None

def get_augment_service() -> AugmentService:
    """Get singleton instance of AugmentService."""
    global _augment_service_instance
    if _augment_service_instance is None:
        _augment_service_instance = AugmentService()
    return _augment_service_instance
