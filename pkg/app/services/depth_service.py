"""
Depth Service
=============
Dense depth from sparse LiDAR depth on the feature grid.

This service provides:
- ipbasic_complete: classical morphological completion (inversion, dilation,
  closure, optional large-hole fill, blur, inversion back)
- nn_complete: nearest-source baseline with exact tie-breaking
- interpolation_mask: Chebyshev support mask that guards the background
- depth_rmse: accuracy of a completed map against ground truth

Pixels outside the interpolation range carry SENTINEL_DEPTH, which lifts
them far beyond the BEV detection range so range filtering culls them.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Literal, Optional

import cv2
import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import ndimage
from scipy.spatial import cKDTree

from app.exceptions import DimensionMismatch, EmptyDepth
from app.services.geometry_service import SparseDepthMap

logger = logging.getLogger(__name__)

# Depth assigned to pixels outside the interpolation range (meters)
SENTINEL_DEPTH = 300.0

# Inverted depths at or below this are treated as empty
EMPTY_EPSILON = 0.1


class DepthFillConfig(BaseModel):
    """Kernels and limits of the morphological completion."""

    dilation_kernel: Literal["diamond", "full", "cross"] = "diamond"
    dilation_size: int = 5
    closure_size: int = 5
    fill_large_holes: bool = False
    large_fill_size: int = 31
    blur: Literal["bilateral", "gaussian", "none"] = "bilateral"
    blur_size: int = 5
    bilateral_sigma_color: float = Field(default=1.5, gt=0)
    bilateral_sigma_space: float = Field(default=2.0, gt=0)
    max_gap: int = Field(default=10, ge=1)
    max_depth: float = Field(default=100.0, gt=0)

    @field_validator("dilation_size", "closure_size", "large_fill_size", "blur_size")
    @classmethod
    def _odd_kernel(cls, size: int) -> int:
        if size < 3 or size % 2 == 0:
            raise ValueError(f"kernel sizes must be odd and >= 3, got {size}")
        return size


@dataclass
class DenseDepthMap:
    """Per-pixel depth plus the interpolation-range mask."""

    depth: np.ndarray
    in_range_mask: np.ndarray

    @property
    def height_s(self) -> int:
        return self.depth.shape[0]

    @property
    def width_s(self) -> int:
        return self.depth.shape[1]

    def to_planes(self) -> np.ndarray:
        """(2, H, W) stack of depth and mask, the on-disk layout."""
        return np.stack([self.depth, self.in_range_mask.astype(np.float64)])

    @classmethod
    def from_planes(cls, planes: np.ndarray) -> "DenseDepthMap":
        planes = np.asarray(planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] != 2:
            raise ValueError(f"depth planes must be (2, H, W), got {planes.shape}")
        mask = planes[1] > 0.5
        depth = np.where(mask, planes[0], SENTINEL_DEPTH)
        return cls(depth=depth, in_range_mask=mask)


def make_kernel(shape: str, size: int) -> np.ndarray:
    """Binary structuring element: diamond, full square or cross."""
    if shape == "full":
        return np.ones((size, size), dtype=np.uint8)
    if shape == "cross":
        return cv2.getStructuringElement(cv2.MORPH_CROSS, (size, size))

    radius = size // 2
    rows, cols = np.indices((size, size))
    return (np.abs(rows - radius) + np.abs(cols - radius) <= radius).astype(np.uint8)


class DepthService:
    """
    Service for completing sparse LiDAR depth.

    Both completers are deterministic and keep every LiDAR sample at its
    measured depth; they differ only in how empty pixels are filled.
    """

    def __init__(self, config: Optional[DepthFillConfig] = None):
        """
        Initialize DepthService.

        Args:
            config: Default completion parameters used when a call passes none
        """
        self.config = config or DepthFillConfig()

    def interpolation_mask(self, sparse: SparseDepthMap, max_gap: int) -> np.ndarray:
        """
        Pixels within Chebyshev distance ``max_gap`` of a LiDAR sample.

        Args:
            sparse: Sparse depth map
            max_gap: Largest trusted gap in grid pixels

        Returns:
            Boolean mask, all False when there are no samples
        """
        valid = sparse.valid_mask.astype(np.uint8)
        if not valid.any():
            return np.zeros(valid.shape, dtype=bool)

        square = np.ones((2 * max_gap + 1, 2 * max_gap + 1), dtype=np.uint8)
        return cv2.dilate(valid, square) > 0

    def nn_complete(self, sparse: SparseDepthMap, max_gap: Optional[int] = None) -> DenseDepthMap:
        """
        Give every pixel the depth of its Euclidean-nearest sample.

        Ties go to the sample with the smaller row, then the smaller column.

        Raises:
            EmptyDepth: If the sparse map has no valid sample
        """
        max_gap = self.config.max_gap if max_gap is None else max_gap
        valid = sparse.valid_mask
        if not valid.any():
            raise EmptyDepth("nearest-neighbor completion needs at least one LiDAR sample")

        shape = valid.shape
        # Row-major source order, so a smaller index is a smaller (v, u)
        sources = np.argwhere(valid)
        _, (nearest_v, nearest_u) = ndimage.distance_transform_edt(~valid, return_indices=True)
        rows, cols = np.indices(shape)
        best_d2 = ((rows - nearest_v) ** 2 + (cols - nearest_u) ** 2).ravel()

        # Gather every source at exactly the nearest distance and keep the first
        pixels = np.column_stack([rows.ravel(), cols.ravel()])
        tree = cKDTree(sources)
        candidates = tree.query_ball_point(pixels, np.sqrt(best_d2) + 1e-6)

        lengths = np.fromiter(map(len, candidates), dtype=np.int64, count=len(candidates))
        flat = np.fromiter(
            itertools.chain.from_iterable(candidates), dtype=np.int64, count=int(lengths.sum())
        )
        owner = np.repeat(np.arange(len(candidates)), lengths)
        cand_d2 = ((pixels[owner] - sources[flat]) ** 2).sum(axis=1)
        exact = cand_d2 == best_d2[owner]

        winner = np.full(len(candidates), np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(winner, owner[exact], flat[exact])
        src_v, src_u = sources[winner].T
        depth = sparse.depth[src_v, src_u].reshape(shape)

        mask = self.interpolation_mask(sparse, max_gap)
        return DenseDepthMap(depth=np.where(mask, depth, SENTINEL_DEPTH), in_range_mask=mask)

    def ipbasic_complete(
        self,
        sparse: SparseDepthMap,
        config: Optional[DepthFillConfig] = None,
    ) -> DenseDepthMap:
        """
        Morphological depth completion with near-surface preference.

        Steps, in order:
        1. invert valid depths (d -> max_depth - d) so a max filter prefers near
        2. dilate with the configured kernel
        3. close small holes, then fill remaining small holes
        4. optionally extend the top value of each column upward and fill
           large holes
        5. blur filled pixels using valid pixels only
        6. invert back and mask pixels beyond ``max_gap``

        Every morphological step writes only into pixels that are still
        empty; LiDAR samples keep their measured depth.

        Args:
            sparse: Sparse depth map with at least one sample
            config: Completion parameters (service default when None)

        Returns:
            DenseDepthMap with SENTINEL_DEPTH outside the mask

        Raises:
            EmptyDepth: If the sparse map has no valid sample
        """
        cfg = config or self.config
        valid = sparse.valid_mask
        if not valid.any():
            raise EmptyDepth("depth completion needs at least one LiDAR sample")

        # Step 1: inversion; depths beyond max_depth clamp to the farthest value
        clipped = np.minimum(sparse.depth, cfg.max_depth - 2 * EMPTY_EPSILON)
        inverted = np.where(valid, cfg.max_depth - clipped, 0.0).astype(np.float32)

        # Step 2: dilation
        kernel = make_kernel(cfg.dilation_kernel, cfg.dilation_size)
        inverted = self._fill_empty(inverted, cv2.dilate(inverted, kernel))

        # Step 3: small-hole closure and fill
        square = np.ones((cfg.closure_size, cfg.closure_size), dtype=np.uint8)
        inverted = self._fill_empty(inverted, cv2.morphologyEx(inverted, cv2.MORPH_CLOSE, square))
        inverted = self._fill_empty(inverted, cv2.dilate(inverted, square))

        # Step 4: large holes
        if cfg.fill_large_holes:
            inverted = self._extend_columns_up(inverted)
            large = np.ones((cfg.large_fill_size, cfg.large_fill_size), dtype=np.uint8)
            inverted = self._fill_empty(inverted, cv2.dilate(inverted, large))

        # Step 5: blur filled pixels only
        filled = inverted > EMPTY_EPSILON
        if cfg.blur != "none":
            blurred = self._blur_valid(inverted, filled, cfg)
            target = filled & ~valid
            inverted[target] = blurred[target]

        # Step 6: inversion back and range guard
        depth = np.where(filled, cfg.max_depth - inverted.astype(np.float64), SENTINEL_DEPTH)
        depth[valid] = sparse.depth[valid]
        mask = self.interpolation_mask(sparse, cfg.max_gap) & filled
        depth[~mask] = SENTINEL_DEPTH

        logger.debug(
            "ipbasic: %d samples -> %d in-range pixels of %d",
            sparse.num_valid, int(mask.sum()), mask.size,
        )
        return DenseDepthMap(depth=depth, in_range_mask=mask)

    def depth_rmse(
        self,
        predicted: DenseDepthMap,
        truth: DenseDepthMap,
        mask: Optional[np.ndarray] = None,
    ) -> float:
        """
        Root-mean-square depth error over pixels valid in both maps.

        Args:
            predicted: Completed depth
            truth: Ground-truth depth
            mask: Optional extra restriction

        Returns:
            RMSE in meters, NaN when no pixel qualifies
        """
        if predicted.depth.shape != truth.depth.shape:
            raise DimensionMismatch(
                f"depth grids differ: {predicted.depth.shape} vs {truth.depth.shape}"
            )
        overlap = predicted.in_range_mask & truth.in_range_mask
        if mask is not None:
            overlap &= mask
        if not overlap.any():
            return float("nan")
        error = predicted.depth[overlap] - truth.depth[overlap]
        return float(np.sqrt(np.mean(error ** 2)))

    @staticmethod
    def _fill_empty(current: np.ndarray, candidate: np.ndarray) -> np.ndarray:
        empty = current <= EMPTY_EPSILON
        out = current.copy()
        out[empty] = candidate[empty]
        return out

    @staticmethod
    def _extend_columns_up(inverted: np.ndarray) -> np.ndarray:
        """Copy each column's top-most value into the empty pixels above it."""
        filled = inverted > EMPTY_EPSILON
        has_value = filled.any(axis=0)
        top_row = np.argmax(filled, axis=0)
        cols = np.arange(inverted.shape[1])
        top_value = inverted[top_row, cols]

        rows = np.arange(inverted.shape[0])[:, np.newaxis]
        above = (rows < top_row) & has_value
        out = inverted.copy()
        out[above] = np.broadcast_to(top_value, inverted.shape)[above]
        return out

    @staticmethod
    def _blur_valid(inverted: np.ndarray, filled: np.ndarray, cfg: DepthFillConfig) -> np.ndarray:
        if cfg.blur == "bilateral":
            # Empty pixels are far in value from any surface and get no weight
            return cv2.bilateralFilter(
                inverted, cfg.blur_size, cfg.bilateral_sigma_color, cfg.bilateral_sigma_space
            )

        # Normalized convolution over filled pixels
        size = (cfg.blur_size, cfg.blur_size)
        weights = cv2.GaussianBlur(filled.astype(np.float32), size, 0)
        total = cv2.GaussianBlur(np.where(filled, inverted, 0).astype(np.float32), size, 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(weights > 0, total / weights, inverted).astype(np.float32)


# Singleton instance
_depth_service_instance = None

def get_depth_service(config: Optional[DepthFillConfig] = None) -> DepthService:
    """
    Get singleton instance of DepthService.

    Args:
        config: Completion parameters, applied on first creation only

    Returns:
        DepthService instance
    """
    global _depth_service_instance
    if _depth_service_instance is None:
        _depth_service_instance = DepthService(config)
    return _depth_service_instance
