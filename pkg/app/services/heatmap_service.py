"""
Heatmap Service
===============
Keypoint-heatmap decoding for one camera.

Operations:
- select_pixels: keep every grid pixel whose class-max score reaches the
  threshold and gather the aligned deep feature
- extract_peaks: strict 8-neighbor maxima per class channel

Heatmaps are stored class-first as (K, H, W); feature maps as (C, H, W).
Both live on the stride-s grid of the camera image.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple

import numpy as np
from scipy import ndimage

from app.exceptions import DimensionMismatch, InvalidThreshold

logger = logging.getLogger(__name__)

# 3x3 neighborhood without its center
RING_FOOTPRINT = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=bool)


@dataclass
class KeypointHeatmap:
    """Per-class score grid in [0, 1], shape (K, H, W)."""

    scores: np.ndarray
    stride: int = 4

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim == 2:
            scores = scores[np.newaxis]
        if scores.ndim != 3:
            raise ValueError(f"heatmap must be (K, H, W), got {scores.shape}")
        if scores.size and (np.isnan(scores).any() or scores.min() < 0 or scores.max() > 1):
            raise ValueError("heatmap scores must lie in [0, 1]")
        self.scores = scores

    @property
    def num_classes(self) -> int:
        return self.scores.shape[0]

    @property
    def height_s(self) -> int:
        return self.scores.shape[1]

    @property
    def width_s(self) -> int:
        return self.scores.shape[2]

    @property
    def grid_shape(self):
        return self.scores.shape[1:]


@dataclass
class FeatureMap:
    """Deep-feature grid aligned with a heatmap, shape (C, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("feature map contains NaN or Inf")
        self.values = values

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height_s(self) -> int:
        return self.values.shape[1]

    @property
    def width_s(self) -> int:
        return self.values.shape[2]

    @property
    def grid_shape(self):
        return self.values.shape[1:]


class SelectedPixel(NamedTuple):
    u_s: int
    v_s: int
    class_id: int
    score: float
    feature: np.ndarray


class Peak(NamedTuple):
    u_s: int
    v_s: int
    class_id: int
    score: float


@dataclass
class PixelSelection:
    """
    Columnar set of selected pixels in row-major order.

    Iterating yields SelectedPixel records; the arrays stay available for
    vectorized lifting.
    """

    u_s: np.ndarray
    v_s: np.ndarray
    class_id: np.ndarray
    score: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return int(self.u_s.shape[0])

    def __iter__(self) -> Iterator[SelectedPixel]:
        for i in range(len(self)):
            yield SelectedPixel(
                int(self.u_s[i]),
                int(self.v_s[i]),
                int(self.class_id[i]),
                float(self.score[i]),
                self.features[i],
            )

    def coordinates(self) -> set:
        """Set of (u_s, v_s) grid coordinates."""
        return set(zip(self.u_s.tolist(), self.v_s.tolist()))


class HeatmapService:
    """
    Service for decoding keypoint heatmaps.

    Selection keeps every pixel whose class-max score is >= threshold, so the
    number of projected pixels scales with the threshold rather than the
    number of objects.
    """

    def select_pixels(
        self,
        heatmap: KeypointHeatmap,
        features: FeatureMap,
        threshold: float,
    ) -> PixelSelection:
        """
        Select pixels whose maximum-over-classes score reaches the threshold.

        Args:
            heatmap: Keypoint heatmap (K, H, W)
            features: Feature map (C, H, W) on the same grid
            threshold: Selection threshold in [0, 1]

        Returns:
            PixelSelection ordered row-major (v, then u)

        Raises:
            InvalidThreshold: If threshold is outside [0, 1]
            DimensionMismatch: If heatmap and feature grids differ
        """
        self.validate_threshold(threshold)
        if heatmap.grid_shape != features.grid_shape:
            raise DimensionMismatch(
                f"heatmap grid {heatmap.grid_shape} != feature grid {features.grid_shape}"
            )

        # argmax returns the lowest class index on ties
        class_max = heatmap.scores.max(axis=0)
        class_id = heatmap.scores.argmax(axis=0)

        # nonzero walks the mask in row-major order
        v_s, u_s = np.nonzero(class_max >= threshold)
        selection = PixelSelection(
            u_s=u_s.astype(np.int64),
            v_s=v_s.astype(np.int64),
            class_id=class_id[v_s, u_s].astype(np.int64),
            score=class_max[v_s, u_s],
            features=features.values[:, v_s, u_s].T,
        )
        logger.debug(
            "Selected %d of %d pixels at threshold %.3f",
            len(selection), class_max.size, threshold,
        )
        return selection

    def extract_peaks(self, heatmap: KeypointHeatmap) -> List[Peak]:
        """
        Find pixels strictly greater than all of their in-bounds 8 neighbors.

        Plateaus produce no peak. Output is class-major, then row-major.
        """
        peaks: List[Peak] = []
        for class_id, channel in enumerate(heatmap.scores):
            neighbor_max = ndimage.maximum_filter(
                channel,
                footprint=RING_FOOTPRINT,
                mode="constant",
                cval=-np.inf,
            )
            v_s, u_s = np.nonzero(channel > neighbor_max)
            for v, u in zip(v_s.tolist(), u_s.tolist()):
                peaks.append(Peak(u, v, class_id, float(channel[v, u])))
        return peaks

    @staticmethod
    def validate_threshold(threshold: float) -> float:
        """Reject thresholds outside [0, 1] (NaN included)."""
        if not (0.0 <= threshold <= 1.0):
            raise InvalidThreshold(f"threshold must be in [0, 1], got {threshold}")
        return threshold


# Singleton instance
_heatmap_service_instance = None

def get_heatmap_service() -> HeatmapService:
    """Get singleton instance of HeatmapService."""
    global _heatmap_service_instance
    if _heatmap_service_instance is None:
        _heatmap_service_instance = HeatmapService()
    return _heatmap_service_instance
