"""
Tests for HeatmapService
========================
Threshold selection and 8-neighbor peak extraction against exhaustive oracles.

Run tests with: pytest tests/test_heatmap_service.py -v
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.exceptions import DimensionMismatch, InvalidThreshold
from app.services.heatmap_service import FeatureMap, HeatmapService, KeypointHeatmap


def select_oracle(scores, threshold):
    """Triple loop: (u, v, class, score) in row-major order."""
    k, h, w = scores.shape
    out = []
    for v in range(h):
        for u in range(w):
            best, best_class = -1.0, -1
            for c in range(k):
                if scores[c, v, u] > best:
                    best, best_class = scores[c, v, u], c
            if best >= threshold:
                out.append((u, v, best_class, best))
    return out


def peak_oracle(scores):
    """Strictly greater than every in-bounds neighbor."""
    k, h, w = scores.shape
    out = []
    for c in range(k):
        for v in range(h):
            for u in range(w):
                value = scores[c, v, u]
                is_peak = True
                for dv in (-1, 0, 1):
                    for du in (-1, 0, 1):
                        if dv == 0 and du == 0:
                            continue
                        vv, uu = v + dv, u + du
                        if 0 <= vv < h and 0 <= uu < w and scores[c, vv, uu] >= value:
                            is_peak = False
                if is_peak:
                    out.append((u, v, c, value))
    return out


class TestSelectPixels:
    """select_pixels."""

    def setup_method(self):
        """Set up test fixtures."""
        self.service = HeatmapService()
        self.rng = np.random.default_rng(42)

    def test_two_by_two_example(self):
        """Pixels (1, 0) and (0, 1) pass threshold 0.1."""
        heatmap = KeypointHeatmap(np.array([[0.05, 0.2], [0.7, 0.09]]))
        features = FeatureMap(np.arange(8, dtype=float).reshape(2, 2, 2))
        selection = self.service.select_pixels(heatmap, features, 0.1)

        pixels = [(p.u_s, p.v_s) for p in selection]
        assert pixels == [(1, 0), (0, 1)]
        np.testing.assert_array_equal(selection.score, [0.2, 0.7])
        np.testing.assert_array_equal(selection.features, [[1.0, 5.0], [2.0, 6.0]])

    def test_threshold_zero_selects_everything(self):
        """Threshold 0 keeps every grid pixel."""
        heatmap = KeypointHeatmap(self.rng.uniform(0, 1, size=(3, 112, 200)))
        features = FeatureMap(np.zeros((4, 112, 200)))
        assert len(self.service.select_pixels(heatmap, features, 0.0)) == 200 * 112

    def test_above_global_max_selects_nothing(self):
        """A threshold above every score selects nothing."""
        heatmap = KeypointHeatmap(np.full((2, 5, 5), 0.9))
        features = FeatureMap(np.zeros((1, 5, 5)))
        selection = self.service.select_pixels(heatmap, features, 1.0)
        assert len(selection) == 0
        assert selection.features.shape == (0, 1)

    def test_equality_is_kept(self):
        """Scores equal to the threshold are selected."""
        heatmap = KeypointHeatmap(np.array([[0.5, 0.25]]))
        features = FeatureMap(np.zeros((1, 1, 2)))
        assert len(self.service.select_pixels(heatmap, features, 0.5)) == 1

    def test_argmax_ties_take_lowest_class(self):
        """Equal class scores resolve to the lowest class index."""
        scores = np.zeros((3, 1, 1))
        scores[1, 0, 0] = scores[2, 0, 0] = 0.6
        selection = self.service.select_pixels(KeypointHeatmap(scores), FeatureMap(np.zeros((1, 1, 1))), 0.5)
        assert list(selection)[0].class_id == 1

    def test_matches_exhaustive_oracle(self):
        """Random heatmaps, one 50x50x3 and the rest quantized to force ties, match the oracle."""
        for trial in range(200):
            scores = np.round(self.rng.uniform(0, 1, size=(3, 12, 15)), 1)
            if trial == 0:
                scores = self.rng.uniform(0, 1, size=(3, 50, 50))
            threshold = float(self.rng.choice([0.0, 0.3, 0.5, 0.9, 1.0]))
            features = FeatureMap(self.rng.normal(size=(2,) + scores.shape[1:]))
            selection = self.service.select_pixels(KeypointHeatmap(scores), features, threshold)

            expected = select_oracle(scores, threshold)
            got = [(p.u_s, p.v_s, p.class_id, p.score) for p in selection]
            assert got == expected
            for p in selection:
                np.testing.assert_array_equal(p.feature, features.values[:, p.v_s, p.u_s])

    def test_monotone_in_threshold(self):
        """Raising the threshold only removes pixels."""
        heatmap = KeypointHeatmap(self.rng.uniform(0, 1, size=(2, 30, 40)))
        features = FeatureMap(np.zeros((1, 30, 40)))
        thresholds = sorted(self.rng.uniform(0, 1, size=10))
        for low, high in zip(thresholds, thresholds[1:]):
            kept_low = self.service.select_pixels(heatmap, features, low).coordinates()
            kept_high = self.service.select_pixels(heatmap, features, high).coordinates()
            assert kept_high <= kept_low

    def test_invalid_threshold(self):
        """Thresholds outside [0, 1] and NaN are rejected."""
        heatmap = KeypointHeatmap(np.zeros((1, 2, 2)))
        features = FeatureMap(np.zeros((1, 2, 2)))
        for threshold in (-0.1, 1.5, float("nan")):
            with pytest.raises(InvalidThreshold):
                self.service.select_pixels(heatmap, features, threshold)

    def test_grid_mismatch(self):
        """Heatmap and features on different grids raise DimensionMismatch."""
        with pytest.raises(DimensionMismatch):
            self.service.select_pixels(
                KeypointHeatmap(np.zeros((1, 2, 2))), FeatureMap(np.zeros((1, 3, 2))), 0.1
            )

    def test_scores_must_be_probabilities(self):
        """Scores outside [0, 1] are rejected on construction."""
        with pytest.raises(ValueError):
            KeypointHeatmap(np.array([[1.5]]))


class TestExtractPeaks:
    """extract_peaks."""

    def setup_method(self):
        """Set up test fixtures."""
        self.service = HeatmapService()
        self.rng = np.random.default_rng(99)

    def test_all_zero(self):
        """A flat heatmap has no strict maxima."""
        assert self.service.extract_peaks(KeypointHeatmap(np.zeros((2, 8, 8)))) == []

    def test_isolated_spike(self):
        """One spike in a zero field is the only peak."""
        scores = np.zeros((1, 7, 9))
        scores[0, 3, 5] = 0.9
        peaks = self.service.extract_peaks(KeypointHeatmap(scores))
        assert [(p.u_s, p.v_s, p.class_id, p.score) for p in peaks] == [(5, 3, 0, 0.9)]

    def test_plateau_is_not_a_peak(self):
        """Two equal neighbors produce no peak."""
        scores = np.zeros((1, 5, 5))
        scores[0, 2, 2] = scores[0, 2, 3] = 0.8
        assert self.service.extract_peaks(KeypointHeatmap(scores)) == []

    def test_border_pixels_compare_in_bounds_only(self):
        """A corner maximum is a peak."""
        scores = np.zeros((1, 4, 4))
        scores[0, 0, 0] = 0.3
        peaks = self.service.extract_peaks(KeypointHeatmap(scores))
        assert [(p.u_s, p.v_s) for p in peaks] == [(0, 0)]

    def test_matches_neighborhood_oracle(self):
        """200 random heatmaps, quantized to force ties, match the oracle."""
        for _ in range(200):
            scores = np.round(self.rng.uniform(0, 1, size=(2, 9, 11)), 1)
            peaks = self.service.extract_peaks(KeypointHeatmap(scores))
            assert [(p.u_s, p.v_s, p.class_id, p.score) for p in peaks] == peak_oracle(scores)

    def test_peaks_are_selected(self):
        """Every peak is selected at a threshold equal to its score."""
        scores = self.rng.uniform(0, 1, size=(3, 20, 20))
        heatmap = KeypointHeatmap(scores)
        features = FeatureMap(np.zeros((1, 20, 20)))
        for peak in self.service.extract_peaks(heatmap):
            kept = self.service.select_pixels(heatmap, features, peak.score).coordinates()
            assert (peak.u_s, peak.v_s) in kept
