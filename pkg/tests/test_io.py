"""
Tests for file formats
======================
CFFT tensors, CFFP clouds, PGM dumps and the text records.

Run tests with: pytest tests/test_io.py -v
"""

import hashlib
import json
import os
import struct
import sys

import cv2
import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.exceptions import FormatError, IoError, ParseError
from app.services.augment_service import AugmentService
from app.services.geometry_service import GeometryService, PointCloud
from app.utils import records, tensor_io

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


class TestTensorFiles:
    """CFFT and CFFP readers and writers."""

    def setup_method(self):
        """Set up test fixtures."""
        self.rng = np.random.default_rng(3)

    def test_tensor_layout(self):
        """Header is magic, rank and dims, then little-endian float32."""
        data = tensor_io.encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert data[:4] == b"CFFT"
        assert struct.unpack_from("<3I", data, 4) == (2, 2, 3)
        assert len(data) == 16 + 24
        np.testing.assert_array_equal(tensor_io.decode_tensor(data), np.arange(6).reshape(2, 3))

    def test_tensor_file_round_trip(self, tmp_path):
        """float32 tensors come back bit-exact."""
        array = self.rng.normal(size=(3, 4, 5)).astype(np.float32)
        tensor_io.write_tensor(tmp_path / "t.cfft", array)
        assert tensor_io.read_tensor(tmp_path / "t.cfft").tobytes() == array.tobytes()

    def test_bad_tensors(self):
        """Bad magic, rank and payload size raise FormatError."""
        good = tensor_io.encode_tensor(np.zeros((2, 2)))
        for data in (
            b"NOPE" + good[4:],
            b"CFFT" + struct.pack("<I", 0),
            b"CFFT" + struct.pack("<6I", 5, 1, 1, 1, 1, 1) + b"\0" * 4,
            good[:-4],
            good + b"\0",
            b"CFFT" + struct.pack("<I", 3),
        ):
            with pytest.raises(FormatError):
                tensor_io.decode_tensor(data)

    def test_rank_limit_on_write(self):
        """Only ranks 1 to 4 are written."""
        with pytest.raises(FormatError):
            tensor_io.encode_tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_error_names_file(self, tmp_path):
        """The offending path appears in the message."""
        path = tmp_path / "broken.cfft"
        path.write_bytes(b"CFFT")
        with pytest.raises(FormatError, match="broken.cfft"):
            tensor_io.read_tensor(path)

    def test_missing_file(self, tmp_path):
        """Reading a missing file is an I/O error."""
        with pytest.raises(IoError):
            tensor_io.read_tensor(tmp_path / "absent.cfft")

    def test_cloud_file(self, tmp_path):
        """CFFP size is 8 + 16 * count and points survive at float32."""
        points = self.rng.uniform(-50, 50, size=(100, 4)).astype(np.float32).astype(np.float64)
        path = tmp_path / "c.cffp"
        tensor_io.write_cloud(path, PointCloud(points))
        assert path.stat().st_size == 8 + 16 * 100
        np.testing.assert_array_equal(tensor_io.read_cloud(path).points, points)

    def test_bad_cloud(self, tmp_path):
        """A count that disagrees with the file size is rejected."""
        path = tmp_path / "c.cffp"
        path.write_bytes(b"CFFP" + struct.pack("<I", 2) + b"\0" * 16)
        with pytest.raises(FormatError, match="c.cffp"):
            tensor_io.read_cloud(path)

    def test_pgm(self, tmp_path):
        """Occupancy is scaled to 255 with +x at the top."""
        path = tmp_path / "occ.pgm"
        tensor_io.write_pgm(path, np.array([[0, 2], [1, 0]]))
        image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
        np.testing.assert_array_equal(image, [[128, 0], [0, 255]])


class TestRecords:
    """Calibration, scene, params and manifest records."""

    def test_params_round_trip(self):
        """Sampled params survive format and parse exactly."""
        params = AugmentService().sample_params(12)
        assert records.parse_params(records.format_params(params)) == params

    def test_params_example(self):
        """Flips are 0/1 and floats follow."""
        params = records.parse_params("1,0,1.02,0.3,0.1,-0.2,0.0\n")
        assert params.flip_x and not params.flip_y
        assert params.scale == 1.02
        assert params.translation == (0.1, -0.2, 0.0)

    def test_bad_params(self):
        """Malformed records raise ParseError."""
        for text in ("1,0,1.0,0,0,0", "2,0,1.0,0,0,0,0", "0,0,0.0,0,0,0,0", "0,0,x,0,0,0,0", "0,0,1,0,0,0,0\n0,0,1,0,0,0,0"):
            with pytest.raises(ParseError):
                records.parse_params(text)

    def test_scene_line_numbers(self):
        """Scene errors carry the offending line."""
        with pytest.raises(ParseError) as info:
            records.parse_scene("ground 0\n\nwall 1 2 3\n", "s.txt")
        assert info.value.line == 3
        assert str(info.value).startswith("s.txt:3:")
        for text in ("box 1 2 3 1 1 1 0 x", "box 1 2 3 1 1 -1 0 0", "ground", "box 1 2 3 1 1 1 0 -1"):
            with pytest.raises(ParseError):
                records.parse_scene(text)

    def test_demo_scene(self):
        """The bundled demo scene parses."""
        scene = records.read_scene(os.path.join(REPO_ROOT, "data", "demo_scene.txt"))
        assert len(scene.boxes) == 7
        assert scene.ground_z == 0.0
        assert {box.class_id for box in scene.boxes} == {0, 1, 2}

    def test_scene_round_trip(self):
        """format_scene output parses back to the same scene."""
        scene = records.read_scene(os.path.join(REPO_ROOT, "data", "demo_scene.txt"))
        assert records.parse_scene(records.format_scene(scene)) == scene

    def test_calibration_round_trip(self, tmp_path):
        """Calibrations survive the JSON record."""
        calib = GeometryService().make_calibration("cam3", (0.5, -0.2, 1.5), 1.1, 800, 448, 70.0)
        records.write_calibration(tmp_path / "cam3_calib.json", calib)
        assert records.read_calibration(tmp_path / "cam3_calib.json") == calib

    def test_bad_calibration(self, tmp_path):
        """Broken JSON and invalid intrinsics raise ParseError."""
        path = tmp_path / "cam0_calib.json"
        path.write_text('{\n  "fx": 1,\n  oops\n}')
        with pytest.raises(ParseError) as info:
            records.read_calibration(path)
        assert info.value.line == 3

        calib = GeometryService().make_calibration("cam0", (0, 0, 0), 0.0, 800, 448, 70.0).model_dump()
        calib["fx"] = -1.0
        path.write_text(json.dumps(calib))
        with pytest.raises(ParseError):
            records.read_calibration(path)

    def test_manifest(self, tmp_path):
        """Manifest entries are sha256 of the artifacts."""
        (tmp_path / "a.bin").write_bytes(b"abc")
        manifest = records.write_manifest(tmp_path, ["a.bin"])
        assert manifest == {"a.bin": hashlib.sha256(b"abc").hexdigest()}
        assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
