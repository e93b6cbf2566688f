"""
Binary File Formats
===================
Readers and writers for the engine's little-endian binary files.

Formats:
- CFFT tensor: b"CFFT", u32 rank, rank x u32 dims (slowest first),
  float32 payload
- CFFP point cloud: b"CFFP", u32 count, count x (x, y, z, intensity) float32
- PGM: 8-bit grayscale dump of a BEV occupancy grid
"""

import struct
from pathlib import Path
from typing import Union

import cv2
import numpy as np

from app.exceptions import FormatError, IoError
from app.services.geometry_service import PointCloud

PathLike = Union[str, Path]

TENSOR_MAGIC = b"CFFT"
CLOUD_MAGIC = b"CFFP"
MAX_RANK = 4

FLOAT32_LE = np.dtype("<f4")


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write_bytes(path: PathLike, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize an array as CFFT bytes."""
    array = np.asarray(array)
    if not (1 <= array.ndim <= MAX_RANK):
        raise FormatError(f"tensor rank must be 1..{MAX_RANK}, got {array.ndim}")
    header = TENSOR_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + np.ascontiguousarray(array, dtype=FLOAT32_LE).tobytes()


def decode_tensor(data: bytes, path: str = "<bytes>") -> np.ndarray:
    """
    Parse CFFT bytes.

    Raises:
        FormatError: On a bad magic, rank or payload size
    """
    if len(data) < 8 or data[:4] != TENSOR_MAGIC:
        raise FormatError("not a CFFT tensor (bad magic)", path)
    (rank,) = struct.unpack_from("<I", data, 4)
    if not (1 <= rank <= MAX_RANK):
        raise FormatError(f"tensor rank {rank} outside 1..{MAX_RANK}", path)

    offset = 8 + 4 * rank
    if len(data) < offset:
        raise FormatError("truncated tensor header", path)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(data) - offset != expected:
        raise FormatError(
            f"payload is {len(data) - offset} bytes, dims {dims} need {expected}", path
        )
    return np.frombuffer(data, dtype=FLOAT32_LE, offset=offset).reshape(dims).copy()


def write_tensor(path: PathLike, array: np.ndarray) -> None:
    _write_bytes(path, encode_tensor(array))


def read_tensor(path: PathLike) -> np.ndarray:
    """Read a CFFT file as a float32 array of its recorded shape."""
    return decode_tensor(_read_bytes(path), str(path))


def write_cloud(path: PathLike, cloud: PointCloud) -> None:
    """Write a point cloud as CFFP; coordinates are stored as float32."""
    header = CLOUD_MAGIC + struct.pack("<I", len(cloud))
    _write_bytes(path, header + np.ascontiguousarray(cloud.points, dtype=FLOAT32_LE).tobytes())


def read_cloud(path: PathLike) -> PointCloud:
    """
    Read a CFFP point cloud.

    Raises:
        FormatError: On a bad magic or a size that disagrees with the count
    """
    data = _read_bytes(path)
    if len(data) < 8 or data[:4] != CLOUD_MAGIC:
        raise FormatError("not a CFFP point cloud (bad magic)", str(path))
    (count,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 16 * count:
        raise FormatError(f"file is {len(data)} bytes, {count} points need {8 + 16 * count}", str(path))

    points = np.frombuffer(data, dtype=FLOAT32_LE, offset=8).reshape(count, 4)
    try:
        return PointCloud(points.astype(np.float64))
    except ValueError as exc:
        raise FormatError(str(exc), str(path)) from exc


def write_pgm(path: PathLike, occupancy: np.ndarray) -> None:
    """
    Grayscale dump of an (nx, ny) occupancy grid.

    Image rows follow x with +x at the top, columns follow y. Counts are
    scaled so the busiest cell is white and empty cells are black.
    """
    occupancy = np.asarray(occupancy, dtype=np.float64)
    peak = occupancy.max() if occupancy.size else 0.0
    image = np.zeros(occupancy.shape, dtype=np.uint8)
    if peak > 0:
        image = np.round(255.0 * occupancy / peak).astype(np.uint8)
    if not cv2.imwrite(str(path), np.flipud(image)):
        raise IoError(f"cannot write {path}")
