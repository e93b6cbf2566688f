"""
Tests for GeometryService
=========================
Pinhole projection, back-projection and sparse depth rendering.

Run tests with: pytest tests/test_geometry_service.py -v
"""

import math
import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.exceptions import BehindCamera, NonPositiveDepth
from app.services.geometry_service import (
    CameraCalibration,
    CameraRigConfig,
    GeometryService,
    PointCloud,
)


def make_calib(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10, matrix=None, name="cam"):
    matrix = np.eye(4) if matrix is None else matrix
    return CameraCalibration(
        name=name, fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
        cam_from_world=np.asarray(matrix, dtype=np.float64).ravel().tolist(),
    )


def random_rigid(rng):
    """Random proper rotation plus translation as a 4x4 matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    matrix = np.eye(4)
    matrix[:3, :3] = q
    matrix[:3, 3] = rng.uniform(-10, 10, size=3)
    return matrix


class TestCameraCalibration:
    """Validation of calibration records."""

    def test_identity_is_valid(self):
        """Identity extrinsics pass validation."""
        calib = make_calib()
        np.testing.assert_array_equal(calib.rotation, np.eye(3))
        np.testing.assert_array_equal(calib.center, np.zeros(3))

    def test_non_orthonormal_rejected(self):
        """A scaled rotation block is rejected."""
        matrix = np.eye(4)
        matrix[0, 0] = 1.001
        with pytest.raises(ValueError):
            make_calib(matrix=matrix)

    def test_reflection_rejected(self):
        """Determinant -1 is rejected."""
        matrix = np.diag([1.0, 1.0, -1.0, 1.0])
        with pytest.raises(ValueError):
            make_calib(matrix=matrix)

    def test_principal_point_out_of_bounds(self):
        """cx must lie inside the image."""
        with pytest.raises(ValueError):
            make_calib(cx=10.0)

    def test_wrong_value_count(self):
        """cam_from_world needs sixteen numbers."""
        with pytest.raises(ValueError):
            CameraCalibration(fx=1, fy=1, cx=0, cy=0, width=4, height=4, cam_from_world=[1.0] * 12)

    def test_grid_shape(self):
        """800x448 at stride 4 is a 200x112 grid."""
        calib = make_calib(cx=400, cy=224, width=800, height=448)
        assert calib.grid_shape(4) == (112, 200)


class TestProjection:
    """world_to_camera, camera_to_image and image_to_world."""

    def setup_method(self):
        """Set up test fixtures."""
        self.geometry = GeometryService()
        self.rng = np.random.default_rng(1234)

    def test_world_to_camera_identity(self):
        """Identity extrinsics leave the point unchanged."""
        result = self.geometry.world_to_camera([1.0, 2.0, 3.0], make_calib())
        np.testing.assert_array_equal(result, [1.0, 2.0, 3.0])

    def test_world_to_camera_translation(self):
        """Translation-only extrinsics move the origin."""
        matrix = np.eye(4)
        matrix[:3, 3] = [0.0, 0.0, 5.0]
        result = self.geometry.world_to_camera([0.0, 0.0, 0.0], make_calib(matrix=matrix))
        np.testing.assert_array_equal(result, [0.0, 0.0, 5.0])

    def test_world_to_camera_matches_homogeneous_oracle(self):
        """Batched transform equals a 4x4 matrix multiply."""
        matrix = random_rigid(self.rng)
        calib = make_calib(matrix=matrix)
        points = self.rng.uniform(-50, 50, size=(100, 3))
        homogeneous = np.column_stack([points, np.ones(100)])
        expected = (matrix @ homogeneous.T).T[:, :3]
        np.testing.assert_allclose(self.geometry.world_to_camera(points, calib), expected, atol=1e-12)

    def test_optical_axis(self):
        """A point on the optical axis projects to the principal point."""
        u, v, depth = self.geometry.camera_to_image([0.0, 0.0, 2.0], make_calib())
        assert (float(u), float(v), float(depth)) == (0.0, 0.0, 2.0)

    def test_pinhole_formula(self):
        """u = fx x / z + cx, v = fy y / z + cy."""
        calib = make_calib(fx=100, fy=100, cx=200, cy=100, width=400, height=200)
        u, v, depth = self.geometry.camera_to_image([1.0, 0.0, 2.0], calib)
        assert (float(u), float(v), float(depth)) == (250.0, 100.0, 2.0)

    def test_pinhole_formula_batch(self):
        """Batched projection matches the scalar formula."""
        calib = make_calib(fx=720.5, fy=710.25, cx=400, cy=224, width=800, height=448)
        pc = self.rng.uniform(-20, 20, size=(1000, 3))
        pc[:, 2] = self.rng.uniform(0.5, 60, size=1000)
        u, v, depth = self.geometry.camera_to_image(pc, calib)
        for i in range(0, 1000, 97):
            x, y, z = pc[i]
            assert abs(u[i] - (720.5 * x / z + 400)) <= 1e-12 * max(1.0, abs(u[i]))
            assert abs(v[i] - (710.25 * y / z + 224)) <= 1e-12 * max(1.0, abs(v[i]))
            assert depth[i] == z

    def test_depth_scale_covariance(self):
        """Scaling a camera point keeps (u, v) and scales depth."""
        calib = make_calib(fx=500, fy=500, cx=320, cy=240, width=640, height=480)
        pc = np.array([1.3, -0.7, 8.0])
        u1, v1, d1 = self.geometry.camera_to_image(pc, calib)
        u2, v2, d2 = self.geometry.camera_to_image(pc * 3.5, calib)
        assert abs(u1 - u2) <= 1e-9 and abs(v1 - v2) <= 1e-9
        assert abs(d2 - 3.5 * d1) <= 1e-9

    def test_behind_camera(self):
        """z <= 0 raises BehindCamera."""
        with pytest.raises(BehindCamera):
            self.geometry.camera_to_image([0.0, 0.0, 0.0], make_calib())
        with pytest.raises(BehindCamera):
            self.geometry.camera_to_image([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]], make_calib())

    def test_principal_ray_back_projection(self):
        """(cx, cy, d) back-projects onto the optical axis."""
        calib = make_calib(fx=100, fy=100, cx=5, cy=5)
        np.testing.assert_array_equal(self.geometry.image_to_world(5.0, 5.0, 7.0, calib), [0.0, 0.0, 7.0])

    def test_non_positive_depth(self):
        """depth <= 0 raises NonPositiveDepth."""
        with pytest.raises(NonPositiveDepth):
            self.geometry.image_to_world(1.0, 1.0, 0.0, make_calib())

    def test_single_round_trip(self):
        """(10, -4, 7) survives project-then-backproject."""
        calib = self.geometry.make_calibration("front", (0.0, 0.0, 1.5), 0.0, 800, 448, 70.0)
        p = np.array([10.0, -4.0, 7.0])
        u, v, d = self.geometry.camera_to_image(self.geometry.world_to_camera(p, calib), calib)
        np.testing.assert_allclose(self.geometry.image_to_world(u, v, d, calib), p, atol=1e-9)

    def test_round_trip_random(self):
        """10,000 random points round-trip within 1e-9 (1 + |p|)."""
        calib = make_calib(fx=693.0, fy=693.0, cx=400, cy=224, width=800, height=448,
                           matrix=random_rigid(self.rng))
        pc = self.rng.uniform(-40, 40, size=(10000, 3))
        pc[:, 2] = self.rng.uniform(0.1001, 80, size=10000)
        world = (pc - calib.translation) @ calib.rotation

        cam = self.geometry.world_to_camera(world, calib)
        u, v, d = self.geometry.camera_to_image(cam, calib)
        back = self.geometry.image_to_world(u, v, d, calib)

        error = np.linalg.norm(back - world, axis=1)
        bound = 1e-9 * (1.0 + np.linalg.norm(world, axis=1))
        assert np.all(error <= bound)

    def test_back_projection_matches_matrix_inverse(self):
        """Batched back-projection equals the inverse homogeneous transform."""
        matrix = random_rigid(self.rng)
        calib = make_calib(fx=600, fy=610, cx=400, cy=224, width=800, height=448, matrix=matrix)
        u = self.rng.uniform(0, 800, size=1000)
        v = self.rng.uniform(0, 448, size=1000)
        d = self.rng.uniform(0.5, 60, size=1000)

        pc = np.column_stack([(u - 400) / 600 * d, (v - 224) / 610 * d, d, np.ones(1000)])
        expected = (np.linalg.inv(matrix) @ pc.T).T[:, :3]
        np.testing.assert_allclose(self.geometry.image_to_world(u, v, d, calib), expected, atol=1e-9)


class TestSparseDepth:
    """render_sparse_depth."""

    def setup_method(self):
        """Set up test fixtures."""
        self.geometry = GeometryService()
        self.calib = make_calib(fx=10, fy=10, cx=5, cy=5, width=10, height=10)

    def test_empty_cloud(self):
        """An empty cloud renders an all-zero map."""
        sparse = self.geometry.render_sparse_depth(PointCloud.empty(), self.calib, stride=1)
        assert sparse.depth.shape == (10, 10)
        assert sparse.valid_fraction == 0.0

    def test_zbuffer_keeps_nearest(self):
        """Two points on one pixel keep the smaller depth."""
        cloud = PointCloud(np.array([[0.0, 0.0, 9.0, 0.5], [0.0, 0.0, 4.0, 0.5]]))
        sparse = self.geometry.render_sparse_depth(cloud, self.calib, stride=1)
        assert sparse.depth[5, 5] == 4.0
        assert sparse.num_valid == 1

    def test_drops_behind_and_outside(self):
        """Points behind the camera or outside the image are ignored."""
        cloud = PointCloud(np.array([
            [0.0, 0.0, -3.0, 0.5],
            [100.0, 0.0, 1.0, 0.5],
            [0.0, -100.0, 1.0, 0.5],
        ]))
        sparse = self.geometry.render_sparse_depth(cloud, self.calib, stride=1)
        assert sparse.num_valid == 0

    def test_matches_loop_oracle(self):
        """Random cloud equals a per-point loop z-buffer at stride 4."""
        rng = np.random.default_rng(7)
        calib = make_calib(fx=300, fy=300, cx=160, cy=120, width=320, height=240,
                           matrix=random_rigid(rng))
        pc = rng.uniform(-30, 30, size=(10000, 3))
        world = (pc - calib.translation) @ calib.rotation
        cloud = PointCloud(np.column_stack([world, rng.uniform(0, 1, 10000)]))

        sparse = self.geometry.render_sparse_depth(cloud, calib, stride=4)

        oracle = np.zeros((60, 80))
        for x, y, z in self.geometry.world_to_camera(world, calib):
            if z <= 0:
                continue
            u = 300 * x / z + 160
            v = 300 * y / z + 120
            if not (0 <= u < 320 and 0 <= v < 240):
                continue
            us, vs = int(math.floor(u / 4)), int(math.floor(v / 4))
            if oracle[vs, us] == 0 or z < oracle[vs, us]:
                oracle[vs, us] = z
        np.testing.assert_array_equal(sparse.depth, oracle)
        assert sparse.num_valid > 100


class TestCameraRig:
    """make_calibration and make_camera_rig."""

    def setup_method(self):
        """Set up test fixtures."""
        self.geometry = GeometryService()

    def test_forward_camera_axes(self):
        """Yaw 0 looks along +x, with +y to the image left and +z up."""
        calib = self.geometry.make_calibration("front", (0.0, 0.0, 0.0), 0.0, 800, 448, 70.0)
        u, v, d = self.geometry.camera_to_image(self.geometry.world_to_camera([10.0, 0.0, 0.0], calib), calib)
        assert float(d) == 10.0
        assert abs(float(u) - 400.0) < 1e-9 and abs(float(v) - 224.0) < 1e-9

        u_left, _, _ = self.geometry.camera_to_image(self.geometry.world_to_camera([10.0, 1.0, 0.0], calib), calib)
        _, v_up, _ = self.geometry.camera_to_image(self.geometry.world_to_camera([10.0, 0.0, 1.0], calib), calib)
        assert u_left < 400.0
        assert v_up < 224.0

    def test_focal_length_from_fov(self):
        """fx = (w / 2) / tan(fov / 2)."""
        calib = self.geometry.make_calibration("front", (0.0, 0.0, 0.0), 0.0, 800, 448, 90.0)
        assert abs(calib.fx - 400.0) < 1e-9
        assert calib.fx == calib.fy

    def test_default_rig(self):
        """Six cameras on a ring at mount height, 200x112 grids."""
        cameras = self.geometry.make_camera_rig(CameraRigConfig())
        assert [c.name for c in cameras] == [f"cam{i}" for i in range(6)]
        total = 0
        for index, calib in enumerate(cameras):
            yaw = math.radians(60.0 * index)
            np.testing.assert_allclose(
                calib.center, [0.8 * math.cos(yaw), 0.8 * math.sin(yaw), 1.5], atol=1e-12
            )
            rows, cols = calib.grid_shape(4)
            total += rows * cols
        assert total == 134400
