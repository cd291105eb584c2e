import math

import numpy as np
import pytest

from nsmae.geometry import (CameraModel, GeometryError, GridSpec, RayBatch, bev_rays, look_at,
                            perspective_rays, project_points)


def camera(f=100.0, c=(50.0, 50.0), size=(200, 100), R=np.eye(3), t=np.zeros(3)):
    K = np.array([[f, 0.0, c[0]], [0.0, f, c[1]], [0.0, 0.0, 1.0]])
    return CameraModel(K, R, t, size[0], size[1])


class TestCameraModel:
    def test_principal_point_ray_is_forward(self):
        cam = camera(c=(50.5, 50.5))
        rays = perspective_rays(cam, 1, 0.1, 4)
        row = np.nonzero((rays.index[:, 0] == 50) & (rays.index[:, 1] == 50))[0][0]
        np.testing.assert_allclose(rays.directions[row], [0.0, 0.0, 1.0], atol=1e-15)

    def test_backproject_diagonal(self):
        cam = camera()
        d = cam.backproject(np.array([[150.0, 50.0]]))[0]
        np.testing.assert_allclose(d, np.array([1.0, 0.0, 1.0]) / math.sqrt(2.0), atol=1e-15)

    def test_pixel_center_convention(self):
        # integer pixel (150, 50) has its center at (150.5, 50.5)
        cam = camera(c=(50.5, 50.5))
        rays = perspective_rays(cam, 1, 0.1, 4)
        row = np.nonzero((rays.index[:, 0] == 150) & (rays.index[:, 1] == 50))[0][0]
        np.testing.assert_allclose(rays.directions[row], np.array([1.0, 0.0, 1.0]) / math.sqrt(2.0), atol=1e-15)

    def test_ray_round_trip(self):
        eye = np.array([1.0, -2.0, 0.5])
        cam = CameraModel.from_fov(64, 48, 70.0, look_at(eye, (4.0, 1.0, 0.0)), eye)
        rays = perspective_rays(cam, 3, 0.2, 10)
        for t in (0.7, 3.0, 25.0):
            uv, z = cam.project(rays.origins + t * rays.directions)
            np.testing.assert_allclose(uv, rays.index + 0.5, atol=1e-6)
            assert np.all(z > 0)

    def test_invalid_intrinsics(self):
        with pytest.raises(GeometryError):
            camera(f=-1.0)
        with pytest.raises(GeometryError):
            camera(c=(250.0, 50.0))

    def test_non_orthonormal_rotation(self):
        with pytest.raises(GeometryError, match="orthonormal"):
            camera(R=np.diag([1.0, 1.0, 1.01]))
        with pytest.raises(GeometryError):
            camera(R=np.diag([1.0, 1.0, -1.0]))  # reflection

    def test_manifest_round_trip(self):
        eye = np.array([0.3, 0.2, 1.0])
        cam = CameraModel.from_fov(32, 32, 60.0, look_at(eye, (3.0, 0.0, 0.0)), eye)
        back = CameraModel.from_manifest(cam.to_manifest())
        np.testing.assert_array_equal(back.K, cam.K)
        np.testing.assert_array_equal(back.R, cam.R)
        np.testing.assert_array_equal(back.t, cam.t)

    def test_look_at_axes(self):
        R = look_at(np.zeros(3), (5.0, 0.0, 0.0))
        np.testing.assert_allclose(R[:, 2], [1.0, 0.0, 0.0])  # forward
        np.testing.assert_allclose(R[:, 1], [0.0, 0.0, -1.0])  # image down is world down
        with pytest.raises(GeometryError):
            look_at(np.zeros(3), (0.0, 0.0, 5.0))


class TestGridAndBev:
    def test_sample_count_for_tall_z_range(self):
        grid = GridSpec((-1.0, -1.0, -5.0), (1.0, 1.0, 3.0), (1.0, 1.0, 0.2))
        assert bev_rays(grid, 0.2).n_samples == 40

    def test_two_by_two(self):
        grid = GridSpec((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), (1.0, 1.0, 0.5))
        rays = bev_rays(grid, 0.5)
        assert len(rays) == 4
        np.testing.assert_array_equal(rays.directions, np.tile([0.0, 0.0, -1.0], (4, 1)))
        row = np.nonzero((rays.index[:, 0] == 0) & (rays.index[:, 1] == 0))[0][0]
        np.testing.assert_allclose(rays.origins[row], [-0.5, -0.5, 1.0])

    def test_nuscenes_extents(self):
        grid = GridSpec((-54.0, -54.0, -5.0), (54.0, 54.0, 3.0), (0.075, 0.075, 0.2))
        assert grid.extents == (1440, 1440, 40)

    def test_flat_index_round_trip(self):
        grid = GridSpec((0, 0, 0), (2, 3, 4), (1, 1, 1))
        ijk = np.array(list(np.ndindex(*grid.extents)))
        flat = grid.flat_index(ijk)
        np.testing.assert_array_equal(flat, np.arange(grid.n_voxels))
        np.testing.assert_array_equal(grid.unflat_index(flat), ijk)

    def test_degenerate_grid(self):
        with pytest.raises(GeometryError):
            GridSpec((0, 0, 0), (1, 1, 0.1), (1, 1, 1))


class TestProjectPoints:
    def test_on_axis_point(self):
        cam = camera()
        u, v, z, idx = project_points(np.array([[0.0, 0.0, 5.0]]), cam)
        np.testing.assert_allclose([u[0], v[0], z[0]], [50.0, 50.0, 5.0])

    def test_behind_camera_excluded(self):
        u, v, z, idx = project_points(np.array([[0.0, 0.0, -5.0], [0.0, 0.0, 2.0]]), camera())
        np.testing.assert_array_equal(idx, [1])

    def test_back_projection_recovers_points(self):
        rng = np.random.default_rng(0)
        eye = np.array([0.0, 0.0, 1.0])
        cam = CameraModel.from_fov(64, 64, 80.0, look_at(eye, (5.0, 0.0, 1.0)), eye)
        pts = cam.camera_to_world(np.stack([rng.uniform(-1, 1, 100), rng.uniform(-1, 1, 100),
                                            rng.uniform(2, 8, 100)], axis=1))
        u, v, z, idx = project_points(pts, cam)
        assert idx.size == 100
        d = cam.backproject(np.stack([u, v], axis=1))
        cos = (d @ cam.R)[:, 2]
        np.testing.assert_allclose(cam.center + (z / cos)[:, None] * d, pts, atol=1e-6)


class TestRayBatch:
    def test_subset_and_samples(self):
        cam = camera()
        rays = perspective_rays(cam, 10, 0.5, 3, near=1.0)
        sub = rays.subset([0, 2])
        assert len(sub) == 2
        np.testing.assert_allclose(rays.sample_t(), [1.25, 1.75, 2.25])
        ray = rays[1]
        np.testing.assert_array_equal(ray.direction, rays.directions[1])

    def test_validation(self):
        with pytest.raises(GeometryError):
            RayBatch(np.zeros((1, 3)), np.zeros((1, 3)), 0.0, 0.1, 3, "PER", np.zeros((1, 2)))
