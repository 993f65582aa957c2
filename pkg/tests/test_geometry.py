"""Camera model, projections, line-of-sight unprojection, depth/occupancy."""

import numpy as np
import pytest

from frustumssc import geometry
from frustumssc.errors import ConfigError, DimensionError
from frustumssc.geometry import CameraModel, GridSpec
from frustumssc.numerics import Tensor, clear_graph, ops


@pytest.fixture(autouse=True)
def fresh_graph():
    clear_graph()
    yield
    clear_graph()


@pytest.fixture
def cam():
    return CameraModel(fx=52.0, fy=52.0, cx=32.0, cy=24.0, image_w=64, image_h=48)


@pytest.fixture
def grid():
    return GridSpec(dims=(4, 4, 4), voxel_size=0.5, origin=(-1.0, -1.0, 1.0))


class TestCameraModel:
    def test_invalid_focal(self):
        with pytest.raises(ConfigError):
            CameraModel(fx=0.0, fy=1.0, cx=0.0, cy=0.0, image_w=4, image_h=4)

    def test_principal_point_bounds(self):
        with pytest.raises(ConfigError):
            CameraModel(fx=1.0, fy=1.0, cx=10.0, cy=0.0, image_w=4, image_h=4)

    def test_rescaled(self, cam):
        half = cam.rescaled(0.5, 0.5)
        assert (half.fx, half.cx, half.image_w) == (26.0, 16.0, 32)


class TestProject:
    def test_principal_axis(self, cam):
        for z in (0.3, 1.0, 7.5):
            u, v, d = geometry.project(np.array([0.0, 0.0, z]), cam)
            assert (u[0], v[0], d[0]) == (cam.cx, cam.cy, z)

    def test_inverse_construction(self, cam):
        u0, v0, z = 11.25, 40.5, 2.0
        point = np.array([z * (u0 - cam.cx) / cam.fx, z * (v0 - cam.cy) / cam.fy, z])
        u, v, d = geometry.project(point, cam)
        np.testing.assert_allclose([u[0], v[0], d[0]], [u0, v0, z], rtol=1e-12)

    def test_round_trip_1000_random(self, cam):
        rng = np.random.default_rng(7)
        u = rng.uniform(0, cam.image_w, 1000)
        v = rng.uniform(0, cam.image_h, 1000)
        d = rng.uniform(0.2, 9.0, 1000)
        pts = geometry.unproject(u, v, d, cam)
        u2, v2, d2 = geometry.project(pts, cam)
        pts2 = geometry.unproject(u2, v2, d2, cam)
        assert np.abs(pts2 - pts).max() < 1e-5

    def test_non_positive_depth_flagged(self, cam):
        u, v, d = geometry.project(np.array([[0.5, 0.5, -1.0], [0.0, 0.0, 0.0]]), cam)
        assert not geometry.in_view_mask(u, v, d, cam).any()


class TestVoxelCenters:
    def test_single_voxel(self):
        g = GridSpec(dims=(1, 1, 1), voxel_size=1.0, origin=(0.0, 0.0, 0.0))
        np.testing.assert_array_equal(geometry.voxel_centers(g), [[0.5, 0.5, 0.5]])

    def test_adjacent_offset(self, grid):
        centers = geometry.voxel_centers(grid).reshape(4, 4, 4, 3)
        np.testing.assert_allclose(centers[1, 0, 0] - centers[0, 0, 0], [0.5, 0, 0])
        np.testing.assert_allclose(centers[0, 1, 0] - centers[0, 0, 0], [0, 0.5, 0])
        np.testing.assert_allclose(centers[0, 0, 1] - centers[0, 0, 0], [0, 0, 0.5])

    def test_full_enumeration_matches_nested_loops(self, grid):
        centers = geometry.voxel_centers(grid)
        expected = []
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    expected.append(
                        [
                            grid.origin[0] + grid.voxel_size * (i + 0.5),
                            grid.origin[1] + grid.voxel_size * (j + 0.5),
                            grid.origin[2] + grid.voxel_size * (k + 0.5),
                        ]
                    )
        np.testing.assert_allclose(centers, expected)

    def test_downsample(self, grid):
        g2 = grid.downsample(2)
        assert g2.dims == (2, 2, 2) and g2.voxel_size == 1.0 and g2.origin == grid.origin
        with pytest.raises(ConfigError):
            GridSpec(dims=(3, 4, 4), voxel_size=1.0, origin=(0, 0, 0)).downsample(2)


class TestFrustumCoords:
    def test_single_voxel_principal_axis(self, cam):
        g = GridSpec(dims=(1, 1, 1), voxel_size=0.5, origin=(-0.25, -0.25, 2.0))
        fc = geometry.frustum_coords(g, cam)
        np.testing.assert_allclose([fc.u[0], fc.v[0], fc.d[0]], [cam.cx, cam.cy, 2.25])
        assert fc.in_view[0]

    def test_behind_camera_not_in_view(self, cam):
        g = GridSpec(dims=(1, 1, 1), voxel_size=0.5, origin=(-0.25, -0.25, -3.0))
        assert not geometry.frustum_coords(g, cam).in_view[0]

    def test_matches_per_voxel_project_oracle(self, cam, grid):
        fc = geometry.frustum_coords(grid, cam)
        centers = geometry.voxel_centers(grid)
        for lin in range(grid.num_voxels):
            u, v, d = geometry.project(centers[lin], cam)
            assert (u[0], v[0], d[0]) == (fc.u[lin], fc.v[lin], fc.d[lin])

    def test_in_view_round_trip_recovers_centers(self, cam, grid):
        fc = geometry.frustum_coords(grid, cam)
        centers = geometry.voxel_centers(grid)
        back = geometry.unproject(fc.u, fc.v, fc.d, cam)
        sel = fc.in_view
        assert np.abs(back[sel] - centers[sel]).max() < 1e-5


class TestFlosp:
    def test_constant_map(self, cam, grid):
        fmap = Tensor(np.full((3, 24, 32), 2.5, dtype=np.float32))
        vol = geometry.flosp(fmap, grid, cam)
        fc = geometry.frustum_coords(grid, cam)
        flat = vol.data.reshape(3, -1)
        np.testing.assert_allclose(flat[:, fc.in_view], 2.5, rtol=1e-6)
        np.testing.assert_array_equal(flat[:, ~fc.in_view], 0.0)

    def test_pixel_center_exactness(self):
        # one voxel projecting exactly onto the center of feature pixel (1, 2)
        cam = CameraModel(fx=10.0, fy=10.0, cx=2.5, cy=1.5, image_w=6, image_h=4)
        g = GridSpec(dims=(1, 1, 1), voxel_size=0.2, origin=(-0.1, -0.1, 0.9))
        fmap = Tensor(np.arange(24, dtype=np.float32).reshape(1, 4, 6))
        vol = geometry.flosp(fmap, g, cam)
        assert vol.data.reshape(-1)[0] == fmap.data[0, 1, 2]

    def test_ray_constancy(self, cam):
        # all centers on the optical axis share (u, v) = (cx, cy)
        g = GridSpec(dims=(1, 1, 6), voxel_size=0.5, origin=(-0.25, -0.25, 0.5))
        fmap = Tensor(np.random.default_rng(3).normal(size=(4, 24, 32)).astype(np.float32))
        vol = geometry.flosp(fmap, g, cam).data.reshape(4, 6)
        for k in range(1, 6):
            np.testing.assert_allclose(vol[:, k], vol[:, 0], atol=1e-6)

    def test_zero_sized_map_rejected(self, cam, grid):
        with pytest.raises(DimensionError):
            geometry.flosp(Tensor(np.zeros((2, 0, 4))), grid, cam)


class TestDepthOccupancy:
    def test_single_pixel_at_principal_point(self):
        cam = CameraModel(fx=10.0, fy=10.0, cx=2.5, cy=1.5, image_w=5, image_h=3)
        g = GridSpec(dims=(4, 4, 4), voxel_size=0.5, origin=(-1.0, -1.0, 0.5))
        depth = np.full((3, 5), np.inf, dtype=np.float32)
        depth[1, 2] = 1.3  # pixel center (2.5, 1.5) = principal point
        occ = geometry.depth_to_occupancy(depth, g, cam).data
        expect = np.zeros((4, 4, 4))
        expect[2, 2, 1] = 1.0  # floor(((0,0,1.3) - origin) / 0.5)
        np.testing.assert_array_equal(occ, expect)

    def test_depths_beyond_far_plane(self, cam, grid):
        depth = np.full((48, 64), 99.0, dtype=np.float32)
        occ = geometry.depth_to_occupancy(depth, grid, cam).data
        assert occ.sum() == 0

    def test_occupancy_logits_band(self, cam):
        g = GridSpec(dims=(1, 1, 4), voxel_size=0.5, origin=(-0.25, -0.25, 0.5))
        depth = Tensor(np.full((48, 64), 1.25, dtype=np.float32))
        logits = geometry.depth_to_occupancy_logits(depth, g, cam).data
        # voxel centers at z = 0.75, 1.25, 1.75, 2.25; band tau = 0.125
        assert logits[1] > 0
        assert logits[0] < 0 and logits[2] < 0 and logits[3] < 0


class TestForeshortening:
    def test_voxel_footprint_shrinks_with_depth(self, cam):
        def footprint(z):
            s = 0.25
            corners = np.array(
                [[-s, -s, z], [s, -s, z], [s, s, z], [-s, s, z]], dtype=np.float64
            )
            u, v, _ = geometry.project(corners, cam)
            # shoelace area of the projected quad
            return 0.5 * abs(
                np.sum(u * np.roll(v, -1) - np.roll(u, -1) * v)
            )

        depths = [0.8, 1.2, 2.0, 3.5, 5.0]
        areas = [footprint(z) for z in depths]
        assert all(a1 > a2 for a1, a2 in zip(areas, areas[1:]))
