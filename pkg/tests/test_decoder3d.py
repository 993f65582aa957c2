"""Frustum ordering, fusion blocks, Mamba layers, and the 3D U-Net."""

import numpy as np
import pytest

from frustumssc import geometry
from frustumssc.decoder3d import (
    FrustumMambaDecoder,
    FrustumMambaLayer,
    ScaleFusion,
    adjacent_feature_gap,
    build_frustum_order,
    composite,
    modality_fusion,
    raster_order,
    reorder,
    stage_orders,
)
from frustumssc.errors import ConfigError, ContractError, DimensionError
from frustumssc.geometry import CameraModel, GridSpec
from frustumssc.numerics import Tensor, clear_graph, no_grad, ops


@pytest.fixture(autouse=True)
def fresh_graph():
    clear_graph()
    yield
    clear_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(33)


@pytest.fixture
def cam():
    return CameraModel(fx=52.0, fy=52.0, cx=32.0, cy=24.0, image_w=64, image_h=48)


@pytest.fixture
def grid():
    return GridSpec(dims=(4, 4, 4), voxel_size=0.5, origin=(-1.0, -1.0, 1.0))


def assert_bijection(order):
    v = order.perm.size
    assert order.perm.sum() == v * (v - 1) // 2
    np.testing.assert_array_equal(order.inv_perm[order.perm], np.arange(v))


class TestScaleFusion:
    def test_single_scale_identity(self, rng):
        fuse = ScaleFusion(1, 3, rng)
        vol = Tensor(rng.normal(size=(3, 2, 2, 2)).astype(np.float32))
        np.testing.assert_allclose(fuse([vol]).data, vol.data, rtol=1e-6)

    def test_identical_volumes_reproduced(self, rng):
        fuse = ScaleFusion(3, 2, rng)
        vol = Tensor(rng.normal(size=(2, 2, 2, 2)).astype(np.float32))
        out = fuse([vol, vol, vol])
        np.testing.assert_allclose(out.data, vol.data, rtol=1e-5, atol=1e-6)

    def test_weights_softmax_properties(self, rng):
        fuse = ScaleFusion(3, 2, rng)
        vols = [Tensor(rng.normal(size=(2, 2, 2, 2)).astype(np.float32)) for _ in range(3)]
        w = fuse.last_weights(vols)
        assert abs(w.sum() - 1.0) < 1e-6
        assert np.all(w > 0) and np.all(w < 1)

    def test_matches_manual_weighted_sum_and_convexity(self, rng):
        fuse = ScaleFusion(2, 3, rng)
        vols = [Tensor(rng.normal(size=(3, 2, 2, 2)).astype(np.float32)) for _ in range(2)]
        w = fuse.last_weights(vols)
        manual = w[0] * vols[0].data + w[1] * vols[1].data
        out = fuse(vols).data
        np.testing.assert_allclose(out, manual, rtol=1e-5, atol=1e-6)
        lo = np.minimum(vols[0].data, vols[1].data)
        hi = np.maximum(vols[0].data, vols[1].data)
        assert np.all(out >= lo - 1e-6) and np.all(out <= hi + 1e-6)

    def test_wrong_scale_count(self, rng):
        fuse = ScaleFusion(2, 3, rng)
        with pytest.raises(DimensionError):
            fuse([Tensor(np.zeros((3, 2, 2, 2)))])


class TestModalityFusion:
    def test_zero_geo_passthrough(self, rng):
        sem = Tensor(rng.normal(size=(2, 3, 3, 3)).astype(np.float32))
        out = modality_fusion(sem, Tensor(np.zeros((2, 3, 3, 3), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, sem.data)

    def test_commutative(self, rng):
        a = Tensor(rng.normal(size=(2, 2, 2, 2)).astype(np.float32))
        b = Tensor(rng.normal(size=(2, 2, 2, 2)).astype(np.float32))
        np.testing.assert_array_equal(modality_fusion(a, b).data, modality_fusion(b, a).data)

    def test_matches_loop_oracle(self, rng):
        a = rng.normal(size=(2, 2, 2, 2)).astype(np.float32)
        b = rng.normal(size=(2, 2, 2, 2)).astype(np.float32)
        out = modality_fusion(Tensor(a), Tensor(b)).data
        for idx in np.ndindex(*a.shape):
            assert out[idx] == a[idx] + b[idx]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            modality_fusion(Tensor(np.zeros((2, 2, 2, 2))), Tensor(np.zeros((2, 2, 2, 1))))


class TestFrustumOrder:
    def test_single_ray_depth_order(self, cam):
        g = GridSpec(dims=(1, 1, 6), voxel_size=0.5, origin=(-0.25, -0.25, 0.5))
        order = build_frustum_order(g, cam, bin_u=2.0, bin_v=2.0)
        np.testing.assert_array_equal(order.perm, np.arange(6))

    def test_raster_limit_single_depth_plane(self):
        # near-orthographic: huge focal length, tiny voxels, one depth plane
        cam = CameraModel(fx=1e4, fy=1e4, cx=32.0, cy=24.0, image_w=64, image_h=48)
        g = GridSpec(dims=(4, 3, 1), voxel_size=0.001, origin=(-0.002, -0.0015, 1.0))
        order = build_frustum_order(g, cam, bin_u=1.0, bin_v=1.0)
        ii, jj, kk = np.unravel_index(np.arange(g.num_voxels), g.dims)
        expected = np.lexsort((ii, jj))  # image raster: v (y) major, u (x) minor
        np.testing.assert_array_equal(order.perm, expected)

    def test_matches_brute_force_sort_oracle(self, cam):
        g = GridSpec(dims=(6, 6, 6), voxel_size=0.4, origin=(-1.2, -1.2, 0.8))
        bin_u = bin_v = 2.0
        order = build_frustum_order(g, cam, bin_u=bin_u, bin_v=bin_v)
        fc = geometry.frustum_coords(g, cam)
        keys = []
        for lin in range(g.num_voxels):
            if fc.in_view[lin]:
                keys.append((0, np.floor(fc.v[lin] / bin_v), np.floor(fc.u[lin] / bin_u), fc.d[lin], lin))
            else:
                keys.append((1, 0.0, 0.0, 0.0, lin))
        expected = np.array([k[-1] for k in sorted(keys)])
        np.testing.assert_array_equal(order.perm, expected)
        assert_bijection(order)

    def test_continuity_vs_raster_on_flosp_volume(self, cam, rng):
        g = GridSpec(dims=(6, 6, 6), voxel_size=0.4, origin=(-1.2, -1.2, 0.8))
        fmap = Tensor(rng.normal(size=(4, 24, 32)).astype(np.float32))
        vol = geometry.flosp(fmap, g, cam)
        frustum = build_frustum_order(g, cam, bin_u=2.0, bin_v=2.0)
        raster = raster_order(g)
        assert adjacent_feature_gap(vol, frustum) < adjacent_feature_gap(vol, raster)

    def test_depth_outermost_flag(self, cam, grid):
        inner = build_frustum_order(grid, cam, bin_u=2.0, bin_v=2.0, depth_innermost=True)
        outer = build_frustum_order(grid, cam, bin_u=2.0, bin_v=2.0, depth_innermost=False)
        assert_bijection(outer)
        assert not np.array_equal(inner.perm, outer.perm)

    def test_stage_orders_validity_and_scaling(self, cam, grid):
        orders = stage_orders(grid, cam, 2, base_bin_u=2.0, base_bin_v=2.0)
        assert orders[0].dims == (4, 4, 4) and orders[1].dims == (2, 2, 2)
        for o in orders:
            assert_bijection(o)

    def test_indivisible_grid_rejected(self, cam):
        g = GridSpec(dims=(6, 6, 6), voxel_size=0.4, origin=(-1.2, -1.2, 0.8))
        with pytest.raises(ConfigError):
            stage_orders(g, cam, 3, base_bin_u=2.0, base_bin_v=2.0)


class TestReorderComposite:
    def test_identity_perm_round_trip(self, rng, grid):
        vol = Tensor(rng.normal(size=(3, 4, 4, 4)).astype(np.float32))
        order = raster_order(grid)
        seq = reorder(vol, order)
        np.testing.assert_array_equal(seq.data, vol.data.reshape(3, -1).T)
        np.testing.assert_array_equal(composite(seq, order).data, vol.data)

    def test_composite_reorder_bit_exact_100_random(self, cam, grid):
        rng = np.random.default_rng(12)
        order = build_frustum_order(grid, cam, bin_u=2.0, bin_v=2.0)
        for _ in range(100):
            vol = Tensor(rng.normal(size=(2, 4, 4, 4)).astype(np.float32))
            with no_grad():
                back = composite(reorder(vol, order), order)
            np.testing.assert_array_equal(back.data, vol.data)

    def test_scale_mismatch_rejected(self, rng, cam, grid):
        order = build_frustum_order(grid, cam, bin_u=2.0, bin_v=2.0)
        with pytest.raises(ContractError):
            reorder(Tensor(np.zeros((2, 4, 4, 2))), order)
        with pytest.raises(ContractError):
            composite(Tensor(np.zeros((63, 2))), order)


class TestFrustumMambaLayer:
    def test_zeroed_branch_is_identity(self, rng, cam, grid):
        layer = FrustumMambaLayer(4, 2, rng)
        for block in layer.mamba.blocks:
            block.params.out_proj.weight.data[:] = 0.0
            block.params.out_proj.bias.data[:] = 0.0
        order = build_frustum_order(grid, cam, bin_u=2.0, bin_v=2.0)
        vol = Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32))
        with no_grad():
            out = layer(vol, order)
        np.testing.assert_array_equal(out.data, vol.data)

    def test_zeroed_branch_with_norm_bias_shifts(self, rng, cam, grid):
        layer = FrustumMambaLayer(4, 2, rng)
        for block in layer.mamba.blocks:
            block.params.out_proj.weight.data[:] = 0.0
            block.params.out_proj.bias.data[:] = 0.0
        layer.norm.beta.data[:] = 0.25
        order = build_frustum_order(grid, cam, bin_u=2.0, bin_v=2.0)
        vol = Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32))
        with no_grad():
            out = layer(vol, order)
        np.testing.assert_allclose(out.data, vol.data + 0.25, rtol=1e-6)

    def test_shape_preserved(self, rng, cam):
        for dims in [(4, 4, 4), (2, 4, 2)]:
            g = GridSpec(dims=dims, voxel_size=0.5, origin=(-1.0, -1.0, 1.0))
            layer = FrustumMambaLayer(3, 1, np.random.default_rng(0))
            order = build_frustum_order(g, cam, bin_u=2.0, bin_v=2.0)
            vol = Tensor(rng.normal(size=(3,) + dims).astype(np.float32))
            assert layer(vol, order).shape == vol.shape

    def test_order_dependence(self, rng, cam, grid):
        layer = FrustumMambaLayer(4, 1, rng)
        frustum = build_frustum_order(grid, cam, bin_u=2.0, bin_v=2.0)
        raster = raster_order(grid)
        vol = Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32))
        with no_grad():
            a = layer(vol, frustum).data
            b = layer(vol, raster).data
        assert not np.allclose(a, b, atol=1e-6)


class TestFrustumMambaDecoder:
    def make(self, rng, **kw):
        defaults = dict(in_ch=4, n_scales=2, n_classes=3, rng=rng, n_stages=2, base_ch=8, n_mamba_layers=1)
        defaults.update(kw)
        return FrustumMambaDecoder(**defaults)

    def orders_and_mask(self, cam, grid):
        orders = stage_orders(grid, cam, 2, base_bin_u=2.0, base_bin_v=2.0)
        mask = geometry.frustum_coords(grid, cam).in_view.reshape(grid.dims)
        return orders, mask

    def test_output_shape_law(self, rng, cam, grid):
        dec = self.make(rng)
        orders, mask = self.orders_and_mask(cam, grid)
        sem = [Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32)) for _ in range(2)]
        geo = [Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32)) for _ in range(2)]
        out = dec(sem, geo, mask, orders)
        assert out.shape == (4, 4, 4, 4)  # n_classes + 1 = 4 channels

    def test_default_config_shape(self, rng):
        cam = CameraModel(fx=52.0, fy=52.0, cx=32.0, cy=24.0, image_w=64, image_h=48)
        grid = GridSpec(dims=(16, 12, 16), voxel_size=0.25, origin=(-2.0, -1.5, 0.5))
        dec = self.make(rng, in_ch=8, n_scales=1, n_classes=12, base_ch=8)
        orders = stage_orders(grid, cam, 2, base_bin_u=2.0, base_bin_v=2.0)
        mask = geometry.frustum_coords(grid, cam).in_view.reshape(grid.dims)
        sem = [Tensor(rng.normal(size=(8, 16, 12, 16)).astype(np.float32))]
        out = dec(sem, None, mask, orders)
        assert out.shape == (13, 16, 12, 16)

    def test_single_modality(self, rng, cam, grid):
        dec = self.make(rng)
        orders, mask = self.orders_and_mask(cam, grid)
        sem = [Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32)) for _ in range(2)]
        assert dec(sem, None, mask, orders).shape == (4, 4, 4, 4)

    def test_multi_scale_off_uses_finest(self, rng, cam, grid):
        dec = self.make(np.random.default_rng(4), multi_scale=False)
        orders, mask = self.orders_and_mask(cam, grid)
        finest = Tensor(np.random.default_rng(1).normal(size=(4, 4, 4, 4)).astype(np.float32))
        coarse_a = Tensor(np.zeros((4, 4, 4, 4), dtype=np.float32))
        coarse_b = Tensor(np.ones((4, 4, 4, 4), dtype=np.float32))
        with no_grad():
            out_a = dec([coarse_a, finest], None, mask, orders).data
            out_b = dec([coarse_b, finest], None, mask, orders).data
        np.testing.assert_array_equal(out_a, out_b)

    def test_conv_arch_runs(self, rng, cam, grid):
        dec = self.make(rng, arch="conv")
        orders, mask = self.orders_and_mask(cam, grid)
        sem = [Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32)) for _ in range(2)]
        assert dec(sem, None, mask, orders).shape == (4, 4, 4, 4)

    def test_invalid_arch(self, rng):
        with pytest.raises(ConfigError):
            self.make(rng, arch="transformer")

    def test_wrong_order_count(self, rng, cam, grid):
        dec = self.make(rng)
        orders, mask = self.orders_and_mask(cam, grid)
        sem = [Tensor(np.zeros((4, 4, 4, 4), dtype=np.float32)) for _ in range(2)]
        with pytest.raises(ContractError):
            dec(sem, None, mask, orders[:1])

    def test_skip_fidelity_probe(self, cam, grid):
        """With Mamba branches zeroed, the decoder ignores the voxel orders
        (the reordering feeds only the Mamba path) but still tracks input."""
        dec = self.make(np.random.default_rng(9))
        for stage in dec.stages:
            for block in stage.mamba.blocks:
                block.params.out_proj.weight.data[:] = 0.0
                block.params.out_proj.bias.data[:] = 0.0
        orders, mask = self.orders_and_mask(cam, grid)
        rasters = [raster_order(grid), raster_order(grid.downsample(2), scale_id=1)]
        rng = np.random.default_rng(10)
        sem1 = [Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32)) for _ in range(2)]
        sem2 = [Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32)) for _ in range(2)]
        with no_grad():
            out_frustum = dec(sem1, None, mask, orders).data
            out_raster = dec(sem1, None, mask, rasters).data
            out_other = dec(sem2, None, mask, orders).data
        np.testing.assert_array_equal(out_frustum, out_raster)
        assert not np.allclose(out_frustum, out_other)

    def test_order_matters_with_live_mamba(self, cam, grid):
        dec = self.make(np.random.default_rng(11))
        orders, mask = self.orders_and_mask(cam, grid)
        rasters = [raster_order(grid), raster_order(grid.downsample(2), scale_id=1)]
        rng = np.random.default_rng(12)
        sem = [Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32)) for _ in range(2)]
        with no_grad():
            a = dec(sem, None, mask, orders).data
            b = dec(sem, None, mask, rasters).data
        assert not np.allclose(a, b)
