"""Gradient verification suite: central-difference checks for every
differentiable op and the key composites, all in float64.

Reused by the `gradcheck` CLI subcommand and the acceptance tests.
"""

import numpy as np

from .. import geometry
from ..decoder3d import FrustumMambaDecoder, FrustumMambaLayer, build_frustum_order, raster_order
from ..encoder2d import DualHeadEncoder, UpBlock
from ..geometry import CameraModel, GridSpec
from ..nn import BatchNorm, LayerNorm, MLP
from ..numerics import Tensor, grad_check, ops, using_dtype
from ..ssm import MambaBlock, SSMParams, selective_scan

TOL = 1e-4


def _t(rng, *shape, scale=1.0, offset=0.0):
    return Tensor(rng.normal(size=shape) * scale + offset, requires_grad=True)


def _scalarize(x):
    # weigh coordinates unevenly so symmetric errors cannot cancel
    w = np.linspace(0.3, 1.7, x.size).reshape(x.shape)
    return ops.sum_(ops.mul(x, Tensor(w)))


def _numerics_checks(rng):
    cam_checks = []

    def check(name, f, inputs, tol=1e-5):
        cam_checks.append((name, f, inputs, tol))

    x = _t(rng, 5, 4)
    y = _t(rng, 4, 3)
    check("matmul", lambda a, b: _scalarize(ops.matmul(a, b)), [x, y], tol=1e-6)
    check("bmm", lambda a, b: _scalarize(ops.bmm(a, b)), [_t(rng, 2, 3, 4), _t(rng, 2, 4, 2)])
    check("add_broadcast", lambda a, b: _scalarize(ops.add(a, b)), [_t(rng, 3, 4), _t(rng, 4)])
    check("mul_broadcast", lambda a, b: _scalarize(ops.mul(a, b)), [_t(rng, 3, 1, 2), _t(rng, 1, 4, 2)])
    check("sub", lambda a, b: _scalarize(ops.sub(a, b)), [_t(rng, 3, 3), _t(rng, 3, 3)])
    check("div", lambda a, b: _scalarize(ops.div(a, b)), [_t(rng, 3, 3), _t(rng, 3, 3, offset=3.0)])
    check("exp", lambda a: _scalarize(ops.exp(a)), [_t(rng, 4, 4, scale=0.5)])
    check("log", lambda a: _scalarize(ops.log(a)), [_t(rng, 4, 4, scale=0.2, offset=2.0)])
    check("sqrt", lambda a: _scalarize(ops.sqrt(a)), [_t(rng, 4, 4, scale=0.2, offset=2.0)])
    check("abs", lambda a: _scalarize(ops.abs_(a)), [_t(rng, 4, 4, offset=2.0)])
    check("clip_min", lambda a: _scalarize(ops.clip_min(a, 0.5)), [_t(rng, 4, 4, offset=2.0)])
    check("relu", lambda a: _scalarize(ops.relu(a)), [_t(rng, 4, 4, offset=1.5)])
    check("sigmoid", lambda a: _scalarize(ops.sigmoid(a)), [_t(rng, 4, 4)])
    check("silu", lambda a: _scalarize(ops.silu(a)), [_t(rng, 4, 4)])
    check("softplus", lambda a: _scalarize(ops.softplus(a)), [_t(rng, 4, 4)])
    check("tanh", lambda a: _scalarize(ops.tanh(a)), [_t(rng, 4, 4)])
    check("softmax", lambda a: _scalarize(ops.softmax(a, axis=-1)), [_t(rng, 3, 5)])
    check("log_softmax", lambda a: _scalarize(ops.log_softmax(a, axis=0)), [_t(rng, 4, 5)])
    check("sum", lambda a: _scalarize(ops.sum_(a, axis=1)), [_t(rng, 3, 4, 2)])
    check("mean", lambda a: _scalarize(ops.mean(a, axis=(0, 2))), [_t(rng, 3, 4, 2)])
    check("reshape", lambda a: _scalarize(ops.reshape(a, (6, 2))), [_t(rng, 3, 4)])
    check("transpose", lambda a: _scalarize(ops.transpose(a, (2, 0, 1))), [_t(rng, 2, 3, 4)])
    check("concat", lambda a, b: _scalarize(ops.concat([a, b], axis=1)), [_t(rng, 2, 3), _t(rng, 2, 2)])
    check("narrow", lambda a: _scalarize(ops.narrow(a, 1, 1, 2)), [_t(rng, 3, 4)])
    check("flip0", lambda a: _scalarize(ops.flip0(a)), [_t(rng, 5, 2)])

    idx = np.array([3, 1, 1, 0, 2])
    check("take_rows", lambda a: _scalarize(ops.take_rows(a, idx)), [_t(rng, 4, 3)])
    labels = np.array([0, 2, 1, 1])
    check("select_class", lambda a: _scalarize(ops.select_class(a, labels)), [_t(rng, 3, 4)])

    check(
        "conv2d",
        lambda a, w, b: _scalarize(ops.conv2d(a, w, b, stride=1, padding=1)),
        [_t(rng, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)],
    )
    check(
        "conv2d_stride2",
        lambda a, w: _scalarize(ops.conv2d(a, w, stride=2, padding=1)),
        [_t(rng, 2, 6, 6), _t(rng, 2, 2, 3, 3)],
    )
    check(
        "conv3d",
        lambda a, w, b: _scalarize(ops.conv3d(a, w, b, stride=1, padding=1)),
        [_t(rng, 2, 4, 4, 4), _t(rng, 2, 2, 3, 3, 3), _t(rng, 2)],
    )
    check("avg_pool2d", lambda a: _scalarize(ops.avg_pool2d(a, 2)), [_t(rng, 2, 4, 6)])
    check("avg_pool3d", lambda a: _scalarize(ops.avg_pool3d(a, 2)), [_t(rng, 2, 4, 4, 2)])
    check("upsample2d_nearest", lambda a: _scalarize(ops.upsample2d(a, 2, "nearest")), [_t(rng, 2, 3, 4)])
    check("upsample2d_bilinear", lambda a: _scalarize(ops.upsample2d(a, 2, "bilinear")), [_t(rng, 2, 3, 4)])
    check("upsample3d_nearest", lambda a: _scalarize(ops.upsample3d(a, 2, "nearest")), [_t(rng, 2, 2, 3, 2)])
    check("upsample3d_trilinear", lambda a: _scalarize(ops.upsample3d(a, 2, "trilinear")), [_t(rng, 2, 2, 3, 2)])

    u = rng.uniform(0.3, 5.7, 10)
    v = rng.uniform(0.3, 3.7, 10)
    check("bilinear_sample", lambda m: _scalarize(ops.bilinear_sample(m, u, v)), [_t(rng, 2, 4, 6)])
    check(
        "causal_dwconv1d",
        lambda a, w, b: _scalarize(ops.causal_dwconv1d(a, w, b)),
        [_t(rng, 6, 3), _t(rng, 3, 4), _t(rng, 3)],
    )
    a_scan = Tensor(rng.uniform(0.2, 0.95, (10, 3, 2)), requires_grad=True)
    b_scan = _t(rng, 10, 3, 2)
    check("linear_scan_chunked", lambda a, b: _scalarize(ops.linear_scan(a, b, impl="chunked", chunk=4)), [a_scan, b_scan])
    check("linear_scan_sequential", lambda a, b: _scalarize(ops.linear_scan(a, b, impl="sequential")), [a_scan, b_scan])

    rng_ln = np.random.default_rng(11)
    ln = LayerNorm(6)
    check("layer_norm", lambda a: _scalarize(ln(a)), [_t(rng, 4, 6)])
    bn = BatchNorm(3)
    check("batch_norm", lambda a: _scalarize(bn(a)), [_t(rng, 3, 4, 4)])
    mlp = MLP([4, 8, 3], rng_ln)
    check("mlp", lambda a: _scalarize(mlp(a)), [_t(rng, 5, 4)])
    return cam_checks


def _geometry_checks(rng):
    cam = CameraModel(fx=12.0, fy=12.0, cx=8.0, cy=6.0, image_w=16, image_h=12)
    grid = GridSpec(dims=(4, 4, 4), voxel_size=0.4, origin=(-0.8, -0.8, 0.8))
    checks = [
        (
            "flosp",
            lambda m: _scalarize(geometry.flosp(m, grid, cam)),
            [_t(rng, 2, 8, 8)],
            TOL,
        ),
        (
            "depth_occupancy_logits",
            lambda d: _scalarize(
                ops.sigmoid(geometry.depth_to_occupancy_logits(d, grid, cam))
            ),
            [Tensor(rng.uniform(1.0, 2.2, (12, 16)), requires_grad=True)],
            TOL,
        ),
    ]
    return checks


def _ssm_checks(rng):
    params = SSMParams(4, 3, np.random.default_rng(5))
    block = MambaBlock(6, np.random.default_rng(6), impl="chunked", chunk=4)
    return [
        (
            "selective_scan",
            lambda x: _scalarize(selective_scan(x, params)),
            [_t(rng, 9, 4)],
            TOL,
        ),
        ("mamba_block", lambda x: _scalarize(block(x)), [_t(rng, 7, 6)], TOL),
    ]


def _encoder_checks(rng):
    up = UpBlock(3, level=1, rng=np.random.default_rng(7))
    enc = DualHeadEncoder(
        image_h=12, image_w=16, patch=4, width=8, n_levels=2, n_heads=2,
        rng=np.random.default_rng(8),
    )
    return [
        (
            "up_block",
            lambda lvl, prev: _scalarize(up(lvl, prev)),
            [_t(rng, 3, 3, 4), _t(rng, 3, 3, 4)],
            TOL,
        ),
        (
            "image_to_depth",
            lambda img: _scalarize(enc(img)["depth"]),
            [Tensor(rng.uniform(0.0, 1.0, (3, 12, 16)), requires_grad=True)],
            TOL,
        ),
    ]


def _decoder_checks(rng):
    cam = CameraModel(fx=10.0, fy=10.0, cx=6.0, cy=5.0, image_w=12, image_h=10)
    grid = GridSpec(dims=(4, 4, 4), voxel_size=0.5, origin=(-1.0, -1.0, 1.0))
    order = build_frustum_order(grid, cam, bin_u=2.0, bin_v=2.0)
    fml = FrustumMambaLayer(4, 2, np.random.default_rng(9), scan_impl="chunked", chunk=16)
    dec = FrustumMambaDecoder(
        in_ch=2, n_scales=1, n_classes=3, rng=np.random.default_rng(10),
        n_stages=2, base_ch=8, n_mamba_layers=1,
    )
    orders = [order, raster_order(grid.downsample(2), scale_id=1)]
    mask = np.ones(grid.dims, dtype=np.float64)

    checks = [
        (
            "frustum_mamba_layer",
            lambda vol: _scalarize(fml(vol, order)),
            [_t(rng, 4, 4, 4, 4)],
            TOL,
        ),
        (
            "fm_dec",
            lambda vol: _scalarize(dec([vol], None, mask, orders)),
            [_t(rng, 2, 4, 4, 4)],
            TOL,
        ),
    ]
    return checks


_MODULES = {
    "numerics": _numerics_checks,
    "geometry": _geometry_checks,
    "ssm": _ssm_checks,
    "encoder2d": _encoder_checks,
    "decoder3d": _decoder_checks,
}


def run_suite(module="all", report=None, eps=1e-5):
    """Run the requested checks; returns the number of failures."""
    report = report or (lambda msg: None)
    selected = list(_MODULES) if module == "all" else [module]
    failures = 0
    with using_dtype(np.float64):
        for name in selected:
            rng = np.random.default_rng(42)
            for check_name, f, inputs, tol in _MODULES[name](rng):
                err = grad_check(f, inputs, eps=eps)
                ok = err < tol
                failures += 0 if ok else 1
                report(f"[{'PASS' if ok else 'FAIL'}] {name}.{check_name}: {err:.3e} (tol {tol:.0e})")
    return failures
