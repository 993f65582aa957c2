"""Pinhole camera, voxel grid, line-of-sight feature projection, and
depth/occupancy conversions.

The world frame IS the camera frame (identity extrinsics): x right, y down,
z along the optical axis. Voxel (i, j, k) spans
origin + voxel_size * [i, i+1) x [j, j+1) x [k, k+1) on the (x, y, z) axes,
and linear indices enumerate (i, j, k) in C order.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import ops
from .numerics.tensor import Tensor

_OUT_OF_VIEW_LOGIT = -16.0


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: int
    image_h: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.image_w) or not (0 <= self.cy < self.image_h):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.image_w}x{self.image_h}"
            )

    def rescaled(self, sx, sy):
        """Intrinsics for the same camera at resolution (image_w*sx, image_h*sy)."""
        return CameraModel(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            image_w=max(1, int(round(self.image_w * sx))),
            image_h=max(1, int(round(self.image_h * sy))),
        )


@dataclass(frozen=True)
class GridSpec:
    dims: tuple  # voxel counts along camera (x, y, z)
    voxel_size: float
    origin: tuple  # camera-frame coordinates of the (0,0,0) voxel corner

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) <= 0 for d in self.dims):
            raise ConfigError(f"grid dims must be three positive extents, got {self.dims}")
        if self.voxel_size <= 0:
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def num_voxels(self):
        nx, ny, nz = self.dims
        return nx * ny * nz

    def downsample(self, factor):
        if any(d % factor for d in self.dims):
            raise ConfigError(f"grid dims {self.dims} not divisible by {factor}")
        return GridSpec(
            dims=tuple(d // factor for d in self.dims),
            voxel_size=self.voxel_size * factor,
            origin=self.origin,
        )


@dataclass
class FrustumCoords:
    """Per-voxel projected pixel coordinates and optical-axis depth, aligned
    with the grid's linear voxel indices."""

    u: np.ndarray
    v: np.ndarray
    d: np.ndarray
    in_view: np.ndarray


def project(points, cam):
    """Perspective projection of camera-frame points -> (u, v, d) arrays.

    d is the optical-axis depth; callers treat d <= 0 as out of view (the
    corresponding u, v are zeroed, never a failure).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pts[:, 0] / z + cam.cx
        v = cam.fy * pts[:, 1] / z + cam.cy
    bad = ~(z > 0)
    u = np.where(bad, 0.0, u)
    v = np.where(bad, 0.0, v)
    return u, v, z.copy()


def unproject(u, v, d, cam):
    """Inverse of project for positive depths: pixel ray hit at depth d."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    x = d * (u - cam.cx) / cam.fx
    y = d * (v - cam.cy) / cam.fy
    return np.stack([x, y, d], axis=-1)


def in_view_mask(u, v, d, cam):
    return (u >= 0) & (u < cam.image_w) & (v >= 0) & (v < cam.image_h) & (d > 0)


def voxel_centers(grid):
    """[V, 3] camera-frame centers in linear-index (C) order."""
    nx, ny, nz = grid.dims
    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    idx = np.stack([i, j, k], axis=-1).reshape(-1, 3).astype(np.float64)
    return np.asarray(grid.origin) + grid.voxel_size * (idx + 0.5)


def frustum_coords(grid, cam):
    """Project every voxel center, preserving linear-index correspondence."""
    u, v, d = project(voxel_centers(grid), cam)
    return FrustumCoords(u=u, v=v, d=d, in_view=in_view_mask(u, v, d, cam))


def flosp(feature_map, grid, cam, coords=None):
    """Line-of-sight unprojection of a [C, h, w] map to [C, nx, ny, nz].

    Each in-view voxel receives the bilinearly sampled feature at its
    projection (u/s, v/s) where s is the map's scale relative to the full
    image; out-of-view voxels receive zeros. Voxels on one optical ray share
    a projection and therefore a feature. Differentiable w.r.t. the map.
    """
    if feature_map.ndim != 3:
        raise DimensionError(f"flosp expects a [C,h,w] map, got {tuple(feature_map.shape)}")
    _, h, w = feature_map.shape
    if h == 0 or w == 0:
        raise DimensionError("flosp: zero-sized feature map")
    if coords is None:
        coords = frustum_coords(grid, cam)
    su = cam.image_w / w
    sv = cam.image_h / h
    uf = np.where(coords.in_view, coords.u / su, 0.0)
    vf = np.where(coords.in_view, coords.v / sv, 0.0)
    sampled = ops.bilinear_sample(feature_map, uf, vf)  # [V, C]
    mask = coords.in_view.astype(feature_map.data.dtype)[:, None]
    masked = ops.mul(sampled, Tensor(mask, dtype=feature_map.data.dtype.type))
    volume = ops.transpose(masked, (1, 0))
    return ops.reshape(volume, (feature_map.shape[0],) + grid.dims)


def depth_to_occupancy(depth, grid, cam):
    """Mark the voxel containing each pixel's backprojected surface point.

    ``depth`` is an [h, w] array in meters aligned with ``cam`` (pass a
    rescaled camera for reduced-resolution maps). Non-positive and non-finite
    depths are ignored, as are points outside the grid. Returns a {0,1}
    float Tensor of shape grid.dims.
    """
    depth = depth.data if isinstance(depth, Tensor) else np.asarray(depth)
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    u = xs.reshape(-1) + 0.5
    v = ys.reshape(-1) + 0.5
    d = depth.reshape(-1).astype(np.float64)
    valid = np.isfinite(d) & (d > 0)
    pts = unproject(u[valid], v[valid], d[valid], cam)
    idx = np.floor((pts - np.asarray(grid.origin)) / grid.voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    occ = np.zeros(grid.dims, dtype=np.float32)
    ii, jj, kk = idx[inside].T
    occ[ii, jj, kk] = 1.0
    return Tensor(occ)


def depth_to_occupancy_logits(depth_pred, grid, cam, tau=None, coords=None):
    """Differentiable soft counterpart of depth_to_occupancy -> logits [V].

    Each in-view voxel's logit is positive when its center depth lies within
    half a voxel of the predicted depth along its ray and falls off linearly
    with temperature ``tau`` (default voxel_size/4). Out-of-view voxels get a
    large negative constant (confident empty).
    """
    if tau is None:
        tau = grid.voxel_size / 4.0
    if coords is None:
        coords = frustum_coords(grid, cam)
    dtype = depth_pred.data.dtype.type
    depth_map = ops.reshape(depth_pred, (1,) + tuple(depth_pred.shape))
    uf = np.where(coords.in_view, coords.u, 0.0)
    vf = np.where(coords.in_view, coords.v, 0.0)
    sampled = ops.reshape(ops.bilinear_sample(depth_map, uf, vf), (-1,))  # [V]
    centers_d = Tensor(coords.d.astype(dtype))
    band = ops.sub(
        grid.voxel_size / 2.0, ops.abs_(ops.sub(centers_d, sampled))
    )
    logits = ops.div(band, tau)
    view = coords.in_view.astype(dtype)
    return ops.add(
        ops.mul(logits, Tensor(view)), Tensor((1.0 - view) * _OUT_OF_VIEW_LOGIT)
    )
