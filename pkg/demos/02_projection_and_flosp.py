"""Camera geometry: projection, voxel grids, line-of-sight unprojection.

Shows the two facts the 3D pipeline is built around: projected voxels crowd
together with depth (foreshortening), and every voxel on a camera ray gets
the same unprojected feature.

Run:  python3 demos/02_projection_and_flosp.py
"""

import numpy as np

from frustumssc import geometry
from frustumssc.geometry import CameraModel, GridSpec
from frustumssc.numerics import Tensor, no_grad

cam = CameraModel(fx=52.0, fy=52.0, cx=32.0, cy=24.0, image_w=64, image_h=48)
grid = GridSpec(dims=(16, 12, 16), voxel_size=0.25, origin=(-2.0, -1.5, 0.5))

# Foreshortening: a fixed-size voxel's image footprint shrinks with depth.
print("projected footprint of a 0.25 m voxel (pixels of width):")
for z in (0.8, 1.5, 2.5, 4.0):
    width_px = cam.fx * grid.voxel_size / z
    print(f"  depth {z:.1f} m -> {width_px:5.1f} px")

# Project all voxel centers; count how many land inside the image.
coords = geometry.frustum_coords(grid, cam)
print(f"\n{coords.in_view.sum()} of {grid.num_voxels} voxel centers project in view")

# Round trip: unproject(project(p)) recovers p.
rng = np.random.default_rng(0)
pts = np.stack([rng.uniform(-1, 1, 500), rng.uniform(-1, 1, 500), rng.uniform(0.6, 4.0, 500)], axis=1)
u, v, d = geometry.project(pts, cam)
err = np.abs(geometry.unproject(u, v, d, cam) - pts).max()
print(f"projection round-trip max error: {err:.2e} m")

# Line-of-sight unprojection: one 2D feature feeds every voxel on its ray.
feature_map = Tensor(rng.normal(size=(8, 24, 32)).astype(np.float32))
with no_grad():
    volume = geometry.flosp(feature_map, grid, cam, coords=coords)
print(f"\nFLoSP volume: {tuple(volume.shape)}")

ray_grid = GridSpec(dims=(1, 1, 10), voxel_size=0.3, origin=(-0.15, -0.15, 0.6))
with no_grad():
    ray_features = geometry.flosp(feature_map, ray_grid, cam).data.reshape(8, 10)
print("feature spread along one optical ray (should be ~0):",
      f"{np.abs(ray_features - ray_features[:, :1]).max():.2e}")

# Depth maps convert to surface occupancy: the voxel containing each pixel's
# backprojected point is marked.
depth = np.full((48, 64), 2.0, dtype=np.float32)
occ = geometry.depth_to_occupancy(depth, grid, cam).data
print(f"\nflat 2 m depth map marks {int(occ.sum())} surface voxels")
