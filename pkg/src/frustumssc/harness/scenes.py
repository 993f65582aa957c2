"""Synthetic scene generation and the on-disk scene format.

A scene is a floor slab plus a handful of axis-aligned colored boxes placed
inside the camera frustum. The image is flat class color shaded by depth;
depth comes from exact ray/box intersection through pixel centers (+inf
where nothing is hit). Voxels are labeled by the box they overlap (floor
first, later boxes win), which guarantees the rendered surface voxels are a
subset of the occupied voxels.
"""

import io
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ContractError
from ..geometry import CameraModel, GridSpec

SCENE_MAGIC = "fssc-scene 1"

# class 0 = empty/background, 1 = floor, 2.. = objects
PALETTE = np.array(
    [
        [0.10, 0.10, 0.12],  # background
        [0.55, 0.45, 0.30],  # floor
        [0.85, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.95, 0.80, 0.15],
        [0.80, 0.25, 0.80],
        [0.15, 0.80, 0.80],
        [0.95, 0.55, 0.15],
        [0.55, 0.25, 0.85],
        [0.45, 0.70, 0.10],
        [0.90, 0.35, 0.55],
        [0.35, 0.55, 0.75],
        [0.70, 0.70, 0.70],
    ],
    dtype=np.float32,
)

_DIFFICULTY = {
    # (min boxes, max boxes, min half extent, max half extent)
    "easy": (2, 4, 0.30, 0.60),
    "medium": (2, 8, 0.20, 0.55),
    "hard": (6, 8, 0.15, 0.40),
}


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    cls: int


@dataclass
class SceneSample:
    image: np.ndarray  # [3, H, W] float32
    depth: np.ndarray  # [H, W] float32 meters, +inf where empty
    labels: np.ndarray  # grid dims, uint8
    cam: CameraModel
    grid: GridSpec
    seed: int
    difficulty: str = "medium"


def _ray_box_depth(dirs, lo, hi):
    """Entry depth (along the optical axis) of origin rays into one box.

    dirs has unit z component, so the ray parameter equals metric depth.
    Returns +inf where the ray misses.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo[None, :] / dirs
        t2 = hi[None, :] / dirs
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # axis-parallel rays: inside the slab iff 0 lies between the planes
    parallel = dirs == 0.0
    inside = (lo[None, :] <= 0.0) & (0.0 <= hi[None, :])
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
    t_enter = near.max(axis=1)
    t_exit = far.min(axis=1)
    hit = (t_exit >= t_enter) & (t_enter > 1e-6)
    return np.where(hit, t_enter, np.inf)


def _label_voxels(labels, grid, box):
    """Mark every voxel whose volume overlaps the box."""
    dims = np.asarray(grid.dims)
    origin = np.asarray(grid.origin)
    vs = grid.voxel_size
    lo_idx = np.maximum(np.floor((box.lo - origin) / vs).astype(np.int64), 0)
    hi_idx = np.minimum(np.ceil((box.hi - origin) / vs).astype(np.int64), dims)
    if np.any(lo_idx >= hi_idx):
        return
    labels[lo_idx[0] : hi_idx[0], lo_idx[1] : hi_idx[1], lo_idx[2] : hi_idx[2]] = box.cls


def scene_from_boxes(boxes, cam, grid, seed=0, difficulty="medium"):
    """Label the grid and render image/depth for an explicit box list.

    Labels: floor/earlier boxes first, later boxes overwrite; a voxel is
    occupied when its volume overlaps the box. Rendering: nearest entry
    point per pixel-center ray, flat class color scaled by depth.
    """
    labels = np.zeros(grid.dims, dtype=np.uint8)
    for box in boxes:
        _label_voxels(labels, grid, box)

    h, w = cam.image_h, cam.image_w
    ys, xs = np.mgrid[0:h, 0:w]
    dirs = np.stack(
        [
            (xs.reshape(-1) + 0.5 - cam.cx) / cam.fx,
            (ys.reshape(-1) + 0.5 - cam.cy) / cam.fy,
            np.ones(h * w),
        ],
        axis=1,
    )
    depth = np.full(h * w, np.inf)
    hit_cls = np.zeros(h * w, dtype=np.int64)
    for box in boxes:
        t = _ray_box_depth(dirs, box.lo, box.hi)
        closer = t < depth
        depth = np.where(closer, t, depth)
        hit_cls = np.where(closer, box.cls, hit_cls)

    shade = np.clip(1.25 - 0.18 * np.where(np.isfinite(depth), depth, 0.0), 0.25, 1.0)
    colors = PALETTE[hit_cls] * np.where(hit_cls > 0, shade, 1.0)[:, None]
    image = colors.T.reshape(3, h, w).astype(np.float32)

    return SceneSample(
        image=image,
        depth=depth.reshape(h, w).astype(np.float32),
        labels=labels,
        cam=cam,
        grid=grid,
        seed=int(seed),
        difficulty=difficulty,
    )


def generate_scene(seed, cam, grid, n_classes, difficulty="medium", floor=True, n_boxes=None):
    """Deterministic scene from one integer seed."""
    if difficulty not in _DIFFICULTY:
        raise ConfigError(f"difficulty must be one of {sorted(_DIFFICULTY)}, got '{difficulty}'")
    rng = np.random.default_rng(seed)
    n_lo, n_hi, h_lo, h_hi = _DIFFICULTY[difficulty]

    origin = np.asarray(grid.origin)
    extent = np.asarray(grid.dims) * grid.voxel_size
    gmin, gmax = origin, origin + extent
    floor_top = gmax[1] - 1.5 * grid.voxel_size

    boxes = []
    if floor:
        # floor slab: bottom of the grid (y points down), spanning x and z
        boxes.append(
            Box(
                lo=np.array([gmin[0], floor_top, gmin[2]]),
                hi=np.array([gmax[0], gmax[1], gmax[2]]),
                cls=1,
            )
        )

    count = int(rng.integers(n_lo, n_hi + 1)) if n_boxes is None else n_boxes
    for _ in range(count):
        half = rng.uniform(h_lo, h_hi, size=3)
        z = rng.uniform(gmin[2] + 0.6 + half[2], gmax[2] - 0.2 - half[2])
        # stay inside both the grid and the frustum cross-section at depth z
        x_lo = max(gmin[0] + half[0], z * (0.0 - cam.cx) / cam.fx + half[0])
        x_hi = min(gmax[0] - half[0], z * (cam.image_w - cam.cx) / cam.fx - half[0])
        y_lo = max(gmin[1] + half[1], z * (0.0 - cam.cy) / cam.fy + half[1])
        y_hi = min(floor_top - 0.5 * half[1], z * (cam.image_h - cam.cy) / cam.fy - half[1])
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        center = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi), z])
        cls = 2 + int(rng.integers(0, max(n_classes - 1, 1))) if n_classes >= 2 else 1
        boxes.append(Box(lo=center - half, hi=center + half, cls=cls))

    return scene_from_boxes(boxes, cam, grid, seed=seed, difficulty=difficulty)


def generate_scene_set(base_seed, count, cam, grid, n_classes, difficulty="medium"):
    return [
        generate_scene(base_seed + i, cam, grid, n_classes, difficulty) for i in range(count)
    ]


# ---------------------------------------------------------------------------
# scene file format: text header, then raw little-endian arrays


_DTYPES = {"float32": "<f4", "uint8": "u1"}


def save_scene(sample, path):
    header = io.StringIO()
    header.write(SCENE_MAGIC + "\n")
    header.write(f"seed: {sample.seed}\n")
    header.write(f"difficulty: {sample.difficulty}\n")
    cam = sample.cam
    header.write(
        f"camera: {cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r} {cam.image_w} {cam.image_h}\n"
    )
    grid = sample.grid
    dims = " ".join(str(d) for d in grid.dims)
    org = " ".join(repr(o) for o in grid.origin)
    header.write(f"grid: {dims} {grid.voxel_size!r} {org}\n")
    header.write(f"max-class: {PALETTE.shape[0] - 1}\n")
    header.write("palette: " + ";".join(",".join(f"{c:.4f}" for c in row) for row in PALETTE) + "\n")
    for name, arr, dtype in (
        ("image", sample.image, "float32"),
        ("depth", sample.depth, "float32"),
        ("labels", sample.labels, "uint8"),
    ):
        shape = " ".join(str(s) for s in arr.shape)
        header.write(f"array: {name} {dtype} {shape}\n")
    header.write("end-header\n")
    with open(path, "wb") as f:
        f.write(header.getvalue().encode("utf-8"))
        for arr, dtype in ((sample.image, "float32"), (sample.depth, "float32"), (sample.labels, "uint8")):
            f.write(np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes())


def load_scene(path):
    with open(path, "rb") as f:
        blob = f.read()
    marker = b"end-header\n"
    pos = blob.find(marker)
    if pos < 0 or not blob.startswith(SCENE_MAGIC.encode()):
        raise ContractError(f"{path}: not a scene file (bad magic or missing header end)")
    header = blob[:pos].decode("utf-8").splitlines()[1:]
    body = blob[pos + len(marker) :]

    fields = {}
    arrays = []
    for line in header:
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if key == "array":
            name, dtype, *shape = value.split()
            arrays.append((name, dtype, tuple(int(s) for s in shape)))
        else:
            fields[key] = value

    fx, fy, cx, cy, w, h = fields["camera"].split()
    cam = CameraModel(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
    g = fields["grid"].split()
    grid = GridSpec(
        dims=(int(g[0]), int(g[1]), int(g[2])),
        voxel_size=float(g[3]),
        origin=(float(g[4]), float(g[5]), float(g[6])),
    )

    offset = 0
    data = {}
    for name, dtype, shape in arrays:
        np_dtype = np.dtype(_DTYPES[dtype])
        nbytes = int(np.prod(shape)) * np_dtype.itemsize
        data[name] = (
            np.frombuffer(body[offset : offset + nbytes], dtype=np_dtype)
            .reshape(shape)
            .astype(dtype)
        )
        offset += nbytes
    if offset != len(body):
        raise ContractError(f"{path}: trailing bytes after declared arrays")

    return SceneSample(
        image=data["image"],
        depth=data["depth"],
        labels=data["labels"],
        cam=cam,
        grid=grid,
        seed=int(fields["seed"]),
        difficulty=fields.get("difficulty", "medium"),
    )
