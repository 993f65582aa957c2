"""Run configuration: one validated flat record covering model widths,
grid/camera geometry, ablation switches, and optimization."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from ..encoder2d import INJECTION_MODES
from ..errors import ConfigError
from ..geometry import CameraModel, GridSpec


@dataclass
class RunConfig:
    # image / 2D encoder
    image_h: int = 48
    image_w: int = 64
    patch: int = 8
    width_2d: int = 64
    n_levels: int = 3
    n_heads: int = 4
    mlp_ratio: int = 2
    injection: str = "geo_to_sem"
    dual_modality: bool = True  # MM switch
    sup_2d: bool = False  # supervise depth directly instead of 3D occupancy
    up2d_mode: str = "bilinear"
    bn_before_relu: bool = False

    # camera / grid
    fx: float = 52.0
    fy: float = 52.0
    cx: float = 32.0
    cy: float = 24.0
    grid_dims: tuple = (16, 12, 16)
    voxel_size: float = 0.25
    grid_origin: tuple = (-2.0, -1.5, 0.5)
    n_classes: int = 12

    # 3D decoder
    n_stages: int = 2
    base_ch_3d: int = 64
    n_mamba_layers: int = 2
    arch: str = "mamba"
    multi_scale: bool = True  # MS switch
    frustum_order: bool = True  # FS switch
    depth_innermost: bool = True
    scan_impl: str = "sequential"
    scan_chunk: int = 64
    bidirectional: bool = False

    # losses
    fp_tiles: int = 4
    loss_weights: dict = field(
        default_factory=lambda: {"ce": 1.0, "bce": 1.0, "scal_sem": 1.0, "scal_geo": 1.0, "fp": 1.0}
    )

    # optimization / harness
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 200
    eval_every: int = 10
    ckpt_every: int = 50
    seed: int = 7
    scene_seed: int = 7
    n_train_scenes: int = 4
    n_eval_scenes: int = 0
    difficulty: str = "medium"

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.grid_origin = tuple(float(o) for o in self.grid_origin)
        self.validate()

    def validate(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_w}x{self.image_h} not divisible by patch {self.patch}"
            )
        if self.injection not in INJECTION_MODES:
            raise ConfigError(f"injection must be one of {INJECTION_MODES}, got '{self.injection}'")
        if self.arch not in ("mamba", "conv"):
            raise ConfigError(f"arch must be 'mamba' or 'conv', got '{self.arch}'")
        if self.scan_impl not in ("chunked", "sequential"):
            raise ConfigError(f"scan_impl must be 'chunked' or 'sequential', got '{self.scan_impl}'")
        if self.up2d_mode not in ("nearest", "bilinear"):
            raise ConfigError(f"up2d_mode must be 'nearest' or 'bilinear', got '{self.up2d_mode}'")
        if self.difficulty not in ("easy", "medium", "hard"):
            raise ConfigError(f"difficulty must be easy/medium/hard, got '{self.difficulty}'")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be at least 1")
        if self.n_levels < 1 or self.n_stages < 1:
            raise ConfigError("n_levels and n_stages must be positive")
        down = 2**self.n_stages
        if any(d % down for d in self.grid_dims):
            raise ConfigError(
                f"grid dims {self.grid_dims} must be divisible by 2^n_stages = {down}"
            )
        if self.width_2d % self.n_heads:
            raise ConfigError(f"width_2d {self.width_2d} not divisible by {self.n_heads} heads")
        # validates focal lengths / principal point
        self.cam()
        self.grid()

    def cam(self):
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.image_w, self.image_h)

    def grid(self):
        return GridSpec(self.grid_dims, self.voxel_size, self.grid_origin)

    @property
    def feature_scale(self):
        """Image pixels per finest-feature-map pixel (also the frustum bin base)."""
        return self.patch / 2 ** (self.n_levels - 1)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    def digest(self):
        canon = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(canon).hexdigest()
