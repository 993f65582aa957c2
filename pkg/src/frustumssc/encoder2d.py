"""Dual-head 2D encoder: a small ViT trunk emitting one token set per block,
twin upsampling decoders for geometry and semantics with configurable
cross-injection, and a positive depth head on the finest geometry map.

Feature-map resolution follows out_l = (image/patch) * 2^(l-1) per side, so
with three levels the finest maps sit at half the image resolution per side
(a quarter of the pixels).
"""

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .nn import BatchNorm, Conv2d, LayerNorm, Linear, Module, ModuleList, Parameter
from .numerics import ops

INJECTION_MODES = ("none", "sem_to_geo", "geo_to_sem", "both")


class PatchEmbed(Module):
    """Non-overlapping patch flattening + linear projection + learned
    positional embedding. Token order is row-major over the patch grid."""

    def __init__(self, image_h, image_w, patch, width, rng, in_ch=3):
        super().__init__()
        if image_h % patch or image_w % patch:
            raise DimensionError(
                f"image {image_h}x{image_w} not divisible by patch {patch}"
            )
        self.patch = patch
        self.grid_h = image_h // patch
        self.grid_w = image_w // patch
        self.in_ch = in_ch
        self.proj = Linear(in_ch * patch * patch, width, rng)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, (self.grid_h * self.grid_w, width)))

    @property
    def num_tokens(self):
        return self.grid_h * self.grid_w

    def forward(self, image):
        c, h, w = image.shape
        if c != self.in_ch or h != self.grid_h * self.patch or w != self.grid_w * self.patch:
            raise DimensionError(
                f"patch_embed expected [{self.in_ch},{self.grid_h * self.patch},"
                f"{self.grid_w * self.patch}], got {tuple(image.shape)}"
            )
        p = self.patch
        x = ops.reshape(image, (c, self.grid_h, p, self.grid_w, p))
        x = ops.transpose(x, (1, 3, 0, 2, 4))  # [gh, gw, c, p, p]
        x = ops.reshape(x, (self.num_tokens, c * p * p))
        return ops.add(self.proj(x), self.pos_embed)


class SelfAttention(Module):
    def __init__(self, width, n_heads, rng):
        super().__init__()
        if width % n_heads:
            raise ConfigError(f"width {width} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.qkv = Linear(width, 3 * width, rng)
        self.out = Linear(width, width, rng)
        self.last_attention = None  # detached copy, for inspection only

    def forward(self, x):
        n, width = x.shape
        h, dh = self.n_heads, self.head_dim
        qkv = self.qkv(x)
        q = ops.transpose(ops.reshape(ops.narrow(qkv, 1, 0, width), (n, h, dh)), (1, 0, 2))
        k = ops.transpose(ops.reshape(ops.narrow(qkv, 1, width, width), (n, h, dh)), (1, 0, 2))
        v = ops.transpose(ops.reshape(ops.narrow(qkv, 1, 2 * width, width), (n, h, dh)), (1, 0, 2))
        scores = ops.mul(ops.bmm(q, ops.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        attn = ops.softmax(scores, axis=-1)
        self.last_attention = attn.data.copy()
        mixed = ops.bmm(attn, v)  # [h, n, dh]
        mixed = ops.reshape(ops.transpose(mixed, (1, 0, 2)), (n, width))
        return self.out(mixed)


class TransformerBlock(Module):
    """Pre-norm self-attention + pre-norm MLP, both with residuals."""

    def __init__(self, width, n_heads, rng, mlp_ratio=2):
        super().__init__()
        self.norm1 = LayerNorm(width)
        self.attn = SelfAttention(width, n_heads, rng)
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, mlp_ratio * width, rng)
        self.fc2 = Linear(mlp_ratio * width, width, rng)

    def forward(self, x):
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.fc2(ops.silu(self.fc1(self.norm2(x)))))


class ImageEncoder(Module):
    """ViT trunk; returns the token set after every block (one per level)."""

    def __init__(self, image_h, image_w, patch, width, n_blocks, n_heads, rng, mlp_ratio=2):
        super().__init__()
        self.embed = PatchEmbed(image_h, image_w, patch, width, rng)
        self.blocks = ModuleList(
            [TransformerBlock(width, n_heads, rng, mlp_ratio) for _ in range(n_blocks)]
        )

    def forward(self, image):
        x = self.embed(image)
        outputs = []
        for block in self.blocks:
            x = block(x)
            outputs.append(x)
        return outputs


def reorganize(tokens, grid_h, grid_w):
    """Row-major token list [N, C] -> spatial map [C, grid_h, grid_w]."""
    n, c = tokens.shape
    if n != grid_h * grid_w:
        raise DimensionError(
            f"reorganize: {n} tokens cannot fill a {grid_h}x{grid_w} grid"
        )
    return ops.transpose(ops.reshape(tokens, (grid_h, grid_w, c)), (2, 0, 1))


class UpBlock(Module):
    """One decoder level: lift the level's token map to the running
    resolution, blend in the previous (coarser) output through a convolved
    2x-upsampled skip, then fuse.

    The fuse stack applies ReLU, then BatchNorm, then Conv (flip
    ``bn_before_relu`` for the conventional order).
    """

    def __init__(self, ch, level, rng, up_mode="bilinear", bn_before_relu=False):
        super().__init__()
        self.level = level  # 0-based; level 0 has no previous map
        self.up_factor = 2**level
        self.up_mode = up_mode
        self.bn_before_relu = bn_before_relu
        in_ch = ch if level == 0 else 2 * ch
        self.skip_conv = None if level == 0 else Conv2d(ch, ch, 3, rng, padding=1)
        self.bn = BatchNorm(in_ch)
        self.fuse_conv = Conv2d(in_ch, ch, 3, rng, padding=1)

    def forward(self, level_map, prev):
        x = level_map
        if self.up_factor > 1:
            x = ops.upsample2d(x, self.up_factor, mode=self.up_mode)
        if self.level == 0:
            merged = x
        else:
            if prev is None:
                raise ContractError(f"UpBlock level {self.level} needs the previous map")
            skip = ops.upsample2d(self.skip_conv(prev), 2, mode=self.up_mode)
            if skip.shape != x.shape:
                raise DimensionError(
                    f"UpBlock level {self.level}: skip {tuple(skip.shape)} vs main {tuple(x.shape)}"
                )
            merged = ops.concat([x, skip], axis=0)
        if self.bn_before_relu:
            return self.fuse_conv(ops.relu(self.bn(merged)))
        return self.fuse_conv(self.bn(ops.relu(merged)))


class FeatureDecoder(Module):
    """Cascade of UpBlocks, coarse to fine."""

    def __init__(self, ch, n_levels, rng, up_mode="bilinear", bn_before_relu=False):
        super().__init__()
        self.blocks = ModuleList(
            [UpBlock(ch, level, rng, up_mode, bn_before_relu) for level in range(n_levels)]
        )


class DepthHead(Module):
    """1x1 conv + softplus: strictly positive depth from the finest map."""

    def __init__(self, ch, rng):
        super().__init__()
        self.conv = Conv2d(ch, 1, 1, rng)

    def forward(self, feat):
        pred = ops.softplus(self.conv(feat))
        return ops.reshape(pred, (feat.shape[1], feat.shape[2]))


class DualHeadEncoder(Module):
    """Transformer trunk + geometry/semantics decoder pair + depth head.

    injection controls the per-level feature exchange between the two
    decoders; post-injection maps feed the next level. With dual=False a
    single decoder (with depth head) serves both roles and ``sem_maps`` is
    None in the output.
    """

    def __init__(
        self,
        image_h,
        image_w,
        patch,
        width,
        n_levels,
        n_heads,
        rng,
        mlp_ratio=2,
        injection="geo_to_sem",
        dual=True,
        up_mode="bilinear",
        bn_before_relu=False,
    ):
        super().__init__()
        if injection not in INJECTION_MODES:
            raise ConfigError(
                f"invalid injection mode '{injection}', expected one of {INJECTION_MODES}"
            )
        self.injection = injection
        self.dual = dual
        self.n_levels = n_levels
        self.encoder = ImageEncoder(image_h, image_w, patch, width, n_levels, n_heads, rng, mlp_ratio)
        self.dec_geo = FeatureDecoder(width, n_levels, rng, up_mode, bn_before_relu)
        self.dec_sem = (
            FeatureDecoder(width, n_levels, rng, up_mode, bn_before_relu) if dual else None
        )
        self.depth_head = DepthHead(width, rng)

    def forward(self, image):
        token_sets = self.encoder(image)[-self.n_levels :]
        gh, gw = self.encoder.embed.grid_h, self.encoder.embed.grid_w
        maps = [reorganize(tokens, gh, gw) for tokens in token_sets]

        geo_maps, sem_maps = [], []
        geo_prev = sem_prev = None
        for level in range(self.n_levels):
            geo = self.dec_geo.blocks[level](maps[level], geo_prev)
            if self.dual:
                sem = self.dec_sem.blocks[level](maps[level], sem_prev)
                if self.injection == "geo_to_sem":
                    sem = ops.add(sem, geo)
                elif self.injection == "sem_to_geo":
                    geo = ops.add(geo, sem)
                elif self.injection == "both":
                    geo, sem = ops.add(geo, sem), ops.add(sem, geo)
                sem_maps.append(sem)
                sem_prev = sem
            geo_maps.append(geo)
            geo_prev = geo

        depth = self.depth_head(geo_maps[-1])
        return {
            "geo_maps": geo_maps,
            "sem_maps": sem_maps if self.dual else None,
            "depth": depth,
        }
