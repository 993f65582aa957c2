"""Frustum-ordered 3D decoder: channel-attention fusion across scales,
modality fusion, voxel sequence reordering in frustum space, Mamba layers in
a 3D U-Net encoder, and the per-voxel class head.

Voxels are serialized image-plane-major: sort by quantized projected (v, u)
with continuous depth innermost, so voxels on one camera ray (which share a
line-of-sight feature) form contiguous runs. Out-of-view voxels trail in
linear-index order.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import ConfigError, ContractError, DimensionError
from .nn import BatchNorm, Conv3d, LayerNorm, Module, ModuleList, MLP
from .numerics import ops
from .numerics.tensor import Tensor
from .ssm import MambaStack


@dataclass(frozen=True)
class FrustumOrder:
    """A bijection on voxel linear indices and its inverse."""

    perm: np.ndarray
    inv_perm: np.ndarray
    dims: tuple
    scale_id: int = 0

    def __post_init__(self):
        if self.perm.shape != self.inv_perm.shape:
            raise ContractError("perm and inv_perm must have identical length")


def raster_order(grid, scale_id=0):
    """Identity (i, j, k) raster serialization, the reordering ablation."""
    idx = np.arange(grid.num_voxels, dtype=np.int64)
    return FrustumOrder(perm=idx, inv_perm=idx.copy(), dims=grid.dims, scale_id=scale_id)


def build_frustum_order(grid, cam, bin_u=1.0, bin_v=1.0, depth_innermost=True, scale_id=0):
    """Sort voxels by (v_bin, u_bin, depth) with depth innermost.

    (u, v) are image-pixel projections of voxel centers quantized onto a
    lattice of bin_u x bin_v pixels; ties break on the original linear index.
    depth_innermost=False flips to a depth-major key (depth quantized to one
    voxel) for the sequence-continuity benchmark.
    """
    coords = geometry.frustum_coords(grid, cam)
    idx = np.arange(grid.num_voxels, dtype=np.int64)
    inside = coords.in_view
    u_bin = np.floor(coords.u[inside] / bin_u)
    v_bin = np.floor(coords.v[inside] / bin_v)
    d = coords.d[inside]
    tie = idx[inside]
    if depth_innermost:
        order_in = np.lexsort((tie, d, u_bin, v_bin))
    else:
        d_bin = np.floor(d / grid.voxel_size)
        order_in = np.lexsort((tie, u_bin, v_bin, d_bin))
    perm = np.concatenate([idx[inside][order_in], idx[~inside]])
    inv = np.empty_like(perm)
    inv[perm] = idx
    return FrustumOrder(perm=perm, inv_perm=inv, dims=grid.dims, scale_id=scale_id)


def stage_orders(grid, cam, n_stages, base_bin_u, base_bin_v, depth_innermost=True, frustum=True):
    """One order per U-Net encoder stage; the grid halves and the pixel
    lattice doubles at each stage."""
    orders = []
    for s in range(n_stages):
        g = grid.downsample(2**s)
        if frustum:
            orders.append(
                build_frustum_order(
                    g,
                    cam,
                    bin_u=base_bin_u * 2**s,
                    bin_v=base_bin_v * 2**s,
                    depth_innermost=depth_innermost,
                    scale_id=s,
                )
            )
        else:
            orders.append(raster_order(g, scale_id=s))
    return orders


def reorder(volume, order):
    """[C, nx, ny, nz] -> [V, C] voxel sequence following order.perm."""
    c = volume.shape[0]
    if tuple(volume.shape[1:]) != tuple(order.dims):
        raise ContractError(
            f"reorder: volume {tuple(volume.shape[1:])} does not match order dims {order.dims}"
        )
    flat = ops.reshape(volume, (c, order.perm.size))
    return ops.take_rows(ops.transpose(flat, (1, 0)), order.perm, unique=True)


def composite(seq, order):
    """Inverse of reorder: [V, C] -> [C, nx, ny, nz]."""
    if seq.shape[0] != order.perm.size:
        raise ContractError(
            f"composite: sequence length {seq.shape[0]} vs order size {order.perm.size}"
        )
    flat = ops.transpose(ops.take_rows(seq, order.inv_perm, unique=True), (1, 0))
    return ops.reshape(flat, (seq.shape[1],) + tuple(order.dims))


def modality_fusion(sem_vol, geo_vol):
    """Elementwise sum of the two modality volumes."""
    if sem_vol.shape != geo_vol.shape:
        raise DimensionError(
            f"modality_fusion shape mismatch: {tuple(sem_vol.shape)} vs {tuple(geo_vol.shape)}"
        )
    return ops.add(sem_vol, geo_vol)


class ScaleFusion(Module):
    """Channel-attention blend of per-scale volumes: global average pooling
    per scale, an MLP to one weight per scale, softmax, weighted sum."""

    def __init__(self, n_scales, ch, rng):
        super().__init__()
        self.n_scales = n_scales
        self.mlp = MLP([n_scales * ch, ch, n_scales], rng)

    def forward(self, volumes):
        if len(volumes) != self.n_scales:
            raise DimensionError(
                f"scale_fusion expected {self.n_scales} volumes, got {len(volumes)}"
            )
        pooled = [ops.mean(v, axis=(1, 2, 3)) for v in volumes]  # [C] each
        stacked = ops.reshape(ops.concat(pooled, axis=0), (1, -1))
        weights = ops.softmax(self.mlp(stacked), axis=-1)  # [1, N_l]
        out = None
        for i, vol in enumerate(volumes):
            w = ops.reshape(ops.narrow(weights, 1, i, 1), (1, 1, 1, 1))
            term = ops.mul(vol, w)
            out = term if out is None else ops.add(out, term)
        return out

    def last_weights(self, volumes):
        """Softmax scale weights for inspection (no grad side effects)."""
        from .numerics import no_grad

        with no_grad():
            pooled = [ops.mean(v, axis=(1, 2, 3)) for v in volumes]
            stacked = ops.reshape(ops.concat(pooled, axis=0), (1, -1))
            return ops.softmax(self.mlp(stacked), axis=-1).data.reshape(-1)


class BottleneckBlock3d(Module):
    """Residual 1x1 -> 3x3 -> 1x1 bottleneck with BatchNorm and ReLU."""

    def __init__(self, ch, rng, reduction=2):
        super().__init__()
        mid = max(ch // reduction, 4)
        self.conv1 = Conv3d(ch, mid, 1, rng)
        self.bn1 = BatchNorm(mid)
        self.conv2 = Conv3d(mid, mid, 3, rng, padding=1)
        self.bn2 = BatchNorm(mid)
        self.conv3 = Conv3d(mid, ch, 1, rng)
        self.bn3 = BatchNorm(ch)

    def forward(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = ops.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        return ops.relu(ops.add(x, y))


class FrustumMambaLayer(Module):
    """Flatten -> frustum reorder -> Mamba stack -> layer norm -> composite,
    with a residual link around the whole branch."""

    def __init__(self, ch, n_mamba_layers, rng, scan_impl="chunked", chunk=64, bidirectional=False):
        super().__init__()
        self.mamba = MambaStack(
            ch, n_mamba_layers, rng, impl=scan_impl, chunk=chunk, bidirectional=bidirectional
        )
        self.norm = LayerNorm(ch)
        self.pre_norm = False  # flag: normalize before the Mamba stack instead

    def forward(self, volume, order):
        seq = reorder(volume, order)
        if self.pre_norm:
            branch = self.mamba(self.norm(seq))
        else:
            branch = self.norm(self.mamba(seq))
        return ops.add(composite(branch, order), volume)


class ConvStage(Module):
    """Stack of bottleneck residual blocks: the convolutional stand-in for a
    Frustum Mamba Layer in the architecture ablation."""

    def __init__(self, ch, n_blocks, rng):
        super().__init__()
        self.blocks = ModuleList([BottleneckBlock3d(ch, rng) for _ in range(n_blocks)])

    def forward(self, volume, order):
        del order
        for block in self.blocks:
            volume = block(volume)
        return volume


class Downsample3d(Module):
    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.conv = Conv3d(in_ch, out_ch, 3, rng, stride=2, padding=1)
        self.bn = BatchNorm(out_ch)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class UpStage3d(Module):
    """Trilinear 2x upsample, concat skip, 1x1 remap, residual block."""

    def __init__(self, in_ch, skip_ch, out_ch, rng):
        super().__init__()
        self.reduce = Conv3d(in_ch + skip_ch, out_ch, 1, rng)
        self.bn = BatchNorm(out_ch)
        self.block = BottleneckBlock3d(out_ch, rng)

    def forward(self, x, skip):
        x = ops.upsample3d(x, 2, mode="trilinear")
        x = ops.concat([x, skip], axis=0)
        x = ops.relu(self.bn(self.reduce(x)))
        return self.block(x)


class FrustumMambaDecoder(Module):
    """3D U-Net over the fused feature volume.

    Encoder stages run a FrustumMambaLayer (or ConvStage) and a stride-2
    conv downsample; the bottleneck is a plain residual block; decoder stages
    upsample, merge skips, and refine; a 1x1x1 head emits per-voxel logits
    over n_classes semantic classes plus the empty class (channel 0).
    """

    def __init__(
        self,
        in_ch,
        n_scales,
        n_classes,
        rng,
        n_stages=2,
        base_ch=64,
        n_mamba_layers=2,
        arch="mamba",
        multi_scale=True,
        scan_impl="chunked",
        chunk=64,
        bidirectional=False,
    ):
        super().__init__()
        if arch not in ("mamba", "conv"):
            raise ConfigError(f"unknown decoder arch '{arch}'")
        self.n_stages = n_stages
        self.multi_scale = multi_scale
        self.n_classes = n_classes
        self.fuse_sem = ScaleFusion(n_scales, in_ch, rng) if multi_scale else None
        self.fuse_geo = ScaleFusion(n_scales, in_ch, rng) if multi_scale else None

        chans = [base_ch * 2**s for s in range(n_stages + 1)]
        self.init_conv = Conv3d(in_ch + 1, chans[0], 3, rng, padding=1)
        self.init_bn = BatchNorm(chans[0])

        def make_stage(ch):
            if arch == "mamba":
                return FrustumMambaLayer(
                    ch, n_mamba_layers, rng, scan_impl=scan_impl, chunk=chunk,
                    bidirectional=bidirectional,
                )
            return ConvStage(ch, n_mamba_layers, rng)

        self.stages = ModuleList([make_stage(chans[s]) for s in range(n_stages)])
        self.downs = ModuleList(
            [Downsample3d(chans[s], chans[s + 1], rng) for s in range(n_stages)]
        )
        self.bottleneck = BottleneckBlock3d(chans[-1], rng)
        self.ups = ModuleList(
            [UpStage3d(chans[s + 1], chans[s], chans[s], rng) for s in range(n_stages)]
        )
        self.head = Conv3d(chans[0], n_classes + 1, 1, rng)

    def _fuse(self, volumes, fusion):
        if volumes is None:
            return None
        if self.multi_scale:
            return fusion(volumes)
        return volumes[-1]  # finest scale only

    def forward(self, sem_volumes, geo_volumes, view_mask, orders):
        """sem/geo_volumes: per-scale [C, nx, ny, nz] lists (geo may be None
        when modalities are learned jointly); view_mask: {0,1} [nx,ny,nz];
        orders: one FrustumOrder per encoder stage."""
        if len(orders) != self.n_stages:
            raise ContractError(f"expected {self.n_stages} stage orders, got {len(orders)}")
        vol = self._fuse(sem_volumes, self.fuse_sem)
        geo = self._fuse(geo_volumes, self.fuse_geo)
        if geo is not None:
            vol = modality_fusion(vol, geo)
        mask = view_mask.data if isinstance(view_mask, Tensor) else np.asarray(view_mask)
        mask_t = Tensor(mask.reshape((1,) + tuple(vol.shape[1:])).astype(vol.data.dtype))
        x = ops.relu(self.init_bn(self.init_conv(ops.concat([vol, mask_t], axis=0))))

        skips = []
        for s in range(self.n_stages):
            x = self.stages[s](x, orders[s])
            skips.append(x)
            x = self.downs[s](x)
        x = self.bottleneck(x)
        for s in reversed(range(self.n_stages)):
            x = self.ups[s](x, skips[s])
        return self.head(x)


def adjacent_feature_gap(volume, order):
    """Mean L2 distance between consecutive voxel features under an order;
    the sequence-continuity measure behind the reordering strategy."""
    data = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    c = data.shape[0]
    seq = data.reshape(c, -1).T[order.perm]
    diffs = np.diff(seq, axis=0)
    return float(np.sqrt((diffs**2).sum(axis=1)).mean())
