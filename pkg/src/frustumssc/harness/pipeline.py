"""End-to-end model: image -> 2D dual-head features -> line-of-sight
unprojection per scale and modality -> frustum-ordered 3D decoding ->
per-voxel class logits, plus the loss bundle used for training."""

import numpy as np

from .. import geometry, objectives
from ..decoder3d import FrustumMambaDecoder, stage_orders
from ..errors import NumericalError
from ..nn import Module
from ..numerics import no_grad, ops
from ..numerics.tensor import Tensor


class SceneCompleter(Module):
    """The full monocular scene completion network for one RunConfig."""

    def __init__(self, config):
        super().__init__()
        from ..encoder2d import DualHeadEncoder  # local to keep import graph flat

        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = DualHeadEncoder(
            image_h=config.image_h,
            image_w=config.image_w,
            patch=config.patch,
            width=config.width_2d,
            n_levels=config.n_levels,
            n_heads=config.n_heads,
            rng=rng,
            mlp_ratio=config.mlp_ratio,
            injection=config.injection,
            dual=config.dual_modality,
            up_mode=config.up2d_mode,
            bn_before_relu=config.bn_before_relu,
        )
        self.decoder = FrustumMambaDecoder(
            in_ch=config.width_2d,
            n_scales=config.n_levels,
            n_classes=config.n_classes,
            rng=rng,
            n_stages=config.n_stages,
            base_ch=config.base_ch_3d,
            n_mamba_layers=config.n_mamba_layers,
            arch=config.arch,
            multi_scale=config.multi_scale,
            scan_impl=config.scan_impl,
            chunk=config.scan_chunk,
            bidirectional=config.bidirectional,
        )

        cam = config.cam()
        grid = config.grid()
        self.cam = cam
        self.grid = grid
        # data-independent caches: projections, stage orders, loss tiles
        self.coords = geometry.frustum_coords(grid, cam)
        self.orders = stage_orders(
            grid,
            cam,
            config.n_stages,
            base_bin_u=config.feature_scale,
            base_bin_v=config.feature_scale,
            depth_innermost=config.depth_innermost,
            frustum=config.frustum_order,
        )
        head_scale = 2 ** (config.n_levels - 1) / config.patch
        self.cam_head = cam.rescaled(head_scale, head_scale)
        self.coords_head = geometry.frustum_coords(grid, self.cam_head)
        self.tile_ids = objectives.frustum_tile_ids(grid, cam, config.fp_tiles, self.coords)

    def forward(self, image):
        out = self.encoder(image)
        sem_maps = out["sem_maps"] if self.config.dual_modality else None
        geo_maps = out["geo_maps"]

        def unproject(maps):
            return [
                geometry.flosp(m, self.grid, self.cam, coords=self.coords) for m in maps
            ]

        if self.config.dual_modality:
            sem_vols = unproject(sem_maps)
            geo_vols = unproject(geo_maps)
        else:
            sem_vols = unproject(geo_maps)  # single shared modality
            geo_vols = None

        logits = self.decoder(sem_vols, geo_vols, self.coords.in_view, self.orders)
        return {"logits": logits, "depth": out["depth"]}

    def predict_labels(self, image):
        with no_grad():
            logits = self.forward(image)["logits"].data
        return np.argmax(logits, axis=0)

    # ------------------------------------------------------------------
    # losses

    def occupancy_logits(self, depth_pred):
        """Soft per-voxel occupancy logits from the predicted depth map."""
        return geometry.depth_to_occupancy_logits(
            depth_pred, self.grid, self.cam_head, coords=self.coords_head
        )

    def losses(self, model_out, sample):
        cfg = self.config
        logits = model_out["logits"]
        n_out = cfg.n_classes + 1
        flat_logits = ops.reshape(logits, (n_out, -1))
        labels = sample.labels.reshape(-1).astype(np.int64)

        terms = {}
        w = cfg.loss_weights
        terms["ce"] = ops.mul(objectives.ce_loss(flat_logits, labels), w["ce"])

        probs = ops.softmax(flat_logits, axis=0)
        terms["scal_sem"] = ops.mul(objectives.scal_loss(probs, labels, mode="sem"), w["scal_sem"])
        terms["scal_geo"] = ops.mul(objectives.scal_loss(probs, labels, mode="geo"), w["scal_geo"])
        terms["fp"] = ops.mul(
            objectives.frustum_proportion_loss(
                probs, labels, self.grid, self.cam, tiles=cfg.fp_tiles, tile_ids=self.tile_ids
            ),
            w["fp"],
        )

        if cfg.sup_2d:
            terms["bce"] = ops.mul(self._depth_l1(model_out["depth"], sample), w["bce"])
        else:
            occ_logits = self.occupancy_logits(model_out["depth"])
            target = geometry.depth_to_occupancy(sample.depth, self.grid, self.cam)
            terms["bce"] = ops.mul(
                objectives.bce_loss(occ_logits, target.data.reshape(-1)), w["bce"]
            )

        total, logged = objectives.total_loss(terms)
        if not np.isfinite(total.item()):
            raise NumericalError(
                f"non-finite loss {logged} on scene seed {sample.seed}"
            )
        return total, logged

    def _depth_l1(self, depth_pred, sample):
        """2D-supervision ablation: L1 between predicted depth and ground
        truth sampled at the head's pixel centers (valid pixels only)."""
        h, w = depth_pred.shape
        step_y = sample.depth.shape[0] // h
        step_x = sample.depth.shape[1] // w
        gt = sample.depth[step_y // 2 :: step_y, step_x // 2 :: step_x][:h, :w]
        valid = np.isfinite(gt)
        if not valid.any():
            return Tensor(np.zeros((), dtype=depth_pred.data.dtype))
        mask = valid.astype(depth_pred.data.dtype)
        gt_t = Tensor(np.where(valid, gt, 0.0).astype(depth_pred.data.dtype))
        diff = ops.abs_(ops.sub(depth_pred, gt_t))
        return ops.div(ops.sum_(ops.mul(diff, Tensor(mask))), float(valid.sum()))


def scene_image_tensor(sample, dtype=None):
    return Tensor(sample.image, dtype=dtype)
