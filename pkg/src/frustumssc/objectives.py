"""Training losses and evaluation metrics.

Voxel label conventions: 0 = empty, 1..n_classes = semantic classes,
255 = ignore (outside the annotated region). All losses skip ignored voxels;
set-level losses (affinity, frustum proportion) are order-invariant in the
voxel dimension.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import DimensionError
from .numerics import ops
from .numerics.tensor import Tensor

IGNORE_LABEL = 255
_EPS = 1e-12


def _labels_array(labels):
    arr = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    return arr.reshape(-1).astype(np.int64)


def ce_loss(logits, labels, ignore=IGNORE_LABEL):
    """Mean negative log-softmax over non-ignored voxels.

    logits: [K, V]; labels: [V] ints in 0..K-1 or the ignore sentinel.
    Returns 0 (with a warning) when every voxel is ignored.
    """
    labels = _labels_array(labels)
    if logits.shape[1] != labels.size:
        raise DimensionError(
            f"ce_loss: {tuple(logits.shape)} logits vs {labels.size} labels"
        )
    valid = labels != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("ce_loss: all voxels ignored, returning 0", stacklevel=2)
        return Tensor(np.zeros((), dtype=logits.data.dtype))
    safe_labels = np.where(valid, labels, 0)
    logp = ops.log_softmax(logits, axis=0)
    picked = ops.select_class(logp, safe_labels)
    mask = valid.astype(logits.data.dtype)
    return ops.div(ops.neg(ops.sum_(ops.mul(picked, Tensor(mask)))), float(n_valid))


def bce_loss(logits, targets):
    """Mean stabilized sigmoid binary cross-entropy.

    Computed as y*softplus(-z) + (1-y)*softplus(z), which never exponentiates
    a positive argument.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    t = t.astype(logits.data.dtype).reshape(logits.shape)
    pos = ops.mul(ops.softplus(ops.neg(logits)), Tensor(t))
    negt = ops.mul(ops.softplus(logits), Tensor(1.0 - t))
    return ops.mean(ops.add(pos, negt))


def occupancy_probs(class_probs):
    """[K, V] class probabilities -> [2, V] (empty, occupied) pair, occupied
    being the non-empty probability mass."""
    k = class_probs.shape[0]
    empty = ops.narrow(class_probs, 0, 0, 1)
    occupied = ops.sum_(ops.narrow(class_probs, 0, 1, k - 1), axis=0, keepdims=True)
    return ops.concat([empty, occupied], axis=0)


def scal_loss(probs, labels, mode="sem", ignore=IGNORE_LABEL):
    """Scene-class affinity: mean of -(log precision + log recall +
    log specificity) of per-class probability mass over classes present in
    the ground truth.

    probs: [K, V] softmax rows. mode="geo" first collapses to the two-way
    (empty, occupied) split and binarizes labels.
    """
    labels = _labels_array(labels)
    if mode == "geo":
        probs = occupancy_probs(probs)
        labels = np.where(labels == ignore, ignore, (labels > 0).astype(np.int64))
    elif mode != "sem":
        raise DimensionError(f"scal_loss mode must be 'sem' or 'geo', got '{mode}'")
    if probs.shape[1] != labels.size:
        raise DimensionError(f"scal_loss: {tuple(probs.shape)} probs vs {labels.size} labels")

    valid = labels != ignore
    dtype = probs.data.dtype
    present = np.unique(labels[valid])
    total = None
    count = 0
    for cls in present:
        row = ops.reshape(ops.narrow(probs, 0, int(cls), 1), (-1,))
        is_cls = (valid & (labels == cls)).astype(dtype)
        not_cls = (valid & (labels != cls)).astype(dtype)
        n_cls = float(is_cls.sum())
        n_not = float(not_cls.sum())

        mass_cls = ops.sum_(ops.mul(row, Tensor(is_cls)))
        mass_all = ops.sum_(ops.mul(row, Tensor(valid.astype(dtype))))
        terms = []
        if mass_all.item() > 0:
            terms.append(ops.log(ops.clip_min(ops.div(mass_cls, mass_all), _EPS)))
        terms.append(ops.log(ops.clip_min(ops.div(mass_cls, n_cls), _EPS)))
        if n_not > 0:
            inv = ops.sum_(ops.mul(ops.sub(1.0, row), Tensor(not_cls)))
            terms.append(ops.log(ops.clip_min(ops.div(inv, n_not), _EPS)))
        cls_term = terms[0]
        for t in terms[1:]:
            cls_term = ops.add(cls_term, t)
        total = cls_term if total is None else ops.add(total, cls_term)
        count += 1
    if count == 0:
        return Tensor(np.zeros((), dtype=dtype))
    return ops.div(ops.neg(total), float(count))


def frustum_tile_ids(grid, cam, tiles, coords=None):
    """Assign every voxel to the image tile containing its projection.

    Returns an int array [V]; -1 marks out-of-view voxels (excluded from the
    proportion loss).
    """
    if coords is None:
        coords = geometry.frustum_coords(grid, cam)
    tu = np.clip((coords.u / (cam.image_w / tiles)).astype(np.int64), 0, tiles - 1)
    tv = np.clip((coords.v / (cam.image_h / tiles)).astype(np.int64), 0, tiles - 1)
    ids = tv * tiles + tu
    return np.where(coords.in_view, ids, -1)


def frustum_proportion_loss(probs, labels, grid, cam, tiles=4, ignore=IGNORE_LABEL, tile_ids=None):
    """Mean over image tiles of KL(gt class proportions || predicted class
    proportions), each computed over the tile's in-view voxels."""
    labels = _labels_array(labels)
    k = probs.shape[0]
    if tile_ids is None:
        tile_ids = frustum_tile_ids(grid, cam, tiles)
    usable = (tile_ids >= 0) & (labels != ignore)
    dtype = probs.data.dtype

    n_tiles = tiles * tiles
    onehot = np.zeros((labels.size, n_tiles), dtype=dtype)
    idx = np.nonzero(usable)[0]
    onehot[idx, tile_ids[idx]] = 1.0
    tile_sizes = onehot.sum(axis=0)
    occupied_tiles = np.nonzero(tile_sizes > 0)[0]
    if occupied_tiles.size == 0:
        return Tensor(np.zeros((), dtype=dtype))

    mass = ops.matmul(probs, Tensor(onehot))  # [K, T] predicted class mass per tile
    gt_counts = np.zeros((k, n_tiles), dtype=dtype)
    np.add.at(gt_counts, (labels[idx], tile_ids[idx]), 1.0)

    total = None
    for t in occupied_tiles:
        pred_mass = ops.reshape(ops.narrow(mass, 1, int(t), 1), (-1,))
        pred_prop = ops.div(pred_mass, ops.clip_min(ops.sum_(pred_mass), _EPS))
        gt_prop = gt_counts[:, t] / tile_sizes[t]
        support = gt_prop > 0
        logs = ops.log(ops.clip_min(pred_prop, _EPS))
        cross = ops.sum_(ops.mul(logs, Tensor(gt_prop)))
        entropy = float((gt_prop[support] * np.log(gt_prop[support])).sum())
        kl = ops.sub(entropy, cross)
        total = kl if total is None else ops.add(total, kl)
    return ops.div(total, float(occupied_tiles.size))


def total_loss(terms):
    """Unweighted sum of the supplied loss terms.

    Returns (total tensor, {name: float}) so the harness can log components.
    """
    logged = {name: float(t.item()) for name, t in terms.items()}
    total = None
    for t in terms.values():
        total = t if total is None else ops.add(total, t)
    return total, logged


@dataclass
class ConfusionState:
    """Accumulates per-class and occupancy TP/FP/FN; merging two states is
    equivalent to accumulating their concatenated inputs."""

    n_classes: int
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)
    occ_tp: int = 0
    occ_fp: int = 0
    occ_fn: int = 0

    def __post_init__(self):
        k = self.n_classes + 1  # empty + semantic classes
        if self.tp is None:
            self.tp = np.zeros(k, dtype=np.int64)
            self.fp = np.zeros(k, dtype=np.int64)
            self.fn = np.zeros(k, dtype=np.int64)

    def update(self, pred, gt, ignore=IGNORE_LABEL):
        pred = _labels_array(pred)
        gt = _labels_array(gt)
        if pred.size != gt.size:
            raise DimensionError(f"metrics: {pred.size} predictions vs {gt.size} labels")
        valid = gt != ignore
        pred = pred[valid]
        gt = gt[valid]
        pocc = pred > 0
        gocc = gt > 0
        self.occ_tp += int((pocc & gocc).sum())
        self.occ_fp += int((pocc & ~gocc).sum())
        self.occ_fn += int((~pocc & gocc).sum())
        for cls in range(self.n_classes + 1):
            p = pred == cls
            g = gt == cls
            self.tp[cls] += int((p & g).sum())
            self.fp[cls] += int((p & ~g).sum())
            self.fn[cls] += int((~p & g).sum())

    def merge(self, other):
        if other.n_classes != self.n_classes:
            raise DimensionError("cannot merge confusion states with different class counts")
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.occ_tp += other.occ_tp
        self.occ_fp += other.occ_fp
        self.occ_fn += other.occ_fn

    def iou(self):
        denom = self.occ_tp + self.occ_fp + self.occ_fn
        return 1.0 if denom == 0 else self.occ_tp / denom

    def per_class_iou(self):
        """IoU per semantic class (1..n_classes); NaN where the class appears
        in neither prediction nor ground truth."""
        out = np.full(self.n_classes, np.nan)
        for cls in range(1, self.n_classes + 1):
            denom = self.tp[cls] + self.fp[cls] + self.fn[cls]
            if denom > 0:
                out[cls - 1] = self.tp[cls] / denom
        return out

    def miou(self):
        per_class = self.per_class_iou()
        seen = ~np.isnan(per_class)
        return 1.0 if not seen.any() else float(per_class[seen].mean())


def metrics(pred, gt, n_classes, ignore=IGNORE_LABEL):
    """(occupancy IoU, per-class IoU array, mIoU) for one labeling."""
    state = ConfusionState(n_classes)
    state.update(pred, gt, ignore=ignore)
    return state.iou(), state.per_class_iou(), state.miou()
