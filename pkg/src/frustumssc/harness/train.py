"""Training and evaluation loops, AdamW, CSV logging, checkpoints.

Single-threaded per step; with a fixed seed every run is bit-reproducible
on the same machine and thread count.
"""

import csv
import io
import os

import numpy as np

from ..numerics import backward, clear_graph, no_grad
from ..objectives import ConfusionState
from . import checkpoint as ckpt
from .pipeline import SceneCompleter, scene_image_tensor
from .scenes import generate_scene_set


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, named_params, lr=3e-4, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)

    def state_dict(self):
        state = {"step": np.array([self.step_count], dtype=np.int64)}
        for name in self.params:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state):
        self.step_count = int(state["step"][0])
        for name in self.params:
            self.m[name] = state[f"m.{name}"].astype(self.m[name].dtype)
            self.v[name] = state[f"v.{name}"].astype(self.v[name].dtype)


def default_scene_sets(config):
    cam, grid = config.cam(), config.grid()
    train = generate_scene_set(
        config.scene_seed, config.n_train_scenes, cam, grid, config.n_classes, config.difficulty
    )
    eval_ = generate_scene_set(
        config.scene_seed + 1000, config.n_eval_scenes, cam, grid, config.n_classes, config.difficulty
    )
    return train, eval_


def evaluate_model(model, scenes):
    """Accumulated confusion over a scene set (deterministic, grad-free)."""
    state = ConfusionState(model.config.n_classes)
    for sample in scenes:
        pred = model.predict_labels(scene_image_tensor(sample))
        state.update(pred.reshape(-1), sample.labels.reshape(-1))
    return state


def _csv_header(n_classes):
    loss_cols = ["loss_total", "loss_ce", "loss_bce", "loss_scal_sem", "loss_scal_geo", "loss_fp"]
    iou_cols = ["iou", "miou"] + [f"iou_class_{c:02d}" for c in range(1, n_classes + 1)]
    return ["epoch", "split"] + loss_cols + iou_cols


def _metrics_row(epoch, split, conf, n_classes):
    per_class = conf.per_class_iou()
    row = [str(epoch), split] + [""] * 6
    row += [f"{conf.iou():.6f}", f"{conf.miou():.6f}"]
    row += ["" if np.isnan(v) else f"{v:.6f}" for v in per_class]
    return row


def _loss_row(epoch, mean_losses, n_classes):
    order = ["ce", "bce", "scal_sem", "scal_geo", "fp"]
    total = sum(mean_losses[k] for k in order)
    row = [str(epoch), "train", f"{total:.6f}"]
    row += [f"{mean_losses[k]:.6f}" for k in order]
    row += [""] * (2 + n_classes)
    return row


def train(config, out_dir, scenes_train=None, scenes_eval=None, resume=None, log=None):
    """Full training run; writes metrics.csv and checkpoints under out_dir.

    Returns a summary dict with final/best metrics and artifact paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    log = log or (lambda msg: None)

    if scenes_train is None:
        scenes_train, generated_eval = default_scene_sets(config)
        scenes_eval = scenes_eval if scenes_eval is not None else generated_eval
    scenes_eval = scenes_eval or []
    eval_set = scenes_eval if scenes_eval else scenes_train

    model = SceneCompleter(config)
    opt = AdamW(
        dict(model.named_parameters()),
        lr=config.lr,
        weight_decay=config.weight_decay,
        beta1=config.beta1,
        beta2=config.beta2,
    )
    digest = config.digest()

    start_epoch = 0
    if resume is not None:
        state, opt_state, meta = ckpt.load_checkpoint(resume, expected_digest=digest)
        model.load_state_dict(state)
        opt.load_state_dict(opt_state)
        start_epoch = int(meta["epoch"])
        log(f"resumed from {resume} at epoch {start_epoch}")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_csv_header(config.n_classes))

    best_miou = -1.0
    best_path = os.path.join(out_dir, "ckpt_best.fssc")
    final_path = os.path.join(out_dir, "ckpt_final.fssc")
    step_losses = []

    def save(path, epoch):
        meta = {
            "epoch": epoch,
            "schema": ckpt.SCHEMA_VERSION,
            "best_miou": best_miou,
            "config": config.to_dict(),
        }
        state = model.state_dict()
        ckpt.save_checkpoint(path, state, meta, digest, opt_state=opt.state_dict())

    model.train()
    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng((config.seed, epoch)).permutation(len(scenes_train))
        sums = {k: 0.0 for k in ("ce", "bce", "scal_sem", "scal_geo", "fp")}
        for idx in order:
            sample = scenes_train[idx]
            clear_graph()
            model.zero_grad()
            out = model(scene_image_tensor(sample))
            total, logged = model.losses(out, sample)
            backward(total)
            opt.step()
            for key in sums:
                sums[key] += logged[key]
            step_losses.append(sum(logged.values()))
        clear_graph()
        mean_losses = {k: v / len(scenes_train) for k, v in sums.items()}
        writer.writerow(_loss_row(epoch + 1, mean_losses, config.n_classes))

        is_eval_epoch = (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs
        if is_eval_epoch:
            conf = evaluate_model(model, eval_set)
            writer.writerow(_metrics_row(epoch + 1, "eval", conf, config.n_classes))
            log(
                f"epoch {epoch + 1}: loss {sum(mean_losses.values()):.4f} "
                f"iou {conf.iou():.3f} miou {conf.miou():.3f}"
            )
            if conf.miou() > best_miou:
                best_miou = conf.miou()
                save(best_path, epoch + 1)
        if (epoch + 1) % config.ckpt_every == 0:
            save(os.path.join(out_dir, f"ckpt_epoch_{epoch + 1:04d}.fssc"), epoch + 1)

    save(final_path, config.epochs)
    final_conf = evaluate_model(model, eval_set)

    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())

    return {
        "final_iou": final_conf.iou(),
        "final_miou": final_conf.miou(),
        "best_miou": best_miou,
        "csv_path": csv_path,
        "ckpt_final": final_path,
        "ckpt_best": best_path if best_miou >= 0 else None,
        "step_losses": step_losses,
        "model": model,
    }


def load_model(path, force=False, config=None):
    """Instantiate a SceneCompleter from a checkpoint (config comes from the
    checkpoint metadata unless explicitly overridden)."""
    from .config import RunConfig

    state, _, meta = ckpt.load_checkpoint(path, expected_digest=None)
    cfg = config or RunConfig.from_dict(meta["config"])
    if config is not None and config.digest() != RunConfig.from_dict(meta["config"]).digest():
        if not force:
            # re-read with digest enforcement for the standard error message
            ckpt.load_checkpoint(path, expected_digest=config.digest(), force=False)
    model = SceneCompleter(cfg)
    model.load_state_dict(state)
    return model, meta


def evaluate_to_rows(model, scenes):
    """Evaluation CSV rows (header + one aggregate row)."""
    conf = evaluate_model(model, scenes)
    header = _csv_header(model.config.n_classes)
    row = _metrics_row("-", "eval", conf, model.config.n_classes)
    return [header, row], conf
