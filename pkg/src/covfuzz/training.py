"""Detector loss, reverse-mode gradients, and the seeded SGD trainer.

The loss is a single-scale grid-detector objective: each ground truth is
assigned to its center cell and the anchor with the best shape IoU; matched
slots pay coordinate and objectness terms, unmatched slots pay a weighted
no-object term. Baseline and retrained models must share the exact same
recipe, which is enforced through a config hash stored in the model file.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ArgumentError, TrainingError
from .net import (CONV2D, DETECT_HEAD, LEAKY_RELU, MAXPOOL, RELU, ModelGraph,
                  _conv_backward, _leaky_backward, _maxpool_backward,
                  forward_batch, init_graph, sigmoid)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.02
    momentum: float = 0.9
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    lr_decay: float = 1.0          # multiplicative per-epoch factor
    from_scratch: bool = False
    seed: int = 7

    def __post_init__(self):
        if (self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0
                or not (0 <= self.momentum < 1) or self.lambda_coord <= 0
                or self.lambda_noobj <= 0 or not (0 < self.lr_decay <= 1)):
            raise ArgumentError("invalid training hyperparameters")

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        return TrainConfig(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _bce_with_logits(t, y):
    t = np.asarray(t, dtype=np.float64)
    return np.maximum(t, 0.0) - t * y + np.log1p(np.exp(-np.abs(t)))


def _shape_iou(w1, h1, w2, h2) -> float:
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def assign_targets(gts, graph: ModelGraph):
    """Maps each GT box to (cell_i, cell_j, anchor, tx_hat, ty_hat, tw_hat, th_hat).

    Colliding GTs fall back to the other anchor of the cell; a GT whose
    slots are all taken is dropped from the loss.
    """
    spec = graph.detect_spec()
    if spec.kind != DETECT_HEAD:
        raise ArgumentError("graph has no detect_head layer")
    sh, sw = spec.grid
    img_h, img_w = graph.input_shape[:2]
    assignments = {}
    for box in np.asarray(gts, dtype=np.float64).reshape(-1, 4):
        x1, y1, x2, y2 = box
        if not (0 <= x1 < x2 <= img_w and 0 <= y1 < y2 <= img_h):
            raise ArgumentError(f"ground truth {box} outside image bounds")
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        gw, gh = (x2 - x1) / img_w, (y2 - y1) / img_h
        j = min(int(cx / img_w * sw), sw - 1)
        i = min(int(cy / img_h * sh), sh - 1)
        ranked = sorted(range(len(spec.anchors)),
                        key=lambda b: -_shape_iou(gw, gh, *spec.anchors[b]))
        slot = None
        for b in ranked:
            if (i, j, b) not in assignments:
                slot = b
                break
        if slot is None:
            continue
        aw, ah = spec.anchors[slot]
        assignments[(i, j, slot)] = (
            cx / img_w * sw - j, cy / img_h * sh - i,
            np.log(gw / aw), np.log(gh / ah))
    return assignments


def detector_loss(raw: np.ndarray, gts, graph: ModelGraph,
                  lambda_coord: float = 5.0, lambda_noobj: float = 0.5) -> float:
    loss, _ = _loss_and_head_grad(raw, gts, graph, lambda_coord, lambda_noobj,
                                  want_grad=False)
    return loss


def _loss_and_head_grad(raw: np.ndarray, gts, graph: ModelGraph,
                        lambda_coord: float, lambda_noobj: float,
                        want_grad: bool = True):
    spec = graph.detect_spec()
    sh, sw = spec.grid
    bpc = spec.boxes_per_cell
    raw = np.asarray(raw)
    if raw.shape != (sh, sw, bpc * 5):
        raise ArgumentError(f"raw head shape {raw.shape} does not match grid")
    t = raw.reshape(sh, sw, bpc, 5).astype(np.float64)
    assignments = assign_targets(gts, graph)

    obj_logit = t[..., 4]
    matched = np.zeros((sh, sw, bpc), dtype=bool)
    for key in assignments:
        matched[key] = True

    grad = np.zeros_like(t) if want_grad else None
    loss = 0.0
    for (i, j, b), (tx_hat, ty_hat, tw_hat, th_hat) in assignments.items():
        tx, ty, tw, th, tobj = t[i, j, b]
        sx, sy = sigmoid(tx), sigmoid(ty)
        loss += lambda_coord * ((sx - tx_hat) ** 2 + (sy - ty_hat) ** 2
                                + (tw - tw_hat) ** 2 + (th - th_hat) ** 2)
        loss += float(_bce_with_logits(tobj, 1.0))
        if want_grad:
            grad[i, j, b, 0] = 2 * lambda_coord * (sx - tx_hat) * sx * (1 - sx)
            grad[i, j, b, 1] = 2 * lambda_coord * (sy - ty_hat) * sy * (1 - sy)
            grad[i, j, b, 2] = 2 * lambda_coord * (tw - tw_hat)
            grad[i, j, b, 3] = 2 * lambda_coord * (th - th_hat)
            grad[i, j, b, 4] = sigmoid(tobj) - 1.0
    noobj_logits = obj_logit[~matched]
    loss += lambda_noobj * float(_bce_with_logits(noobj_logits, 0.0).sum())
    if want_grad:
        grad[..., 4] = np.where(matched, grad[..., 4],
                                lambda_noobj * sigmoid(obj_logit))
    if not np.isfinite(loss):
        raise TrainingError("loss is non-finite")
    head_grad = grad.reshape(sh, sw, bpc * 5) if want_grad else None
    return float(loss), head_grad


def backward_gradients(graph: ModelGraph, batch, lambda_coord: float = 5.0,
                       lambda_noobj: float = 0.5, dtype=np.float32):
    """Gradient of the mean batch loss w.r.t. the flat weight vector.

    ``batch`` is a list of (image, gt_boxes) pairs. Returns (loss, grads).
    """
    if not batch:
        raise ArgumentError("empty batch")
    images = np.stack([img for img, _ in batch]).astype(dtype)
    head, _, caches = forward_batch(graph, images, dtype=dtype, keep_cache=True)
    n = len(batch)
    losses = []
    dhead = np.zeros_like(head, dtype=np.float64)
    for k, (_, gts) in enumerate(batch):
        loss_k, grad_k = _loss_and_head_grad(head[k], gts, graph,
                                             lambda_coord, lambda_noobj)
        losses.append(loss_k)
        dhead[k] = grad_k
    dx = (dhead / n).astype(dtype)

    layout = graph.weight_layout()
    grads = np.zeros(graph.weights.size, dtype=np.float64)
    for idx in range(len(graph.layers) - 1, -1, -1):
        spec = graph.layers[idx]
        if spec.kind == CONV2D:
            dx, dkernel, dbias = _conv_backward(dx, caches[idx])
            offset, count = layout[idx]
            n_kernel = dkernel.size
            grads[offset:offset + n_kernel] = dkernel.reshape(-1)
            grads[offset + n_kernel:offset + count] = dbias
        elif spec.kind == LEAKY_RELU:
            dx = _leaky_backward(dx, caches[idx], spec.slope)
        elif spec.kind == RELU:
            dx = _leaky_backward(dx, caches[idx], 0.0)
        elif spec.kind == MAXPOOL:
            dx = _maxpool_backward(dx, caches[idx])
        elif spec.kind == DETECT_HEAD:
            pass
    if not np.all(np.isfinite(grads)):
        raise TrainingError("non-finite gradients")
    return float(np.mean(losses)), grads.astype(dtype)


def batch_loss(graph: ModelGraph, batch, lambda_coord: float = 5.0,
               lambda_noobj: float = 0.5, dtype=np.float32) -> float:
    """Mean loss over a batch without gradients (finite-difference oracle)."""
    images = np.stack([img for img, _ in batch]).astype(dtype)
    head, _, _ = forward_batch(graph, images, dtype=dtype)
    return float(np.mean([
        detector_loss(head[k], gts, graph, lambda_coord, lambda_noobj)
        for k, (_, gts) in enumerate(batch)]))


def train(graph: ModelGraph, samples, config: TrainConfig,
          val_samples=None, log_path=None,
          eval_map_fn=None) -> ModelGraph:
    """Seeded SGD with momentum over (image, gt_boxes) pairs.

    Deterministic given (initial weights, samples, config). ``eval_map_fn``
    optionally computes a validation mAP per epoch for the training log.
    """
    samples = list(samples)
    if not samples:
        raise ArgumentError("training set is empty")
    if config.from_scratch:
        out = init_graph(graph.layers, graph.input_shape, seed=config.seed)
        out.meta = dict(graph.meta)
    else:
        out = graph.copy()
    out.meta["train_config_hash"] = config.config_hash()

    rng = np.random.default_rng(config.seed)
    velocity = np.zeros_like(out.weights, dtype=np.float32)
    lr = config.learning_rate
    log_rows = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            loss, grads = backward_gradients(out, batch, config.lambda_coord,
                                             config.lambda_noobj)
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged at epoch {epoch}")
            velocity = config.momentum * velocity - np.float32(lr) * grads
            out.weights = out.weights + velocity
            epoch_losses.append(loss)
        lr *= config.lr_decay
        val_map = ""
        if eval_map_fn is not None and val_samples:
            val_map = f"{eval_map_fn(out, val_samples):.4f}"
        log_rows.append((epoch, float(np.mean(epoch_losses)), val_map))
    if log_path is not None:
        with open(log_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "val_map"])
            writer.writerows(log_rows)
    return out


def check_config_match(graph: ModelGraph, config: TrainConfig) -> None:
    """Retraining must reuse the baseline recipe; enforced via the hash."""
    stored = graph.meta.get("train_config_hash")
    if stored is not None and stored != config.config_hash():
        raise ArgumentError(
            "retraining config differs from the baseline training config")
