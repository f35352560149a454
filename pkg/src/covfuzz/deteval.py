"""Detection quality metrics: IoU, AP at IoU 0.5, mPC/rPC, relative change.

AP uses all-point interpolation over the precision-recall curve with greedy
score-ordered matching. Single class throughout, so mAP equals AP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .net import Detection, ModelGraph, decode_and_nms, forward_batch


@dataclass
class EvalScores:
    """Headline numbers for one model; all in [0, 1]."""

    map_clean: float
    map_adv: float
    mpc: float
    rpc: float
    map_nm: float | None = None   # naturally-mutated test set, when evaluated

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ArgumentError("iou needs boxes with positive area")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _greedy_match(preds: list[Detection], gts, iou_min: float) -> list[bool]:
    """TP flag per prediction, in descending-score order.

    Each prediction matches the unmatched ground truth with the highest
    IoU >= iou_min, if any.
    """
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].score, k))
    taken = [False] * len(gts)
    flags = [False] * len(preds)
    ordered_flags = []
    for k in order:
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            v = iou(preds[k].box, gt)
            if v >= iou_min and v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            taken[best] = True
            flags[k] = True
        ordered_flags.append(flags[k])
    return ordered_flags


def _ap_from_flags(flags: list[bool], n_gt: int) -> float:
    """All-point interpolated AP from score-ordered TP flags."""
    if n_gt == 0:
        return 1.0 if not flags else 0.0
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: max precision at any recall >= r
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def average_precision(preds: list[Detection], gts, iou_min: float = 0.5) -> float:
    """Per-image AP. Degenerate cases: no GTs and no preds -> 1.0;
    preds but no GTs -> 0.0; GTs but no preds -> 0.0."""
    gts = list(gts)
    return _ap_from_flags(_greedy_match(list(preds), gts, iou_min), len(gts))


def pooled_ap(per_image: list[tuple[list[Detection], list]],
              iou_min: float = 0.5) -> float:
    """AP over detections pooled across images (matching stays per image)."""
    scored = []
    n_gt = 0
    for img_idx, (preds, gts) in enumerate(per_image):
        gts = list(gts)
        n_gt += len(gts)
        order = sorted(range(len(preds)), key=lambda k: (-preds[k].score, k))
        flags = _greedy_match(preds, gts, iou_min)
        for rank, k in enumerate(order):
            scored.append((-preds[k].score, img_idx, rank, flags[rank]))
    scored.sort()
    return _ap_from_flags([s[3] for s in scored], n_gt)


def dataset_map(graph: ModelGraph, dataset, score_thresh: float = 0.25,
                iou_thresh: float = 0.45, iou_min: float = 0.5,
                batch_size: int = 16) -> float:
    """Pooled-AP mAP of a model over (image, gt_boxes) pairs."""
    dataset = list(dataset)
    if not dataset:
        raise ArgumentError("dataset_map needs a non-empty dataset")
    per_image = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        heads, _, _ = forward_batch(graph, np.stack([img for img, _ in chunk]))
        for raw, (_, gts) in zip(heads, chunk):
            per_image.append(
                (decode_and_nms(raw, graph, score_thresh, iou_thresh), list(gts)))
    return pooled_ap(per_image, iou_min)


def relative_change(new: float, base: float) -> float:
    """(new - base) / base in percent, the reporting convention for tables."""
    if base <= 0:
        raise ArgumentError("relative change undefined for base <= 0")
    return (new - base) / base * 100.0


def corruption_scores_from_maps(grid_maps: dict, map_clean: float) -> tuple[float, float]:
    """mPC = mean mAP over the (corruption, severity) grid; rPC = mPC / clean."""
    if not grid_maps:
        raise ArgumentError("corruption grid is empty")
    if map_clean <= 0:
        raise ArgumentError("corruption scores need map_clean > 0")
    mpc = float(np.mean([grid_maps[k] for k in sorted(grid_maps)]))
    return mpc, mpc / map_clean


def corruption_scores(graph: ModelGraph, corruption_datasets: dict,
                      map_clean: float, **map_kwargs) -> tuple[float, float]:
    """Evaluates the model on every (corruption, severity) dataset."""
    if not corruption_datasets:
        raise ArgumentError("corruption grid is empty")
    grid_maps = {key: dataset_map(graph, ds, **map_kwargs)
                 for key, ds in corruption_datasets.items()}
    return corruption_scores_from_maps(grid_maps, map_clean)
