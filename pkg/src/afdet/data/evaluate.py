"""COCO-style mean average precision.

Per class and IoU threshold, detections from all images are ranked by
score and greedily matched: each detection claims the unmatched ground
truth of highest IoU (at least the threshold) in its image. Unmatched
detections overlapping a crowd region by at least the threshold
(intersection over detection area) are ignored. Precision is made
monotone and sampled on the recall grid 0, 0.01, ..., 1; AP is the
right-endpoint integral over that grid, ``sum_{k=1..100} p(k/100) / 100``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..codec import Detection
from ..geometry import pairwise_iou

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
MAX_DETS = 100
RECALL_STEPS = 100


class UnsortedDetectionsError(ValueError):
    pass


@dataclass
class GroundTruth:
    boxes: np.ndarray
    classes: np.ndarray
    crowd_boxes: np.ndarray | None = None
    crowd_classes: np.ndarray | None = None


@dataclass
class EvalResult:
    thresholds: tuple[float, ...]
    per_class_ap: dict[int, list[float]]  # class -> AP per threshold
    map_per_threshold: list[float]
    map50: float
    map: float

    def as_dict(self) -> dict:
        return {
            "mAP": self.map,
            "mAP@0.5": self.map50,
            "mAP_per_threshold": {f"{t:.2f}": v for t, v in zip(self.thresholds, self.map_per_threshold)},
            "per_class_AP": {str(c): {f"{t:.2f}": v for t, v in zip(self.thresholds, aps)} for c, aps in self.per_class_ap.items()},
        }


def _crowd_overlap(det: np.ndarray, crowd: np.ndarray) -> np.ndarray:
    """Intersection over detection area, shape ``(len(det), len(crowd))``."""
    ix = np.minimum(det[:, None, 2], crowd[None, :, 2]) - np.maximum(det[:, None, 0], crowd[None, :, 0])
    iy = np.minimum(det[:, None, 3], crowd[None, :, 3]) - np.maximum(det[:, None, 1], crowd[None, :, 1])
    inter = np.maximum(ix, 0) * np.maximum(iy, 0)
    area = (det[:, 2] - det[:, 0]) * (det[:, 3] - det[:, 1])
    out = np.zeros_like(inter)
    np.divide(inter, area[:, None], out=out, where=area[:, None] > 0)
    return out


def average_precision(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    """AP from per-detection TP/FP flags already in rank order."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    precision = ctp / np.maximum(ctp + cfp, 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for k in range(1, RECALL_STEPS + 1):
        # first rank with recall >= k/100, compared in integers
        idx = np.searchsorted(ctp * RECALL_STEPS, k * n_gt, side="left")
        if idx < len(ctp):
            total += precision[idx]
    return total / RECALL_STEPS


def eval_map(detections: list[list[Detection]], ground_truth: list[GroundTruth], iou_thresholds=IOU_THRESHOLDS,
             max_dets: int = MAX_DETS) -> EvalResult:
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth must cover the same images")
    for i, dets in enumerate(detections):
        scores = [d.score for d in dets]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise UnsortedDetectionsError(f"detections for image {i} are not sorted by descending score")

    gt_classes = sorted({int(c) for g in ground_truth for c in g.classes})
    thresholds = tuple(float(t) for t in iou_thresholds)
    per_class: dict[int, list[float]] = {}
    for c in gt_classes:
        # candidates in rank order: score desc, then image order, then in-image order
        cands = []
        for img, dets in enumerate(detections):
            for d in dets[:max_dets]:
                if d.class_id == c:
                    cands.append((img, d))
        order = sorted(range(len(cands)), key=lambda i: -cands[i][1].score)
        cands = [cands[i] for i in order]
        gts = [np.asarray(g.boxes).reshape(-1, 4)[np.asarray(g.classes) == c] for g in ground_truth]
        crowds = []
        for g in ground_truth:
            if g.crowd_boxes is None or len(g.crowd_boxes) == 0:
                crowds.append(np.zeros((0, 4)))
            else:
                cc = np.asarray(g.crowd_classes) if g.crowd_classes is not None else np.full(len(g.crowd_boxes), c)
                crowds.append(np.asarray(g.crowd_boxes).reshape(-1, 4)[cc == c])
        n_gt = sum(len(b) for b in gts)
        ious = [pairwise_iou(np.array([d.box]), gts[img])[0] if len(gts[img]) else np.zeros(0) for img, d in cands]
        crowd_ov = [
            _crowd_overlap(np.array([d.box], dtype=np.float64), crowds[img])[0] if len(crowds[img]) else np.zeros(0)
            for img, d in cands
        ]
        aps = []
        for t in thresholds:
            matched = [np.zeros(len(b), dtype=bool) for b in gts]
            tp = np.zeros(len(cands))
            fp = np.zeros(len(cands))
            for k, (img, _) in enumerate(cands):
                cand = np.where(~matched[img] & (ious[k] >= t), ious[k], -1.0)
                if len(cand) and cand.max() >= 0:
                    matched[img][int(np.argmax(cand))] = True
                    tp[k] = 1
                elif len(crowd_ov[k]) and crowd_ov[k].max() >= t:
                    continue
                else:
                    fp[k] = 1
            keep = (tp + fp) > 0
            aps.append(average_precision(tp[keep], fp[keep], n_gt))
        per_class[c] = aps

    if per_class:
        per_t = [float(np.mean([per_class[c][i] for c in gt_classes])) for i in range(len(thresholds))]
    else:
        per_t = [0.0] * len(thresholds)
    map50 = per_t[thresholds.index(0.5)] if 0.5 in thresholds else float("nan")
    return EvalResult(thresholds, per_class, per_t, map50, float(np.mean(per_t)) if per_t else 0.0)
