"""COCO-style AP: greedy matching, 101-point interpolated precision, mAP over IoU 0.50:0.95."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .assign import GroundTruthScene
from .geometry import iou_matrix
from .nms import Detection

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0
MAX_DETECTIONS = 100


class UnknownImageError(KeyError):
    pass


@dataclass
class EvalResult:
    thresholds: tuple[float, ...]
    # (class_id, threshold) -> AP, only for classes with ground truth
    ap: dict[tuple[int, float], float]
    counts: dict[float, dict[str, int]]
    map: float
    ap50: float | None
    ap75: float | None
    # (class_id, threshold) -> (recall, precision) arrays for plotting
    pr_curves: dict[tuple[int, float], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def classes(self) -> list[int]:
        return sorted({c for c, _ in self.ap})

    def to_dict(self) -> dict:
        per_class = {
            str(c): {f"{t:.2f}": self.ap[(c, t)] for t in self.thresholds} for c in self.classes
        }
        return {
            "mAP": self.map,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "thresholds": list(self.thresholds),
            "per_class": per_class,
            "counts": {f"{t:.2f}": v for t, v in self.counts.items()},
        }


def _order(dets: Sequence[Detection]) -> np.ndarray:
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def match_detections(dets: Sequence[Detection], scene: GroundTruthScene, iou_thresh: float) -> list[bool]:
    """TP/FP label per detection, aligned with the input order.

    Detections are visited by descending score (ties by input index); each
    takes the highest-IoU unmatched ground truth of its class at or above
    ``iou_thresh``.
    """
    dets = list(dets)
    labels = [False] * len(dets)
    if not dets or not scene.annotations:
        return labels
    gt_boxes, gt_cls = scene.boxes, scene.classes
    det_boxes = np.array([d.box.as_array() for d in dets])
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in _order(dets):
        cand = np.where((gt_cls == dets[i].class_id) & ~taken, ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            taken[j] = True
            labels[i] = True
    return labels


def precision_recall(labels: Sequence[bool], num_gt: int):
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(labels, dtype=np.float64))
    recall = tp / num_gt if num_gt else np.zeros_like(tp)
    with np.errstate(invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1.0), 0.0)
    return recall, precision


def average_precision(labels: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP for labels listed in descending score order."""
    if num_gt <= 0 or len(labels) == 0:
        return 0.0
    recall, precision = precision_recall(labels, num_gt)
    # Running max from the right gives max precision at recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(interp.mean())


def evaluate(dets_per_image: Mapping[str, Sequence[Detection]], gts_per_image: Mapping[str, GroundTruthScene],
             thresholds: Sequence[float] = COCO_THRESHOLDS, max_detections: int = MAX_DETECTIONS) -> EvalResult:
    unknown = [k for k in dets_per_image if k not in gts_per_image]
    if unknown:
        raise UnknownImageError(f"detections reference unknown image ids: {sorted(unknown)[:5]}")
    thresholds = tuple(float(t) for t in thresholds)
    image_ids = sorted(gts_per_image)

    num_gt: dict[int, int] = {}
    for iid in image_ids:
        for _, c in gts_per_image[iid].annotations:
            num_gt[c] = num_gt.get(c, 0) + 1
    classes = sorted(num_gt)

    capped = {}
    for iid in image_ids:
        dets = list(dets_per_image.get(iid, ()))
        capped[iid] = [dets[i] for i in _order(dets)[:max_detections]]

    ap: dict[tuple[int, float], float] = {}
    curves = {}
    counts = {}
    for t in thresholds:
        pooled: dict[int, list[tuple[float, int, int, bool]]] = {}
        tp_total = fp_total = 0
        for img_rank, iid in enumerate(image_ids):
            dets = capped[iid]
            labels = match_detections(dets, gts_per_image[iid], t)
            for k, (d, lab) in enumerate(zip(dets, labels)):
                pooled.setdefault(d.class_id, []).append((d.score, img_rank, k, lab))
                tp_total += lab
                fp_total += not lab
        for c in classes:
            entries = sorted(pooled.get(c, []), key=lambda e: (-e[0], e[1], e[2]))
            labels = [e[3] for e in entries]
            ap[(c, t)] = average_precision(labels, num_gt[c])
            curves[(c, t)] = precision_recall(labels, num_gt[c])
        counts[t] = {"tp": tp_total, "fp": fp_total, "fn": sum(num_gt.values()) - tp_total}

    mean = float(np.mean(list(ap.values()))) if ap else 0.0

    def _slice(t):
        vals = [ap[(c, tt)] for c in classes for tt in thresholds if abs(tt - t) < 1e-9]
        return float(np.mean(vals)) if vals else None

    return EvalResult(thresholds=thresholds, ap=ap, counts=counts, map=mean,
                      ap50=_slice(0.5), ap75=_slice(0.75), pr_curves=curves)
