"""Score fusion and duplicate suppression: greedy NMS, sequential Soft-NMS, Matrix NMS.

Every method breaks score ties by input index so results are fully
determined by the input list.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .geometry import Box, iou_matrix


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    cls_prob: float = 1.0
    objectness: float = 1.0
    iou_pred: float = 1.0
    class_probs: tuple[float, ...] | None = dataclasses.field(default=None, compare=False, repr=False)
    # (level, g_x, g_y, anchor) of the head slot that produced it, if any.
    slot: tuple[int, int, int, int] | None = dataclasses.field(default=None, compare=False)


@dataclass(frozen=True)
class NmsConfig:
    method: Literal["greedy", "soft", "matrix"] = "matrix"
    iou_threshold: float = 0.45
    kernel: Literal["linear", "gaussian"] = "gaussian"
    sigma: float = 0.5
    post_threshold: float = 0.01
    max_detections: int = 100
    per_class: bool = True

    def __post_init__(self):
        if self.method not in ("greedy", "soft", "matrix"):
            raise ValueError(f"unknown NMS method {self.method!r}")
        if self.kernel not in ("linear", "gaussian"):
            raise ValueError(f"unknown decay kernel {self.kernel!r}")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if not 0.0 < self.post_threshold < 1.0:
            raise ValueError("post_threshold must lie in (0, 1)")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")


def fuse_scores(cls_prob, objectness, iou_pred=1.0):
    """Detection confidence: class probability x objectness x predicted IoU."""
    return cls_prob * objectness * iou_pred


def decay_kernel(u, kernel: str = "gaussian", sigma: float = 0.5):
    u = np.asarray(u, dtype=np.float64)
    if kernel == "linear":
        return 1.0 - u
    return np.exp(-(u * u) / sigma)


def _arrays(dets: Sequence[Detection]):
    boxes = np.array([d.box.as_array() for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    return boxes, scores, classes


def _score_order(scores: np.ndarray) -> np.ndarray:
    # Stable sort on negated scores: descending, ties by lower index.
    return np.argsort(-scores, kind="stable")


def _finalize(dets, indices, new_scores, cfg: NmsConfig) -> list[Detection]:
    indices = np.asarray(indices)
    order = np.lexsort((indices, -new_scores))
    keep = [i for i in order if new_scores[i] >= cfg.post_threshold][: cfg.max_detections]
    out = []
    for i in keep:
        d = dets[indices[i]]
        out.append(d if new_scores[i] == d.score else dataclasses.replace(d, score=float(new_scores[i])))
    return out


def greedy_nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray | None,
                       iou_threshold: float) -> np.ndarray:
    """Kept indices in descending score order (before any cap)."""
    order = _score_order(scores)
    if len(order) == 0:
        return order
    ious = iou_matrix(boxes)
    if classes is not None:
        ious = np.where(classes[:, None] == classes[None, :], ious, 0.0)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def greedy_nms(dets: Sequence[Detection], cfg: NmsConfig = NmsConfig(method="greedy")) -> list[Detection]:
    """Keep the best box, drop same-class boxes overlapping it above the threshold, repeat."""
    dets = list(dets)
    boxes, scores, classes = _arrays(dets)
    keep = greedy_nms_indices(boxes, scores, classes if cfg.per_class else None, cfg.iou_threshold)
    return [dets[i] for i in keep[: cfg.max_detections]]


def matrix_decay(boxes: np.ndarray, classes: np.ndarray | None, kernel: str = "gaussian",
                 sigma: float = 0.5) -> np.ndarray:
    """Decay factors for boxes already sorted by descending score.

    ``decay_j = min_{i<j} f(iou_ij) / f(max_{k<i} iou_ki)``; the top box has
    decay 1. Row reductions are plain numpy, so the result does not depend
    on how the work is scheduled.
    """
    n = len(boxes)
    if n == 0:
        return np.zeros(0)
    ious = iou_matrix(boxes)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    if classes is not None:
        mask &= classes[:, None] == classes[None, :]
    ious = np.where(mask, ious, 0.0)
    # Column max: largest overlap of box i with any higher-scored box.
    compensate = ious.max(axis=0)
    num = decay_kernel(ious, kernel, sigma)
    den = decay_kernel(compensate, kernel, sigma)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mask, num / den, np.inf)
    # Linear kernel with a fully covered predecessor: 0/0 decays to 0.
    ratio = np.where(np.isnan(ratio), 0.0, ratio)
    decay = ratio.min(axis=0)
    decay[~np.isfinite(decay)] = 1.0
    return decay


def matrix_nms(dets: Sequence[Detection], cfg: NmsConfig = NmsConfig()) -> list[Detection]:
    """Parallel score decay; returns rescored detections above ``post_threshold``."""
    dets = list(dets)
    boxes, scores, classes = _arrays(dets)
    order = _score_order(scores)
    decay = matrix_decay(boxes[order], classes[order] if cfg.per_class else None, cfg.kernel, cfg.sigma)
    return _finalize(dets, order, scores[order] * decay, cfg)


def soft_nms_scores(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray | None,
                    kernel: str = "gaussian", sigma: float = 0.5) -> np.ndarray:
    """Sequential Soft-NMS rescoring; selection order is by current decayed score."""
    n = len(scores)
    current = scores.astype(np.float64).copy()
    if n == 0:
        return current
    ious = iou_matrix(boxes)
    if classes is not None:
        ious = np.where(classes[:, None] == classes[None, :], ious, 0.0)
    remaining = np.ones(n, dtype=bool)
    for _ in range(n):
        masked = np.where(remaining, current, -np.inf)
        i = int(np.argmax(masked))  # first max, so ties go to the lower index
        remaining[i] = False
        if not remaining.any():
            break
        factor = decay_kernel(ious[i], kernel, sigma)
        current = np.where(remaining, current * factor, current)
    return current


def soft_nms_sequential(dets: Sequence[Detection], cfg: NmsConfig = NmsConfig(method="soft")) -> list[Detection]:
    dets = list(dets)
    boxes, scores, classes = _arrays(dets)
    new = soft_nms_scores(boxes, scores, classes if cfg.per_class else None, cfg.kernel, cfg.sigma)
    return _finalize(dets, np.arange(len(dets)), new, cfg)


def suppress(dets: Sequence[Detection], cfg: NmsConfig) -> list[Detection]:
    if cfg.method == "greedy":
        return greedy_nms(dets, cfg)
    if cfg.method == "soft":
        return soft_nms_sequential(dets, cfg)
    return matrix_nms(dets, cfg)
