"""YOLOv3-style training target assignment.

Each ground-truth box claims exactly one (level, cell, anchor) slot: the
anchor with the best shape-IoU across all levels, in the cell holding the
box center. Remaining slots whose prior box overlaps a ground truth above
``ignore_iou`` are excluded from the objectness loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import logit

from .geometry import Box, iou_matrix, shape_iou
from .headcodec import HeadLayout, PyramidLevel, center_offset, encode_size

CENTER_EPS = 1e-6


@dataclass(frozen=True)
class GroundTruthScene:
    width: int
    height: int
    annotations: tuple[tuple[Box, int], ...] = ()
    image_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple((b, int(c)) for b, c in self.annotations))

    def validate(self, num_classes: int | None = None) -> None:
        for box, cls in self.annotations:
            if box.x_min < 0 or box.y_min < 0 or box.x_max > self.width or box.y_max > self.height:
                raise ValueError(f"box {box} outside {self.width}x{self.height} image")
            if cls < 0 or (num_classes is not None and cls >= num_classes):
                raise ValueError(f"class {cls} outside [0, {num_classes})")

    @property
    def boxes(self) -> np.ndarray:
        return np.array([b.as_array() for b, _ in self.annotations], dtype=np.float64).reshape(-1, 4)

    @property
    def classes(self) -> np.ndarray:
        return np.array([c for _, c in self.annotations], dtype=np.int64)


@dataclass
class LevelTargets:
    """Targets for one level, indexed ``[anchor, g_y, g_x]`` like the head tensor."""

    level: PyramidLevel
    positive: np.ndarray
    ignore: np.ndarray
    box_target: np.ndarray  # (A, gh, gw, 4) encoded p*_x, p*_y, p*_w, p*_h
    class_index: np.ndarray  # -1 where not positive
    gt_box: np.ndarray  # (A, gh, gw, 4) corner form, zeros where not positive
    gt_index: np.ndarray  # annotation index owning the slot, -1 otherwise

    @property
    def obj_target(self) -> np.ndarray:
        return self.positive.astype(np.float64)


@dataclass
class TargetMap:
    levels: list[LevelTargets] = field(default_factory=list)

    @property
    def num_positive(self) -> int:
        return int(sum(t.positive.sum() for t in self.levels))

    def positive_slots(self) -> list[tuple[int, int, int, int]]:
        """``(level_index, anchor, g_y, g_x)`` of every positive, in a fixed order."""
        out = []
        for li, t in enumerate(self.levels):
            for a, gy, gx in zip(*np.nonzero(t.positive)):
                out.append((li, int(a), int(gy), int(gx)))
        return out


def _empty_level(level: PyramidLevel, A: int) -> LevelTargets:
    shape = (A, level.grid_h, level.grid_w)
    return LevelTargets(
        level=level,
        positive=np.zeros(shape, dtype=bool),
        ignore=np.zeros(shape, dtype=bool),
        box_target=np.zeros(shape + (4,)),
        class_index=np.full(shape, -1, dtype=np.int64),
        gt_box=np.zeros(shape + (4,)),
        gt_index=np.full(shape, -1, dtype=np.int64),
    )


def prior_boxes(level: PyramidLevel) -> np.ndarray:
    """Anchor boxes centered on each cell, shape ``(A, gh, gw, 4)``."""
    s = level.stride
    gy, gx = np.meshgrid(np.arange(level.grid_h), np.arange(level.grid_w), indexing="ij")
    cx = s * (gx + 0.5)
    cy = s * (gy + 0.5)
    out = []
    for aw, ah in level.anchors:
        out.append(np.stack([cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2], axis=-1))
    return np.stack(out)


def assign_targets(scene: GroundTruthScene, levels: Sequence[PyramidLevel], layout: HeadLayout,
                   ignore_iou: float = 0.7, alpha: float = 1.05,
                   tie_break: Literal["last", "largest"] = "last") -> TargetMap:
    if not 0.0 < ignore_iou < 1.0:
        raise ValueError("ignore_iou must lie in (0, 1)")
    scene.validate(layout.num_classes)
    A = layout.anchors_per_cell
    targets = TargetMap([_empty_level(lv, A) for lv in levels])

    flat = [(li, a, aw, ah) for li, lv in enumerate(levels) for a, (aw, ah) in enumerate(lv.anchors)]
    aws = np.array([f[2] for f in flat])
    ahs = np.array([f[3] for f in flat])

    for n, (box, cls) in enumerate(scene.annotations):
        w, h = box.width, box.height
        if w <= 0 or h <= 0:
            raise ValueError(f"degenerate ground truth {box}")
        li, a, aw, ah = flat[int(np.argmax(shape_iou(w, h, aws, ahs)))]
        lv = levels[li]
        s = lv.stride
        cx, cy = box.center
        gx = min(int(cx // s), lv.grid_w - 1)
        gy = min(int(cy // s), lv.grid_h - 1)
        t = targets.levels[li]
        if tie_break == "largest" and t.positive[a, gy, gx]:
            prev = scene.annotations[t.gt_index[a, gy, gx]][0]
            if prev.area >= box.area:
                continue
        ux = np.clip(center_offset(cx, gx, s, alpha), CENTER_EPS, 1.0 - CENTER_EPS)
        uy = np.clip(center_offset(cy, gy, s, alpha), CENTER_EPS, 1.0 - CENTER_EPS)
        t.positive[a, gy, gx] = True
        t.box_target[a, gy, gx] = (logit(ux), logit(uy), encode_size(w, aw), encode_size(h, ah))
        t.class_index[a, gy, gx] = cls
        t.gt_box[a, gy, gx] = box.as_array()
        t.gt_index[a, gy, gx] = n

    gts = scene.boxes
    if len(gts):
        for t in targets.levels:
            priors = prior_boxes(t.level)
            best = iou_matrix(priors.reshape(-1, 4), gts).max(axis=1).reshape(t.positive.shape)
            t.ignore = (best > ignore_iou) & ~t.positive
    return targets
