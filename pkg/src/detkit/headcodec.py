"""Raw head-tensor layout and grid-sensitive box decoding.

A head tensor for one pyramid level has shape ``(A * per_anchor, grid_h, grid_w)``
where ``per_anchor = K + 5`` (``K + 6`` with the IoU-aware channel). Channels
for anchor slot ``a`` start at ``a * per_anchor`` and are ordered
``[cls(K), p_x, p_y, p_w, p_h, obj, iou?]``.

Center decode with scale ``alpha``::

    x = s * (g_x + alpha * sigmoid(p_x) - (alpha - 1) / 2)

With ``alpha = 1`` this is the plain YOLOv3 decode ``s * (g_x + sigmoid(p_x))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .geometry import Box
from .nms import Detection, fuse_scores

# YOLOv3 COCO anchors, three per level (w, h) in pixels.
DEFAULT_ANCHORS: dict[int, tuple[tuple[float, float], ...]] = {
    3: ((10.0, 13.0), (16.0, 30.0), (33.0, 23.0)),
    4: ((30.0, 61.0), (62.0, 45.0), (59.0, 119.0)),
    5: ((116.0, 90.0), (156.0, 198.0), (373.0, 326.0)),
}


class ShapeMismatchError(ValueError):
    """Head tensor does not agree with the declared layout or level geometry."""


class EncodeRangeError(ValueError):
    """Box center cannot be represented from the requested cell at this alpha."""


@dataclass(frozen=True)
class HeadLayout:
    num_classes: int
    anchors_per_cell: int = 3
    iou_aware: bool = False

    def __post_init__(self):
        if self.num_classes < 1 or self.anchors_per_cell < 1:
            raise ValueError("num_classes and anchors_per_cell must be >= 1")

    @property
    def per_anchor(self) -> int:
        return self.num_classes + (6 if self.iou_aware else 5)

    @property
    def channels(self) -> int:
        return self.anchors_per_cell * self.per_anchor

    # Offsets inside one anchor's channel block.
    @property
    def box_offset(self) -> int:
        return self.num_classes

    @property
    def obj_offset(self) -> int:
        return self.num_classes + 4

    @property
    def iou_offset(self) -> int:
        if not self.iou_aware:
            raise AttributeError("layout has no IoU-aware channel")
        return self.num_classes + 5

    def split(self, head: np.ndarray) -> np.ndarray:
        """View ``(C, gh, gw)`` as ``(A, per_anchor, gh, gw)``."""
        if head.ndim != 3 or head.shape[0] != self.channels:
            raise ShapeMismatchError(
                f"expected {self.channels} channels (A={self.anchors_per_cell}, "
                f"K={self.num_classes}, iou_aware={self.iou_aware}), got shape {head.shape}"
            )
        return head.reshape(self.anchors_per_cell, self.per_anchor, *head.shape[1:])


@dataclass(frozen=True)
class PyramidLevel:
    """One FPN output level: stride ``2**level`` over a ``W x H`` input."""

    level: int
    image_width: int
    image_height: int
    anchors: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        if not self.anchors:
            object.__setattr__(self, "anchors", DEFAULT_ANCHORS[self.level])
        object.__setattr__(self, "anchors", tuple((float(w), float(h)) for w, h in self.anchors))
        s = self.stride
        if self.image_width % s or self.image_height % s or self.image_width <= 0 or self.image_height <= 0:
            raise ValueError(
                f"image size {self.image_width}x{self.image_height} not divisible by stride {s}"
            )

    @property
    def stride(self) -> int:
        return 2 ** self.level

    @property
    def grid_w(self) -> int:
        return self.image_width // self.stride

    @property
    def grid_h(self) -> int:
        return self.image_height // self.stride


def default_levels(width: int, height: int, levels=(3, 4, 5)) -> list[PyramidLevel]:
    return [PyramidLevel(l, width, height) for l in levels]


@dataclass(frozen=True)
class DecodeConfig:
    alpha: float = 1.05
    score_threshold: float = 0.005
    wh_clamp: float = 10.0
    clamp_to_image: bool = True
    # Ignore the IoU channel in score fusion even when the layout has one.
    use_iou_aware: bool = True

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")


def decode_center(p, g, s, alpha):
    """Grid-sensitive center decode along one axis; vectorizes over numpy inputs."""
    return s * (g + alpha * expit(p) - (alpha - 1.0) / 2.0)


def decode_size(p, anchor, clamp=10.0):
    return anchor * np.exp(np.clip(p, -clamp, clamp))


def encode_center(x, g, s, alpha):
    """Inverse of :func:`decode_center`; raises when the offset leaves (0, 1)."""
    u = center_offset(x, g, s, alpha)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise EncodeRangeError(f"center offset {u} outside (0, 1) for cell {g}, stride {s}, alpha {alpha}")
    return logit(u)


def center_offset(x, g, s, alpha):
    """Sigmoid value needed to decode onto ``x`` from cell ``g``."""
    return (np.asarray(x) / s - g + (alpha - 1.0) / 2.0) / alpha


def encode_size(w, anchor):
    return np.log(np.asarray(w) / anchor)


def encode(box: Box, cell: tuple[int, int], anchor: tuple[float, float], stride: float, alpha: float):
    """Raw ``(p_x, p_y, p_w, p_h)`` that decode exactly onto ``box``."""
    if box.width <= 0 or box.height <= 0:
        raise EncodeRangeError(f"degenerate box {box}")
    cx, cy = box.center
    px = float(encode_center(cx, cell[0], stride, alpha))
    py = float(encode_center(cy, cell[1], stride, alpha))
    pw = float(encode_size(box.width, anchor[0]))
    ph = float(encode_size(box.height, anchor[1]))
    return px, py, pw, ph


def decode_box(raw, cell, anchor, stride, alpha, clamp=10.0) -> Box:
    px, py, pw, ph = raw
    cx = decode_center(px, cell[0], stride, alpha)
    cy = decode_center(py, cell[1], stride, alpha)
    w = decode_size(pw, anchor[0], clamp)
    h = decode_size(ph, anchor[1], clamp)
    return Box.from_cxcywh(float(cx), float(cy), float(w), float(h))


def boundary_offsets(alpha: float) -> tuple[float, float]:
    """Sigmoid values that place a center on the left and right cell edges."""
    return (alpha - 1.0) / (2.0 * alpha), (alpha + 1.0) / (2.0 * alpha)


def boundary_reachable(alpha: float) -> bool:
    lo, hi = boundary_offsets(alpha)
    return 0.0 < lo < 1.0 and 0.0 < hi < 1.0


def decode_level_arrays(head: np.ndarray, layout: HeadLayout, level: PyramidLevel, cfg: DecodeConfig):
    """Dense decode of every slot.

    Returns a dict of arrays shaped ``(grid_h, grid_w, A, ...)`` so that a
    C-order flatten walks cells row-major, then anchor slots.
    """
    head = np.asarray(head, dtype=np.float64)
    parts = layout.split(head)
    if parts.shape[2:] != (level.grid_h, level.grid_w):
        raise ShapeMismatchError(
            f"grid {parts.shape[2:]} does not match level {level.level} grid "
            f"{(level.grid_h, level.grid_w)}"
        )
    if len(level.anchors) != layout.anchors_per_cell:
        raise ShapeMismatchError(
            f"level {level.level} has {len(level.anchors)} anchors, layout expects {layout.anchors_per_cell}"
        )
    parts = np.transpose(parts, (2, 3, 0, 1))  # (gh, gw, A, per_anchor)
    K = layout.num_classes
    s = level.stride
    gy, gx = np.meshgrid(np.arange(level.grid_h), np.arange(level.grid_w), indexing="ij")
    anchors = np.asarray(level.anchors)
    cx = decode_center(parts[..., K], gx[..., None], s, cfg.alpha)
    cy = decode_center(parts[..., K + 1], gy[..., None], s, cfg.alpha)
    w = decode_size(parts[..., K + 2], anchors[:, 0], cfg.wh_clamp)
    h = decode_size(parts[..., K + 3], anchors[:, 1], cfg.wh_clamp)
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if cfg.clamp_to_image:
        boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0.0, level.image_width)
        boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0.0, level.image_height)
    cls_prob = expit(parts[..., :K])
    obj = expit(parts[..., K + 4])
    if layout.iou_aware and cfg.use_iou_aware:
        iou_pred = expit(parts[..., K + 5])
    else:
        iou_pred = np.ones_like(obj)
    return {"boxes": boxes, "cls_prob": cls_prob, "obj": obj, "iou_pred": iou_pred}


def decode_level(head: np.ndarray, layout: HeadLayout, level: PyramidLevel, cfg: DecodeConfig | None = None,
                 keep_class_probs: bool = False) -> list[Detection]:
    """Decode one level into candidates whose fused score clears the threshold.

    Each (cell, anchor) slot yields at most one candidate, labelled with its
    most probable class. Output order is row-major over cells, then anchor.
    """
    cfg = cfg or DecodeConfig()
    d = decode_level_arrays(head, layout, level, cfg)
    A = layout.anchors_per_cell
    boxes = d["boxes"].reshape(-1, 4)
    cls_prob = d["cls_prob"].reshape(-1, layout.num_classes)
    obj = d["obj"].reshape(-1)
    iou_pred = d["iou_pred"].reshape(-1)
    best = np.argmax(cls_prob, axis=1)
    best_prob = cls_prob[np.arange(len(best)), best]
    score = fuse_scores(best_prob, obj, iou_pred)
    out = []
    for i in np.flatnonzero(score >= cfg.score_threshold):
        cell_index, anchor_slot = divmod(int(i), A)
        gy, gx = divmod(cell_index, level.grid_w)
        out.append(Detection(
            box=Box(*(float(v) for v in boxes[i])),
            class_id=int(best[i]),
            cls_prob=float(best_prob[i]),
            objectness=float(obj[i]),
            iou_pred=float(iou_pred[i]),
            score=float(score[i]),
            class_probs=tuple(float(v) for v in cls_prob[i]) if keep_class_probs else None,
            slot=(level.level, gx, gy, anchor_slot),
        ))
    return out
