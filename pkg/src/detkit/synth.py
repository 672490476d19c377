"""Synthetic scenes and the raw head tensors a perfect detector would emit for them.

Rendering is the inverse pipeline: assign each ground truth to its slot,
encode the box there, and saturate the confidence channels. Decoding a
noise-free render must reproduce the scene, which makes the whole
decode -> fuse -> suppress -> evaluate chain testable against its input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logit

from .assign import GroundTruthScene, assign_targets
from .geometry import Box, iou_matrix, shape_iou
from .headcodec import HeadLayout, PyramidLevel

CERTAIN_LOGIT = 12.0
IOU_CERTAIN_LOGIT = float(logit(1.0 - 1e-6))
MAX_PAIR_IOU = 0.3


@dataclass(frozen=True)
class Perturbation:
    """Std of additive gaussian logit noise per channel group."""

    box: float = 0.0
    obj: float = 0.0
    cls: float = 0.0
    iou: float = 0.0
    seed: int = 0

    @property
    def is_zero(self) -> bool:
        return self.box == self.obj == self.cls == self.iou == 0.0


@dataclass(frozen=True)
class SynthConfig:
    width: int = 608
    height: int = 608
    min_objects: int = 1
    max_objects: int = 10
    num_classes: int = 20
    min_size: float = 12.0
    max_size: float = 300.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        if self.width % 32 or self.height % 32 or self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size {self.width}x{self.height} must be positive multiples of 32")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ValueError("object count range invalid")
        if not 0 < self.min_size <= self.max_size:
            raise ValueError("box size range invalid")


def _slot_of(box: Box, levels: Sequence[PyramidLevel]):
    flat = [(li, a, aw, ah) for li, lv in enumerate(levels) for a, (aw, ah) in enumerate(lv.anchors)]
    k = int(np.argmax(shape_iou(box.width, box.height, np.array([f[2] for f in flat]),
                                np.array([f[3] for f in flat]))))
    li, a = flat[k][:2]
    s = levels[li].stride
    cx, cy = box.center
    return li, a, min(int(cx // s), levels[li].grid_w - 1), min(int(cy // s), levels[li].grid_h - 1)


def _accept(box: Box, placed: list[Box], slots: set, levels) -> bool:
    if placed and iou_matrix(box.as_array()[None], np.array([b.as_array() for b in placed])).max() > MAX_PAIR_IOU:
        return False
    return levels is None or _slot_of(box, levels) not in slots


def generate_scene(cfg: SynthConfig, image_id: str = "", levels: Sequence[PyramidLevel] | None = None) -> GroundTruthScene:
    """Random non-overlapping boxes (pairwise IoU <= 0.3), deterministic in ``cfg.seed``.

    With ``levels`` given, boxes that would share an assignment slot with an
    earlier box are rejected too, so every object survives rendering.
    """
    rng = np.random.default_rng(cfg.seed)
    target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed: list[Box] = []
    slots: set = set()
    annotations = []
    retries = 0
    max_w = min(cfg.max_size, cfg.width)
    max_h = min(cfg.max_size, cfg.height)
    while len(placed) < target and retries < cfg.max_retries:
        w = float(np.exp(rng.uniform(np.log(cfg.min_size), np.log(max_w))))
        h = float(np.exp(rng.uniform(np.log(cfg.min_size), np.log(max_h))))
        x = float(rng.uniform(0.0, cfg.width - w))
        y = float(rng.uniform(0.0, cfg.height - h))
        cls = int(rng.integers(0, cfg.num_classes))
        box = Box(x, y, x + w, y + h)
        if not _accept(box, placed, slots, levels):
            retries += 1
            continue
        placed.append(box)
        if levels is not None:
            slots.add(_slot_of(box, levels))
        annotations.append((box, cls))
    return GroundTruthScene(cfg.width, cfg.height, tuple(annotations), image_id)


def generate_boundary_scene(cfg: SynthConfig, levels: Sequence[PyramidLevel], image_id: str = "") -> GroundTruthScene:
    """Boxes shaped like the anchors with centers on multiples of 32 px.

    Such centers sit on a cell edge at every level, which is exactly where
    an un-scaled sigmoid offset cannot reach.
    """
    rng = np.random.default_rng(cfg.seed)
    target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    anchors = [a for lv in levels for a in lv.anchors]
    placed: list[Box] = []
    slots: set = set()
    annotations = []
    retries = 0
    while len(placed) < target and retries < cfg.max_retries:
        aw, ah = anchors[int(rng.integers(0, len(anchors)))]
        half_w = int(np.ceil(aw / 2 / 32))
        half_h = int(np.ceil(ah / 2 / 32))
        nx = cfg.width // 32 - 2 * half_w
        ny = cfg.height // 32 - 2 * half_h
        if nx < 0 or ny < 0:
            retries += 1
            continue
        cx = 32.0 * (half_w + int(rng.integers(0, nx + 1)))
        cy = 32.0 * (half_h + int(rng.integers(0, ny + 1)))
        box = Box.from_cxcywh(cx, cy, aw, ah)
        if not _accept(box, placed, slots, levels):
            retries += 1
            continue
        placed.append(box)
        slots.add(_slot_of(box, levels))
        annotations.append((box, int(rng.integers(0, cfg.num_classes))))
    return GroundTruthScene(cfg.width, cfg.height, tuple(annotations), image_id)


def render_raw(scene: GroundTruthScene, layout: HeadLayout, levels: Sequence[PyramidLevel],
               alpha: float = 1.05, perturbation: Perturbation = Perturbation()) -> list[np.ndarray]:
    """Raw ``(C, gh, gw)`` float64 head tensors, one per level."""
    targets = assign_targets(scene, levels, layout, alpha=alpha)
    K = layout.num_classes
    rng = np.random.default_rng(perturbation.seed)
    heads = []
    for lv, t in zip(levels, targets.levels):
        parts = np.full((layout.anchors_per_cell, layout.per_anchor, lv.grid_h, lv.grid_w), -CERTAIN_LOGIT)
        for a, gy, gx in zip(*np.nonzero(t.positive)):
            parts[a, K:K + 4, gy, gx] = t.box_target[a, gy, gx]
            parts[a, K + 4, gy, gx] = CERTAIN_LOGIT
            parts[a, t.class_index[a, gy, gx], gy, gx] = CERTAIN_LOGIT
            if layout.iou_aware:
                parts[a, K + 5, gy, gx] = IOU_CERTAIN_LOGIT
        if not perturbation.is_zero:
            groups = [(slice(0, K), perturbation.cls), (slice(K, K + 4), perturbation.box),
                      (slice(K + 4, K + 5), perturbation.obj)]
            if layout.iou_aware:
                groups.append((slice(K + 5, K + 6), perturbation.iou))
            # Every group draws its noise so a given seed fixes the same normals
            # for, e.g., the box channels no matter which other groups are on.
            for sl, std in groups:
                noise = rng.normal(0.0, 1.0, size=parts[:, sl].shape)
                if std:
                    parts[:, sl] += std * noise
        heads.append(parts.reshape(layout.channels, lv.grid_h, lv.grid_w))
    return heads
