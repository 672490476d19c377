"""Detection losses with closed-form gradients w.r.t. the raw head channels.

Terms: per-class sigmoid cross entropy, objectness BCE, L1 on encoded box
offsets, an additional IoU branch through the grid-sensitive decode, and the
IoU-aware soft-target BCE. :func:`total_loss` sums them over a head and
assembles the full gradient tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .assign import TargetMap
from .geometry import Box
from .headcodec import DecodeConfig, HeadLayout, PyramidLevel, decode_center, decode_size

IOU_EPS = 1e-9


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    obj: float = 1.0
    l1: float = 1.0
    iou: float = 1.0
    ioua: float = 1.0

    def __post_init__(self):
        for name in ("cls", "obj", "l1", "iou", "ioua"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossReport:
    terms: dict[str, float]
    total: float
    grads: list[np.ndarray] = field(default_factory=list)
    num_positive: int = 0


def _bce(x, t):
    # log(1 + e^x) - t*x, stable for large |x|.
    return np.logaddexp(0.0, x) - t * x


def cls_loss(class_logits, target_class: int, use_softmax: bool = False):
    """Sum of per-class BCE against a one-hot target (softmax CE with ``use_softmax``)."""
    x = np.asarray(class_logits, dtype=np.float64)
    if not 0 <= target_class < x.size:
        raise IndexError(f"target class {target_class} outside [0, {x.size})")
    onehot = np.zeros_like(x)
    onehot[target_class] = 1.0
    if use_softmax:
        return float(-log_softmax(x)[target_class]), softmax(x) - onehot
    return float(_bce(x, onehot).sum()), expit(x) - onehot


def obj_loss(obj_logit: float, target: float, ignore: bool = False):
    if ignore:
        return 0.0, 0.0
    return float(_bce(obj_logit, target)), float(expit(obj_logit) - target)


def l1_box_loss(raw, target):
    d = np.asarray(raw, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.abs(d).sum()), np.sign(d)


def _decode_with_jacobian(raw, cell, anchor, stride, alpha, clamp):
    """Corner box plus d(corners)/d(raw) as a ``(4, 4)`` matrix."""
    px, py, pw, ph = (float(v) for v in raw)
    cx = decode_center(px, cell[0], stride, alpha)
    cy = decode_center(py, cell[1], stride, alpha)
    w = decode_size(pw, anchor[0], clamp)
    h = decode_size(ph, anchor[1], clamp)
    sx, sy = expit(px), expit(py)
    dcx = stride * alpha * sx * (1.0 - sx)
    dcy = stride * alpha * sy * (1.0 - sy)
    dw = w if abs(pw) < clamp else 0.0
    dh = h if abs(ph) < clamp else 0.0
    corners = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    jac = np.array([
        [dcx, 0.0, -dw / 2, 0.0],
        [0.0, dcy, 0.0, -dh / 2],
        [dcx, 0.0, dw / 2, 0.0],
        [0.0, dcy, 0.0, dh / 2],
    ])
    return corners, jac


def _pick(p, g, lower: bool):
    """d max(p, g)/dp (``lower``) or d min(p, g)/dp; 1/2 on ties."""
    if p == g:
        return 0.5
    return float(p > g) if lower else float(p < g)


def iou_with_grad(pred: np.ndarray, gt: np.ndarray):
    """IoU of two corner boxes and its gradient w.r.t. the first box's corners."""
    x1, y1, x2, y2 = pred
    g1, h1, g2, h2 = gt
    iw = min(x2, g2) - max(x1, g1)
    ih = min(y2, h2) - max(y1, h1)
    pw_, ph_ = x2 - x1, y2 - y1
    ap = pw_ * ph_
    ag = (g2 - g1) * (h2 - h1)
    if iw <= 0 or ih <= 0:
        inter = 0.0
        d_inter = np.zeros(4)
    else:
        inter = iw * ih
        d_inter = np.array([
            -ih * _pick(x1, g1, True),
            -iw * _pick(y1, h1, True),
            ih * _pick(x2, g2, False),
            iw * _pick(y2, h2, False),
        ])
    union = ap + ag - inter
    if union <= 0:
        return 0.0, np.zeros(4)
    d_ap = np.array([-ph_, -pw_, ph_, pw_])
    d_union = d_ap - d_inter
    value = inter / union
    return value, (d_inter * union - inter * d_union) / (union * union)


def iou_loss(raw, gt: Box, cell, anchor, stride, alpha, form: Literal["log", "linear"] = "log",
             clamp: float = 10.0):
    """IoU branch on the decoded box: ``-ln(max(IoU, eps))`` or ``1 - IoU``."""
    corners, jac = _decode_with_jacobian(raw, cell, anchor, stride, alpha, clamp)
    value, d_iou = iou_with_grad(corners, gt.as_array())
    d_raw = d_iou @ jac
    if form == "linear":
        return 1.0 - value, -d_raw
    if value <= IOU_EPS:
        return float(-np.log(IOU_EPS)), np.zeros(4)
    return float(-np.log(value)), -d_raw / value


def measured_iou(raw, gt: Box, cell, anchor, stride, alpha, clamp: float = 10.0) -> float:
    corners, _ = _decode_with_jacobian(raw, cell, anchor, stride, alpha, clamp)
    value, _ = iou_with_grad(corners, gt.as_array())
    return value


def iou_aware_loss(iou_logit: float, measured: float):
    """BCE between the predicted IoU and the measured one, used as a soft target."""
    if not 0.0 <= measured <= 1.0:
        raise ValueError(f"measured IoU {measured} outside [0, 1]")
    return float(_bce(iou_logit, measured)), float(expit(iou_logit) - measured)


def total_loss(heads: Sequence[np.ndarray], targets: TargetMap, layout: HeadLayout,
               levels: Sequence[PyramidLevel], weights: LossWeights = LossWeights(),
               cfg: DecodeConfig = DecodeConfig(), iou_form: Literal["log", "linear"] = "log",
               use_softmax: bool = False, frozen_iou: dict | None = None) -> LossReport:
    """Weighted loss over all levels, normalized by ``max(1, #positives)``.

    ``frozen_iou`` maps positive slots ``(level_index, a, g_y, g_x)`` to the
    IoU-aware target to use instead of recomputing it. The IoU-aware target
    never carries gradient into the box channels; freezing it lets finite
    differences see the same function the analytic gradient describes.
    """
    if len(heads) != len(levels) or len(targets.levels) != len(levels):
        raise ValueError("heads, targets and levels must align")
    K = layout.num_classes
    npos = targets.num_positive
    norm = 1.0 / max(1, npos)
    sums = dict(cls=0.0, obj=0.0, l1=0.0, iou=0.0, ioua=0.0)
    grads = []
    for li, (head, lv, t) in enumerate(zip(heads, levels, targets.levels)):
        head = np.asarray(head, dtype=np.float64)
        parts = layout.split(head)
        if parts.shape[2:] != (lv.grid_h, lv.grid_w):
            raise ValueError(f"head grid {parts.shape[2:]} does not match level {lv.level}")
        g = np.zeros_like(parts)
        obj_logits = parts[:, K + 4]
        active = ~t.ignore
        obj_t = t.obj_target
        sums["obj"] += float(np.where(active, _bce(obj_logits, obj_t), 0.0).sum())
        g[:, K + 4] = np.where(active, expit(obj_logits) - obj_t, 0.0) * weights.obj * norm

        for a, gy, gx in zip(*np.nonzero(t.positive)):
            ch = parts[a, :, gy, gx]
            raw = ch[K:K + 4]
            anchor = lv.anchors[a]
            gt = Box(*t.gt_box[a, gy, gx])
            v, d = cls_loss(ch[:K], int(t.class_index[a, gy, gx]), use_softmax)
            sums["cls"] += v
            g[a, :K, gy, gx] += weights.cls * norm * d
            v, d = l1_box_loss(raw, t.box_target[a, gy, gx])
            sums["l1"] += v
            g[a, K:K + 4, gy, gx] += weights.l1 * norm * d
            v, d = iou_loss(raw, gt, (gx, gy), anchor, lv.stride, cfg.alpha, iou_form, cfg.wh_clamp)
            sums["iou"] += v
            g[a, K:K + 4, gy, gx] += weights.iou * norm * d
            if layout.iou_aware:
                key = (li, int(a), int(gy), int(gx))
                if frozen_iou is not None and key in frozen_iou:
                    m = frozen_iou[key]
                else:
                    m = measured_iou(raw, gt, (gx, gy), anchor, lv.stride, cfg.alpha, cfg.wh_clamp)
                v, d = iou_aware_loss(ch[K + 5], m)
                sums["ioua"] += v
                g[a, K + 5, gy, gx] += weights.ioua * norm * d
        grads.append(g.reshape(head.shape))
    terms = {k: v * norm for k, v in sums.items()}
    total = (weights.cls * terms["cls"] + weights.obj * terms["obj"] + weights.l1 * terms["l1"]
             + weights.iou * terms["iou"] + weights.ioua * terms["ioua"])
    return LossReport(terms=terms, total=float(total), grads=grads, num_positive=npos)


def measured_ious(heads: Sequence[np.ndarray], targets: TargetMap, layout: HeadLayout,
                  levels: Sequence[PyramidLevel], cfg: DecodeConfig = DecodeConfig()) -> dict:
    """Current IoU-aware targets per positive slot, for use as ``frozen_iou``."""
    K = layout.num_classes
    out = {}
    for li, a, gy, gx in targets.positive_slots():
        lv = levels[li]
        parts = layout.split(np.asarray(heads[li], dtype=np.float64))
        t = targets.levels[li]
        raw = parts[a, K:K + 4, gy, gx]
        out[(li, a, gy, gx)] = measured_iou(raw, Box(*t.gt_box[a, gy, gx]), (gx, gy), lv.anchors[a],
                                            lv.stride, cfg.alpha, cfg.wh_clamp)
    return out
