import itertools

import numpy as np
import pytest

from detkit.assign import CENTER_EPS, GroundTruthScene, assign_targets, prior_boxes
from detkit.geometry import Box, iou
from detkit.headcodec import HeadLayout, decode_box, default_levels
from detkit.synth import SynthConfig, generate_scene

LAYOUT = HeadLayout(num_classes=5)
LEVELS = default_levels(256, 256)


def _scene(*anns):
    return GroundTruthScene(256, 256, tuple(anns))


def test_empty_scene_all_negative():
    t = assign_targets(_scene(), LEVELS, LAYOUT)
    assert t.num_positive == 0
    assert not any(lt.ignore.any() for lt in t.levels)


def test_anchor_shaped_box_at_cell_center_encodes_to_zero():
    # Anchor (62, 45) on level 4 (stride 16); cell (5, 3) center is (88, 56).
    box = Box.from_cxcywh(88.0, 56.0, 62.0, 45.0)
    t = assign_targets(_scene((box, 2)), LEVELS, LAYOUT)
    assert t.positive_slots() == [(1, 1, 3, 5)]
    lt = t.levels[1]
    np.testing.assert_allclose(lt.box_target[1, 3, 5], 0.0, atol=1e-12)
    assert lt.class_index[1, 3, 5] == 2
    assert lt.obj_target[1, 3, 5] == 1.0


def _brute_force_slot(box, levels):
    best, slot = -1.0, None
    for li, lv in enumerate(levels):
        for a, (aw, ah) in enumerate(lv.anchors):
            inter = min(box.width, aw) * min(box.height, ah)
            s = inter / (box.area + aw * ah - inter)
            if s > best:
                best = s
                cx, cy = box.center
                slot = (li, a, min(int(cy // lv.stride), lv.grid_h - 1), min(int(cx // lv.stride), lv.grid_w - 1))
    return slot


def test_collision_last_annotation_wins():
    a = Box.from_cxcywh(100.0, 100.0, 30.0, 60.0)
    b = Box.from_cxcywh(101.0, 99.0, 32.0, 58.0)
    assert _brute_force_slot(a, LEVELS) == _brute_force_slot(b, LEVELS)
    t = assign_targets(_scene((a, 0), (b, 1)), LEVELS, LAYOUT)
    assert t.num_positive == 1
    (li, an, gy, gx), = t.positive_slots()
    # Brute-force scan of every slot confirms single occupancy.
    occupied = [s for li2, lt in enumerate(t.levels)
                for s in itertools.product([li2], *map(range, lt.positive.shape)) if lt.positive[s[1:]]]
    assert occupied == [(li, an, gy, gx)]
    assert t.levels[li].class_index[an, gy, gx] == 1
    t2 = assign_targets(_scene((a, 0), (b, 1)), LEVELS, LAYOUT, tie_break="largest")
    assert t2.levels[li].class_index[an, gy, gx] == 1  # b is larger
    t3 = assign_targets(_scene((b, 1), (a, 0)), LEVELS, LAYOUT, tie_break="largest")
    assert t3.levels[li].class_index[an, gy, gx] == 1


@pytest.mark.parametrize("seed", range(10))
def test_consistency_and_exclusivity(seed):
    cfg = SynthConfig(width=256, height=256, num_classes=5, seed=seed, max_size=200)
    scene = generate_scene(cfg)
    t = assign_targets(scene, LEVELS, LAYOUT, alpha=1.05)
    assert t.num_positive <= len(scene.annotations)
    for li, a, gy, gx in t.positive_slots():
        lt, lv = t.levels[li], LEVELS[li]
        assert not lt.ignore[a, gy, gx]
        gt = Box(*lt.gt_box[a, gy, gx])
        out = decode_box(lt.box_target[a, gy, gx], (gx, gy), lv.anchors[a], lv.stride, 1.05)
        np.testing.assert_allclose(out.as_array(), gt.as_array(), atol=1e-6)
        assert (li, a, gy, gx) == _brute_force_slot(gt, LEVELS) or t.num_positive < len(scene.annotations)
    for lt in t.levels:
        assert not (lt.positive & lt.ignore).any()


def test_deterministic():
    scene = generate_scene(SynthConfig(width=256, height=256, num_classes=5, seed=11))
    t1 = assign_targets(scene, LEVELS, LAYOUT)
    t2 = assign_targets(scene, LEVELS, LAYOUT)
    for a, b in zip(t1.levels, t2.levels):
        for name in ("positive", "ignore", "box_target", "class_index", "gt_box"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_boundary_center_is_clamped_not_dropped():
    box = Box.from_cxcywh(96.0, 96.0, 33.0, 23.0)  # level 3 anchor, center on a cell edge
    t = assign_targets(_scene((box, 0)), LEVELS, LAYOUT, alpha=1.0)
    assert t.num_positive == 1
    (li, a, gy, gx), = t.positive_slots()
    lt, lv = t.levels[li], LEVELS[li]
    out = decode_box(lt.box_target[a, gy, gx], (gx, gy), lv.anchors[a], lv.stride, 1.0)
    # Clamp moves the center by at most stride * eps.
    assert np.abs(out.as_array() - box.as_array()).max() <= lv.stride * CENTER_EPS * 1.01


def test_ignore_marks_overlapping_priors():
    box = Box.from_cxcywh(88.0, 56.0, 62.0, 45.0)
    t = assign_targets(_scene((box, 0)), LEVELS, LAYOUT, ignore_iou=0.5)
    for lt in t.levels:
        priors = prior_boxes(lt.level)
        for idx in zip(*np.nonzero(lt.ignore)):
            assert iou(Box(*priors[idx]), box) > 0.5
            assert not lt.positive[idx]
    assert sum(lt.ignore.sum() for lt in t.levels) > 0


def test_invalid_ignore_threshold():
    with pytest.raises(ValueError):
        assign_targets(_scene(), LEVELS, LAYOUT, ignore_iou=1.0)


def test_class_out_of_range():
    with pytest.raises(ValueError):
        assign_targets(_scene((Box(0, 0, 10, 10), 9)), LEVELS, LAYOUT)
