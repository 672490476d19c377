"""Exit criteria. Each test checks one criterion at its stated tolerance and prints one PASS/FAIL line."""

import csv
import io
import json
import math
import time

import numpy as np
import pytest

from detkit.cli import main
from detkit.ema import ema_init, ema_update
from detkit.evaluation import average_precision, evaluate
from detkit.featops import DropBlockConfig, SppConfig, coordconv_augment, dropblock_mask, spp_concat
from detkit.geometry import Box
from detkit.headcodec import (
    EncodeRangeError,
    boundary_offsets,
    boundary_reachable,
    decode_box,
    decode_center,
    encode,
    encode_center,
)
from detkit.losses import (
    IOU_EPS,
    cls_loss,
    iou_aware_loss,
    iou_loss,
    l1_box_loss,
    measured_ious,
    obj_loss,
    total_loss,
)
from detkit.nms import Detection, NmsConfig, greedy_nms, matrix_nms, soft_nms_sequential

from oracles import central_difference, greedy_nms_reference, iou_table, matrix_nms_naive, rel_error, rel_error_norm
from test_losses import toy_problem

pytestmark = pytest.mark.acceptance

H, GRAD_TOL, POINTS = 1e-5, 1e-4, 100


def _worst_grad(points):
    """points: iterable of (analytic_grad, f, x).

    Returns the worst vector-norm relative error (the pass metric) and, for
    information, the worst component-wise one.
    """
    worst = worst_elem = 0.0
    for g, f, x in points:
        fd = central_difference(f, x, H)
        worst = max(worst, rel_error_norm(g, fd))
        worst_elem = max(worst_elem, rel_error(g, fd))
    return worst, worst_elem


def test_gradient_suite(criterion):
    c = criterion("gradient suite (5 terms + total, h=1e-5, norm-wise rel 1e-4, >=100 points each, <10 s)")
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()

    def cls_points(softmax):
        for _ in range(POINTS):
            x = rng.normal(0, 3, int(rng.integers(1, 21)))
            t = int(rng.integers(len(x)))
            yield cls_loss(x, t, softmax)[1], (lambda z, t=t: cls_loss(z, t, softmax)[0]), x

    def obj_points():
        for _ in range(POINTS):
            x, t = rng.normal(0, 4), float(rng.integers(2))
            yield [obj_loss(x, t)[1]], (lambda z, t=t: obj_loss(z[0], t)[0]), [x]

    def l1_points():
        for _ in range(POINTS):
            t = rng.normal(0, 2, 4)
            x = rng.normal(0, 2, 4)
            while np.any(np.abs(x - t) < 1e-3):
                x = rng.normal(0, 2, 4)
            yield l1_box_loss(x, t)[1], (lambda z, t=t: l1_box_loss(z, t)[0]), x

    def iou_points(form):
        n = 0
        while n < POINTS:
            stride = float(rng.choice([8, 16, 32]))
            cell = (int(rng.integers(0, 10)), int(rng.integers(0, 10)))
            anchor = tuple(rng.uniform(10, 200, 2))
            cx = stride * (cell[0] + rng.uniform(0.05, 0.95))
            cy = stride * (cell[1] + rng.uniform(0.05, 0.95))
            gt = Box.from_cxcywh(cx, cy, *(np.array(anchor) * rng.uniform(0.5, 2.0, 2)))
            raw = np.array(encode(gt, cell, anchor, stride, 1.05)) + rng.normal(0, 0.4, 4)
            v, g = iou_loss(raw, gt, cell, anchor, stride, 1.05, form)
            if form == "log" and v >= -math.log(IOU_EPS) - 1e-9:
                continue  # disjoint: loss is flat at the cap
            n += 1
            yield g, (lambda z, gt=gt, cell=cell, anchor=anchor, stride=stride:
                      iou_loss(z, gt, cell, anchor, stride, 1.05, form)[0]), raw

    def ioua_points():
        for _ in range(POINTS):
            x, m = rng.normal(0, 3), rng.uniform()
            yield [iou_aware_loss(x, m)[1]], (lambda z, m=m: iou_aware_loss(z[0], m)[0]), [x]

    def total_points():
        for k in range(POINTS):
            layout, level, targets, head = toy_problem(iou_aware=bool(k % 4), seed=10_000 + k)
            frozen = measured_ious([head], targets, layout, [level])
            softmax = k % 3 == 0
            form = "linear" if k % 5 == 0 else "log"
            kw = dict(frozen_iou=frozen, use_softmax=softmax, iou_form=form)
            g = total_loss([head], targets, layout, [level], **kw).grads[0]
            yield g, (lambda h, t=targets, lay=layout, lv=level, kw=kw: total_loss([h], t, lay, [lv], **kw).total), head

    groups = {
        "cls": [*cls_points(False), *cls_points(True)],
        "obj": list(obj_points()),
        "l1": list(l1_points()),
        "iou": [*iou_points("log"), *iou_points("linear")],
        "ioua": list(ioua_points()),
        "total": list(total_points()),
    }
    for name, pts in groups.items():
        worst, worst_elem = _worst_grad(pts)
        c.note(f"{name} n={len(pts)} worst={worst:.2e} (per-component {worst_elem:.2e})")
        c.check(len(pts) >= POINTS, f"{name} has only {len(pts)} points")
        c.check(worst < GRAD_TOL, f"{name} rel error {worst:.3e}")
    elapsed = time.perf_counter() - t0
    c.note(f"{elapsed:.2f}s")
    c.check(elapsed < 10.0, f"runtime {elapsed:.2f}s")
    c.finish()


def _random_instance(rng, n, tie_scores=False):
    spread = float(rng.uniform(30, 400))
    xy = rng.uniform(0, spread, (n, 2))
    wh = rng.uniform(4, 80, (n, 2))
    scores = rng.choice([0.2, 0.5, 0.8], n) if tie_scores else rng.uniform(0.01, 1.0, n)
    classes = rng.integers(0, int(rng.integers(1, 4)), n)
    return [Detection(Box(x, y, x + w, y + h), int(k), float(s))
            for (x, y), (w, h), s, k in zip(xy, wh, scores, classes)]


def _rescored(dets, cfg):
    return {(d.box, d.class_id): d.score for d in matrix_nms(dets, cfg)}


def test_matrix_nms_oracle(criterion):
    c = criterion("matrix NMS = naive closed form within 1e-6 (1000 instances, n<=128, both kernels); "
                  "= sequential soft exactly at n=2; <30 s")
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    worst, n_pairs, pair_mismatch = 0.0, 0, 0
    for k in range(1000):
        n = int(rng.integers(1, 129))
        dets = _random_instance(rng, n, tie_scores=(k % 5 == 0))
        boxes = [tuple(d.box.as_array()) for d in dets]
        scores = [d.score for d in dets]
        classes = [d.class_id for d in dets]
        per_class = k % 7 != 0
        table = iou_table(boxes)
        for kernel in ("gaussian", "linear"):
            cfg = NmsConfig(kernel=kernel, post_threshold=1e-12, max_detections=10_000, per_class=per_class)
            got = _rescored(dets, cfg)
            ref = matrix_nms_naive(boxes, scores, classes, kernel, 0.5, per_class, table)
            for d, r in zip(dets, ref):
                worst = max(worst, abs(got.get((d.box, d.class_id), 0.0) - r))
            if n == 2:
                n_pairs += 1
                pair_mismatch += matrix_nms(dets, cfg) != soft_nms_sequential(dets, cfg)
    # Dedicated n = 2 sweep, including equal scores and identical boxes.
    for k in range(1000):
        dets = _random_instance(rng, 2, tie_scores=bool(k % 2))
        if k % 10 == 0:
            dets[1] = Detection(dets[0].box, dets[0].class_id, dets[1].score)
        for kernel in ("gaussian", "linear"):
            cfg = NmsConfig(kernel=kernel, post_threshold=1e-12)
            n_pairs += 1
            pair_mismatch += matrix_nms(dets, cfg) != soft_nms_sequential(dets, cfg)
    elapsed = time.perf_counter() - t0
    c.note(f"worst |diff|={worst:.2e}; n=2 pairs {n_pairs - pair_mismatch}/{n_pairs} identical; {elapsed:.1f}s")
    c.check(worst <= 1e-6, f"max deviation {worst:.3e}")
    c.check(pair_mismatch == 0, f"{pair_mismatch} n=2 mismatches")
    c.check(elapsed < 30.0, f"runtime {elapsed:.1f}s")
    c.finish()


def test_greedy_nms_oracle(criterion):
    c = criterion("greedy NMS = O(n^2) reference exactly (1000 instances, n<=64)")
    rng = np.random.default_rng(78)
    mismatches = 0
    for k in range(1000):
        dets = _random_instance(rng, int(rng.integers(1, 65)), tie_scores=(k % 4 == 0))
        per_class = k % 9 != 0
        thr = float(rng.choice([0.3, 0.45, 0.5, 0.7]))
        cfg = NmsConfig(method="greedy", iou_threshold=thr, max_detections=10_000, per_class=per_class)
        ref = greedy_nms_reference([tuple(d.box.as_array()) for d in dets], [d.score for d in dets],
                                   [d.class_id for d in dets], thr, per_class)
        mismatches += greedy_nms(dets, cfg) != [dets[i] for i in ref]
    c.note(f"{1000 - mismatches}/1000 identical")
    c.check(mismatches == 0, f"{mismatches} mismatches")
    c.finish()


def test_codec_round_trip_and_reachability(criterion):
    c = criterion("codec: encode(decode(p)) = p within 1e-6 over 1e5 raws; boundary reachable iff alpha > 1")
    rng = np.random.default_rng(79)
    worst = 0.0
    for _ in range(100_000):
        stride = float(rng.choice([8, 16, 32]))
        cell = (int(rng.integers(0, 76)), int(rng.integers(0, 76)))
        anchor = (float(rng.uniform(8, 400)), float(rng.uniform(8, 400)))
        alpha = 1.05 if rng.random() < 0.5 else 1.0
        raw = np.array([rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-5, 5), rng.uniform(-5, 5)])
        back = np.array(encode(decode_box(raw, cell, anchor, stride, alpha), cell, anchor, stride, alpha))
        worst = max(worst, float(np.abs(back - raw).max()))
    c.note(f"worst |diff|={worst:.2e}")
    c.check(worst <= 1e-6, f"round trip error {worst:.3e}")

    for alpha, expect in ((1.0, False), (1.05, True)):
        reach = boundary_reachable(alpha)
        c.check(reach == expect, f"boundary_reachable({alpha}) = {reach}")
        lo, hi = boundary_offsets(alpha)
        edges = (0.0, 1.0)  # left and right edge of cell 0, stride 1
        hits = []
        for x in edges:
            try:
                p = encode_center(x, 0, 1.0, alpha)
                hits.append(abs(float(decode_center(p, 0, 1.0, alpha)) - x) <= 1e-12)
            except EncodeRangeError:
                hits.append(False)
        c.check(all(hits) == expect and any(hits) == expect, f"alpha={alpha} edge encodes {hits}")
        # No finite logit lands on the edge at alpha = 1; at 1.05 a finite one does.
        span = [float(decode_center(p, 0, 1.0, alpha)) for p in (-30.0, 30.0)]
        c.check((span[0] <= 0.0 and span[1] >= 1.0) == expect, f"alpha={alpha} decode span {span}")
        c.note(f"alpha={alpha}: offsets ({lo:.4f}, {hi:.4f}) reachable={reach}")
    c.finish()


def _pipeline_map(tmp_path, data_dir, nms, *extra):
    rep = tmp_path / f"report_{data_dir.name}_{nms}_{'_'.join(map(str, extra))}.json"
    code = main(["pipeline", "--in", str(data_dir), "--nms", nms, "--report", str(rep), "--no-plot", *map(str, extra)])
    assert code == 0, f"pipeline exit {code}"
    return json.loads(rep.read_text())["mAP"]


def _synth(tmp_path, name, *extra):
    out = tmp_path / name
    code = main(["synth", "--out", str(out), "--seed", "7", "--images", "50", "--classes", "20", *map(str, extra)])
    assert code == 0, f"synth exit {code}"
    return out


def test_end_to_end_oracle(criterion, tmp_path):
    c = criterion("end-to-end: seed 7, 50 images, K=20: mAP = 1.000 for greedy/soft/matrix; "
                  "box noise 0.5, 2.0 non-increasing; <60 s")
    t0 = time.perf_counter()
    clean = _synth(tmp_path, "clean")
    clean_map = {}
    for nms in ("greedy", "soft", "matrix"):
        clean_map[nms] = m = _pipeline_map(tmp_path, clean, nms)
        c.note(f"{nms} mAP={m:.4f}")
        c.check(m == 1.0, f"{nms} clean mAP {m}")
    noisy = {s: _synth(tmp_path, f"noise{s}", "--noise", s) for s in (0.5, 2.0)}
    for nms in ("greedy", "soft", "matrix"):
        maps = [clean_map[nms]] + [_pipeline_map(tmp_path, noisy[s], nms) for s in (0.5, 2.0)]
        c.note(f"{nms} noise 0/0.5/2.0: " + "/".join(f"{m:.4f}" for m in maps))
        c.check(maps[0] >= maps[1] >= maps[2], f"{nms} mAP not non-increasing {maps}")
    elapsed = time.perf_counter() - t0
    c.note(f"{elapsed:.1f}s")
    c.check(elapsed < 60.0, f"runtime {elapsed:.1f}s")
    c.finish()


def test_grid_sensitive_benefit(criterion, tmp_path):
    c = criterion("grid-sensitive: boundary-planted centers, mAP(alpha=1.05) > mAP(alpha=1.0)")
    data = _synth(tmp_path, "boundary", "--boundary", "--alpha", "1.05")
    m100 = _pipeline_map(tmp_path, data, "matrix", "--alpha", "1.0")
    m105 = _pipeline_map(tmp_path, data, "matrix", "--alpha", "1.05")
    c.note(f"alpha=1.0 mAP={m100:.4f}; alpha=1.05 mAP={m105:.4f}")
    c.check(m105 > m100, "no strict improvement")
    c.finish()


def test_ema_convergence(criterion):
    c = criterion("EMA: |shadow_t - W| = decay^t |shadow_0 - W| to 1e-12, decay in {0, 0.5, 0.9998}")
    for decay in (0.0, 0.5, 0.9998):
        w0, target = 0.0, 1.0
        state = ema_init([w0], decay)
        worst = 0.0
        for t in range(1, 5001):
            state = ema_update(state, [target])
            worst = max(worst, abs(abs(state.shadow[0] - target) - decay ** t * abs(w0 - target)))
        c.note(f"decay={decay} worst={worst:.1e}")
        c.check(worst <= 1e-12, f"decay {decay} deviation {worst:.3e}")
    c.finish()


def test_featops(criterion):
    c = criterion("featops: SPP 4C + k=1 identity; CoordConv +2 channels over [-1,1]; "
                  "DropBlock kept fraction within 0.02 of keep_prob (64x64, 1000 seeds)")
    rng = np.random.default_rng(80)
    fm = rng.normal(size=(7, 19, 23)).astype(np.float32)
    out = spp_concat(fm)
    c.check(SppConfig().kernels == (1, 5, 9, 13), "default kernels")
    c.check(out.shape == (28, 19, 23), f"SPP shape {out.shape}")
    c.check(np.array_equal(out[:7], fm), "k=1 branch is not the identity")
    cc = coordconv_augment(fm)
    c.check(cc.shape == (9, 19, 23), f"CoordConv shape {cc.shape}")
    for ch in (7, 8):
        c.check(cc[ch].min() == -1.0 and cc[ch].max() == 1.0, f"CoordConv channel {ch} range")
    c.check(np.array_equal(cc[:7], fm), "CoordConv altered inputs")
    keep = 0.9
    fracs = np.array([dropblock_mask(64, 64, DropBlockConfig(3, keep, s))[0].mean() for s in range(1000)])
    c.note(f"SPP {out.shape[0]}ch; kept fraction mean={fracs.mean():.4f} (min {fracs.min():.3f}, max {fracs.max():.3f})")
    c.check(abs(fracs.mean() - keep) <= 0.02, f"kept fraction {fracs.mean():.4f}")
    c.finish()


def test_eval_cases(criterion):
    c = criterion("eval: AP=1.0; AP(TP,FP,TP | 2 GT)=0.8350; mAP=0.2 at IoU 0.55")
    from detkit.assign import GroundTruthScene

    gt = Box(0.0, 0.0, 100.0, 100.0)
    scene = {"img": GroundTruthScene(200, 200, ((gt, 0),), "img")}
    perfect = evaluate({"img": [Detection(gt, 0, 1.0)]}, scene).map
    tft = average_precision([True, False, True], 2)
    half = evaluate({"img": [Detection(Box(0.0, 0.0, 100.0, 55.0), 0, 1.0)]}, scene).map
    c.note(f"perfect={perfect}; TP/FP/TP={tft:.6f}; IoU-0.55 mAP={half:.6f}")
    c.check(perfect == 1.0, f"perfect {perfect}")
    c.check(abs(tft - (51 + 50 * 2 / 3) / 101) <= 1e-12 and round(tft, 4) == 0.8350, f"TP/FP/TP {tft}")
    c.check(abs(half - 0.2) <= 1e-12, f"IoU-0.55 {half}")
    c.finish()


def test_bench(criterion, tmp_path):
    c = criterion("bench: n in {128, 512, 2048} for all methods, well-formed CSV (timings reported only)")
    out = tmp_path / "bench.csv"
    code = main(["bench", "--boxes", "128", "512", "2048", "--trials", "3", "--csv", str(out)])
    c.check(code == 0, f"exit {code}")
    text = out.read_text() if out.exists() else ""
    c.check(text.splitlines()[:1] == ["method,n,trial,nanos"], "header")
    rows = list(csv.DictReader(io.StringIO(text)))
    seen = {(r["method"], int(r["n"])) for r in rows}
    want = {(m, n) for m in ("greedy", "soft", "matrix") for n in (128, 512, 2048)}
    c.check(seen == want, f"coverage {sorted(want - seen)}")
    c.check(all(r["trial"].isdigit() and r["nanos"].isdigit() for r in rows), "non-integer fields")
    c.check(len(rows) == 27, f"{len(rows)} rows")
    medians = {}
    for m, n in sorted(want):
        ns = sorted(int(r["nanos"]) for r in rows if r["method"] == m and int(r["n"]) == n)
        medians[(m, n)] = ns[len(ns) // 2] / 1e6 if ns else float("nan")
    c.note(", ".join(f"{m}@{n}={medians[(m, n)]:.1f}ms" for m, n in sorted(want, key=lambda k: (k[1], k[0]))))
    c.check(tmp_path.joinpath("bench.png").exists(), "figure missing")
    c.finish()
