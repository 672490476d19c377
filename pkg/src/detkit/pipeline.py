"""End-to-end runs: synth dataset writer, decode->suppress->evaluate pipeline, NMS benchmark."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import formats
from .evaluation import EvalResult, evaluate
from .geometry import Box
from .headcodec import DecodeConfig, HeadLayout, default_levels, decode_level
from .nms import Detection, NmsConfig, suppress
from .synth import Perturbation, SynthConfig, generate_boundary_scene, generate_scene, render_raw

NMS_METHODS = ("greedy", "soft", "matrix")


def _derived_seed(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1)[0])


def write_synth(out_dir, seed: int = 0, images: int = 10, size: tuple[int, int] = (608, 608),
                num_classes: int = 20, box_noise: float = 0.0, cls_noise: float = 0.0, obj_noise: float = 0.0,
                iou_aware: bool = True, alpha: float = 1.05, boundary: bool = False,
                max_objects: int = 10) -> dict:
    """Write a synth dataset and return its manifest.

    Every image gets its own scene and noise seeds derived from ``seed``,
    so the output is byte-identical across runs.
    """
    if images < 0:
        raise ValueError("image count must be >= 0")
    width, height = size
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout = HeadLayout(num_classes, 3, iou_aware)
    levels = default_levels(width, height)
    records = []
    entries = []
    for i in range(images):
        iid = f"img_{i:05d}"
        cfg = SynthConfig(width=width, height=height, num_classes=num_classes, seed=_derived_seed(seed, i, 0),
                          max_objects=max_objects)
        if boundary:
            scene = generate_boundary_scene(cfg, levels, iid)
        else:
            scene = generate_scene(cfg, iid, levels)
        pert = Perturbation(box=box_noise, cls=cls_noise, obj=obj_noise, seed=_derived_seed(seed, i, 1))
        heads = render_raw(scene, layout, levels, alpha, pert)
        tensors = {}
        for lv, head in zip(levels, heads):
            name = f"{iid}_p{lv.level}.ppyt"
            formats.save_ppyt(out / name, head)
            tensors[str(lv.level)] = name
        entries.append({"image_id": iid, "width": width, "height": height, "tensors": tensors})
        records.extend(formats.annotation_record(iid, b, c) for b, c in scene.annotations)
    formats.write_atomic(out / formats.ANNOTATIONS_NAME, formats.dump_jsonl(records))
    manifest = formats.make_manifest(width, height, layout, levels, alpha, entries,
                                     seed=seed, box_noise=box_noise, cls_noise=cls_noise, obj_noise=obj_noise,
                                     boundary=boundary)
    formats.write_atomic(out / formats.MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class PipelineRun:
    result: EvalResult
    detections: dict[str, list[Detection]]
    timings: dict[str, float]
    total: float
    config: dict = field(default_factory=dict)

    def report(self) -> dict:
        rep = self.result.to_dict()
        rep["timings_s"] = dict(self.timings)
        rep["total_s"] = self.total
        rep["config"] = dict(self.config)
        rep["num_images"] = len(self.detections)
        rep["num_detections"] = sum(len(v) for v in self.detections.values())
        return rep


def run_pipeline(in_dir, nms: str = "matrix", alpha: float | None = None, iou_aware: bool | None = None,
                 nms_cfg: NmsConfig | None = None) -> PipelineRun:
    """Decode every image's heads, suppress duplicates, evaluate against the annotations."""
    t_start = time.perf_counter()
    in_dir = Path(in_dir)
    man_path = in_dir / formats.MANIFEST_NAME
    if not man_path.exists():
        raise FileNotFoundError(f"missing manifest: {man_path}")
    man, layout, levels = formats.parse_manifest(man_path)
    alpha = float(man["alpha"]) if alpha is None else float(alpha)
    use_iou = layout.iou_aware if iou_aware is None else bool(iou_aware)
    dcfg = DecodeConfig(alpha=alpha, use_iou_aware=use_iou)
    ncfg = nms_cfg or NmsConfig(method=nms)

    timings = {"load": 0.0, "decode": 0.0, "nms": 0.0, "evaluate": 0.0}
    t0 = time.perf_counter()
    sizes = {img["image_id"]: (int(img.get("width", man["image_width"])), int(img.get("height", man["image_height"])))
             for img in man["images"]}
    gts = formats.read_annotations(in_dir / man["annotations"], image_size=sizes)
    heads = {}
    for img in man["images"]:
        per_level = []
        for lv in levels:
            try:
                name = img["tensors"][str(lv.level)]
            except KeyError:
                raise formats.FormatError(f"{man_path}: image {img['image_id']} has no tensor for level {lv.level}") from None
            per_level.append(formats.load_ppyt(in_dir / name))
        heads[img["image_id"]] = per_level
    timings["load"] = time.perf_counter() - t0

    dets: dict[str, list[Detection]] = {}
    for iid, per_level in heads.items():
        t0 = time.perf_counter()
        cands = []
        for lv, head in zip(levels, per_level):
            if head.ndim != 3:
                raise formats.FormatError(f"{iid} level {lv.level}: expected a 3-d tensor, got shape {head.shape}")
            cands.extend(decode_level(head, layout, lv, dcfg))
        t1 = time.perf_counter()
        dets[iid] = suppress(cands, ncfg)
        t2 = time.perf_counter()
        timings["decode"] += t1 - t0
        timings["nms"] += t2 - t1

    t0 = time.perf_counter()
    result = evaluate(dets, gts)
    timings["evaluate"] = time.perf_counter() - t0
    total = time.perf_counter() - t_start
    config = {"nms": ncfg.method, "alpha": alpha, "iou_aware": use_iou, "input": str(in_dir)}
    return PipelineRun(result=result, detections=dets, timings=timings, total=total, config=config)


def bench_workload(n: int, seed: int, image_size: float = 608.0, num_classes: int = 4) -> list[Detection]:
    """Clustered random boxes so that suppression has real work to do."""
    rng = np.random.default_rng(_derived_seed(seed, n))
    n_centers = max(1, n // 16)
    centers = rng.uniform(0.1 * image_size, 0.9 * image_size, size=(n_centers, 2))
    sizes = rng.uniform(16.0, 160.0, size=(n_centers, 2))
    pick = rng.integers(0, n_centers, size=n)
    cxcy = centers[pick] + rng.normal(0.0, 6.0, size=(n, 2))
    wh = sizes[pick] * rng.uniform(0.85, 1.15, size=(n, 2))
    scores = rng.uniform(0.05, 1.0, size=n)
    classes = rng.integers(0, num_classes, size=n)
    out = []
    for (cx, cy), (w, h), s, c in zip(cxcy, wh, scores, classes):
        out.append(Detection(box=Box.from_cxcywh(float(cx), float(cy), float(w), float(h)),
                             class_id=int(c), score=float(s)))
    return out


def kept_digest(dets: Sequence[Detection]) -> str:
    h = hashlib.sha256()
    for d in dets:
        h.update(repr((d.box.as_array().tolist(), d.class_id, d.score)).encode())
    return h.hexdigest()


@dataclass
class BenchResult:
    rows: list[tuple[str, int, int, int]]
    digests: dict[tuple[str, int], str]
    kept_counts: dict[tuple[str, int], int]


def run_bench(sizes: Sequence[int], trials: int = 5, methods: Sequence[str] = NMS_METHODS, seed: int = 0) -> BenchResult:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rows = []
    digests = {}
    kept_counts = {}
    for n in sizes:
        if n < 1:
            raise ValueError("box count must be >= 1")
        dets = bench_workload(n, seed)
        for method in methods:
            cfg = NmsConfig(method=method)
            for trial in range(trials):
                t0 = time.perf_counter_ns()
                kept = suppress(dets, cfg)
                rows.append((method, n, trial, time.perf_counter_ns() - t0))
                digest = kept_digest(kept)
                if digests.setdefault((method, n), digest) != digest:
                    raise RuntimeError(f"{method} produced different results across trials at n={n}")
                kept_counts[(method, n)] = len(kept)
    return BenchResult(rows=rows, digests=digests, kept_counts=kept_counts)


def bench_csv(rows) -> str:
    lines = ["method,n,trial,nanos"]
    lines.extend(f"{m},{n},{t},{ns}" for m, n, t, ns in rows)
    return "\n".join(lines) + "\n"
