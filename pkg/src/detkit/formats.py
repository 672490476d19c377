"""On-disk formats: PPYT tensors, JSON-lines annotation/detection records, the synth manifest.

PPYT layout (all little-endian)::

    b"PPYT" | version u8 (=1) | ndim u8 (1..4) | 2 zero bytes
    ndim x u32 dimension sizes
    prod(dims) x f32 values, C order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .assign import GroundTruthScene
from .geometry import Box
from .headcodec import HeadLayout, PyramidLevel
from .nms import Detection

PPYT_MAGIC = b"PPYT"
PPYT_VERSION = 1
_HEADER = struct.Struct("<4sBBxx")


class FormatError(ValueError):
    """Malformed input file; the message carries the path and line or byte offset."""


def encode_ppyt(array) -> bytes:
    arr = np.asarray(array)
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"PPYT supports 1 to 4 dimensions, got {arr.ndim}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise ValueError("dimension exceeds u32")
    header = _HEADER.pack(PPYT_MAGIC, PPYT_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_ppyt(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, ndim = _HEADER.unpack_from(data, 0)
    if magic != PPYT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at offset 0")
    if version != PPYT_VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4")
    if not 1 <= ndim <= 4:
        raise FormatError(f"{source}: ndim {ndim} outside [1, 4] at offset 5")
    if data[6:8] != b"\x00\x00":
        raise FormatError(f"{source}: nonzero pad bytes at offset 6")
    off = _HEADER.size
    if len(data) < off + 4 * ndim:
        raise FormatError(f"{source}: truncated dimension table at offset {off}")
    dims = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    payload = len(data) - off
    if payload != 4 * count:
        raise FormatError(
            f"{source}: payload at offset {off} has {payload} bytes, dims {dims} need {4 * count}"
        )
    return np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def write_atomic(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_ppyt(path, array) -> None:
    write_atomic(path, encode_ppyt(array))


def load_ppyt(path) -> np.ndarray:
    path = Path(path)
    return decode_ppyt(path.read_bytes(), str(path))


# JSON-lines records: {"image_id", "bbox": [x, y, w, h], "category_id"[, "score"]}

def annotation_record(image_id: str, box: Box, category_id: int) -> dict:
    return {"image_id": image_id, "bbox": box.to_xywh(), "category_id": int(category_id)}


def detection_record(image_id: str, det: Detection) -> dict:
    rec = annotation_record(image_id, det.box, det.class_id)
    rec["score"] = float(det.score)
    return rec


def dump_jsonl(records: Iterable[Mapping]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _parse_record(line: str, where: str, with_score: bool) -> tuple[str, Box, int, float | None]:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{where}: invalid JSON ({exc.msg} at column {exc.colno})") from None
    if not isinstance(rec, dict):
        raise FormatError(f"{where}: expected a JSON object")
    try:
        image_id = rec["image_id"]
        bbox = rec["bbox"]
        cat = rec["category_id"]
    except KeyError as exc:
        raise FormatError(f"{where}: missing field {exc.args[0]!r}") from None
    if not isinstance(image_id, str):
        raise FormatError(f"{where}: image_id must be a string")
    if (not isinstance(bbox, list) or len(bbox) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox)):
        raise FormatError(f"{where}: bbox must be [x, y, width, height] numbers")
    if bbox[2] < 0 or bbox[3] < 0:
        raise FormatError(f"{where}: negative bbox width/height")
    if not isinstance(cat, int) or isinstance(cat, bool) or cat < 0:
        raise FormatError(f"{where}: category_id must be a non-negative integer")
    score = None
    if with_score:
        score = rec.get("score")
        if not isinstance(score, (int, float)) or isinstance(score, bool) or not 0.0 <= score <= 1.0:
            raise FormatError(f"{where}: score must be a number in [0, 1]")
        score = float(score)
    return image_id, Box.from_xywh(*(float(v) for v in bbox)), cat, score


def _lines(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not UTF-8 (byte offset {exc.start})") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            yield f"{path}:{lineno}", line


def read_annotations(path, image_size: Mapping[str, tuple[int, int]] | None = None,
                     default_size: tuple[int, int] | None = None) -> dict[str, GroundTruthScene]:
    """Group annotation records into scenes keyed by image id.

    Image size comes from ``image_size`` (e.g. the manifest) or
    ``default_size``; otherwise the tightest box extent is used.
    """
    grouped: dict[str, list] = {iid: [] for iid in (image_size or {})}
    for where, line in _lines(path):
        iid, box, cat, _ = _parse_record(line, where, with_score=False)
        grouped.setdefault(iid, []).append((box, cat))
    scenes = {}
    for iid, anns in grouped.items():
        if image_size and iid in image_size:
            w, h = image_size[iid]
        elif default_size:
            w, h = default_size
        else:
            w = max((b.x_max for b, _ in anns), default=0.0)
            h = max((b.y_max for b, _ in anns), default=0.0)
        scenes[iid] = GroundTruthScene(w, h, tuple(anns), iid)
    return scenes


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for where, line in _lines(path):
        iid, box, cat, score = _parse_record(line, where, with_score=True)
        out.setdefault(iid, []).append(Detection(box=box, class_id=cat, score=score))
    return out


# Manifest binding per-image tensor files to layout, levels and alpha.

MANIFEST_NAME = "manifest.json"
ANNOTATIONS_NAME = "annotations.jsonl"


def make_manifest(width: int, height: int, layout: HeadLayout, levels: Sequence[PyramidLevel], alpha: float,
                  images: Sequence[Mapping], **extra) -> dict:
    return {
        "format": "detkit-synth",
        "version": 1,
        "image_width": width,
        "image_height": height,
        "num_classes": layout.num_classes,
        "anchors_per_cell": layout.anchors_per_cell,
        "iou_aware": layout.iou_aware,
        "alpha": alpha,
        "levels": [{"level": lv.level, "stride": lv.stride, "anchors": [list(a) for a in lv.anchors]}
                   for lv in levels],
        "annotations": ANNOTATIONS_NAME,
        "images": list(images),
        **extra,
    }


def parse_manifest(path) -> tuple[dict, HeadLayout, list[PyramidLevel]]:
    path = Path(path)
    try:
        man = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    try:
        layout = HeadLayout(int(man["num_classes"]), int(man["anchors_per_cell"]), bool(man["iou_aware"]))
        levels = [PyramidLevel(int(lv["level"]), int(man["image_width"]), int(man["image_height"]),
                               tuple(tuple(a) for a in lv["anchors"])) for lv in man["levels"]]
        for img in man["images"]:
            img["image_id"], img["tensors"]
        float(man["alpha"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing manifest field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid manifest ({exc})") from None
    return man, layout, levels
