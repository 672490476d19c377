"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data-format or I/O error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import formats
from .evaluation import UnknownImageError, evaluate
from .pipeline import NMS_METHODS, bench_csv, run_bench, run_pipeline, write_synth

log = logging.getLogger("detkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 608x608, got {text!r}") from None
    if w <= 0 or h <= 0 or w % 32 or h % 32:
        raise argparse.ArgumentTypeError(f"size {w}x{h} must be positive multiples of 32")
    return w, h


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _methods(text: str) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in NMS_METHODS]
    if bad or not methods:
        raise argparse.ArgumentTypeError(f"methods must be a comma list of {','.join(NMS_METHODS)}")
    return methods


def _write_report(path, report: dict, plot_result=None, plot: bool = True, title: str = "") -> None:
    formats.write_atomic(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", path)
    if plot and plot_result is not None:
        from .plotting import figure_path, plot_eval

        fig = plot_eval(plot_result, figure_path(path), title=title)
        log.info("wrote %s", fig)


def cmd_synth(args) -> int:
    manifest = write_synth(args.out, seed=args.seed, images=args.images, size=args.size,
                           num_classes=args.classes, box_noise=args.noise, cls_noise=args.cls_noise,
                           obj_noise=args.obj_noise, iou_aware=args.iou_aware, alpha=args.alpha,
                           boundary=args.boundary, max_objects=args.max_objects)
    log.info("wrote %d images to %s", len(manifest["images"]), args.out)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    run = run_pipeline(args.input, nms=args.nms, alpha=args.alpha, iou_aware=args.iou_aware)
    report = run.report()
    _write_report(args.report, report, run.result, plot=not args.no_plot,
                  title=f"{run.config['nms']} NMS, alpha={run.config['alpha']}")
    if args.dets_out:
        recs = [formats.detection_record(iid, d) for iid in sorted(run.detections) for d in run.detections[iid]]
        formats.write_atomic(args.dets_out, formats.dump_jsonl(recs))
    print(f"mAP={report['mAP']:.4f} AP50={report['AP50']} AP75={report['AP75']} total_s={report['total_s']:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gts = formats.read_annotations(args.gts)
    dets = formats.read_detections(args.dets)
    result = evaluate(dets, gts)
    _write_report(args.report, result.to_dict(), result, plot=not args.no_plot)
    print(f"mAP={result.map:.4f} AP50={result.ap50} AP75={result.ap75}")
    return EXIT_OK


def cmd_bench(args) -> int:
    res = run_bench(args.boxes, trials=args.trials, methods=args.methods, seed=args.seed)
    formats.write_atomic(args.csv, bench_csv(res.rows))
    log.info("wrote %s", args.csv)
    if not args.no_plot:
        from .plotting import figure_path, plot_bench

        log.info("wrote %s", plot_bench(res.rows, figure_path(args.csv)))
    for (method, n), kept in sorted(res.kept_counts.items()):
        print(f"{method},{n},kept={kept},digest={res.digests[(method, n)][:16]}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="detkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset of raw head tensors and annotations")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--images", type=_nonneg_int, default=10)
    s.add_argument("--size", type=_size, default=(608, 608))
    s.add_argument("--classes", type=int, default=20)
    s.add_argument("--noise", type=float, default=0.0, help="gaussian std on box channels")
    s.add_argument("--cls-noise", type=float, default=0.0)
    s.add_argument("--obj-noise", type=float, default=0.0)
    s.add_argument("--iou-aware", type=_on_off, default=True, metavar="on|off")
    s.add_argument("--alpha", type=float, default=1.05, help="grid-sensitive scale used for encoding")
    s.add_argument("--boundary", action="store_true", help="plant box centers on cell boundaries")
    s.add_argument("--max-objects", type=int, default=10)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pipeline", help="decode, fuse, suppress and evaluate a synth directory")
    s.add_argument("--in", dest="input", required=True, type=Path)
    s.add_argument("--nms", choices=NMS_METHODS, required=True)
    s.add_argument("--alpha", type=float, default=None, help="decode scale (default: manifest value)")
    s.add_argument("--iou-aware", type=_on_off, default=None, metavar="on|off")
    s.add_argument("--report", required=True, type=Path)
    s.add_argument("--dets-out", type=Path, default=None, help="also write detections as JSON lines")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("bench", help="time the NMS methods on fixed-seed workloads")
    s.add_argument("--boxes", type=int, nargs="+", required=True)
    s.add_argument("--trials", type=int, default=5)
    s.add_argument("--methods", type=_methods, default=list(NMS_METHODS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv", required=True, type=Path)
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("eval", help="evaluate a detections file against an annotations file")
    s.add_argument("--dets", required=True, type=Path)
    s.add_argument("--gts", required=True, type=Path)
    s.add_argument("--report", required=True, type=Path)
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"detkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "boxes", None) and min(args.boxes) < 1:
        print("detkit: error: --boxes must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (formats.FormatError, UnknownImageError, FileNotFoundError) as exc:
        print(f"detkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"detkit: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # invariant violations surface as exit 4
        print(f"detkit: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
