"""Command line interface: ``vesselgraph <command> ...``.

Every volume read or written is a VGV1 file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (PRESETS, add_surface_noise, compare_graph_summaries, format_report, preset,
                      scale_volume, synth_phantom)
from .io import GraphFormatError, serialize_graph
from .memory import DEFAULT_BUDGET, MemoryBudgetExceeded, MemoryTracker
from .pipeline import PipelineConfig, fill_cavities, median_filter, run_pipeline
from .volume import VolumeFormatError, import_raw, open_volume

logger = logging.getLogger("vesselgraph")


def _triple(kind):
    def parse(text):
        parts = text.replace("x", ",").split(",")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected three comma separated values, got {text!r}")
        try:
            return tuple(kind(p) for p in parts)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _cmd_synth(args):
    overrides = {k: v for k, v in (("radius", args.radius), ("length", args.length),
                                   ("seed", args.seed)) if v is not None}
    p = preset(args.preset, **overrides)
    pv = synth_phantom(p, args.dims, args.spacing, path=args.output)
    pv.volume.close()
    print(json.dumps({"output": str(args.output), "expected_nodes": pv.expected_nodes,
                      "expected_edges": pv.expected_edges}))


def _cmd_scale(args):
    src = open_volume(args.input, "r")
    try:
        scale_volume(src, args.factor, args.strategy, path=args.output, max_voxels=args.max_voxels).close()
    finally:
        src.close()


def _cmd_noise(args):
    src = open_volume(args.input, "r")
    try:
        out, achieved = add_surface_noise(src, args.level, args.seed, path=args.output)
        out.close()
    finally:
        src.close()
    print(json.dumps({"requested_level": args.level, "achieved_level": achieved}))


def _cmd_preprocess(args):
    if args.fill_cavities is None and args.median is None:
        raise ValueError("nothing to do: give --fill-cavities and/or --median")
    cur = open_volume(args.input, "r")
    try:
        if args.fill_cavities is not None:
            nxt = fill_cavities(cur, args.fill_cavities, scratch_dir=args.scratch,
                                out_path=None if args.median is not None else args.output)
            cur.close()
            cur = nxt
        if args.median is not None:
            nxt = median_filter(cur, args.median, scratch_dir=args.scratch, out_path=args.output)
            cur.close()
            cur = nxt
    finally:
        cur.close()


def _cmd_extract(args):
    tracker = MemoryTracker(args.memory_budget)
    cfg = PipelineConfig(bulge_threshold=args.bulge_size, max_iterations=args.max_iter,
                         memory_budget=args.memory_budget, scratch_dir=args.scratch,
                         smoothing_enabled=not args.no_smoothing)
    fg = open_volume(args.input, "r", tracker=tracker)
    stats_file = open(args.stats, "w") if args.stats else None
    try:
        def emit(s):
            if stats_file is not None:
                stats_file.write(s.to_json(timings=args.timings) + "\n")
                stats_file.flush()
        graph, history = run_pipeline(fg, cfg, tracker=tracker, on_iteration=emit)
    finally:
        fg.close()
        if stats_file is not None:
            stats_file.close()
    serialize_graph(graph, args.output)
    print(json.dumps({"nodes": graph.n_nodes, "edges": graph.n_edges, "iterations": len(history)}))


def _cmd_compare(args):
    report = compare_graph_summaries(args.a, args.b)
    print(format_report(report))
    return 1 if args.strict and report["structural_mismatch"] else 0


def _cmd_import(args):
    import_raw(args.input, args.dims, args.spacing, out_path=args.output).close()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vesselgraph", description="Vessel graph extraction from binary volumes.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="rasterize a test phantom")
    p.add_argument("output", type=Path)
    p.add_argument("--preset", choices=sorted(PRESETS), default="cylinder")
    p.add_argument("--radius", type=float)
    p.add_argument("--length", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dims", type=_triple(int), help="x,y,z voxel counts (default: fit plus margin)")
    p.add_argument("--spacing", type=_triple(float), default=(1.0, 1.0, 1.0))
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("scale", help="enlarge a volume by resampling or mirroring")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--strategy", choices=("resample", "mirror"), default="resample")
    p.add_argument("--max-voxels", type=int, help="refuse outputs larger than this")
    p.set_defaults(func=_cmd_scale)

    p = sub.add_parser("noise", help="topology-preserving surface noise")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--level", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_noise)

    p = sub.add_parser("preprocess", help="fill small cavities and/or apply a binary median filter")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--fill-cavities", type=int, metavar="N", help="fill enclosed cavities below N voxels")
    p.add_argument("--median", type=int, metavar="R", help="median filter radius")
    p.add_argument("--scratch", type=Path)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("extract", help="run the extraction pipeline and write the graph as JSON")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--bulge-size", type=float, default=1.5)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--memory-budget", type=int, default=DEFAULT_BUDGET, metavar="BYTES")
    p.add_argument("--scratch", type=Path)
    p.add_argument("--stats", type=Path, help="write one JSON object per iteration")
    p.add_argument("--timings", action="store_true", help="include wall times in the stats")
    p.add_argument("--no-smoothing", action="store_true")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("compare", help="compare two graph files")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--strict", action="store_true", help="exit 1 when node or edge counts differ")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("import", help="convert a raw one-byte-per-voxel file")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--dims", type=_triple(int), required=True)
    p.add_argument("--spacing", type=_triple(float), default=(1.0, 1.0, 1.0))
    p.set_defaults(func=_cmd_import)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (ValueError, OSError, VolumeFormatError, GraphFormatError, MemoryBudgetExceeded) as exc:
        print(f"vesselgraph {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
