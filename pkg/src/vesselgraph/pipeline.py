"""Iterated extraction and refinement, plus optional preprocessing."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .assign import assign_branches
from .components import StreamingLabeler, block_window
from .extract import extract_proto_graph
from .features import annotate_graph
from .graph import NodeKind, VesselGraph
from .memory import DEFAULT_BUDGET, MemoryTracker
from .refine import refine
from .thinning import DIRECTIONS, ThinningConfig, ThinningStats, skeletonize
from .volume import BlockedVolume, VoxelState, create_volume, is_foreground

logger = logging.getLogger(__name__)

STAGES = ("skeletonization", "extraction", "assignment", "features", "refinement")


@dataclass
class PipelineConfig:
    bulge_threshold: float = 1.5
    max_iterations: int | None = None
    memory_budget: int = DEFAULT_BUDGET
    scratch_dir: str | None = None
    smoothing_enabled: bool = True

    def __post_init__(self):
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.bulge_threshold < 0:
            raise ValueError("bulge_threshold must be nonnegative")


@dataclass
class IterationStats:
    iteration: int
    node_count: int = 0
    edge_count: int = 0
    proto_node_count: int = 0
    proto_edge_count: int = 0
    fixed_voxels: int = 0
    deleted_voxels: int = 0
    subiterations: dict = field(default_factory=lambda: {d: 0 for d in DIRECTIONS})
    cutoff_regions: int = 0
    unflooded_voxels: int = 0
    peak_tracked_bytes: int = 0
    wall_times: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})

    def to_json(self, timings: bool = True) -> str:
        d = asdict(self)
        if not timings:
            d.pop("wall_times")
        return json.dumps(d, sort_keys=False)


class _Timer:
    def __init__(self, stats: IterationStats, stage: str):
        self.stats, self.stage = stats, stage

    def __enter__(self):
        self.t0 = time.monotonic()

    def __exit__(self, *exc):
        self.stats.wall_times[self.stage] += time.monotonic() - self.t0


def fixed_voxels_of(graph: VesselGraph) -> np.ndarray:
    """Voxels of every degree-1 node plus the anchors of loop nodes."""
    deg = graph.degrees()
    parts = [n.voxels for nid, n in graph.nodes.items()
             if deg[nid] == 1 or n.kind is NodeKind.SYNTHETIC_LOOP]
    if not parts:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.concatenate(parts).astype(np.int64))


def extract_graph(fg: BlockedVolume, cfg: PipelineConfig, thin_cfg: ThinningConfig, *,
                  tracker: MemoryTracker, stats: IterationStats):
    """One extraction-refinement iteration; fills ``stats`` and returns the refined graph."""
    tstats = ThinningStats()
    with _Timer(stats, "skeletonization"):
        skel = skeletonize(fg, thin_cfg, scratch_dir=cfg.scratch_dir, tracker=tracker, stats=tstats)
    stats.deleted_voxels = tstats.deleted
    stats.subiterations = dict(tstats.direction_counts)
    try:
        with _Timer(stats, "extraction"):
            graph = extract_proto_graph(skel, smoothing=cfg.smoothing_enabled,
                                        scratch_dir=cfg.scratch_dir, tracker=tracker)
    finally:
        skel.close()
    stats.proto_node_count = graph.n_nodes
    stats.proto_edge_count = graph.n_edges
    if graph.n_edges:
        with _Timer(stats, "assignment"):
            ids, astats = assign_branches(fg, graph, scratch_dir=cfg.scratch_dir, tracker=tracker)
        stats.cutoff_regions = astats.regions
        stats.unflooded_voxels = astats.unflooded_voxels
        try:
            with _Timer(stats, "features"):
                annotate_graph(fg, ids, graph, scratch_dir=cfg.scratch_dir, tracker=tracker)
        finally:
            ids.close()
    with _Timer(stats, "refinement"):
        refine(graph, cfg.bulge_threshold)
    stats.node_count = graph.n_nodes
    stats.edge_count = graph.n_edges
    return graph


def run_pipeline(fg: BlockedVolume, cfg: PipelineConfig | None = None, *,
                 tracker: MemoryTracker | None = None, on_iteration=None):
    """Iterate extraction and refinement until the edge count stops changing.

    Returns ``(graph, stats)`` with one :class:`IterationStats` per iteration.
    ``on_iteration`` is called with each stats record as soon as it is ready.
    """
    cfg = cfg or PipelineConfig()
    tracker = tracker or fg.tracker
    history = []
    graph = VesselGraph(spacing=fg.spacing, dims=fg.dims)
    fixed = None
    it = 0
    while True:
        it += 1
        tracker.reset_peak()
        stats = IterationStats(it)
        if fixed is None:
            thin_cfg = ThinningConfig()
        else:
            thin_cfg = ThinningConfig.with_fixed(fixed)
            # iterations after the first never preserve line ends
            thin_cfg.preserve_line_ends = False
        stats.fixed_voxels = int(thin_cfg.fixed_voxels.size)
        graph = extract_graph(fg, cfg, thin_cfg, tracker=tracker, stats=stats)
        stats.peak_tracked_bytes = int(tracker.peak)
        history.append(stats)
        logger.info("iteration %d: %d nodes, %d edges (proto %d edges)", it, stats.node_count,
                    stats.edge_count, stats.proto_edge_count)
        if on_iteration is not None:
            on_iteration(stats)
        if graph.n_edges == 0 and it == 1:
            break
        if len(history) >= 2 and history[-1].edge_count == history[-2].edge_count:
            break
        if cfg.max_iterations is not None and it >= cfg.max_iterations:
            break
        fixed = fixed_voxels_of(graph)
    return graph, history


def fill_cavities(fg: BlockedVolume, min_size: int, *, scratch_dir=None, out_path=None,
                  tracker: MemoryTracker | None = None) -> BlockedVolume:
    """Fill 6-connected background components smaller than ``min_size`` that avoid the border."""
    if min_size < 0:
        raise ValueError("min_size must be nonnegative")
    tracker = tracker or fg.tracker
    out = create_volume(fg.dims, fg.spacing, "binary2bit", scratch_dir, path=out_path, tracker=tracker)
    labeler = StreamingLabeler(fg.dims, fg.spacing, 6, scratch_dir, tracker)
    dims = np.asarray(fg.dims)
    size_parts, border_parts = [], []
    try:
        for b in fg.iter_blocks():
            lo, hi, win = block_window(fg, b, 1)
            vals = np.where(is_foreground(win), -1, 0).astype(np.int64)
            base = labeler.n
            prov = labeler.process_block(b, vals)
            z, y, x = np.nonzero(prov >= 0)
            local = prov[z, y, x] - base
            border = ((x + lo[0] == 0) | (y + lo[1] == 0) | (z + lo[2] == 0) |
                      (x + lo[0] == dims[0] - 1) | (y + lo[1] == dims[1] - 1) | (z + lo[2] == dims[2] - 1))
            # provisional ids of a block are contiguous, so per-block tallies stay small
            k = labeler.n - base
            size_parts.append(np.bincount(local, minlength=k))
            border_parts.append(np.bincount(local, weights=border, minlength=k) > 0)
        roots = labeler.finalize()
        n = len(roots)
        sizes = np.zeros(n, dtype=np.int64)
        touches = np.zeros(n, dtype=bool)
        if n:
            np.add.at(sizes, roots, np.concatenate(size_parts))
            np.logical_or.at(touches, roots, np.concatenate(border_parts))
        fill = (sizes < min_size) & ~touches & (sizes > 0)
        for b in fg.iter_blocks():
            lo, hi = fg.block_box(b)
            blk = fg.read_block(b)
            if fill.any():
                rb = labeler.block_roots(b)
                hole = (rb >= 0) & fill[np.maximum(rb, 0)]
                blk = np.where(hole, np.uint8(VoxelState.FOREGROUND), blk)
            if is_foreground(blk).any():
                out.write_box(lo, np.where(is_foreground(blk), VoxelState.FOREGROUND,
                                           VoxelState.BACKGROUND).astype(np.uint8))
    finally:
        labeler.close()
    return out


def median_filter(fg: BlockedVolume, radius: int, *, scratch_dir=None, out_path=None,
                  tracker: MemoryTracker | None = None) -> BlockedVolume:
    """Binary majority filter over ``(2r+1)^3`` cubes; outside the volume is background."""
    if radius < 1:
        raise ValueError("radius must be at least 1")
    tracker = tracker or fg.tracker
    out = create_volume(fg.dims, fg.spacing, "binary2bit", scratch_dir, path=out_path, tracker=tracker)
    k = 2 * radius + 1
    need = (k ** 3) // 2 + 1
    for b in fg.iter_blocks():
        lo, hi, win = block_window(fg, b, radius)
        f = is_foreground(win)
        if not f.any():
            continue
        s = np.pad(f.astype(np.int32), ((1, 0), (1, 0), (1, 0))).cumsum(0).cumsum(1).cumsum(2)
        nz, ny, nx = (h - l for l, h in zip(lo[::-1], hi[::-1]))
        c = (s[k:k + nz, k:k + ny, k:k + nx] - s[:nz, k:k + ny, k:k + nx] - s[k:k + nz, :ny, k:k + nx]
             - s[k:k + nz, k:k + ny, :nx] + s[:nz, :ny, k:k + nx] + s[:nz, k:k + ny, :nx]
             + s[k:k + nz, :ny, :nx] - s[:nz, :ny, :nx])
        res = c >= need
        if res.any():
            out.write_box(lo, res.astype(np.uint8))
    return out
