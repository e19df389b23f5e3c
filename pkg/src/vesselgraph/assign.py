"""Voxel to branch assignment.

Four streaming steps produce the edge id volume:

1. ``voronoi_map``: every foreground voxel takes the id of the edge owning its
   nearest centerline point.
2. ``remap_components``: 26-connected components of equal id that do not hold
   their edge's centerline sample are reset to UNASSIGNED.
3. ``identify_cutoff_regions``: the UNASSIGNED foreground is split into
   26-connected regions with bounding boxes.
4. ``flood_cutoff_regions``: each region is copied into its own padded
   subvolume and flooded from its labeled boundary, then written back.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from .components import StreamingLabeler, block_window, reduce_max, reduce_min
from .graph import StructuralError, VesselGraph
from .intervaltree import IntervalTreeSet
from .memory import MemoryTracker
from .pointindex import StaticPointIndex
from .volume import BLOCK_EDGE, UNASSIGNED, BlockedVolume, Scratch, create_volume, is_foreground

logger = logging.getLogger(__name__)

_U = np.uint32(UNASSIGNED)
_STRUCT26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class CutoffRegion:
    region_id: int
    bbox_min: tuple
    bbox_max: tuple
    voxel_count: int
    seed: tuple

    @property
    def bbox(self) -> tuple:
        return self.bbox_min, self.bbox_max


@dataclass
class AssignmentStats:
    regions: int = 0
    flooded: int = 0
    unflooded_voxels: int = 0
    missing_samples: int = 0


def _block_coords(lo, shape, spacing):
    nz, ny, nx = shape
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    xyz = np.stack([x + lo[0], y + lo[1], z + lo[2]], axis=-1).reshape(-1, 3).astype(np.float64)
    return xyz * np.asarray(spacing, dtype=np.float64)


def centerline_index(graph: VesselGraph, directory) -> StaticPointIndex:
    """Global index over all centerline points keyed by ``edge_id << 32 | point``."""
    pts, keys = [], []
    for eid in sorted(graph.edges):
        cl = np.asarray(graph.edges[eid].centerline, dtype=np.float64).reshape(-1, 3)
        pts.append(cl)
        keys.append((np.int64(eid) << 32) + np.arange(len(cl), dtype=np.int64))
    if not pts or sum(len(p) for p in pts) == 0:
        raise StructuralError("graph has no centerline points")
    return StaticPointIndex.build(np.concatenate(pts), np.concatenate(keys), directory)


def voronoi_map(fg: BlockedVolume, graph: VesselGraph, *, scratch_dir=None,
                tracker: MemoryTracker | None = None, out_path=None) -> BlockedVolume:
    """Label each foreground voxel with the edge of its nearest centerline point.

    Ties go to the smaller edge id, then the smaller point index.
    """
    tracker = tracker or fg.tracker
    scratch = Scratch(scratch_dir)
    try:
        index = centerline_index(graph, scratch.path("cl"))
        ids = create_volume(fg.dims, fg.spacing, "label", scratch_dir, path=out_path, tracker=tracker)
        for b in fg.iter_blocks(nonempty=True):
            lo, hi = fg.block_box(b)
            mask = is_foreground(fg.read_block(b))
            if not mask.any():
                continue
            q = _block_coords(lo, mask.shape, fg.spacing)[mask.ravel()]
            keys, _ = index.nearest_batch(q)
            out = tracker.full(mask.shape, _U, np.uint32)
            out[mask] = (keys >> 32).astype(np.uint32)
            ids.write_box(lo, out)
    finally:
        scratch.cleanup()
    return ids


def centerline_samples(graph: VesselGraph, dims, spacing) -> dict:
    """Voxel ``(x, y, z)`` of the middle centerline point of every edge."""
    out = {}
    sp = np.asarray(spacing, dtype=np.float64)
    for eid in sorted(graph.edges):
        cl = np.asarray(graph.edges[eid].centerline).reshape(-1, 3)
        if len(cl) == 0:
            continue
        v = np.rint(cl[len(cl) // 2] / sp).astype(np.int64)
        v = np.clip(v, 0, np.asarray(dims) - 1)
        out[eid] = tuple(int(c) for c in v)
    return out


def _label_values(win_ids, win_fg):
    return np.where(win_fg & (win_ids != _U), win_ids.astype(np.int64), -1)


def resolve_samples(ids: BlockedVolume, graph: VesselGraph, stats: AssignmentStats | None = None) -> dict:
    """Sample voxel per edge carrying that edge's id.

    The middle centerline point is rounded to a voxel; if that voxel holds a
    different id, the first 26-neighbor (in z, y, x scan order) with the
    edge's id is used instead.  Edges without such a voxel get no sample.
    """
    out = {}
    for eid, (x, y, z) in centerline_samples(graph, ids.dims, ids.spacing).items():
        nb = ids.read_box((x - 1, y - 1, z - 1), (x + 2, y + 2, z + 2))
        if nb[1, 1, 1] == eid:
            out[eid] = (x, y, z)
            continue
        hit = np.argwhere(nb == eid)
        if len(hit):
            dz, dy, dx = hit[0]
            out[eid] = (x + int(dx) - 1, y + int(dy) - 1, z + int(dz) - 1)
        else:
            logger.warning("edge %d: no voxel with its id near centerline sample %s", eid, (x, y, z))
            if stats is not None:
                stats.missing_samples += 1
    return out


def remap_components(ids: BlockedVolume, graph: VesselGraph, fg: BlockedVolume, *,
                     scratch_dir=None, tracker: MemoryTracker | None = None,
                     stats: AssignmentStats | None = None) -> BlockedVolume:
    """Reset equal-id components without a centerline sample to UNASSIGNED (in place)."""
    tracker = tracker or ids.tracker
    by_block = {}
    for eid, v in resolve_samples(ids, graph, stats).items():
        by_block.setdefault(tuple(c // BLOCK_EDGE for c in v), []).append((eid, v))
    labeler = StreamingLabeler(ids.dims, ids.spacing, 26, scratch_dir, tracker)
    sampled = []
    try:
        for b in ids.iter_blocks():
            if ids.block_is_empty(b):
                continue
            lo, hi, wi = block_window(ids, b, 1)
            _, _, wf = block_window(fg, b, 1)
            prov = labeler.process_block(b, _label_values(wi, is_foreground(wf)))
            for eid, (x, y, z) in by_block.get(b, ()):
                sampled.append(int(prov[z - lo[2], y - lo[1], x - lo[0]]))
        roots = labeler.finalize()
        keep = np.zeros(max(len(roots), 1), dtype=bool)
        keep[roots[np.array(sampled, dtype=np.int64)]] = True
        for b in ids.iter_blocks():
            if ids.block_is_empty(b):
                continue
            lo, hi = ids.block_box(b)
            r = labeler.block_roots(b)
            drop = (r >= 0) & ~keep[np.maximum(r, 0)]
            if drop.any():
                ids.write_box(lo, np.where(drop, _U, ids.read_block(b)))
    finally:
        labeler.close()
    return ids


def identify_cutoff_regions(ids: BlockedVolume, fg: BlockedVolume, *, scratch_dir=None,
                            tracker: MemoryTracker | None = None) -> list:
    """26-connected components of UNASSIGNED foreground with exact boxes and counts."""
    tracker = tracker or ids.tracker
    labeler = StreamingLabeler(ids.dims, ids.spacing, 26, scratch_dir, tracker)
    dx, dy, _ = ids.dims
    parts = []
    try:
        for b in fg.iter_blocks(nonempty=True):
            lo, hi, wf = block_window(fg, b, 1)
            _, _, wi = block_window(ids, b, 1)
            vals = np.where(is_foreground(wf) & (wi == _U), 0, -1).astype(np.int64)
            if not (vals[1:-1, 1:-1, 1:-1] == 0).any():
                continue
            prov = labeler.process_block(b, vals)
            z, y, x = np.nonzero(prov >= 0)
            parts.append((prov[z, y, x], x + lo[0], y + lo[1], z + lo[2]))
        roots = labeler.finalize()
    finally:
        labeler.close()
    if not parts:
        return []
    prov = np.concatenate([p[0] for p in parts])
    x, y, z = (np.concatenate([p[i] for p in parts]).astype(np.int64) for i in (1, 2, 3))
    r = roots[prov]
    n = len(roots)
    lin = x + dx * (y + dy * z)
    mins = [reduce_min(r, c, n) for c in (x, y, z)]
    maxs = [reduce_max(r, c, n) for c in (x, y, z)]
    counts = np.bincount(r, minlength=n)
    seed = reduce_min(r, lin, n)
    regions = []
    for root in np.flatnonzero(counts):
        s = int(seed[root])
        regions.append(CutoffRegion(
            len(regions),
            tuple(int(m[root]) for m in mins),
            tuple(int(m[root]) for m in maxs),
            int(counts[root]),
            (s % dx, (s // dx) % dy, s // (dx * dy)),
        ))
    return regions


@njit(cache=True)
def _flood(labels, member):
    """Round-synchronous 6-neighbor majority flood; ties to the smallest id."""
    nz, ny, nx = labels.shape
    U = np.uint32(0xFFFFFFFF)
    cand = np.empty(6, dtype=np.uint32)
    upd_pos = np.empty((labels.size, 3), dtype=np.int64)
    upd_val = np.empty(labels.size, dtype=np.uint32)
    rounds = 0
    while True:
        m = 0
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    if not member[z, y, x] or labels[z, y, x] != U:
                        continue
                    k = 0
                    if z > 0 and labels[z - 1, y, x] != U:
                        cand[k] = labels[z - 1, y, x]
                        k += 1
                    if z < nz - 1 and labels[z + 1, y, x] != U:
                        cand[k] = labels[z + 1, y, x]
                        k += 1
                    if y > 0 and labels[z, y - 1, x] != U:
                        cand[k] = labels[z, y - 1, x]
                        k += 1
                    if y < ny - 1 and labels[z, y + 1, x] != U:
                        cand[k] = labels[z, y + 1, x]
                        k += 1
                    if x > 0 and labels[z, y, x - 1] != U:
                        cand[k] = labels[z, y, x - 1]
                        k += 1
                    if x < nx - 1 and labels[z, y, x + 1] != U:
                        cand[k] = labels[z, y, x + 1]
                        k += 1
                    if k == 0:
                        continue
                    best = U
                    best_n = 0
                    for i in range(k):
                        c = 0
                        for j in range(k):
                            if cand[j] == cand[i]:
                                c += 1
                        if c > best_n or (c == best_n and cand[i] < best):
                            best = cand[i]
                            best_n = c
                    upd_pos[m, 0] = z
                    upd_pos[m, 1] = y
                    upd_pos[m, 2] = x
                    upd_val[m] = best
                    m += 1
        if m == 0:
            return rounds
        for i in range(m):
            labels[upd_pos[i, 0], upd_pos[i, 1], upd_pos[i, 2]] = upd_val[i]
        rounds += 1


def flood_labels(labels: np.ndarray, member: np.ndarray) -> int:
    """Flood ``member`` voxels of ``labels`` in place; returns the number of rounds."""
    return int(_flood(labels, np.ascontiguousarray(member)))


class _SubvolumeStore:
    """Padded per-region label and foreground copies in two flat scratch memmaps."""

    def __init__(self, regions, dims, scratch: Scratch, pad: int = 1):
        self.boxes = {}
        self.offsets = {}
        total = 0
        for r in regions:
            lo = tuple(max(0, c - pad) for c in r.bbox_min)
            hi = tuple(min(d - 1, c + pad) for c, d in zip(r.bbox_max, dims))
            self.boxes[r.region_id] = (lo, hi)
            self.offsets[r.region_id] = total
            total += int(np.prod([h - l + 1 for l, h in zip(lo, hi)]))
        n = max(total, 1)
        self.labels = np.lib.format.open_memmap(scratch.path("sub-ids", ".npy"), mode="w+",
                                                dtype=np.uint32, shape=(n,))
        self.fg = np.lib.format.open_memmap(scratch.path("sub-fg", ".npy"), mode="w+",
                                            dtype=np.bool_, shape=(n,))

    def shape(self, rid):
        lo, hi = self.boxes[rid]
        return tuple(h - l + 1 for l, h in zip(lo, hi))[::-1]

    def view(self, arr, rid):
        shape = self.shape(rid)
        off = self.offsets[rid]
        return arr[off:off + int(np.prod(shape))].reshape(shape)


def _slab_passes(ids: BlockedVolume, trees: IntervalTreeSet, visit, *, fg: BlockedVolume | None = None,
                 write: bool = False, thickness: int = BLOCK_EDGE):
    """Stream z-slabs of ``ids`` touching any box; ``visit(z, y, x0, x1, rid, row_ids, row_fg)``.

    Rows are views into the slab window, so ``visit`` may modify them when
    ``write`` is set.
    """
    boxes = trees.boxes
    if not boxes:
        return
    dz = ids.dims[2]
    for z0 in range(0, dz, thickness):
        z1 = min(z0 + thickness, dz)
        active = set()
        for z in range(z0, z1):
            active.update(trees.z_tree.stab(z))
        if not active:
            continue
        lo = (min(boxes[k][0][0] for k in active), min(boxes[k][0][1] for k in active), z0)
        hi = (max(boxes[k][1][0] for k in active) + 1, max(boxes[k][1][1] for k in active) + 1, z1)
        wi = ids.read_box(lo, hi)
        wf = is_foreground(fg.read_box(lo, hi)) if fg is not None else None
        for z in range(z0, z1):
            ytree = trees.slice_tree(z)
            if not ytree:
                continue
            ys = [boxes[k][0][1] for k in trees.z_tree.stab(z)]
            ye = [boxes[k][1][1] for k in trees.z_tree.stab(z)]
            for y in range(min(ys), max(ye) + 1):
                for rid in ytree.stab(y):
                    (x0, _, _), (x1, _, _) = boxes[rid]
                    row_i = wi[z - lo[2], y - lo[1], x0 - lo[0]:x1 + 1 - lo[0]]
                    row_f = wf[z - lo[2], y - lo[1], x0 - lo[0]:x1 + 1 - lo[0]] if wf is not None else None
                    visit(z, y, x0, x1, rid, row_i, row_f)
        if write:
            ids.write_box(lo, wi)


def flood_cutoff_regions(ids: BlockedVolume, regions: list, fg: BlockedVolume, *, scratch_dir=None,
                         tracker: MemoryTracker | None = None,
                         stats: AssignmentStats | None = None) -> BlockedVolume:
    """Flood every cut-off region from its labeled boundary (in place).

    Regions without any labeled neighbor stay UNASSIGNED.
    """
    if not regions:
        return ids
    tracker = tracker or ids.tracker
    scratch = Scratch(scratch_dir)
    try:
        store = _SubvolumeStore(regions, ids.dims, scratch)
        trees = IntervalTreeSet(store.boxes)

        def collect(z, y, x0, x1, rid, row_i, row_f):
            (lx, ly, lz), _ = store.boxes[rid]
            store.view(store.labels, rid)[z - lz, y - ly, :] = row_i
            store.view(store.fg, rid)[z - lz, y - ly, :] = row_f

        _slab_passes(ids, trees, collect, fg=fg)

        results = {}
        for r in regions:
            lab = tracker.track(np.array(store.view(store.labels, r.region_id)))
            f = tracker.track(np.array(store.view(store.fg, r.region_id)))
            (lx, ly, lz), _ = store.boxes[r.region_id]
            comp, _ = ndimage.label(f & (lab == _U), structure=_STRUCT26)
            sx, sy, sz = r.seed
            member = comp == comp[sz - lz, sy - ly, sx - lx]
            flood_labels(lab, member)
            left = int((member & (lab == _U)).sum())
            if stats is not None:
                stats.regions += 1
                stats.flooded += left == 0
                stats.unflooded_voxels += left
            # keep only the region's voxels; everything else is left untouched on write-back
            store.view(store.labels, r.region_id)[...] = np.where(member, lab, _U)
            store.view(store.fg, r.region_id)[...] = member
            results[r.region_id] = left
        store.labels.flush()
        store.fg.flush()

        def write_back(z, y, x0, x1, rid, row_i, row_f):
            (lx, ly, lz), _ = store.boxes[rid]
            m = store.view(store.fg, rid)[z - lz, y - ly, :]
            if m.any():
                row_i[m] = store.view(store.labels, rid)[z - lz, y - ly, :][m]

        _slab_passes(ids, trees, write_back, write=True)
        del store
    finally:
        scratch.cleanup()
    return ids


def assign_branches(fg: BlockedVolume, graph: VesselGraph, *, scratch_dir=None,
                    tracker: MemoryTracker | None = None, out_path=None):
    """Run all four assignment steps; returns ``(ids, stats)``."""
    stats = AssignmentStats()
    ids = voronoi_map(fg, graph, scratch_dir=scratch_dir, tracker=tracker, out_path=out_path)
    remap_components(ids, graph, fg, scratch_dir=scratch_dir, tracker=tracker, stats=stats)
    regions = identify_cutoff_regions(ids, fg, scratch_dir=scratch_dir, tracker=tracker)
    flood_cutoff_regions(ids, regions, fg, scratch_dir=scratch_dir, tracker=tracker, stats=stats)
    return ids, stats
