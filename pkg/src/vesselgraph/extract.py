"""Skeleton to proto graph conversion.

Skeleton voxels are classified by their number of 26-neighbors (END < 2,
REGULAR == 2, BRANCH > 2).  Connected END/BRANCH regions become nodes
positioned at their physical barycenter; maximal REGULAR runs become edges
whose tips are matched to adjacent node voxels through a static point index.
A REGULAR run without any adjacent node voxel is a closed loop and gets a
synthetic anchor node.
"""
from __future__ import annotations

import enum
import logging
import math
from collections import defaultdict

import numpy as np

from .components import OFFSETS_26, StreamingLabeler, block_window
from .graph import Edge, Node, NodeKind, StructuralError, VesselGraph
from .memory import MemoryTracker
from .pointindex import StaticPointIndex
from .volume import BlockedVolume, Scratch, is_foreground

logger = logging.getLogger(__name__)


class SkeletonVoxelClass(enum.IntEnum):
    END = 1
    REGULAR = 2
    BRANCH = 3


def count_neighbors(fg: np.ndarray) -> np.ndarray:
    """26-neighbor counts for the interior ``[1:-1]^3`` of a boolean window."""
    f = fg.astype(np.int8)
    nz, ny, nx = f.shape
    out = np.zeros((nz - 2, ny - 2, nx - 2), dtype=np.int8)
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                if dz == dy == dx == 1:
                    continue
                out += f[dz:dz + nz - 2, dy:dy + ny - 2, dx:dx + nx - 2]
    return out


def classify_window(fg: np.ndarray) -> np.ndarray:
    """Classes of the interior of ``fg`` (0 where background)."""
    nc = count_neighbors(fg)
    core = fg[1:-1, 1:-1, 1:-1]
    cls = np.where(nc < 2, SkeletonVoxelClass.END,
                   np.where(nc == 2, SkeletonVoxelClass.REGULAR, SkeletonVoxelClass.BRANCH))
    return np.where(core, cls, 0).astype(np.int8)


def classify_voxels(skel: BlockedVolume):
    """Yield ``(block_lo, classes)`` for every non-empty block of a skeleton."""
    for b in skel.iter_blocks(nonempty=True):
        lo, hi, win = block_window(skel, b, 1)
        yield lo, classify_window(is_foreground(win))


SMOOTHING_REACH = 3


def smooth_centerline(points, reach: int | None = None) -> np.ndarray:
    """Local Bezier smoothing with fixed endpoints.

    Each interior point is replaced by the midpoint of the Bezier curve whose
    control points are the ``2k + 1`` points centered on it, which is a
    binomially weighted average.  ``k`` is ``reach`` but shrinks near the ends
    so the window never runs past an endpoint.
    """
    k_max = SMOOTHING_REACH if reach is None else int(reach)
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    if n < 3 or k_max < 1:
        return p.copy()
    out = p.copy()
    idx = np.arange(1, n - 1)
    ks = np.minimum(np.minimum(idx, n - 1 - idx), k_max)
    for k in np.unique(ks):
        w = np.array([math.comb(2 * k, j) for j in range(2 * k + 1)], dtype=np.float64) / 4.0 ** k
        rows = idx[ks == k]
        acc = np.zeros((len(rows), 3))
        for j in range(2 * k + 1):
            acc += w[j] * p[rows - k + j]
        out[rows] = acc
    return out


def _neighbor_pairs(pos: np.ndarray, dims) -> tuple:
    """All (i, j) with skeleton voxels i, j 26-adjacent; ``pos`` sorted."""
    dx, dy, dz = dims
    x = pos % dx
    y = (pos // dx) % dy
    z = pos // (dx * dy)
    src, dst = [], []
    for oz, oy, ox in OFFSETS_26:
        nx_, ny_, nz_ = x + ox, y + oy, z + oz
        ok = (nx_ >= 0) & (nx_ < dx) & (ny_ >= 0) & (ny_ < dy) & (nz_ >= 0) & (nz_ < dz)
        q = nx_ + dx * (ny_ + dy * nz_)
        j = np.searchsorted(pos, q)
        j = np.minimum(j, len(pos) - 1)
        hit = ok & (pos[j] == q)
        src.append(np.flatnonzero(hit))
        dst.append(j[hit])
    return np.concatenate(src), np.concatenate(dst)


def _physical(pos: np.ndarray, dims, spacing) -> np.ndarray:
    dx, dy, _ = dims
    xyz = np.stack([pos % dx, (pos // dx) % dy, pos // (dx * dy)], axis=-1).astype(np.float64)
    return xyz * np.asarray(spacing, dtype=np.float64)


def _voxel_coords(pos: np.ndarray, dims) -> np.ndarray:
    dx, dy, _ = dims
    return np.stack([pos % dx, (pos // dx) % dy, pos // (dx * dy)], axis=-1).astype(np.float64)


def _walk(start: int, nbrs: np.ndarray, avoid: int = -1) -> list:
    order = [start]
    prev, cur = avoid, start
    while True:
        nxt = -1
        for c in nbrs[cur]:
            if c >= 0 and c != prev and c != start:
                nxt = c
                break
        if nxt < 0 or nxt == avoid:
            return order
        order.append(nxt)
        prev, cur = cur, nxt


def extract_proto_graph(skel: BlockedVolume, *, smoothing: bool = True, scratch_dir=None,
                        tracker: MemoryTracker | None = None) -> VesselGraph:
    """Build the proto graph of a skeleton in one block-ordered pass."""
    tracker = tracker or skel.tracker
    dims, spacing = skel.dims, skel.spacing
    scratch = Scratch(scratch_dir)
    labeler = StreamingLabeler(dims, spacing, 26, scratch.dir, tracker)
    pos_parts, cls_parts, prov_parts = [], [], []
    dx, dy, _ = dims
    try:
        for b in skel.iter_blocks(nonempty=True):
            lo, hi, win = block_window(skel, b, 2)
            cls = classify_window(is_foreground(win))
            values = np.where(cls > 0, cls, -1).astype(np.int64)
            ids = labeler.process_block(b, values)
            z, y, x = np.nonzero(cls[1:-1, 1:-1, 1:-1])
            pos_parts.append(tracker.track((x + lo[0]) + dx * ((y + lo[1]) + dy * (z + lo[2]))))
            cls_parts.append(cls[1:-1, 1:-1, 1:-1][z, y, x])
            prov_parts.append(ids[z, y, x])
        roots = labeler.finalize()
    finally:
        labeler.close()
    if not pos_parts:
        scratch.cleanup()
        return VesselGraph(spacing=spacing, dims=dims)
    pos = np.concatenate(pos_parts)
    order = np.argsort(pos, kind="stable")
    pos = pos[order]
    cls = np.concatenate(cls_parts)[order]
    comp = roots[np.concatenate(prov_parts)[order]]
    try:
        graph = _assemble(pos, cls, comp, dims, spacing, smoothing, scratch)
    finally:
        scratch.cleanup()
    return graph


def _assemble(pos, cls, comp, dims, spacing, smoothing, scratch) -> VesselGraph:
    n = len(pos)
    src, dst = _neighbor_pairs(pos, dims) if n else (np.empty(0, int), np.empty(0, int))

    # an END region whose only neighbor is a BRANCH voxel is a one-voxel spur;
    # it joins the branch node instead of becoming an edgeless leaf
    end_to_branch = (cls[src] == SkeletonVoxelClass.END) & (cls[dst] == SkeletonVoxelClass.BRANCH)
    node_comp = comp.copy()
    if end_to_branch.any():
        remap = {}
        for s, d in zip(src[end_to_branch], dst[end_to_branch]):
            remap.setdefault(int(comp[s]), int(comp[d]))
        for k, v in remap.items():
            node_comp[comp == k] = v

    is_node = cls != SkeletonVoxelClass.REGULAR
    graph = VesselGraph(spacing=spacing, dims=dims)
    node_of_comp = {}
    node_roots = np.unique(node_comp[is_node])
    for nid, r in enumerate(node_roots):
        members = np.flatnonzero(is_node & (node_comp == r))
        kind = NodeKind.BRANCH if (cls[members] == SkeletonVoxelClass.BRANCH).any() else NodeKind.END
        vox = pos[members]
        graph.nodes[nid] = Node(nid, vox, _physical(vox, dims, spacing).mean(axis=0), kind)
        node_of_comp[int(r)] = nid

    node_rows = np.flatnonzero(is_node)
    node_ids = np.array([node_of_comp[int(c)] for c in node_comp[node_rows]], dtype=np.int64)
    index = StaticPointIndex.build(_voxel_coords(pos[node_rows], dims), np.arange(len(node_rows)),
                                   scratch.path("nodeidx"))
    node_phys = _physical(pos[node_rows], dims, spacing)

    reg = cls == SkeletonVoxelClass.REGULAR
    run_pair = reg[src] & reg[dst]
    nbrs = np.full((n, 2), -1, dtype=np.int64)
    fill = np.zeros(n, dtype=np.int64)
    for s, d in zip(src[run_pair], dst[run_pair]):
        if fill[s] < 2:
            nbrs[s, fill[s]] = d
        fill[s] += 1
    if (fill[reg] > 2).any():
        raise StructuralError("REGULAR voxel with more than two run neighbors")

    runs = defaultdict(list)
    for i in np.flatnonzero(reg):
        runs[int(comp[i])].append(i)

    def tip_nodes(i):
        q = _voxel_coords(pos[i:i + 1], dims)[0]
        rows = index.query_radius(q, np.sqrt(3.0) + 1e-9)
        p = _physical(pos[i:i + 1], dims, spacing)[0]
        cands = sorted(((float(np.sum((node_phys[r] - p) ** 2)), int(node_ids[r]), int(pos[node_rows[r]]))
                        for r in rows))
        return cands

    next_node = len(graph.nodes)
    eid = 0
    for r in sorted(runs):
        members = np.array(runs[r], dtype=np.int64)
        tips = [i for i in members if fill[i] < 2]
        if not tips:
            anchor = int(members.min())
            start = min(c for c in nbrs[anchor] if c >= 0)
            walk = _walk(start, nbrs, avoid=anchor)
            lid = next_node
            next_node += 1
            graph.nodes[lid] = Node(lid, pos[[anchor]], _physical(pos[[anchor]], dims, spacing)[0],
                                    NodeKind.SYNTHETIC_LOOP)
            a = b = lid
        else:
            t0 = min(tips)
            walk = _walk(t0, nbrs)
            t1 = walk[-1]
            c0 = tip_nodes(t0)
            if not c0:
                raise StructuralError(f"dangling tip at voxel {_voxel_coords(pos[[t0]], dims)[0].astype(int).tolist()}")
            a = c0[0][1]
            if t1 == t0:
                rest = [c for c in c0 if c[2] != c0[0][2]]
                if not rest:
                    raise StructuralError(f"dangling tip at voxel {_voxel_coords(pos[[t0]], dims)[0].astype(int).tolist()}")
                b = rest[0][1]
            else:
                c1 = tip_nodes(t1)
                if not c1:
                    raise StructuralError(f"dangling tip at voxel {_voxel_coords(pos[[t1]], dims)[0].astype(int).tolist()}")
                b = c1[0][1]
        vox = pos[np.array(walk, dtype=np.int64)]
        pts = _physical(vox, dims, spacing)
        if smoothing:
            pts = smooth_centerline(pts)
        graph.edges[eid] = Edge(eid, a, b, pts, vox)
        eid += 1
    return graph
