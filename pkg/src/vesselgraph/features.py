"""Per-point attributes and per-edge features of an assigned vessel graph."""
from __future__ import annotations

import logging

import numpy as np

from .components import OFFSETS_6, OFFSETS_26, block_window
from .graph import EdgeFeatures, PointAttributes, StructuralError, VesselGraph, id_sets
from .memory import MemoryTracker
from .pointindex import StaticPointIndex
from .volume import UNASSIGNED, BlockedVolume, Scratch, is_foreground

logger = logging.getLogger(__name__)

_U = np.int64(UNASSIGNED)


def _shift(a, off, fill):
    """``out[p] = a[p + off]`` with ``fill`` outside."""
    out = np.full_like(a, fill)
    dz, dy, dx = (int(o) for o in off)
    nz, ny, nx = a.shape
    dst = tuple(slice(max(0, -d), n - max(0, d)) for d, n in zip((dz, dy, dx), (nz, ny, nx)))
    src = tuple(slice(max(0, d), n - max(0, -d)) for d, n in zip((dz, dy, dx), (nz, ny, nx)))
    out[dst] = a[src]
    return out


def surface_mask(fg: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background 6-neighbor (outside counts as background)."""
    out = np.zeros_like(fg)
    for off in OFFSETS_6:
        out |= ~_shift(fg, off, False)
    return out & fg


def accumulate_point_attributes(fg: BlockedVolume, ids: BlockedVolume, graph: VesselGraph, *,
                                scratch_dir=None, tracker: MemoryTracker | None = None) -> dict:
    """Attributes of every centerline point, keyed by edge id.

    Each labeled voxel splits its volume equally among the nearest points of
    its edge.  A surface voxel also reports its distance to the closest of
    those points (smallest index on ties) and records, for that point, the
    other edges whose surface voxels it touches.
    """
    tracker = tracker or fg.tracker
    eids = sorted(graph.edges)
    seg_of = {e: i for i, e in enumerate(eids)}
    lens = [len(graph.edges[e].centerline) for e in eids]
    starts = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    n = int(starts[-1])
    volume = np.zeros(n)
    dmin = np.full(n, np.inf)
    dmax = np.full(n, -np.inf)
    dsum = np.zeros(n)
    scount = np.zeros(n, dtype=np.int64)
    touch = {}
    voxel_volume = float(np.prod(fg.spacing))
    sp = np.asarray(fg.spacing, dtype=np.float64)
    lut = np.full(max(eids) + 1 if eids else 1, -1, dtype=np.int64)
    for e, i in seg_of.items():
        lut[e] = i

    scratch = Scratch(scratch_dir)
    try:
        if n:
            pts = np.concatenate([np.asarray(graph.edges[e].centerline).reshape(-1, 3) for e in eids])
            index = StaticPointIndex.build(pts, np.arange(n), scratch.path("pts"),
                                           np.stack([starts[:-1], starts[1:]], axis=1))
        for b in fg.iter_blocks(nonempty=True):
            lo, hi, wf = block_window(fg, b, 2)
            _, _, wi = block_window(ids, b, 2)
            f = is_foreground(wf)
            lab = np.where(f, wi.astype(np.int64), _U)
            core = (slice(2, -2),) * 3
            cf, cl = f[core], lab[core]
            sel = cf & (cl != _U)
            if not sel.any():
                continue
            bad = cl[sel]
            bad = bad[(bad >= len(lut)) | (lut[np.minimum(bad, len(lut) - 1)] < 0)]
            if bad.size:
                raise StructuralError(f"voxel labeled with unknown edge id {int(bad[0])}")
            surf = surface_mask(f)[1:-1, 1:-1, 1:-1]
            labh = lab[1:-1, 1:-1, 1:-1]
            inner = (slice(1, -1),) * 3
            # (voxel, foreign label) for surface voxels next to another edge's surface
            ssel = surf[inner] & sel
            fz, fy, fx, flab = [], [], [], []
            for off in OFFSETS_26:
                ns = _shift(surf, off, False)[inner]
                nl = _shift(labh, off, _U)[inner]
                hit = ssel & ns & (nl != _U) & (nl != cl)
                if hit.any():
                    hz, hy, hx = np.nonzero(hit)
                    fz.append(hz), fy.append(hy), fx.append(hx), flab.append(nl[hz, hy, hx])
            z, y, x = np.nonzero(sel)
            q = np.stack([x + lo[0], y + lo[1], z + lo[2]], axis=1) * sp
            trees = lut[cl[z, y, x]]
            off, flat, d2 = index.nearest_ties_batch(q, trees)
            cnt = np.diff(off)
            np.add.at(volume, flat, np.repeat(voxel_volume / cnt, cnt))
            closest = np.minimum.reduceat(flat, off[:-1]) if len(flat) else flat
            s = surf[1:-1, 1:-1, 1:-1][z, y, x]
            if s.any():
                p = closest[s]
                d = np.sqrt(d2[s])
                np.minimum.at(dmin, p, d)
                np.maximum.at(dmax, p, d)
                np.add.at(dsum, p, d)
                np.add.at(scount, p, 1)
                if fz:
                    # row of each touching voxel within the selected voxels
                    lin = (z * cf.shape[1] + y) * cf.shape[2] + x
                    hl = (np.concatenate(fz) * cf.shape[1] + np.concatenate(fy)) * cf.shape[2] + np.concatenate(fx)
                    rows = np.searchsorted(lin, hl)
                    pt = closest[rows]
                    for a_, l_ in set(zip(pt.tolist(), np.concatenate(flab).tolist())):
                        touch.setdefault(a_, set()).add(l_)
    finally:
        scratch.cleanup()

    out = {}
    for e, i in seg_of.items():
        sl = slice(starts[i], starts[i + 1])
        touching = id_sets(touch.get(j, ()) for j in range(starts[i], starts[i + 1]))
        out[e] = PointAttributes(volume=volume[sl].copy(), min_dist=dmin[sl].copy(),
                                 max_dist=dmax[sl].copy(), sum_dist=dsum[sl].copy(),
                                 surface_count=scount[sl].copy(),
                                 is_inner=(scount[sl] == 0) | np.array([len(t) > 0 for t in touching], dtype=bool),
                                 touching=touching)
    return out


def classify_inner_outer(attrs: PointAttributes) -> np.ndarray:
    """Inner flags of the points of one edge (see :func:`accumulate_point_attributes`)."""
    return attrs.is_inner.copy()


def _arc(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def inner_length(centerline, is_inner, node_pos) -> float:
    """Arc length from the node along its run of leading inner points."""
    pts = np.asarray(centerline, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0 or not is_inner[0]:
        return 0.0
    k = len(pts) if is_inner.all() else int(np.argmin(is_inner))
    return float(np.linalg.norm(pts[0] - node_pos)) + _arc(pts[:k])


def tip_radius(centerline, attrs: PointAttributes, node_pos):
    """``min_dist`` of the point closest to the node; ``None`` without surface voxels."""
    pts = np.asarray(centerline, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return None
    i = int(np.argmin(((pts - node_pos) ** 2).sum(axis=1)))
    return float(attrs.min_dist[i]) if attrs.surface_count[i] > 0 else None


def _mean_std(v):
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std())


def compute_edge_features(edge, attrs: PointAttributes, pos_a, pos_b) -> EdgeFeatures:
    pts = np.asarray(edge.centerline, dtype=np.float64).reshape(-1, 3)
    pos_a = np.asarray(pos_a, dtype=np.float64)
    pos_b = np.asarray(pos_b, dtype=np.float64)
    if len(pts):
        length = float(np.linalg.norm(pts[0] - pos_a)) + _arc(pts) + float(np.linalg.norm(pts[-1] - pos_b))
    else:
        length = float(np.linalg.norm(pos_a - pos_b))
    distance = float(np.linalg.norm(pos_a - pos_b))
    f = EdgeFeatures(length=length, distance=distance)
    if length > 0:
        f.straightness = distance / length
    else:
        f.straightness = 1.0
        f.degenerate = True
    f.volume = float(attrs.volume.sum())
    f.avg_cross_section = f.volume / length if length > 0 else 0.0
    has = attrs.has_surface
    f.minRadiusMean, f.minRadiusStd = _mean_std(attrs.min_dist[has])
    f.maxRadiusMean, f.maxRadiusStd = _mean_std(attrs.max_dist[has])
    f.avgRadiusMean, f.avgRadiusStd = _mean_std(attrs.avg_dist[has])
    f.roundnessMean, f.roundnessStd = _mean_std(attrs.roundness[has])
    f.inner_length_a = inner_length(pts, attrs.is_inner, pos_a)
    f.inner_length_b = inner_length(pts[::-1], attrs.is_inner[::-1], pos_b)
    f.tip_radius_a = tip_radius(pts, attrs, pos_a)
    f.tip_radius_b = tip_radius(pts, attrs, pos_b)
    return f


def bulge_size_formula(length: float, inner_len: float, tip_rad: float, avg_radius_mean: float):
    """``(length - inner_len + tip_rad) / avg_radius_mean``; ``None`` if the radius is not positive.

    >>> bulge_size_formula(10, 4, 2, 4)
    2.0
    """
    if avg_radius_mean is None or tip_rad is None:
        return None
    if not avg_radius_mean > 0:
        logger.warning("bulge size undefined for non-positive mean radius")
        return None
    return (length - inner_len + tip_rad) / avg_radius_mean


def bulge_size(graph: VesselGraph, edge, degrees: dict | None = None):
    """Bulge size of a leaf-to-branch edge, ``None`` for every other edge."""
    if edge.features is None or edge.is_loop:
        return None
    deg = degrees if degrees is not None else graph.degrees()
    da, db = deg[edge.a], deg[edge.b]
    f = edge.features
    if da == 1 and db > 2:
        return bulge_size_formula(f.length, f.inner_length_b, f.tip_radius_a, f.avgRadiusMean)
    if db == 1 and da > 2:
        return bulge_size_formula(f.length, f.inner_length_a, f.tip_radius_b, f.avgRadiusMean)
    return None


def update_bulge_sizes(graph: VesselGraph) -> None:
    deg = graph.degrees()
    for e in graph.edges.values():
        if e.features is not None:
            e.features.bulge_size = bulge_size(graph, e, deg)


def recompute_features(graph: VesselGraph, edge) -> None:
    edge.features = compute_edge_features(edge, edge.attributes, graph.nodes[edge.a].position,
                                          graph.nodes[edge.b].position)


def annotate_graph(fg: BlockedVolume, ids: BlockedVolume, graph: VesselGraph, *, scratch_dir=None,
                   tracker: MemoryTracker | None = None) -> VesselGraph:
    """Attach point attributes, features and bulge sizes to every edge (in place)."""
    attrs = accumulate_point_attributes(fg, ids, graph, scratch_dir=scratch_dir, tracker=tracker)
    for eid, e in graph.edges.items():
        e.attributes = attrs[eid]
        recompute_features(graph, e)
    update_bulge_sizes(graph)
    return graph

