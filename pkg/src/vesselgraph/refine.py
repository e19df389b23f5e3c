"""Pruning of bulging edges and merging of degree-2 chains."""
from __future__ import annotations

import logging

import numpy as np

from .features import recompute_features, update_bulge_sizes
from .graph import Edge, PointAttributes, VesselGraph

logger = logging.getLogger(__name__)


def _junction_attributes() -> PointAttributes:
    return PointAttributes.empty(1)


def _merge_pair(graph: VesselGraph, node_id: int, e1: Edge, e2: Edge) -> Edge:
    # orient e1 to end at the node and e2 to start there
    if e1.b != node_id:
        e1 = e1.reversed()
    if e2.a != node_id:
        e2 = e2.reversed()
    node = graph.nodes[node_id]
    centerline = np.concatenate([e1.centerline, node.position.reshape(1, 3), e2.centerline])
    voxels = np.concatenate([e1.source_voxels, e2.source_voxels])
    attrs = None
    if e1.attributes is not None and e2.attributes is not None:
        attrs = PointAttributes.concat([e1.attributes, _junction_attributes(), e2.attributes])
    merged = Edge(min(e1.id, e2.id), e1.a, e2.b, centerline, voxels, attrs)
    return merged


def merge_degree2(graph: VesselGraph) -> VesselGraph:
    """Merge the two edges of every degree-2 node (in place).

    The node's barycenter becomes a centerline point of the merged edge, so
    lengths add up exactly.  A node whose degree comes from one self-loop is
    kept as the loop's anchor.  The removed id is recorded in
    ``graph.aliases`` and inner flags of the merged edge are recomputed.
    """
    while True:
        incident = {n: [] for n in graph.nodes}
        for eid in sorted(graph.edges):
            e = graph.edges[eid]
            incident[e.a].append(e)
            if e.b != e.a:
                incident[e.b].append(e)
        target = None
        for n in sorted(incident):
            inc = incident[n]
            if len(inc) == 2 and not inc[0].is_loop and not inc[1].is_loop:
                target = n
                break
        if target is None:
            return graph
        e1, e2 = incident[target]
        merged = _merge_pair(graph, target, e1, e2)
        del graph.edges[e1.id], graph.edges[e2.id]
        del graph.nodes[target]
        graph.edges[merged.id] = merged
        graph.aliases[max(e1.id, e2.id)] = merged.id
        if merged.attributes is not None:
            # the two halves no longer count as different edges for each other
            graph.classify_points(merged)
            recompute_features(graph, merged)


def remove_orphans(graph: VesselGraph) -> None:
    used = {e.a for e in graph.edges.values()} | {e.b for e in graph.edges.values()}
    for n in [n for n in graph.nodes if n not in used]:
        del graph.nodes[n]


def prunable_edges(graph: VesselGraph, t: float) -> set:
    """Edges deleted by one pass: per node, bulging edges below ``t`` minus the retained two."""
    incident = {n: [] for n in graph.nodes}
    for eid in sorted(graph.edges):
        e = graph.edges[eid]
        incident[e.a].append(e)
        if e.b != e.a:
            incident[e.b].append(e)
    doomed = set()
    for n in sorted(incident):
        inc = incident[n]
        cand = [e for e in inc if e.features is not None and e.features.bulge_size is not None
                and e.features.bulge_size < t]
        while cand and len(inc) - len(cand) < 2:
            cand.remove(max(cand, key=lambda e: (e.features.bulge_size, e.id)))
        doomed.update(e.id for e in cand)
    return doomed


def refine(graph: VesselGraph, t: float, *, max_passes: int | None = None) -> VesselGraph:
    """Prune bulging edges with bulge size below ``t`` until none is left (in place)."""
    if t < 0:
        raise ValueError("bulge threshold must be nonnegative")
    passes = 0
    while True:
        update_bulge_sizes(graph)
        doomed = prunable_edges(graph, t)
        for eid in doomed:
            del graph.edges[eid]
        if doomed:
            remove_orphans(graph)
            # surface contact with a deleted edge no longer makes a point inner
            for e in graph.edges.values():
                if e.attributes is not None:
                    graph.classify_points(e)
                    recompute_features(graph, e)
        merge_degree2(graph)
        update_bulge_sizes(graph)
        passes += 1
        if not doomed or (max_passes is not None and passes >= max_passes):
            return graph
