import numpy as np
import pytest

from vesselgraph.features import (accumulate_point_attributes, bulge_size, bulge_size_formula,
                                  compute_edge_features, inner_length, recompute_features, tip_radius,
                                  update_bulge_sizes)
from vesselgraph.graph import Edge, Node, NodeKind, PointAttributes, VesselGraph, id_sets
from vesselgraph.refine import merge_degree2, prunable_edges, refine
from vesselgraph.volume import volume_from_array


def attrs(n, radius=1.0, touching=None):
    a = PointAttributes(volume=np.ones(n), min_dist=np.full(n, radius), max_dist=np.full(n, radius),
                        sum_dist=np.full(n, 2 * radius), surface_count=np.full(n, 2),
                        is_inner=np.zeros(n, bool), touching=id_sets(touching or [()] * n))
    return a


def line(x0, x1, y=0.0):
    xs = np.arange(x0, x1 + 1, dtype=float)
    return np.stack([xs, np.full_like(xs, y), np.zeros_like(xs)], axis=1)


def graph_from(nodes, edges):
    g = VesselGraph()
    for nid, pos in nodes.items():
        g.nodes[nid] = Node(nid, np.array([nid]), np.asarray(pos, float), NodeKind.END)
    for eid, (a, b, cl, at) in edges.items():
        g.edges[eid] = Edge(eid, a, b, cl, attributes=at)
    for e in g.edges.values():
        g.classify_points(e)
        recompute_features(g, e)
    update_bulge_sizes(g)
    return g


def test_bulge_size_formula_cases():
    assert bulge_size_formula(10, 4, 2, 4) == 2.0
    assert bulge_size_formula(6, 6, 3, 3) == 1.0
    assert bulge_size_formula(3, 0, 0, 6) == 0.5
    assert bulge_size_formula(1, 0, 1, 0) is None
    assert bulge_size_formula(1, 0, None, 1) is None


def test_inner_length_runs_from_the_node():
    cl = line(1, 5)
    inner = np.array([True, True, False, True, False])
    assert inner_length(cl, inner, np.array([0.0, 0, 0])) == pytest.approx(2.0)
    assert inner_length(cl, np.zeros(5, bool), np.zeros(3)) == 0.0
    assert inner_length(cl, np.ones(5, bool), np.zeros(3)) == pytest.approx(5.0)


def test_tip_radius_uses_point_closest_to_node():
    a = attrs(3)
    a.min_dist[:] = [1.0, 2.0, 3.0]
    assert tip_radius(line(1, 3), a, np.array([4.0, 0, 0])) == 3.0
    a.surface_count[2] = 0
    assert tip_radius(line(1, 3), a, np.array([4.0, 0, 0])) is None


def test_edge_features_of_a_straight_edge():
    a = attrs(9, radius=2.0)
    a.min_dist[:] = 1.0
    a.max_dist[:] = 4.0
    e = Edge(0, 0, 1, line(1, 9))
    f = compute_edge_features(e, a, np.zeros(3), np.array([10.0, 0, 0]))
    assert f.length == pytest.approx(10.0) and f.distance == pytest.approx(10.0)
    assert f.straightness == pytest.approx(1.0)
    assert f.volume == 9.0 and f.avg_cross_section == pytest.approx(0.9)
    assert f.roundnessMean == pytest.approx(0.25) and f.roundnessStd == pytest.approx(0.0)
    assert f.avgRadiusMean == pytest.approx(2.0) and f.minRadiusMean == 1.0 and f.maxRadiusMean == 4.0


def test_degenerate_and_surfaceless_edges():
    a = PointAttributes.empty(1)
    e = Edge(0, 0, 1, np.zeros((1, 3)))
    f = compute_edge_features(e, a, np.zeros(3), np.zeros(3))
    assert f.degenerate and f.straightness == 1.0
    assert f.avgRadiusMean is None and f.roundnessMean is None


def test_roundness_is_one_when_surface_touches_the_centerline():
    a = attrs(2, radius=0.0)
    assert a.roundness.tolist() == [1.0, 1.0]


def test_point_attributes_on_a_voxel_bar():
    m = np.zeros((5, 5, 20), bool)
    m[1:4, 1:4, 1:19] = True
    g = graph_from({0: (1.0, 2, 2), 1: (18.0, 2, 2)}, {})
    g.edges[0] = Edge(0, 0, 1, np.stack([np.arange(2.0, 18), np.full(16, 2.0), np.full(16, 2.0)], 1))
    fg = volume_from_array(m)
    from vesselgraph.assign import assign_branches
    ids, _ = assign_branches(fg, g)
    out = accumulate_point_attributes(fg, ids, g)[0]
    assert out.volume.sum() == pytest.approx(m.sum())
    interior = slice(2, -2)
    # the cross-section is a 3x3 square: edge voxels at 1, corners at sqrt(2)
    assert np.allclose(out.min_dist[interior], 1.0)
    assert np.allclose(out.max_dist[interior], np.sqrt(2))
    assert np.allclose(out.avg_dist[interior], (4 + 4 * np.sqrt(2)) / 8)
    assert not out.is_inner[interior].any()


def _star(bulges_len):
    """A hub at the origin with leaf edges along +x, +y, -x, -y of the given lengths."""
    dirs = [(1, 0), (0, 1), (-1, 0), (0, -1)]
    nodes = {0: (0.0, 0, 0)}
    edges = {}
    for i, L in enumerate(bulges_len):
        d = np.array([*dirs[i], 0.0])
        nodes[i + 1] = tuple(d * L)
        cl = np.array([d * k for k in range(1, L)])
        edges[i] = (0, i + 1, cl, attrs(L - 1, radius=2.0))
    return graph_from(nodes, edges)


def test_bulge_sizes_only_on_leaf_to_branch_edges():
    g = _star([3, 6, 10, 20])
    sizes = {e.id: e.features.bulge_size for e in g.edges.values()}
    # no inner points: (length + tip radius) / radius
    assert sizes == {0: pytest.approx(2.5), 1: pytest.approx(4.0), 2: pytest.approx(6.0), 3: pytest.approx(11.0)}
    chain = graph_from({0: (0.0, 0, 0), 1: (5.0, 0, 0)}, {0: (0, 1, line(1, 4), attrs(4))})
    assert bulge_size(chain, chain.edges[0]) is None


def test_pruning_keeps_the_two_largest_edges_at_a_node():
    g = _star([3, 4, 5])
    assert prunable_edges(g, 10.0) == {0}
    g = _star([3, 4, 5, 20])
    assert prunable_edges(g, 3.5) == {0, 1}


def test_refine_prunes_then_merges():
    g = _star([3, 10, 12])
    refine(g, 3.0)
    assert (g.n_nodes, g.n_edges) == (2, 1)
    (e,) = g.edges.values()
    # the hub barycenter is now a centerline point and lengths add up
    assert e.features.length == pytest.approx(22.0)
    assert any(np.allclose(p, 0) for p in e.centerline)
    assert g.aliases and g.resolve_edge(max(g.aliases)) == e.id
    assert g.resolve_edge(0) is None


def test_merge_keeps_loop_anchor():
    g = graph_from({0: (0.0, 0, 0)}, {0: (0, 0, np.array([[1.0, 1, 0], [2, 0, 0], [1, -1, 0]]), attrs(3))})
    merge_degree2(g)
    assert (g.n_nodes, g.n_edges) == (1, 1)


def test_touching_a_merged_edge_no_longer_makes_points_inner():
    # three edges meet at node 1; edge 2 is a short spur whose surface touches both others
    near = [(2,), (2,), ()]
    g = graph_from({0: (0.0, 0, 0), 1: (4.0, 0, 0), 2: (8.0, 0, 0), 3: (4.0, 2, 0)},
                   {0: (0, 1, line(1, 3), attrs(3, touching=[(), (), (2,)])),
                    1: (1, 2, line(5, 7), attrs(3, touching=near)),
                    2: (1, 3, np.array([[4.0, 1, 0]]), attrs(1, touching=[(0, 1)]))})
    assert g.edges[0].attributes.is_inner.tolist() == [False, False, True]
    assert g.edges[1].attributes.is_inner.tolist() == [True, True, False]
    refine(g, 5.0)
    (e,) = g.edges.values()
    # only the inserted junction point, which has no surface voxels, stays inner
    assert e.attributes.is_inner.tolist() == [False, False, False, True, False, False, False]
    assert e.features.inner_length_a == 0.0 and e.features.inner_length_b == 0.0


def test_touch_between_halves_of_a_merged_edge_is_ignored():
    g = graph_from({0: (0.0, 0, 0), 1: (4.0, 0, 0), 2: (8.0, 0, 0)},
                   {0: (0, 1, line(1, 3), attrs(3, touching=[(), (), (1,)])),
                    1: (1, 2, line(5, 7), attrs(3, touching=[(0,), (), ()]))})
    assert g.edges[0].attributes.is_inner[2]
    merge_degree2(g)
    (e,) = g.edges.values()
    assert e.attributes.is_inner.tolist() == [False, False, False, True, False, False, False]
