"""Graph files: strict JSON with physical coordinates.

Floats are written with Python's shortest round-trip repr and keys in a
fixed order, so identical graphs give identical bytes.  Undefined values
(``None`` or non-finite numbers) are written as ``null``.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .graph import SERIALIZED_FEATURES, Edge, EdgeFeatures, Node, NodeKind, VesselGraph

FORMAT_VERSION = 1

_TOP = ("version", "spacing", "nodes", "edges")
_NODE = ("id", "pos", "kind", "voxel_count")
_EDGE = ("id", "a", "b", "centerline", "features")
_NULLABLE = {"minRadiusMean", "minRadiusStd", "maxRadiusMean", "maxRadiusStd", "avgRadiusMean",
             "avgRadiusStd", "roundnessMean", "roundnessStd", "bulge_size"}


class GraphFormatError(ValueError):
    """A graph file does not parse or does not match the schema."""

    def __init__(self, message, line=None, column=None):
        self.line, self.column = line, column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _point(p):
    return [_num(c) for c in p]


def graph_to_dict(g: VesselGraph) -> dict:
    nodes = [{"id": int(n.id), "pos": _point(n.position), "kind": NodeKind(n.kind).value,
              "voxel_count": n.voxel_count} for _, n in sorted(g.nodes.items())]
    edges = []
    for _, e in sorted(g.edges.items()):
        f = e.features if e.features is not None else EdgeFeatures()
        edges.append({"id": int(e.id), "a": int(e.a), "b": int(e.b),
                      "centerline": [_point(p) for p in np.asarray(e.centerline).reshape(-1, 3)],
                      "features": {k: _num(getattr(f, k)) for k in SERIALIZED_FEATURES}})
    return {"version": FORMAT_VERSION, "spacing": [float(s) for s in g.spacing], "nodes": nodes,
            "edges": edges}


def dumps_graph(g: VesselGraph) -> str:
    return json.dumps(graph_to_dict(g), allow_nan=False, separators=(",", ":")) + "\n"


def serialize_graph(g: VesselGraph, path) -> None:
    Path(path).write_text(dumps_graph(g), encoding="utf-8")


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise GraphFormatError(f"{where} must be an object")
    for k in obj:
        if k not in allowed:
            raise GraphFormatError(f"unknown field {k!r} in {where}")
    for k in allowed:
        if k not in obj:
            raise GraphFormatError(f"missing field {k!r} in {where}")


def _int(v, where):
    if isinstance(v, bool) or not isinstance(v, int):
        raise GraphFormatError(f"{where} must be an integer")
    return v


def _real(v, where, nullable=False):
    if v is None and nullable:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise GraphFormatError(f"{where} must be a number")
    return float(v)


def _vec3(v, where):
    if not isinstance(v, list) or len(v) != 3:
        raise GraphFormatError(f"{where} must be a list of 3 numbers")
    return [_real(c, where) for c in v]


def graph_from_dict(d) -> VesselGraph:
    _check_keys(d, _TOP, "graph")
    if d["version"] != FORMAT_VERSION:
        raise GraphFormatError(f"unsupported version {d['version']!r}")
    g = VesselGraph(spacing=tuple(_vec3(d["spacing"], "spacing")))
    if not isinstance(d["nodes"], list) or not isinstance(d["edges"], list):
        raise GraphFormatError("nodes and edges must be lists")
    for i, n in enumerate(d["nodes"]):
        where = f"nodes[{i}]"
        _check_keys(n, _NODE, where)
        nid = _int(n["id"], where + ".id")
        if nid in g.nodes:
            raise GraphFormatError(f"duplicate node id {nid}")
        try:
            kind = NodeKind(n["kind"])
        except ValueError:
            raise GraphFormatError(f"{where}.kind must be one of end, branch, loop") from None
        count = _int(n["voxel_count"], where + ".voxel_count")
        g.nodes[nid] = Node(nid, np.empty(0, dtype=np.int64), np.array(_vec3(n["pos"], where + ".pos")),
                            kind, count=count)
    for i, e in enumerate(d["edges"]):
        where = f"edges[{i}]"
        _check_keys(e, _EDGE, where)
        eid = _int(e["id"], where + ".id")
        if eid in g.edges:
            raise GraphFormatError(f"duplicate edge id {eid}")
        a, b = _int(e["a"], where + ".a"), _int(e["b"], where + ".b")
        for end in (a, b):
            if end not in g.nodes:
                raise GraphFormatError(f"{where} references missing node {end}")
        if not isinstance(e["centerline"], list):
            raise GraphFormatError(f"{where}.centerline must be a list")
        cl = np.array([_vec3(p, where + ".centerline") for p in e["centerline"]], dtype=np.float64).reshape(-1, 3)
        _check_keys(e["features"], SERIALIZED_FEATURES, where + ".features")
        f = EdgeFeatures()
        for k in SERIALIZED_FEATURES:
            setattr(f, k, _real(e["features"][k], f"{where}.features.{k}", nullable=k in _NULLABLE))
        g.edges[eid] = Edge(eid, a, b, cl, features=f)
    return g


def loads_graph(text: str) -> VesselGraph:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"malformed JSON: {exc.msg}", exc.lineno, exc.colno) from None
    return graph_from_dict(d)


def deserialize_graph(path) -> VesselGraph:
    return loads_graph(Path(path).read_text(encoding="utf-8"))


def write_stats(path, history, timings: bool = False) -> None:
    """One JSON object per iteration."""
    with open(path, "w", encoding="utf-8") as fh:
        for st in history:
            fh.write(st.to_json(timings=timings) + "\n")
