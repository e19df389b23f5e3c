"""Node/edge containers for proto and annotated vessel graphs."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np


class NodeKind(str, enum.Enum):
    END = "end"
    BRANCH = "branch"
    SYNTHETIC_LOOP = "loop"


class StructuralError(ValueError):
    """The skeleton or label volume is inconsistent with the graph."""


@dataclass
class Node:
    id: int
    voxels: np.ndarray
    position: np.ndarray
    kind: NodeKind
    # set when the voxels themselves are not available (graphs read from file)
    count: Optional[int] = None

    @property
    def voxel_count(self) -> int:
        return int(len(self.voxels)) if self.count is None else int(self.count)


def id_sets(sets) -> np.ndarray:
    """Object array holding one sorted tuple of ids per point."""
    sets = list(sets)
    out = np.empty(len(sets), dtype=object)
    for i, s in enumerate(sets):
        out[i] = tuple(sorted(s))
    return out


@dataclass
class PointAttributes:
    """Per-centerline-point accumulators, stored column-wise.

    ``touching`` lists, per point, the edges whose surface voxels are
    26-adjacent to the point's surface voxels.  ``is_inner`` is derived from
    it and from ``surface_count``.
    """

    volume: np.ndarray
    min_dist: np.ndarray
    max_dist: np.ndarray
    sum_dist: np.ndarray
    surface_count: np.ndarray
    is_inner: np.ndarray
    touching: np.ndarray = None

    def __post_init__(self):
        if self.touching is None:
            self.touching = id_sets([()] * len(self.volume))

    @classmethod
    def empty(cls, n: int) -> "PointAttributes":
        return cls(volume=np.zeros(n), min_dist=np.full(n, np.inf), max_dist=np.full(n, -np.inf),
                   sum_dist=np.zeros(n), surface_count=np.zeros(n, dtype=np.int64),
                   is_inner=np.ones(n, dtype=bool))

    def classify(self, other_edge) -> np.ndarray:
        """Recompute ``is_inner``; ``other_edge(i)`` says whether id ``i`` is another live edge."""
        self.is_inner = np.array([c == 0 or any(other_edge(i) for i in t)
                                  for c, t in zip(self.surface_count, self.touching)], dtype=bool)
        return self.is_inner

    def __len__(self):
        return int(self.volume.shape[0])

    @property
    def has_surface(self) -> np.ndarray:
        return self.surface_count > 0

    @property
    def avg_dist(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.has_surface, self.sum_dist / np.maximum(self.surface_count, 1), np.nan)

    @property
    def roundness(self) -> np.ndarray:
        # a point whose surface voxels all sit at distance 0 counts as round
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(self.max_dist > 0, self.min_dist / np.where(self.max_dist > 0, self.max_dist, 1.0), 1.0)
        return np.where(self.has_surface, r, np.nan)

    def reversed(self) -> "PointAttributes":
        return PointAttributes(*(getattr(self, f.name)[::-1].copy() for f in fields(self)))

    @classmethod
    def concat(cls, parts) -> "PointAttributes":
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)))


@dataclass
class EdgeFeatures:
    length: float = 0.0
    distance: float = 0.0
    straightness: float = 1.0
    volume: float = 0.0
    avg_cross_section: float = 0.0
    minRadiusMean: Optional[float] = None
    minRadiusStd: Optional[float] = None
    maxRadiusMean: Optional[float] = None
    maxRadiusStd: Optional[float] = None
    avgRadiusMean: Optional[float] = None
    avgRadiusStd: Optional[float] = None
    roundnessMean: Optional[float] = None
    roundnessStd: Optional[float] = None
    bulge_size: Optional[float] = None
    inner_length_a: float = 0.0
    inner_length_b: float = 0.0
    tip_radius_a: Optional[float] = None
    tip_radius_b: Optional[float] = None
    degenerate: bool = False


SERIALIZED_FEATURES = ("length", "distance", "straightness", "volume", "avg_cross_section",
                       "minRadiusMean", "minRadiusStd", "maxRadiusMean", "maxRadiusStd",
                       "avgRadiusMean", "avgRadiusStd", "roundnessMean", "roundnessStd",
                       "bulge_size")


@dataclass
class Edge:
    id: int
    a: int
    b: int
    centerline: np.ndarray
    source_voxels: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    attributes: Optional[PointAttributes] = None
    features: Optional[EdgeFeatures] = None

    @property
    def is_loop(self) -> bool:
        return self.a == self.b

    def other(self, node_id: int) -> int:
        return self.b if node_id == self.a else self.a

    def reversed(self) -> "Edge":
        attrs = self.attributes.reversed() if self.attributes is not None else None
        return Edge(self.id, self.b, self.a, self.centerline[::-1].copy(),
                    self.source_voxels[::-1].copy(), attrs, None)


@dataclass
class VesselGraph:
    """Nodes and edges keyed by id.  Also used for the unannotated proto graph."""

    nodes: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)
    spacing: tuple = (1.0, 1.0, 1.0)
    dims: Optional[tuple] = None
    # edge ids merged away, mapped to the id they were merged into
    aliases: dict = field(default_factory=dict)

    def resolve_edge(self, eid: int) -> Optional[int]:
        """Current id of edge ``eid`` after merges; ``None`` once it is gone."""
        while eid in self.aliases:
            eid = self.aliases[eid]
        return eid if eid in self.edges else None

    def classify_points(self, edge: "Edge") -> None:
        """Recompute the inner flags of ``edge`` against the current edges."""
        if edge.attributes is None:
            return
        own = edge.id

        def other(i):
            r = self.resolve_edge(int(i))
            return r is not None and r != own

        edge.attributes.classify(other)

    def incident(self, node_id: int) -> list:
        return [e for e in self.edges.values() if e.a == node_id or e.b == node_id]

    def degrees(self) -> dict:
        deg = {n: 0 for n in self.nodes}
        for e in self.edges.values():
            deg[e.a] += 1
            deg[e.b] += 1
        return deg

    def degree(self, node_id: int) -> int:
        return sum((e.a == node_id) + (e.b == node_id) for e in self.edges.values())

    def validate(self) -> None:
        for e in self.edges.values():
            if e.a not in self.nodes or e.b not in self.nodes:
                raise StructuralError(f"edge {e.id} references a missing node")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def __repr__(self):
        return f"VesselGraph(nodes={self.n_nodes}, edges={self.n_edges})"


ProtoVesselGraph = VesselGraph
