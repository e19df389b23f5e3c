"""Synthetic phantoms and the evaluation helpers built around them.

Phantom geometry is given in physical units; at unit spacing one unit is one
voxel.  Rasterization evaluates primitives at voxel centers ``index * spacing``
block by block, so large phantoms never exist as a dense array.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .memory import MemoryTracker
from .thinning import is_simple
from .volume import BlockedVolume, create_volume, is_foreground

logger = logging.getLogger(__name__)

PHANTOM_KINDS = ("cylinder", "y_junction", "torus", "bumpy_tube", "cow_like_bumps")


# -- primitives ---------------------------------------------------------------

@dataclass(frozen=True)
class Capsule:
    """Points within ``radius`` of the segment ``p0``-``p1``; ``flat`` cuts the caps off."""

    p0: tuple
    p1: tuple
    radius: float
    flat: bool = False

    def bounds(self):
        a, b = np.asarray(self.p0, float), np.asarray(self.p1, float)
        return np.minimum(a, b) - self.radius, np.maximum(a, b) + self.radius

    def contains(self, p):
        a, b = np.asarray(self.p0, float), np.asarray(self.p1, float)
        ab = b - a
        t = ((p - a) @ ab) / float(ab @ ab)
        if self.flat:
            inside = (t >= 0) & (t <= 1)
        else:
            inside = np.ones(len(p), dtype=bool)
        tc = np.clip(t, 0.0, 1.0)
        d2 = ((p - (a + tc[:, None] * ab)) ** 2).sum(axis=1)
        return inside & (d2 <= self.radius ** 2 + 1e-9)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    radii: tuple
    axes: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def bounds(self):
        c = np.asarray(self.center, float)
        r = max(self.radii)
        return c - r, c + r

    def contains(self, p):
        q = p - np.asarray(self.center, float)
        s = np.zeros(len(p))
        for ax, r in zip(self.axes, self.radii):
            s += (q @ np.asarray(ax, float) / r) ** 2
        return s <= 1.0 + 1e-9


@dataclass(frozen=True)
class Torus:
    center: tuple
    major: float
    minor: float

    def bounds(self):
        c = np.asarray(self.center, float)
        e = np.array([self.major + self.minor, self.major + self.minor, self.minor])
        return c - e, c + e

    def contains(self, p):
        q = p - np.asarray(self.center, float)
        rho = np.hypot(q[:, 0], q[:, 1])
        return (rho - self.major) ** 2 + q[:, 2] ** 2 <= self.minor ** 2 + 1e-9


# -- phantoms -----------------------------------------------------------------

@dataclass
class Phantom:
    """Parametric test object.

    ``radius``/``length`` describe the main tube (arm length for
    ``y_junction``, major radius for ``torus``).  Bumps sit on the tube
    surface, away from its ends; ``bump_heights`` overrides the per-bump
    protrusion for ``cow_like_bumps``.  A positive ``reference_height``
    adds one wide side branch of that height at the middle of a
    ``bumpy_tube``, meant to survive refinement.
    """

    kind: str = "cylinder"
    radius: float = 3.0
    length: float = 40.0
    bump_radius: float = 2.0
    bump_height: float = 1.0
    bump_count: int = 20
    bump_heights: tuple = ()
    minor_radius: float = 3.0
    bump_shape: str = "finger"
    flat_ends: bool = True
    seed: int = 0
    margin: float = 4.0
    reference_height: float = 0.0
    reference_radius: float | None = None

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; expected one of {PHANTOM_KINDS}")

    def primitives(self) -> list:
        kind = self.kind
        if kind == "cylinder":
            return [Capsule((0, 0, 0), (self.length - 1, 0, 0), self.radius, self.flat_ends)]
        if kind == "y_junction":
            out = []
            for k in range(3):
                ang = math.pi / 2 + 2 * math.pi * k / 3
                tip = (self.length * math.cos(ang), self.length * math.sin(ang), 0.0)
                out.append(Capsule((0, 0, 0), tip, self.radius))
            return out
        if kind == "torus":
            return [Torus((0, 0, 0), self.length, self.minor_radius)]
        heights = self.bump_heights if kind == "cow_like_bumps" else (self.bump_height,) * self.bump_count
        out = [Capsule((0, 0, 0), (self.length - 1, 0, 0), self.radius, self.flat_ends)]
        if self.has_reference:
            mid = (self.length - 1) / 2
            # flat top: the skeleton end then sits one radius below it at any resolution
            top = (mid, self.radius + self.reference_height, 0.0)
            out.append(Capsule((mid, 0.0, 0.0), top, self.reference_width, flat=True))
        return out + self._bumps(heights)

    @property
    def has_reference(self) -> bool:
        return self.kind == "bumpy_tube" and self.reference_height > 0

    @property
    def reference_width(self) -> float:
        return 0.5 * self.radius if self.reference_radius is None else self.reference_radius

    def _bumps(self, heights) -> list:
        rng = np.random.default_rng(self.seed)
        n = len(heights)
        out = []
        # a bump too close to an end would outgrow the end itself during pruning
        clear = min(2 * (self.radius + self.bump_radius + max(heights, default=0.0)), (self.length - 1) / 2)
        usable = max(self.length - 1 - 2 * clear, 0.0)
        mid = (self.length - 1) / 2
        for i, h in enumerate(heights):
            x = clear + (usable * (i + 0.5) / n if n else 0)
            if self.has_reference and abs(x - mid) < self.reference_width + self.bump_radius + h + 1:
                continue
            ang = 2 * math.pi * (i * 0.381966 + rng.uniform(-0.05, 0.05))
            u = np.array([0.0, math.cos(ang), math.sin(ang)])
            v = np.array([0.0, -math.sin(ang), math.cos(ang)])
            if self.bump_shape == "finger":
                # capsule from the tube axis outwards; its apex sits h above the tube surface
                top = u * (self.radius + h - self.bump_radius) + np.array([x, 0, 0])
                out.append(Capsule((x, 0.0, 0.0), tuple(top), self.bump_radius))
            else:
                # half ellipsoid standing on the tube surface: base radius bump_radius, height h
                c = u * self.radius + np.array([x, 0, 0])
                out.append(Ellipsoid(tuple(c), (h, self.bump_radius, self.bump_radius),
                                     (tuple(u), tuple(v), (1.0, 0.0, 0.0))))
        return out

    def expected_counts(self, threshold: float = 1.5) -> tuple:
        """``(nodes, edges)`` after refinement with bulge threshold ``threshold``."""
        if self.kind == "y_junction":
            return 4, 3
        if self.kind == "torus":
            return 1, 1
        if self.kind == "cow_like_bumps":
            # a finger bump's measured bulge size runs about one below h / bump_radius
            kept = sum(1 for h in self.bump_heights if h / self.bump_radius >= threshold + 1)
            if kept == 0:
                return 2, 1
            return 2 + 2 * kept, 1 + 2 * kept
        if self.has_reference:
            return 4, 3
        return 2, 1


# Named phantoms used by the CLI and the test suites.  Each "bump_*" tube carries
# one finger bump whose bulge size comes out near 0.5, 1 and 2 respectively.
PRESETS = {
    "cylinder": dict(kind="cylinder", radius=3, length=40),
    "y_junction": dict(kind="y_junction", radius=6, length=30),
    "torus": dict(kind="torus", length=12, minor_radius=3),
    "bumpy_tube": dict(kind="bumpy_tube", radius=6, length=160, bump_radius=3, bump_height=4,
                       bump_count=20, flat_ends=False),
    "bumpy_reference": dict(kind="bumpy_tube", radius=8, length=80, bump_radius=4, bump_height=5,
                            bump_count=12, flat_ends=False, reference_height=24, reference_radius=6),
    "bump_small": dict(kind="cow_like_bumps", radius=6, length=48, bump_radius=3, bump_heights=(3.0,)),
    "bump_medium": dict(kind="cow_like_bumps", radius=6, length=48, bump_radius=3, bump_heights=(6.0,)),
    "bump_large": dict(kind="cow_like_bumps", radius=6, length=48, bump_radius=3, bump_heights=(9.0,)),
}


def preset(name: str, **overrides) -> Phantom:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return Phantom(**{**PRESETS[name], **overrides})


@dataclass
class PhantomVolume:
    volume: BlockedVolume
    phantom: Phantom
    origin: tuple
    expected_nodes: int
    expected_edges: int
    metadata: dict = field(default_factory=dict)


def phantom_bounds(p: Phantom):
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for prim in p.primitives():
        a, b = prim.bounds()
        lo = np.minimum(lo, a)
        hi = np.maximum(hi, b)
    return lo, hi


def synth_phantom(p: Phantom, dims=None, spacing=(1.0, 1.0, 1.0), *, scratch_dir=None, path=None,
                  tracker: MemoryTracker | None = None, threshold: float = 1.5) -> PhantomVolume:
    """Rasterize ``p`` centered in a volume of ``dims`` (or the tightest fit plus margin)."""
    sp = np.asarray(spacing, dtype=np.float64)
    lo, hi = phantom_bounds(p)
    extent = hi - lo
    if dims is None:
        dims = tuple(int(math.ceil((e + 2 * p.margin) / s)) + 1 for e, s in zip(extent, sp))
    dims = tuple(int(d) for d in dims)
    box = (np.asarray(dims) - 1) * sp
    if (extent > box + 1e-9).any():
        raise ValueError(f"phantom extent {extent.tolist()} exceeds volume {box.tolist()}")
    # center the phantom, snapping the offset to the grid so rasterization is reproducible
    origin = np.round(((box - extent) / 2 - lo) / sp) * sp
    prims = p.primitives()
    pb = [tuple(x + origin for x in prim.bounds()) for prim in prims]
    vol = create_volume(dims, spacing, "binary2bit", scratch_dir, path=path, tracker=tracker)
    for b in vol.iter_blocks():
        blo, bhi = vol.block_box(b)
        plo = np.asarray(blo) * sp
        phi = (np.asarray(bhi) - 1) * sp
        hits = [prim for prim, (a, c) in zip(prims, pb) if (a <= phi).all() and (c >= plo).all()]
        if not hits:
            continue
        nz, ny, nx = (h - l for l, h in zip(blo[::-1], bhi[::-1]))
        z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        pts = (np.stack([x + blo[0], y + blo[1], z + blo[2]], axis=-1).reshape(-1, 3) * sp) - origin
        inside = np.zeros(len(pts), dtype=bool)
        for prim in hits:
            inside |= prim.contains(pts)
        if inside.any():
            vol.write_box(blo, inside.reshape(nz, ny, nx).astype(np.uint8))
    n, e = p.expected_counts(threshold)
    return PhantomVolume(vol, p, tuple(origin.tolist()), n, e, {"kind": p.kind, "seed": p.seed})


# -- scaling ------------------------------------------------------------------

def _mirror_index(c: np.ndarray, d: int) -> np.ndarray:
    t, r = np.divmod(c, d)
    return np.where(t % 2 == 1, d - 1 - r, r)


def scale_volume(v: BlockedVolume, scale: int, strategy: str = "resample", *, scratch_dir=None,
                 path=None, tracker: MemoryTracker | None = None, max_voxels: int | None = None) -> BlockedVolume:
    """Enlarge ``v`` by an integer factor.

    ``resample`` replicates every voxel into a ``scale^3`` cube and divides
    the spacing by ``scale``.  ``mirror`` tiles the volume ``scale`` times per
    axis, reflecting every odd tile, and keeps the spacing.
    """
    if scale < 1:
        raise ValueError("scale must be at least 1")
    if strategy not in ("resample", "mirror"):
        raise ValueError("strategy must be 'resample' or 'mirror'")
    dims = tuple(d * scale for d in v.dims)
    if max_voxels is not None and int(np.prod(dims)) > max_voxels:
        raise ValueError(f"scaled volume of {int(np.prod(dims))} voxels exceeds the quota of {max_voxels}")
    spacing = tuple(s / scale for s in v.spacing) if strategy == "resample" else v.spacing
    out = create_volume(dims, spacing, "binary2bit", scratch_dir, path=path, tracker=tracker or v.tracker)
    for b in out.iter_blocks():
        lo, hi = out.block_box(b)
        if strategy == "resample":
            idx = [np.arange(l, h) // scale for l, h in zip(lo, hi)]
        else:
            idx = [_mirror_index(np.arange(l, h), d) for l, h, d in zip(lo, hi, v.dims)]
        slo = [int(i.min()) for i in idx]
        shi = [int(i.max()) + 1 for i in idx]
        src = v.read_box(slo, shi)
        ix, iy, iz = (i - s for i, s in zip(idx, slo))
        blk = src[np.ix_(iz, iy, ix)]
        f = is_foreground(blk)
        if f.any():
            out.write_box(lo, f.astype(np.uint8))
    return out


# -- surface noise -------------------------------------------------------------

class _IndexedSet:
    """Set of ints with O(1) insert, remove and uniform sampling."""

    def __init__(self, items=()):
        self.items = []
        self.where = {}
        for i in items:
            self.add(i)

    def add(self, x):
        if x not in self.where:
            self.where[x] = len(self.items)
            self.items.append(x)

    def discard(self, x):
        i = self.where.pop(x, None)
        if i is None:
            return
        last = self.items.pop()
        if i < len(self.items):
            self.items[i] = last
            self.where[last] = i

    def __len__(self):
        return len(self.items)


_FACE = [(0, 0, 1), (0, 0, -1), (0, 1, 0), (0, -1, 0), (1, 0, 0), (-1, 0, 0)]


def _surface_flags(f: np.ndarray) -> np.ndarray:
    """Voxels with a face neighbor of the other state (interior of the array only)."""
    out = np.zeros_like(f)
    c = f[1:-1, 1:-1, 1:-1]
    acc = np.zeros_like(c)
    for dz, dy, dx in _FACE:
        acc |= f[1 + dz:f.shape[0] - 1 + dz, 1 + dy:f.shape[1] - 1 + dy, 1 + dx:f.shape[2] - 1 + dx] != c
    out[1:-1, 1:-1, 1:-1] = acc
    return out


def add_surface_noise(v: BlockedVolume, level: float, seed: int, *, scratch_dir=None, path=None,
                      tracker: MemoryTracker | None = None) -> tuple:
    """Flip random surface voxels while keeping the topology.

    Candidates are foreground and background voxels with a face neighbor of
    the other state; they are drawn with replacement from a PCG64 generator
    seeded with ``seed`` and flipped only when simple.  The target is
    ``floor(level * n)`` accepted flips where ``n`` is the initial number of
    foreground surface voxels.  Voxels on the volume border are never
    touched.  Returns ``(volume, achieved_level)``.
    """
    if not 0.0 <= level <= 1.0:
        raise ValueError("level must lie in [0, 1]")
    dx, dy, dz = v.dims
    f = is_foreground(v.read_box((0, 0, 0), v.dims))
    surf = _surface_flags(f)
    n_surface = int((surf & f).sum())
    target = int(math.floor(level * n_surface))
    cand = _IndexedSet(int(i) for i in np.flatnonzero(surf.ravel()))
    rng = np.random.Generator(np.random.PCG64(seed))
    accepted = attempts = 0
    limit = 100 * target
    while accepted < target and attempts < limit and len(cand):
        attempts += 1
        pos = cand.items[int(rng.integers(len(cand)))]
        z, rem = divmod(pos, dx * dy)
        y, x = divmod(rem, dx)
        nb = f[z - 1:z + 2, y - 1:y + 2, x - 1:x + 2].copy()
        nb[1, 1, 1] = True
        if not is_simple(nb):
            continue
        f[z, y, x] = not f[z, y, x]
        accepted += 1
        for zz in range(max(1, z - 1), min(dz - 1, z + 2)):
            for yy in range(max(1, y - 1), min(dy - 1, y + 2)):
                for xx in range(max(1, x - 1), min(dx - 1, x + 2)):
                    p = xx + dx * (yy + dy * zz)
                    s = any(f[zz + a, yy + b, xx + c] != f[zz, yy, xx] for a, b, c in _FACE)
                    if s:
                        cand.add(p)
                    else:
                        cand.discard(p)
    if accepted < target:
        logger.warning("surface noise reached %d of %d flips", accepted, target)
    out = create_volume(v.dims, v.spacing, "binary2bit", scratch_dir, path=path, tracker=tracker or v.tracker)
    for b in out.iter_blocks():
        lo, hi = out.block_box(b)
        sub = f[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]]
        if sub.any():
            out.write_box(lo, sub.astype(np.uint8))
    achieved = accepted / n_surface if n_surface else 0.0
    return out, achieved


# -- graph summaries -----------------------------------------------------------

def _summary(graph) -> dict:
    from .graph import SERIALIZED_FEATURES
    feats = {}
    for name in SERIALIZED_FEATURES:
        vals = np.array([getattr(e.features, name) for e in graph.edges.values()
                         if e.features is not None and getattr(e.features, name) is not None], dtype=float)
        feats[name] = {"mean": float(vals.mean()) if vals.size else None,
                       "std": float(vals.std()) if vals.size else None,
                       "count": int(vals.size)}
    return {"nodes": graph.n_nodes, "edges": graph.n_edges, "features": feats}


def _rel(a, b):
    if a is None or b is None:
        return None
    denom = max(abs(a), abs(b))
    return 0.0 if denom == 0 else abs(a - b) / denom


def compare_graph_summaries(a, b) -> dict:
    """Compare two graphs (objects or file paths) by counts and feature distributions."""
    from .io import deserialize_graph
    ga = deserialize_graph(a) if not hasattr(a, "edges") else a
    gb = deserialize_graph(b) if not hasattr(b, "edges") else b
    sa, sb = _summary(ga), _summary(gb)
    diff = {"nodes": _rel(sa["nodes"], sb["nodes"]), "edges": _rel(sa["edges"], sb["edges"]), "features": {}}
    for name in sa["features"]:
        fa, fb = sa["features"][name], sb["features"][name]
        diff["features"][name] = {"mean": _rel(fa["mean"], fb["mean"]), "std": _rel(fa["std"], fb["std"])}
    mismatch = sa["nodes"] != sb["nodes"] or sa["edges"] != sb["edges"]
    return {"a": sa, "b": sb, "relative_difference": diff, "structural_mismatch": mismatch,
            "edge_count_difference": sb["edges"] - sa["edges"]}


def format_report(report: dict) -> str:
    return json.dumps(report, indent=2)


__all__ = [
    "Capsule", "Ellipsoid", "Torus", "Phantom", "PhantomVolume", "PHANTOM_KINDS", "PRESETS", "preset",
    "synth_phantom",
    "scale_volume", "add_surface_noise", "compare_graph_summaries", "format_report",
]
