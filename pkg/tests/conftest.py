"""Brute-force oracles shared by the test modules."""
from collections import deque

import numpy as np
import pytest
from scipy import ndimage

UNASSIGNED = np.uint32(0xFFFFFFFF)
STRUCT26 = np.ones((3, 3, 3), dtype=bool)
STRUCT6 = ndimage.generate_binary_structure(3, 1)


def topology_counts(mask: np.ndarray) -> tuple:
    """(foreground 26-components, background 6-components); outside is background."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    _, nf = ndimage.label(m, structure=STRUCT26)
    _, nb = ndimage.label(~m, structure=STRUCT6)
    return nf, nb


def _bfs_components(cells, adjacent) -> int:
    cells = set(cells)
    seen, n = set(), 0
    for c in cells:
        if c in seen:
            continue
        n += 1
        todo = deque([c])
        seen.add(c)
        while todo:
            p = todo.popleft()
            for q in cells:
                if q not in seen and adjacent(p, q):
                    seen.add(q)
                    todo.append(q)
    return n


def simple_point_oracle(cube: np.ndarray) -> bool:
    """Definition-level simple point test on a 3x3x3 cube, by breadth-first search.

    The center is simple when the 26-neighbors in the object form one
    26-connected set and the background voxels among the 18-neighbors that
    are 6-connected (inside the 18-neighborhood) to a face neighbor form
    exactly one 6-connected set.
    """
    cube = np.asarray(cube, dtype=bool)
    offs = [(z, y, x) for z in range(3) for y in range(3) for x in range(3) if (z, y, x) != (1, 1, 1)]
    fg = [o for o in offs if cube[o]]
    if not fg:
        return False

    def adj26(p, q):
        return max(abs(a - b) for a, b in zip(p, q)) == 1

    def adj6(p, q):
        return sum(abs(a - b) for a, b in zip(p, q)) == 1

    if _bfs_components(fg, adj26) != 1:
        return False
    n18 = [o for o in offs if sum(abs(c - 1) for c in o) <= 2 and not cube[o]]
    faces = [o for o in n18 if sum(abs(c - 1) for c in o) == 1]
    if not faces:
        return False
    # keep only the background parts that reach a face neighbor
    reach, todo = set(faces), deque(faces)
    while todo:
        p = todo.popleft()
        for q in n18:
            if q not in reach and adj6(p, q):
                reach.add(q)
                todo.append(q)
    return _bfs_components(reach, adj6) == 1


def reference_assignment(mask, graph, spacing):
    """Dense in-memory branch assignment.

    1. every foreground voxel takes the edge of its nearest centerline point
       (smallest edge id, then point index, on ties);
    2. per edge, only the 26-component holding the voxel at the middle
       centerline point (or a 26-neighbor of it carrying the edge) keeps its
       label;
    3. unlabeled foreground is flooded synchronously: each round, every
       unlabeled voxel with labeled face neighbors takes their majority label
       (smallest on ties).
    """
    sp = np.asarray(spacing, float)
    pts, eids = [], []
    for eid in sorted(graph.edges):
        cl = np.asarray(graph.edges[eid].centerline).reshape(-1, 3)
        pts.append(cl)
        eids += [eid] * len(cl)
    pts = np.concatenate(pts)
    eids = np.array(eids)
    z, y, x = np.nonzero(mask)
    q = np.stack([x, y, z], -1) * sp
    ids = np.full(mask.shape, UNASSIGNED, np.uint32)
    for i in range(0, len(q), 4096):
        d = ((q[i:i + 4096, None, :] - pts[None]) ** 2).sum(-1)
        j = np.argmax(d == d.min(1, keepdims=True), axis=1)
        ids[z[i:i + 4096], y[i:i + 4096], x[i:i + 4096]] = eids[j]
    out = np.full_like(ids, UNASSIGNED)
    for eid in sorted(graph.edges):
        cl = np.asarray(graph.edges[eid].centerline).reshape(-1, 3)
        vx, vy, vz = np.clip(np.rint(cl[len(cl) // 2] / sp).astype(int), 0, np.array(mask.shape[::-1]) - 1)
        comp, _ = ndimage.label(ids == eid, structure=STRUCT26)
        seed = None
        if ids[vz, vy, vx] == eid:
            seed = (vz, vy, vx)
        else:
            for dz in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        p = (vz + dz, vy + dy, vx + dx)
                        if seed is None and all(0 <= p[k] < mask.shape[k] for k in range(3)) and ids[p] == eid:
                            seed = p
        if seed is not None:
            out[comp == comp[seed]] = eid
    nz, ny, nx = mask.shape
    while True:
        pending = mask & (out == UNASSIGNED)
        pad = np.pad(out, 1, constant_values=UNASSIGNED)
        nbs = [pad[1 + dz:1 + dz + nz, 1 + dy:1 + dy + ny, 1 + dx:1 + dx + nx]
               for dz, dy, dx in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]]
        new = out.copy()
        changed = False
        for p in zip(*np.nonzero(pending)):
            c = [int(n[p]) for n in nbs if n[p] != UNASSIGNED]
            if not c:
                continue
            vals, cnt = np.unique(c, return_counts=True)
            new[p] = vals[np.argmax(cnt)]
            changed = True
        out = new
        if not changed:
            return out


def random_blobs(rng, shape, density=None, grow=None):
    """Dilated random seeds: tubes, sheets and lumps with holes and tunnels."""
    density = rng.uniform(0.002, 0.03) if density is None else density
    grow = int(rng.integers(1, 4)) if grow is None else grow
    return ndimage.binary_dilation(rng.random(shape) < density, iterations=grow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
