"""Block-streamed connected component labeling.

Blocks are visited in lexicographic order.  Each block is labeled locally,
its voxels receive provisional ids that are written to a disk-backed label
volume, and a union-find over provisional ids merges components across the
faces, edges and corners shared with already visited blocks.  Two voxels are
connected when they are adjacent (6 or 26) and carry the same value.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .memory import MemoryTracker, default_tracker
from .volume import UNASSIGNED, BlockedVolume, create_volume

_U32 = np.int64(0xFFFFFFFF)


def _offsets(connectivity: int) -> np.ndarray:
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dz, dy, dx) == (0, 0, 0):
                    continue
                if connectivity == 6 and abs(dz) + abs(dy) + abs(dx) != 1:
                    continue
                offs.append((dz, dy, dx))
    return np.array(offs, dtype=np.int64)


OFFSETS_26 = _offsets(26)
OFFSETS_6 = _offsets(6)


def neighbor_offsets(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return OFFSETS_26
    if connectivity == 6:
        return OFFSETS_6
    raise ValueError("connectivity must be 6 or 26")


def _backward(offsets: np.ndarray) -> np.ndarray:
    keep = [o for o in offsets if tuple(o) < (0, 0, 0)]
    return np.array(keep, dtype=np.int64)


@njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True)
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra == rb:
        return
    if ra < rb:
        parent[rb] = ra
    else:
        parent[ra] = rb


@njit(cache=True)
def label_local(values, backward):
    """Label equal-valued components of ``values`` (negative = ignored).

    Labels are 1..n in order of first appearance in C scan order.
    """
    nz, ny, nx = values.shape
    n = nz * ny * nx
    parent = np.arange(n, dtype=np.int64)
    flat = values.ravel()
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                v = values[z, y, x]
                if v < 0:
                    continue
                i = (z * ny + y) * nx + x
                for k in range(backward.shape[0]):
                    zz = z + backward[k, 0]
                    yy = y + backward[k, 1]
                    xx = x + backward[k, 2]
                    if zz < 0 or yy < 0 or xx < 0 or yy >= ny or xx >= nx:
                        continue
                    if values[zz, yy, xx] == v:
                        _union(parent, i, (zz * ny + yy) * nx + xx)
    labels = np.zeros(n, dtype=np.int64)
    roots = np.zeros(n, dtype=np.int64)
    count = 0
    for i in range(n):
        if flat[i] < 0:
            continue
        r = _find(parent, i)
        if roots[r] == 0:
            count += 1
            roots[r] = count
        labels[i] = roots[r]
    return labels.reshape(values.shape), count


@njit(cache=True)
def _halo_pairs(vals, prov, ids, offsets):
    # vals/prov cover core + 1 halo; ids covers the core
    nz, ny, nx = ids.shape
    out = np.empty((0, 2), dtype=np.int64)
    buf = np.empty((1024, 2), dtype=np.int64)
    m = 0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if z != 0 and y != 0 and x != 0 and z != nz - 1 and y != ny - 1 and x != nx - 1:
                    continue
                a = ids[z, y, x]
                if a < 0:
                    continue
                v = vals[z + 1, y + 1, x + 1]
                for k in range(offsets.shape[0]):
                    zz = z + 1 + offsets[k, 0]
                    yy = y + 1 + offsets[k, 1]
                    xx = x + 1 + offsets[k, 2]
                    if 1 <= zz <= nz and 1 <= yy <= ny and 1 <= xx <= nx:
                        continue
                    p = prov[zz, yy, xx]
                    if p == 0xFFFFFFFF or vals[zz, yy, xx] != v:
                        continue
                    if m == buf.shape[0]:
                        nb = np.empty((2 * m, 2), dtype=np.int64)
                        nb[:m] = buf
                        buf = nb
                    buf[m, 0] = a
                    buf[m, 1] = p
                    m += 1
    out = buf[:m].copy()
    return out


@njit(cache=True)
def _union_pairs(parent, pairs):
    for k in range(pairs.shape[0]):
        _union(parent, pairs[k, 0], pairs[k, 1])


@njit(cache=True)
def _resolve_all(parent):
    out = np.empty(parent.shape[0], dtype=np.int64)
    for i in range(parent.shape[0]):
        out[i] = _find(parent, i)
    return out


class StreamingLabeler:
    """Streaming union-find over provisional component ids.

    Usage::

        lab = StreamingLabeler(dims, spacing, 26, scratch_dir)
        for b in blocks_in_lexicographic_order:
            ids = lab.process_block(b, values_with_halo)   # int64, -1 = none
        roots = lab.finalize()                               # prov id -> root id

    Root ids are the smallest provisional id of each component, so they are
    deterministic given the block order.
    """

    def __init__(self, dims, spacing, connectivity: int = 26, scratch_dir=None,
                 tracker: MemoryTracker | None = None):
        self.connectivity = connectivity
        self.offsets = neighbor_offsets(connectivity)
        self.backward = _backward(self.offsets)
        self.tracker = tracker or default_tracker()
        self.prov = create_volume(dims, spacing, "label", scratch_dir, tracker=self.tracker)
        self.parent = np.arange(1024, dtype=np.int64)
        self._reservation = self.tracker.reserve(self.parent.nbytes)
        self.n = 0
        self._last = -1
        self.roots = None

    def _grow(self, need: int) -> None:
        if need <= self.parent.size:
            return
        size = self.parent.size
        while size < need:
            size *= 2
        grown = np.arange(size, dtype=np.int64)
        grown[:self.parent.size] = self.parent
        self.parent = grown
        self._reservation.resize(grown.nbytes)

    def process_block(self, b, values: np.ndarray) -> np.ndarray:
        """Label block ``b``; ``values`` covers the block box plus a 1-voxel halo.

        Returns the provisional ids of the core voxels (``-1`` where ignored).
        """
        idx = self.prov.block_index(b)
        if idx <= self._last:
            raise ValueError("blocks must be processed in lexicographic order")
        self._last = idx
        core = values[1:-1, 1:-1, 1:-1]
        local, count = label_local(np.ascontiguousarray(core), self.backward)
        ids = np.where(local > 0, local - 1 + self.n, -1)
        self.tracker.track(ids)
        if count == 0:
            return ids
        self._grow(self.n + count)
        self.n += count
        lo, hi = self.prov.block_box(b)
        self.prov.write_box(lo, np.where(ids >= 0, ids, _U32).astype(np.uint32))
        halo_lo = tuple(l - 1 for l in lo)
        halo_hi = tuple(h + 1 for h in hi)
        prov = self.prov.read_box(halo_lo, halo_hi).astype(np.int64)
        pairs = _halo_pairs(values, prov, ids, self.offsets)
        if pairs.shape[0]:
            _union_pairs(self.parent, pairs)
        return ids

    def finalize(self) -> np.ndarray:
        self.roots = _resolve_all(self.parent[:self.n]) if self.n else np.empty(0, np.int64)
        return self.roots

    def block_roots(self, b) -> np.ndarray:
        """Root ids of block ``b`` (``-1`` where no component)."""
        lo, hi = self.prov.block_box(b)
        prov = self.prov.read_box(lo, hi).astype(np.int64)
        out = np.full(prov.shape, -1, dtype=np.int64)
        m = prov != _U32
        out[m] = self.roots[prov[m]]
        return self.tracker.track(out)

    def close(self) -> None:
        self.prov.close()
        self._reservation.release()


def reduce_min(roots: np.ndarray, values: np.ndarray, n_out: int | None = None, fill=np.iinfo(np.int64).max):
    n_out = roots.size if n_out is None else n_out
    out = np.full(n_out, fill, dtype=values.dtype)
    np.minimum.at(out, roots, values)
    return out


def reduce_max(roots: np.ndarray, values: np.ndarray, n_out: int | None = None, fill=np.iinfo(np.int64).min):
    n_out = roots.size if n_out is None else n_out
    out = np.full(n_out, fill, dtype=values.dtype)
    np.maximum.at(out, roots, values)
    return out


def block_window(vol: BlockedVolume, b, halo: int) -> tuple:
    lo, hi = vol.block_box(b)
    wlo = tuple(l - halo for l in lo)
    whi = tuple(h + halo for h in hi)
    return lo, hi, vol.read_box(wlo, whi)
