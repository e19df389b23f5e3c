"""Static k-d trees stored in memory-mapped ``.npy`` files.

One index file set may hold several independent trees ("segments"), e.g. one
tree per edge centerline.  Points of segment ``s`` occupy rows
``segments[s, 0]:segments[s, 1]`` and are laid out as an implicit balanced
tree: the node of range ``[lo, hi)`` sits at ``(lo + hi) // 2`` and splits on
the axis stored for that row.

Every query is exact.  Nearest-neighbor ties are broken by the smaller
payload, and ``nearest_ties`` returns all points at the minimal distance.
"""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from numba import njit


@njit(cache=True)
def _select(pts, keys, lo, hi, k, axis):
    # quickselect: rows lo..hi-1 reordered so row k holds the k-th value on axis
    while hi - lo > 1:
        mid = (lo + hi) // 2
        # median of three pivot
        a, b, c = pts[lo, axis], pts[mid, axis], pts[hi - 1, axis]
        if a <= b:
            pivot = b if b <= c else (c if a <= c else a)
        else:
            pivot = a if a <= c else (c if b <= c else b)
        i, j = lo, hi - 1
        while i <= j:
            while pts[i, axis] < pivot:
                i += 1
            while pts[j, axis] > pivot:
                j -= 1
            if i <= j:
                for d in range(3):
                    t = pts[i, d]
                    pts[i, d] = pts[j, d]
                    pts[j, d] = t
                tk = keys[i]
                keys[i] = keys[j]
                keys[j] = tk
                i += 1
                j -= 1
        if k <= j:
            hi = j + 1
        elif k >= i:
            lo = i
        else:
            return


@njit(cache=True)
def _build(pts, keys, axes, lo0, hi0):
    stack = np.empty((128, 2), dtype=np.int64)
    stack[0, 0] = lo0
    stack[0, 1] = hi0
    top = 1
    while top > 0:
        top -= 1
        lo = stack[top, 0]
        hi = stack[top, 1]
        if hi - lo <= 0:
            continue
        best_axis = 0
        best_spread = -1.0
        for d in range(3):
            mn = pts[lo, d]
            mx = pts[lo, d]
            for i in range(lo + 1, hi):
                v = pts[i, d]
                if v < mn:
                    mn = v
                if v > mx:
                    mx = v
            if mx - mn > best_spread:
                best_spread = mx - mn
                best_axis = d
        mid = (lo + hi) // 2
        _select(pts, keys, lo, hi, mid, best_axis)
        axes[mid] = best_axis
        if mid - lo > 0:
            stack[top, 0] = lo
            stack[top, 1] = mid
            top += 1
        if hi - mid - 1 > 0:
            stack[top, 0] = mid + 1
            stack[top, 1] = hi
            top += 1


@njit(cache=True)
def _d2(pts, i, qx, qy, qz):
    dx = pts[i, 0] - qx
    dy = pts[i, 1] - qy
    dz = pts[i, 2] - qz
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _nearest(pts, keys, axes, lo0, hi0, qx, qy, qz):
    """Return (row, d2) of the nearest point, ties to the smaller key."""
    best = np.inf
    brow = -1
    stack = np.empty((128, 2), dtype=np.int64)
    stack[0, 0] = lo0
    stack[0, 1] = hi0
    bound = np.empty(128, dtype=np.float64)
    bound[0] = 0.0
    top = 1
    while top > 0:
        top -= 1
        lo = stack[top, 0]
        hi = stack[top, 1]
        if hi <= lo or bound[top] > best:
            continue
        mid = (lo + hi) // 2
        d = _d2(pts, mid, qx, qy, qz)
        if d < best or (d == best and keys[mid] < keys[brow]):
            best = d
            brow = mid
        ax = axes[mid]
        q = qx if ax == 0 else (qy if ax == 1 else qz)
        diff = q - pts[mid, ax]
        dd = diff * diff
        if diff < 0:
            nlo, nhi, flo, fhi = lo, mid, mid + 1, hi
        else:
            nlo, nhi, flo, fhi = mid + 1, hi, lo, mid
        # far side pushed first so the near side is explored first
        stack[top, 0] = flo
        stack[top, 1] = fhi
        bound[top] = dd
        top += 1
        stack[top, 0] = nlo
        stack[top, 1] = nhi
        bound[top] = 0.0
        top += 1
    return brow, best


@njit(cache=True)
def _within(pts, axes, lo0, hi0, qx, qy, qz, r2, out):
    """Append rows with d2 <= r2 to ``out``; returns the count (may exceed len(out))."""
    m = 0
    stack = np.empty((128, 2), dtype=np.int64)
    stack[0, 0] = lo0
    stack[0, 1] = hi0
    top = 1
    while top > 0:
        top -= 1
        lo = stack[top, 0]
        hi = stack[top, 1]
        if hi <= lo:
            continue
        mid = (lo + hi) // 2
        if _d2(pts, mid, qx, qy, qz) <= r2:
            if m < out.shape[0]:
                out[m] = mid
            m += 1
        ax = axes[mid]
        q = qx if ax == 0 else (qy if ax == 1 else qz)
        diff = q - pts[mid, ax]
        if diff <= 0 or diff * diff <= r2:
            stack[top, 0] = lo
            stack[top, 1] = mid
            top += 1
        if diff >= 0 or diff * diff <= r2:
            stack[top, 0] = mid + 1
            stack[top, 1] = hi
            top += 1
    return m


@njit(cache=True)
def _nearest_batch(pts, keys, axes, segs, q, tree):
    n = q.shape[0]
    out_key = np.empty(n, dtype=np.int64)
    out_d2 = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = tree[i]
        row, d = _nearest(pts, keys, axes, segs[s, 0], segs[s, 1], q[i, 0], q[i, 1], q[i, 2])
        out_key[i] = keys[row] if row >= 0 else -1
        out_d2[i] = d
    return out_key, out_d2


@njit(cache=True)
def _ties_batch(pts, keys, axes, segs, q, tree):
    n = q.shape[0]
    offsets = np.zeros(n + 1, dtype=np.int64)
    flat = np.empty(max(n, 16), dtype=np.int64)
    d2s = np.empty(n, dtype=np.float64)
    buf = np.empty(64, dtype=np.int64)
    m = 0
    for i in range(n):
        s = tree[i]
        lo, hi = segs[s, 0], segs[s, 1]
        row, d = _nearest(pts, keys, axes, lo, hi, q[i, 0], q[i, 1], q[i, 2])
        d2s[i] = d
        if row < 0:
            offsets[i + 1] = m
            continue
        cnt = _within(pts, axes, lo, hi, q[i, 0], q[i, 1], q[i, 2], d, buf)
        if cnt > buf.shape[0]:
            buf = np.empty(2 * cnt, dtype=np.int64)
            cnt = _within(pts, axes, lo, hi, q[i, 0], q[i, 1], q[i, 2], d, buf)
        for k in range(cnt):
            if _d2(pts, buf[k], q[i, 0], q[i, 1], q[i, 2]) == d:
                if m == flat.shape[0]:
                    grown = np.empty(2 * m, dtype=np.int64)
                    grown[:m] = flat
                    flat = grown
                flat[m] = keys[buf[k]]
                m += 1
        offsets[i + 1] = m
    return offsets, flat[:m].copy(), d2s


class StaticPointIndex:
    """Immutable, disk-resident forest of 3-d k-d trees over ``(position, payload)`` pairs."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.points = np.load(self.directory / "points.npy", mmap_mode="r")
        self.keys = np.load(self.directory / "keys.npy", mmap_mode="r")
        self.axes = np.load(self.directory / "axes.npy", mmap_mode="r")
        self.segments = np.load(self.directory / "segments.npy")
        # plain ndarray views over the maps, as numba does not take np.memmap
        self._pts = np.asarray(self.points) if len(self.keys) else np.zeros((0, 3))
        self._keys = np.asarray(self.keys) if len(self.keys) else np.zeros(0, np.int64)
        self._axes = np.asarray(self.axes) if len(self.keys) else np.zeros(0, np.int8)

    @classmethod
    def build(cls, points, payload=None, directory=None, segments=None) -> "StaticPointIndex":
        pts = np.array(points, dtype=np.float64).reshape(-1, 3)
        n = pts.shape[0]
        keys = np.arange(n, dtype=np.int64) if payload is None else np.array(payload, dtype=np.int64)
        if keys.shape != (n,):
            raise ValueError("payload must have one entry per point")
        if not np.isfinite(pts).all():
            raise ValueError("points must be finite")
        segs = np.array([[0, n]] if segments is None else segments, dtype=np.int64).reshape(-1, 2)
        axes = np.zeros(n, dtype=np.int8)
        for lo, hi in segs:
            if hi > lo:
                _build(pts, keys, axes, lo, hi)
        if directory is None:
            directory = tempfile.mkdtemp(prefix="kdt-")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "points.npy", pts)
        np.save(directory / "keys.npy", keys)
        np.save(directory / "axes.npy", axes)
        np.save(directory / "segments.npy", segs)
        return cls(directory)

    def __len__(self):
        return int(self.keys.shape[0])

    @property
    def n_trees(self) -> int:
        return int(self.segments.shape[0])

    def _seg(self, tree):
        return int(self.segments[tree, 0]), int(self.segments[tree, 1])

    def nearest(self, q, tree: int = 0):
        """Payload of the nearest point (smallest payload among ties) and its distance."""
        lo, hi = self._seg(tree)
        if hi <= lo:
            return None, np.inf
        row, d2 = _nearest(self._pts, self._keys, self._axes, lo, hi, float(q[0]), float(q[1]), float(q[2]))
        return int(self._keys[row]), float(np.sqrt(d2))

    def nearest_ties(self, q, tree: int = 0):
        """All payloads at the minimal distance (sorted) and that distance."""
        off, flat, d2 = self.nearest_ties_batch(np.asarray(q, dtype=np.float64).reshape(1, 3),
                                                np.array([tree]))
        return np.sort(flat), float(np.sqrt(d2[0])) if off[-1] else np.inf

    def query_radius(self, q, r: float, tree: int = 0) -> np.ndarray:
        lo, hi = self._seg(tree)
        if hi <= lo:
            return np.empty(0, dtype=np.int64)
        buf = np.empty(64, dtype=np.int64)
        qx, qy, qz = (float(v) for v in q)
        cnt = _within(self._pts, self._axes, lo, hi, qx, qy, qz, float(r) ** 2, buf)
        if cnt > buf.size:
            buf = np.empty(cnt, dtype=np.int64)
            cnt = _within(self._pts, self._axes, lo, hi, qx, qy, qz, float(r) ** 2, buf)
        return np.sort(self._keys[buf[:cnt]])

    def nearest_batch(self, queries, trees=None):
        """Nearest payload and squared distance per query row."""
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        trees = np.zeros(q.shape[0], np.int64) if trees is None else np.asarray(trees, np.int64)
        if len(self) == 0:
            return np.full(q.shape[0], -1, np.int64), np.full(q.shape[0], np.inf)
        return _nearest_batch(self._pts, self._keys, self._axes, self.segments, q, trees)

    def nearest_ties_batch(self, queries, trees=None):
        """CSR ``(offsets, payloads, d2)`` of all nearest points per query row."""
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        trees = np.zeros(q.shape[0], np.int64) if trees is None else np.asarray(trees, np.int64)
        if len(self) == 0:
            return np.zeros(q.shape[0] + 1, np.int64), np.empty(0, np.int64), np.full(q.shape[0], np.inf)
        return _ties_batch(self._pts, self._keys, self._axes, self.segments, q, trees)


def build_point_index(points, ids=None, scratch=None, segments=None) -> StaticPointIndex:
    return StaticPointIndex.build(points, ids, scratch, segments)
