"""Topology preserving thinning of binary volumes.

Voxels are removed from the object surface in directional subiterations.
A voxel may be deleted when its face neighbor in the current direction is
background, it is not fixed, it is not a preserved line end, and it is a
simple point: removing it keeps exactly one 26-connected foreground
component and exactly one 6-connected background component in its
neighborhood.

The set of deletion candidates (the active surface) is kept on disk as a
sorted list of linear positions.  Each subiteration marks candidates against
the state at its start and then deletes marked voxels one at a time in
ascending position order, re-checking simplicity at deletion time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .components import block_window
from .memory import MemoryTracker
from .volume import (ActiveSurface, BlockedVolume, Scratch, SurfaceWriter, VoxelState,
                     copy_volume, is_foreground)

logger = logging.getLogger(__name__)

DIRECTIONS = ("+x", "-x", "+y", "-y", "+z", "-z")
# (dz, dy, dx) of the face neighbor probed for each direction
_DIR_OFFSETS = np.array([(0, 0, 1), (0, 0, -1), (0, 1, 0), (0, -1, 0), (1, 0, 0), (-1, 0, 0)],
                        dtype=np.int64)
_DIR_AXIS = (0, 0, 1, 1, 2, 2)

_FACES = np.array([4, 10, 12, 14, 16, 22], dtype=np.int64)


def _build_tables():
    coords = [(i // 9 - 1, (i // 3) % 3 - 1, i % 3 - 1) for i in range(27)]
    adj26 = np.full((27, 26), -1, dtype=np.int64)
    adj6 = np.full((27, 6), -1, dtype=np.int64)
    n26 = np.zeros(27, dtype=np.int64)
    n6 = np.zeros(27, dtype=np.int64)
    in18 = np.array([0 < sum(map(abs, c)) <= 2 for c in coords])
    for i, a in enumerate(coords):
        if i == 13:
            continue
        for j, b in enumerate(coords):
            if j == 13 or j == i:
                continue
            d = [abs(p - q) for p, q in zip(a, b)]
            if max(d) == 1:
                adj26[i, n26[i]] = j
                n26[i] += 1
                if sum(d) == 1 and in18[i] and in18[j]:
                    adj6[i, n6[i]] = j
                    n6[i] += 1
    return adj26, n26, adj6, n6, in18


_ADJ26, _N26, _ADJ6, _N6, _IN18 = _build_tables()


@njit(cache=True)
def _simple27(nb, adj26, n26, adj6, n6, faces):
    """nb: 27 booleans (index (dz+1)*9+(dy+1)*3+(dx+1)); center ignored."""
    stack = np.empty(27, dtype=np.int64)
    seen = np.zeros(27, dtype=np.bool_)
    nfg = 0
    start = -1
    for i in range(27):
        if i != 13 and nb[i]:
            nfg += 1
            if start < 0:
                start = i
    if nfg == 0:
        return False
    seen[start] = True
    stack[0] = start
    top = 1
    cnt = 1
    while top > 0:
        top -= 1
        i = stack[top]
        for k in range(n26[i]):
            j = adj26[i, k]
            if nb[j] and not seen[j]:
                seen[j] = True
                cnt += 1
                stack[top] = j
                top += 1
    if cnt != nfg:
        return False
    for i in range(27):
        seen[i] = False
    ncomp = 0
    for f in range(6):
        s = faces[f]
        if nb[s] or seen[s]:
            continue
        ncomp += 1
        if ncomp > 1:
            return False
        seen[s] = True
        stack[0] = s
        top = 1
        while top > 0:
            top -= 1
            i = stack[top]
            for k in range(n6[i]):
                j = adj6[i, k]
                if not nb[j] and not seen[j]:
                    seen[j] = True
                    stack[top] = j
                    top += 1
    return ncomp == 1


@njit(cache=True)
def _gather(win, z, y, x, nb):
    nfg = 0
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                s = win[z + dz - 1, y + dy - 1, x + dx - 1]
                f = s == 1 or s == 2
                nb[dz * 9 + dy * 3 + dx] = f
                if f and not (dz == 1 and dy == 1 and dx == 1):
                    nfg += 1
    return nfg


@njit(cache=True)
def _mark(win, cz, cy, cx, doff, preserve, adj26, n26, adj6, n6, faces):
    # 0 = not considered (retain), 1 = considered and kept (retire),
    # 2 = marked for deletion, 3 = no longer foreground (drop)
    n = cz.shape[0]
    codes = np.zeros(n, dtype=np.uint8)
    nb = np.zeros(27, dtype=np.bool_)
    for k in range(n):
        z, y, x = cz[k], cy[k], cx[k]
        s = win[z, y, x]
        if s != 1 and s != 2:
            codes[k] = 3
            continue
        t = win[z + doff[0], y + doff[1], x + doff[2]]
        if t == 1 or t == 2:
            codes[k] = 0
            continue
        if s == 2:
            codes[k] = 1
            continue
        nfg = _gather(win, z, y, x, nb)
        if preserve and nfg < 2:
            codes[k] = 1
            continue
        codes[k] = 2 if _simple27(nb, adj26, n26, adj6, n6, faces) else 1
    return codes


@njit(cache=True)
def _delete(win, cz, cy, cx, codes, preserve, adj26, n26, adj6, n6, faces):
    n = cz.shape[0]
    deleted = np.zeros(n, dtype=np.bool_)
    nb = np.zeros(27, dtype=np.bool_)
    for k in range(n):
        if codes[k] != 2:
            continue
        z, y, x = cz[k], cy[k], cx[k]
        nfg = _gather(win, z, y, x, nb)
        if preserve and nfg < 2:
            continue
        if not _simple27(nb, adj26, n26, adj6, n6, faces):
            continue
        win[z, y, x] = 3
        deleted[k] = True
    return deleted


@njit(cache=True)
def _neighbors_of(win, cz, cy, cx, mask, ox, oy, oz, dx, dy):
    out = np.empty(26 * max(1, mask.sum()), dtype=np.int64)
    m = 0
    for k in range(cz.shape[0]):
        if not mask[k]:
            continue
        for a in range(-1, 2):
            for b in range(-1, 2):
                for c in range(-1, 2):
                    s = win[cz[k] + a, cy[k] + b, cx[k] + c]
                    if s == 1 or s == 2:
                        gx = ox + cx[k] + c
                        gy = oy + cy[k] + b
                        gz = oz + cz[k] + a
                        out[m] = gx + dx * (gy + dy * gz)
                        m += 1
    return out[:m]


def is_simple(nb) -> bool:
    """Simple-point test on a 3x3x3 ``[z, y, x]`` occupancy cube (center ignored)."""
    cube = np.asarray(nb, dtype=bool).reshape(27)
    return bool(_simple27(cube, _ADJ26, _N26, _ADJ6, _N6, _FACES))


def is_line_end(nb) -> bool:
    """True when fewer than two of the 26 neighbors are foreground."""
    cube = np.asarray(nb, dtype=bool).reshape(27).copy()
    cube[13] = False
    return int(cube.sum()) < 2


@dataclass
class ThinningConfig:
    preserve_line_ends: bool = True
    fixed_voxels: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.fixed_voxels = np.unique(np.asarray(self.fixed_voxels, dtype=np.int64))
        if self.fixed_voxels.size and self.preserve_line_ends:
            raise ValueError("line-end preservation must be disabled when voxels are fixed")

    @classmethod
    def with_fixed(cls, positions) -> "ThinningConfig":
        positions = np.asarray(positions, dtype=np.int64)
        return cls(preserve_line_ends=positions.size == 0, fixed_voxels=positions)


class DirectionScheduler:
    """Pick the face direction whose accumulated physical depth is smallest."""

    def __init__(self, spacing=(1.0, 1.0, 1.0)):
        self.spacing = tuple(float(s) for s in spacing)
        self.accumulated_depth = [0.0] * 6
        self.counts = [0] * 6

    def next_direction(self) -> str:
        best = min(range(6), key=lambda d: (self.accumulated_depth[d], d))
        return DIRECTIONS[best]

    def advance(self, direction: str) -> None:
        d = DIRECTIONS.index(direction)
        self.accumulated_depth[d] += self.spacing[_DIR_AXIS[d]]
        self.counts[d] += 1


def next_direction(s: DirectionScheduler) -> str:
    return s.next_direction()


@dataclass
class ThinningStats:
    subiterations: int = 0
    direction_counts: dict = field(default_factory=lambda: {d: 0 for d in DIRECTIONS})
    evaluations: int = 0
    deleted: int = 0


def _slab_thickness(vol: BlockedVolume, tracker: MemoryTracker) -> int:
    dx, dy, _ = vol.dims
    t = 32
    while t > 1 and (dx + 2) * (dy + 2) * (t + 2) * 8 > tracker.budget:
        t //= 2
    return t


def initial_surface(vol: BlockedVolume, path, tracker: MemoryTracker | None = None) -> ActiveSurface:
    """All foreground voxels with at least one background 6-neighbor."""
    tracker = tracker or vol.tracker
    dx, dy, dz = vol.dims
    writer = SurfaceWriter(path, tracker)
    nbx, nby, nbz = vol.header.block_counts
    for bz in range(nbz):
        for by in range(nby):
            for bx in range(nbx):
                b = (bx, by, bz)
                if vol.block_is_empty(b):
                    continue
                lo, hi, win = block_window(vol, b, 1)
                fg = is_foreground(win)
                core = fg[1:-1, 1:-1, 1:-1]
                border = ~fg[:-2, 1:-1, 1:-1] | ~fg[2:, 1:-1, 1:-1] | ~fg[1:-1, :-2, 1:-1] \
                    | ~fg[1:-1, 2:, 1:-1] | ~fg[1:-1, 1:-1, :-2] | ~fg[1:-1, 1:-1, 2:]
                z, y, x = np.nonzero(core & border)
                writer.add((x + lo[0]) + dx * ((y + lo[1]) + dy * (z + lo[2])))
        writer.flush_below(min((bz + 1) * 32, dz) * dx * dy)
    return writer.close()


def _set_fixed(vol: BlockedVolume, positions: np.ndarray) -> None:
    dx, dy, _ = vol.dims
    x = positions % dx
    y = (positions // dx) % dy
    z = positions // (dx * dy)
    blocks = (x // 32) + 100003 * ((y // 32) + 100003 * (z // 32))
    for key in np.unique(blocks):
        sel = blocks == key
        b = (int(x[sel][0] // 32), int(y[sel][0] // 32), int(z[sel][0] // 32))
        lo, hi = vol.block_box(b)
        blk = vol.read_box(lo, hi)
        lz, ly, lx = z[sel] - lo[2], y[sel] - lo[1], x[sel] - lo[0]
        if not is_foreground(blk[lz, ly, lx]).all():
            raise ValueError("fixed voxels must be foreground")
        blk[lz, ly, lx] = VoxelState.FIXED_FOREGROUND
        vol.write_box(lo, blk)


def _windows(vol: BlockedVolume, surf: ActiveSurface, thickness: int, tracker):
    dx, dy, dz = vol.dims
    plane = dx * dy
    for z0 in range(0, dz, thickness):
        z1 = min(z0 + thickness, dz)
        i0, i1 = surf.span(z0 * plane, z1 * plane)
        if i0 == i1:
            continue
        pos = surf.read(i0, i1, tracker)
        x = pos % dx
        y = (pos // dx) % dy
        z = pos // plane
        lo = (int(x.min()) - 1, int(y.min()) - 1, int(z.min()) - 1)
        hi = (int(x.max()) + 2, int(y.max()) + 2, int(z.max()) + 2)
        yield z1, pos, lo, hi, (z - lo[2], y - lo[1], x - lo[0])


def subiteration(vol: BlockedVolume, direction: str, surf: ActiveSurface, cfg: ThinningConfig,
                 next_path, tracker: MemoryTracker | None = None, stats: ThinningStats | None = None):
    """One directional deletion pass; returns ``(deleted_count, next_surface)``."""
    tracker = tracker or vol.tracker
    d = DIRECTIONS.index(direction)
    doff = _DIR_OFFSETS[d]
    preserve = bool(cfg.preserve_line_ends)
    thickness = _slab_thickness(vol, tracker)
    dx, dy, _ = vol.dims
    tables = (_ADJ26, _N26, _ADJ6, _N6, _FACES)

    # marking sees the state at the start of the subiteration
    marks = []
    for _, pos, lo, hi, (cz, cy, cx) in _windows(vol, surf, thickness, tracker):
        win = vol.read_box(lo, hi)
        marks.append(tracker.track(_mark(win, cz, cy, cx, doff, preserve, *tables)))

    writer = SurfaceWriter(next_path, tracker)
    deleted_total = 0
    for k, (z1, pos, lo, hi, (cz, cy, cx)) in enumerate(_windows(vol, surf, thickness, tracker)):
        codes = marks[k]
        marks[k] = None
        win = vol.read_box(lo, hi)
        deleted = _delete(win, cz, cy, cx, codes, preserve, *tables)
        nd = int(deleted.sum())
        if stats is not None:
            stats.evaluations += int(np.count_nonzero((codes == 1) | (codes == 2)))
        writer.add(pos[codes == 0])
        if nd:
            deleted_total += nd
            writer.add(_neighbors_of(win, cz, cy, cx, deleted, lo[0], lo[1], lo[2], dx, dy))
            win[win == VoxelState.ERASED] = VoxelState.BACKGROUND
            vol.write_box((lo[0] + 1, lo[1] + 1, lo[2] + 1), win[1:-1, 1:-1, 1:-1])
        writer.flush_below((z1 - 1) * dx * dy)
    nxt = writer.close()
    if stats is not None:
        stats.subiterations += 1
        stats.direction_counts[direction] += 1
        stats.deleted += deleted_total
    return deleted_total, nxt


def skeletonize(vol: BlockedVolume, cfg: ThinningConfig | None = None, *, scratch_dir=None,
                tracker: MemoryTracker | None = None, stats: ThinningStats | None = None,
                out_path=None) -> BlockedVolume:
    """Thin the foreground of ``vol`` to a one-voxel-wide skeleton.

    The input is left untouched; the skeleton is written to a new volume in
    which fixed voxels keep the FIXED_FOREGROUND state.
    """
    cfg = cfg or ThinningConfig()
    tracker = tracker or vol.tracker
    scratch = Scratch(scratch_dir)
    work = copy_volume(vol, path=out_path, scratch_dir=scratch_dir, tracker=tracker)
    if cfg.fixed_voxels.size:
        _set_fixed(work, cfg.fixed_voxels)
    surf = initial_surface(work, scratch.path("surf"), tracker)
    sched = DirectionScheduler(vol.spacing)
    idle = [False] * 6
    try:
        while len(surf):
            direction = sched.next_direction()
            deleted, nxt = subiteration(work, direction, surf, cfg, scratch.path("surf"),
                                        tracker, stats)
            surf.unlink()
            surf = nxt
            sched.advance(direction)
            if deleted:
                idle = [False] * 6
            idle[DIRECTIONS.index(direction)] = deleted == 0
            if all(idle):
                break
    finally:
        surf.unlink()
        scratch.cleanup()
    logger.debug("thinning finished: %s", stats)
    return work

