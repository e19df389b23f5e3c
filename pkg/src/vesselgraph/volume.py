"""Disk-backed, 32^3-blocked voxel volumes.

Two voxel kinds are supported:

``binary2bit``
    four voxel states packed at 2 bits per voxel, 8192 bytes per block.
``label``
    unsigned 32-bit labels, ``UNASSIGNED`` (``0xFFFFFFFF``) when unset.

Positions passed to the public API are ``(x, y, z)`` triples.  Dense arrays
returned by :meth:`BlockedVolume.read_box` are C-ordered ``[z, y, x]`` so that
``x`` is the fastest axis on disk and in memory, and the linear voxel position
is ``x + dx * (y + dy * z)``.

On-disk format::

    VGV1 <dx> <dy> <dz> <sx> <sy> <sz> <kind>\\n
    <block 0><block 1>...      (lexicographic block order, x fastest)

Within a binary block, voxel ``i = x + 32 * (y + 32 * z)`` occupies bits
``[2i, 2i + 2)`` (little endian within bytes).  Label blocks hold
``32^3`` little-endian ``uint32`` values in the same voxel order.
"""
from __future__ import annotations

import enum
import itertools
import logging
import os
import tempfile
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .memory import MemoryTracker, default_tracker

logger = logging.getLogger(__name__)

BLOCK_EDGE = 32
BLOCK_VOXELS = BLOCK_EDGE ** 3
UNASSIGNED = np.uint32(0xFFFFFFFF)
MAGIC = "VGV1"
MAX_VOXELS = 1 << 48


class VoxelState(enum.IntEnum):
    BACKGROUND = 0
    FOREGROUND = 1
    FIXED_FOREGROUND = 2
    ERASED = 3


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple
    spacing: tuple
    kind: str = "binary2bit"
    block_edge: int = BLOCK_EDGE

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims!r}")
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing!r}")
        if self.kind not in ("binary2bit", "label"):
            raise ValueError(f"unknown voxel kind {self.kind!r}")
        if self.block_edge != BLOCK_EDGE:
            raise ValueError("block edge is fixed at 32")
        if dims[0] * dims[1] * dims[2] > MAX_VOXELS:
            raise ValueError(f"dims {dims} overflow the addressable voxel space")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def block_counts(self) -> tuple:
        return tuple(-(-d // BLOCK_EDGE) for d in self.dims)

    @property
    def n_blocks(self) -> int:
        a, b, c = self.block_counts
        return a * b * c

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def block_bytes(self) -> int:
        return BLOCK_VOXELS // 4 if self.kind == "binary2bit" else BLOCK_VOXELS * 4

    @property
    def dtype(self):
        return np.uint8 if self.kind == "binary2bit" else np.uint32

    @property
    def fill(self):
        return 0 if self.kind == "binary2bit" else UNASSIGNED

    def encode(self) -> bytes:
        d, s = self.dims, self.spacing
        return (f"{MAGIC} {d[0]} {d[1]} {d[2]} {s[0]!r} {s[1]!r} {s[2]!r} {self.kind}\n"
                .encode("ascii"))

    @classmethod
    def decode(cls, line: bytes) -> "VolumeHeader":
        try:
            parts = line.decode("ascii").split()
        except UnicodeDecodeError as exc:
            raise VolumeFormatError("header is not ASCII") from exc
        if len(parts) != 8 or parts[0] != MAGIC:
            raise VolumeFormatError(f"bad volume header {line[:80]!r}")
        try:
            dims = tuple(int(p) for p in parts[1:4])
            spacing = tuple(float(p) for p in parts[4:7])
            return cls(dims, spacing, parts[7])
        except ValueError as exc:
            raise VolumeFormatError(str(exc)) from exc


def pack_block(values: np.ndarray) -> np.ndarray:
    """Pack 32^3 2-bit states (any shape, C order) into 8192 bytes."""
    v = np.ascontiguousarray(values, dtype=np.uint8).reshape(-1, 4) & 3
    return (v[:, 0] | (v[:, 1] << 2) | (v[:, 2] << 4) | (v[:, 3] << 6)).astype(np.uint8)


def unpack_block(packed: np.ndarray) -> np.ndarray:
    b = np.asarray(packed, dtype=np.uint8)
    out = np.empty((b.size, 4), dtype=np.uint8)
    out[:, 0] = b & 3
    out[:, 1] = (b >> 2) & 3
    out[:, 2] = (b >> 4) & 3
    out[:, 3] = b >> 6
    return out.reshape(BLOCK_EDGE, BLOCK_EDGE, BLOCK_EDGE)


def is_foreground(states: np.ndarray) -> np.ndarray:
    return (states == VoxelState.FOREGROUND) | (states == VoxelState.FIXED_FOREGROUND)


class BlockedVolume:
    """A disk-resident blocked volume.

    Blocks are memory-mapped; unpacked blocks are kept in a small LRU cache
    whose size comes from the tracker's budget.  All dense buffers handed out
    are registered with the tracker.
    """

    def __init__(self, path, header: VolumeHeader, *, mode: str = "r+",
                 tracker: MemoryTracker | None = None, materialized=None,
                 temporary: bool = False, cache_bytes: int | None = None):
        self.path = Path(path)
        self.header = header
        self.tracker = tracker or default_tracker()
        self.temporary = temporary
        self._offset = len(header.encode())
        self._mm = np.memmap(self.path, dtype=np.uint8, mode=mode, offset=self._offset,
                             shape=(header.n_blocks * header.block_bytes,))
        self.writable = mode != "r"
        if header.kind == "label":
            if materialized is None:
                materialized = np.ones(header.n_blocks, dtype=bool)
            self._materialized = materialized
        else:
            self._materialized = None
        if cache_bytes is None:
            cache_bytes = self.tracker.budget // 8
        self._cache_capacity = max(0, int(cache_bytes) // (BLOCK_VOXELS * np.dtype(header.dtype).itemsize))
        self._cache: OrderedDict = OrderedDict()
        self.block_loads = 0
        self.block_stores = 0

    # -- construction -----------------------------------------------------
    @classmethod
    def create(cls, path, dims, spacing, kind="binary2bit", **kw) -> "BlockedVolume":
        header = VolumeHeader(dims, spacing, kind)
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(header.encode())
            fh.truncate(len(header.encode()) + header.n_blocks * header.block_bytes)
        materialized = np.zeros(header.n_blocks, dtype=bool) if kind == "label" else None
        return cls(path, header, materialized=materialized, **kw)

    @classmethod
    def open(cls, path, mode="r+", **kw) -> "BlockedVolume":
        path = Path(path)
        with open(path, "rb") as fh:
            line = fh.readline(256)
        if not line.endswith(b"\n"):
            raise VolumeFormatError(f"{path}: missing header line")
        header = VolumeHeader.decode(line)
        expected = len(line) + header.n_blocks * header.block_bytes
        size = path.stat().st_size
        if size != expected:
            raise VolumeFormatError(f"{path}: expected {expected} bytes, found {size}")
        return cls(path, header, mode=mode, **kw)

    # -- properties -------------------------------------------------------
    @property
    def dims(self) -> tuple:
        return self.header.dims

    @property
    def spacing(self) -> tuple:
        return self.header.spacing

    @property
    def kind(self) -> str:
        return self.header.kind

    @property
    def shape(self) -> tuple:
        """Dense array shape, ``(dz, dy, dx)``."""
        dx, dy, dz = self.dims
        return (dz, dy, dx)

    @property
    def n_voxels(self) -> int:
        return self.header.n_voxels

    def __repr__(self):
        return f"BlockedVolume({str(self.path)!r}, dims={self.dims}, spacing={self.spacing}, kind={self.kind!r})"

    # -- block level ------------------------------------------------------
    def block_index(self, b) -> int:
        nbx, nby, _ = self.header.block_counts
        return b[0] + nbx * (b[1] + nby * b[2])

    def iter_blocks(self, nonempty: bool = False) -> Iterator[tuple]:
        """Yield block coordinates ``(bx, by, bz)`` in lexicographic order."""
        nbx, nby, nbz = self.header.block_counts
        for bz in range(nbz):
            for by in range(nby):
                for bx in range(nbx):
                    b = (bx, by, bz)
                    if nonempty and self.block_is_empty(b):
                        continue
                    yield b

    def block_box(self, b) -> tuple:
        lo = tuple(c * BLOCK_EDGE for c in b)
        hi = tuple(min(l + BLOCK_EDGE, d) for l, d in zip(lo, self.dims))
        return lo, hi

    def block_is_empty(self, b) -> bool:
        i = self.block_index(b)
        if b in self._cache:
            blk = self._cache[b]
            return not (blk != self.header.fill).any()
        if self._materialized is not None:
            return not self._materialized[i]
        nb = self.header.block_bytes
        return not self._mm[i * nb:(i + 1) * nb].any()

    def _load_block(self, b) -> np.ndarray:
        if b in self._cache:
            self._cache.move_to_end(b)
            return self._cache[b]
        i = self.block_index(b)
        nb = self.header.block_bytes
        if self._materialized is not None and not self._materialized[i]:
            blk = np.full((BLOCK_EDGE,) * 3, UNASSIGNED, dtype=np.uint32)
        else:
            raw = self._mm[i * nb:(i + 1) * nb]
            self.block_loads += 1
            if self.kind == "binary2bit":
                blk = unpack_block(raw)
            else:
                blk = np.frombuffer(raw.tobytes(), dtype="<u4").astype(np.uint32).reshape((BLOCK_EDGE,) * 3)
        self.tracker.track(blk)
        if self._cache_capacity:
            self._cache[b] = blk
            while len(self._cache) > self._cache_capacity:
                self._cache.popitem(last=False)
        return blk

    def _store_block(self, b, blk: np.ndarray) -> None:
        if not self.writable:
            raise PermissionError(f"{self.path} opened read-only")
        i = self.block_index(b)
        nb = self.header.block_bytes
        if self.kind == "binary2bit":
            self._mm[i * nb:(i + 1) * nb] = pack_block(blk)
        else:
            self._mm[i * nb:(i + 1) * nb] = np.frombuffer(
                np.ascontiguousarray(blk, dtype="<u4").tobytes(), dtype=np.uint8)
            self._materialized[i] = True
        self.block_stores += 1
        if b in self._cache:
            self._cache[b] = blk

    def _blocks_for(self, lo, hi):
        ranges = [range(max(l, 0) // BLOCK_EDGE, (min(h, d) - 1) // BLOCK_EDGE + 1)
                  for l, h, d in zip(lo, hi, self.dims)]
        for bz in ranges[2]:
            for by in ranges[1]:
                for bx in ranges[0]:
                    yield (bx, by, bz)

    # -- dense windows ----------------------------------------------------
    def read_box(self, lo: Sequence[int], hi: Sequence[int]) -> np.ndarray:
        """Return voxels of the box ``[lo, hi)`` as a tracked ``[z, y, x]`` array.

        Voxels outside the volume read as BACKGROUND / UNASSIGNED.
        """
        lo = tuple(int(v) for v in lo)
        hi = tuple(int(v) for v in hi)
        shape = tuple(max(0, h - l) for l, h in zip(lo, hi))[::-1]
        out = self.tracker.full(shape, self.header.fill, self.header.dtype,
                                volume_voxels=self.n_voxels)
        if min(shape) == 0:
            return out
        clo = tuple(max(l, 0) for l in lo)
        chi = tuple(min(h, d) for h, d in zip(hi, self.dims))
        if any(a >= b for a, b in zip(clo, chi)):
            return out
        for b in self._blocks_for(clo, chi):
            blo, bhi = self.block_box(b)
            ilo = [max(a, c) for a, c in zip(blo, clo)]
            ihi = [min(a, c) for a, c in zip(bhi, chi)]
            if self._materialized is not None and not self._materialized[self.block_index(b)] \
                    and b not in self._cache:
                continue
            blk = self._load_block(b)
            out[ilo[2] - lo[2]:ihi[2] - lo[2], ilo[1] - lo[1]:ihi[1] - lo[1],
                ilo[0] - lo[0]:ihi[0] - lo[0]] = \
                blk[ilo[2] - blo[2]:ihi[2] - blo[2], ilo[1] - blo[1]:ihi[1] - blo[1],
                    ilo[0] - blo[0]:ihi[0] - blo[0]]
        return out

    def write_box(self, lo: Sequence[int], values: np.ndarray) -> None:
        """Write a ``[z, y, x]`` array at ``lo``; parts outside the volume are dropped."""
        lo = tuple(int(v) for v in lo)
        values = np.asarray(values)
        hi = tuple(l + n for l, n in zip(lo, values.shape[::-1]))
        clo = tuple(max(l, 0) for l in lo)
        chi = tuple(min(h, d) for h, d in zip(hi, self.dims))
        if any(a >= b for a, b in zip(clo, chi)):
            return
        for b in self._blocks_for(clo, chi):
            blo, bhi = self.block_box(b)
            ilo = [max(a, c) for a, c in zip(blo, clo)]
            ihi = [min(a, c) for a, c in zip(bhi, chi)]
            src = values[ilo[2] - lo[2]:ihi[2] - lo[2], ilo[1] - lo[1]:ihi[1] - lo[1],
                         ilo[0] - lo[0]:ihi[0] - lo[0]]
            full = all(a == c for a, c in zip(ilo, blo)) and \
                all(a - c == BLOCK_EDGE for a, c in zip(ihi, blo))
            if full:
                blk = self.tracker.track(np.ascontiguousarray(src, dtype=self.header.dtype).copy())
            else:
                blk = self._load_block(b).copy()
                blk[ilo[2] - blo[2]:ihi[2] - blo[2], ilo[1] - blo[1]:ihi[1] - blo[1],
                    ilo[0] - blo[0]:ihi[0] - blo[0]] = src
                self.tracker.track(blk)
            self._store_block(b, blk)

    def read_block(self, b) -> np.ndarray:
        lo, hi = self.block_box(b)
        return self.read_box(lo, hi)

    # -- voxel level ------------------------------------------------------
    def get(self, p):
        x, y, z = (int(c) for c in p)
        dx, dy, dz = self.dims
        if not (0 <= x < dx and 0 <= y < dy and 0 <= z < dz):
            return VoxelState.BACKGROUND if self.kind == "binary2bit" else int(UNASSIGNED)
        blk = self._load_block((x // BLOCK_EDGE, y // BLOCK_EDGE, z // BLOCK_EDGE))
        v = int(blk[z % BLOCK_EDGE, y % BLOCK_EDGE, x % BLOCK_EDGE])
        return VoxelState(v) if self.kind == "binary2bit" else v

    def set(self, p, value) -> None:
        x, y, z = (int(c) for c in p)
        dx, dy, dz = self.dims
        if not (0 <= x < dx and 0 <= y < dy and 0 <= z < dz):
            raise IndexError(f"voxel {p} outside volume of dims {self.dims}")
        self.write_box((x, y, z), np.array([[[int(value)]]], dtype=self.header.dtype))

    # -- streaming --------------------------------------------------------
    def stream_slabs(self, axis: str = "z") -> Iterator[np.ndarray]:
        """Yield one-voxel-thick 2D slabs along ``axis`` in ascending order."""
        ax = "xyz".index(axis)
        dx, dy, dz = self.dims
        for i in range(self.dims[ax]):
            lo = [0, 0, 0]
            hi = [dx, dy, dz]
            lo[ax], hi[ax] = i, i + 1
            box = self.read_box(lo, hi)
            yield box.squeeze(axis=2 - ax)

    def iter_slab_windows(self, thickness: int, halo: int = 0, lo_xy=None, hi_xy=None):
        """Yield ``(z0, z1, lo, window)`` for z-slabs of ``thickness`` slices plus halo."""
        dx, dy, dz = self.dims
        lx, ly = lo_xy or (0, 0)
        hx, hy = hi_xy or (dx, dy)
        for z0 in range(0, dz, thickness):
            z1 = min(z0 + thickness, dz)
            lo = (lx - halo, ly - halo, z0 - halo)
            hi = (hx + halo, hy + halo, z1 + halo)
            yield z0, z1, lo, self.read_box(lo, hi)

    def count(self, states=(VoxelState.FOREGROUND, VoxelState.FIXED_FOREGROUND)) -> int:
        total = 0
        for b in self.iter_blocks(nonempty=True):
            blk = self.read_block(b)
            total += int(np.isin(blk, np.asarray(states, dtype=blk.dtype)).sum())
        return total

    # -- lifecycle --------------------------------------------------------
    def flush(self) -> None:
        if self._materialized is not None and self.writable:
            nb = self.header.block_bytes
            fillblk = np.full(BLOCK_VOXELS, UNASSIGNED, dtype="<u4").view(np.uint8)
            for i in np.flatnonzero(~self._materialized):
                self._mm[i * nb:(i + 1) * nb] = fillblk
            self._materialized[:] = True
        if self.writable:
            self._mm.flush()

    def drop_cache(self) -> None:
        self._cache.clear()

    def close(self) -> None:
        self._cache.clear()
        mm = getattr(self, "_mm", None)
        if mm is not None:
            if self.writable and not self.temporary:
                self.flush()
            del self._mm
            self._mm = None
        if self.temporary:
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        if getattr(self, "temporary", False) and getattr(self, "_mm", None) is not None:
            try:
                self.close()
            except Exception:  # interpreter shutdown
                pass


class Scratch:
    """A private directory for temporary volumes, surfaces and indices."""

    def __init__(self, root=None):
        if root is not None:
            Path(root).mkdir(parents=True, exist_ok=True)
            if not os.access(root, os.W_OK):
                raise PermissionError(f"scratch directory {root} is not writable")
        self.dir = Path(tempfile.mkdtemp(prefix="vg-", dir=root))
        self._counter = itertools.count()

    def path(self, stem: str, suffix: str = "") -> Path:
        return self.dir / f"{stem}-{next(self._counter)}{suffix}"

    def cleanup(self) -> None:
        import shutil
        shutil.rmtree(self.dir, ignore_errors=True)


def create_volume(dims, spacing, kind="binary2bit", scratch_dir=None, *, path=None,
                  tracker=None, temporary=None, cache_bytes=None) -> BlockedVolume:
    """Create a volume with every voxel BACKGROUND (or UNASSIGNED for labels).

    Without ``path`` a temporary file is created in ``scratch_dir`` and removed
    when the volume is closed.
    """
    if path is None:
        if scratch_dir is not None:
            Path(scratch_dir).mkdir(parents=True, exist_ok=True)
            if not os.access(scratch_dir, os.W_OK):
                raise PermissionError(f"scratch directory {scratch_dir} is not writable")
        fd, name = tempfile.mkstemp(suffix=".vgv", prefix="vol-", dir=scratch_dir)
        os.close(fd)
        path = name
        if temporary is None:
            temporary = True
    return BlockedVolume.create(path, dims, spacing, kind, tracker=tracker,
                                temporary=bool(temporary), cache_bytes=cache_bytes)


def open_volume(path, mode="r+", tracker=None, cache_bytes=None) -> BlockedVolume:
    return BlockedVolume.open(path, mode=mode, tracker=tracker, cache_bytes=cache_bytes)


def volume_from_array(mask: np.ndarray, spacing=(1.0, 1.0, 1.0), scratch_dir=None, *,
                      path=None, tracker=None, kind="binary2bit") -> BlockedVolume:
    """Build a volume from a dense ``[z, y, x]`` array (nonzero = FOREGROUND for binary)."""
    mask = np.asarray(mask)
    dz, dy, dx = mask.shape
    vol = create_volume((dx, dy, dz), spacing, kind, scratch_dir, path=path, tracker=tracker)
    if kind == "binary2bit":
        data = np.where(mask != 0, VoxelState.FOREGROUND, VoxelState.BACKGROUND).astype(np.uint8)
    else:
        data = mask.astype(np.uint32)
    for b in vol.iter_blocks():
        lo, hi = vol.block_box(b)
        sub = data[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]]
        if kind == "binary2bit" and not sub.any():
            continue
        vol.write_box(lo, sub)
    return vol


def volume_to_array(vol: BlockedVolume) -> np.ndarray:
    """Materialize a whole volume; meant for tests and small volumes only."""
    dx, dy, dz = vol.dims
    return vol.read_box((0, 0, 0), (dx, dy, dz))


def import_raw(raw_path, dims, spacing, out_path=None, scratch_dir=None, tracker=None) -> BlockedVolume:
    """Convert a raw one-byte-per-voxel file (x fastest) into a binary volume."""
    dims = tuple(int(d) for d in dims)
    dx, dy, dz = dims
    size = os.path.getsize(raw_path)
    if size != dx * dy * dz:
        raise VolumeFormatError(f"{raw_path}: expected {dx * dy * dz} bytes, found {size}")
    raw = np.memmap(raw_path, dtype=np.uint8, mode="r", shape=(dz, dy, dx))
    vol = create_volume(dims, spacing, "binary2bit", scratch_dir, path=out_path, tracker=tracker)
    for b in vol.iter_blocks():
        lo, hi = vol.block_box(b)
        sub = np.asarray(raw[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]])
        if sub.any():
            vol.write_box(lo, (sub != 0).astype(np.uint8))
    return vol


def copy_volume(src: BlockedVolume, path=None, scratch_dir=None, tracker=None) -> BlockedVolume:
    """Block-by-block copy, preserving header (and label materialization)."""
    dst = create_volume(src.dims, src.spacing, src.kind, scratch_dir, path=path,
                        tracker=tracker or src.tracker)
    for b in src.iter_blocks(nonempty=True):
        lo, hi = src.block_box(b)
        dst.write_box(lo, src.read_box(lo, hi))
    return dst


# -- active surfaces -------------------------------------------------------

class ActiveSurface:
    """A sorted, duplicate-free on-disk sequence of linear voxel positions."""

    def __init__(self, path, count: int, temporary: bool = True):
        self.path = Path(path)
        self.count = int(count)
        self.temporary = temporary

    def __len__(self):
        return self.count

    def _map(self):
        if self.count == 0:
            return np.empty(0, dtype=np.int64)
        return np.memmap(self.path, dtype=np.int64, mode="r", shape=(self.count,))

    def read(self, start: int, stop: int, tracker: MemoryTracker | None = None) -> np.ndarray:
        arr = np.array(self._map()[start:stop], dtype=np.int64)
        return (tracker or default_tracker()).track(arr)

    def span(self, lo_pos: int, hi_pos: int) -> tuple:
        """Index range of entries with ``lo_pos <= position < hi_pos``."""
        mm = self._map()
        return int(np.searchsorted(mm, lo_pos, "left")), int(np.searchsorted(mm, hi_pos, "left"))

    def to_array(self) -> np.ndarray:
        return np.array(self._map(), dtype=np.int64)

    def unlink(self) -> None:
        if self.temporary:
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass

    @classmethod
    def from_array(cls, positions, path) -> "ActiveSurface":
        arr = np.unique(np.asarray(positions, dtype=np.int64))
        arr.tofile(path)
        return cls(path, arr.size)


class SurfaceWriter:
    """Collects positions and writes them to disk in sorted, deduplicated runs.

    The caller promises, via :meth:`flush_below`, that no position below the
    given limit will be added later.
    """

    def __init__(self, path, tracker: MemoryTracker | None = None):
        self.path = Path(path)
        self.tracker = tracker or default_tracker()
        self._fh = open(self.path, "wb")
        self._pending: list = []
        self._last = -1
        self.count = 0

    def add(self, positions) -> None:
        arr = np.asarray(positions, dtype=np.int64)
        if arr.size:
            self._pending.append(self.tracker.track(arr.copy()))

    def flush_below(self, limit: int | None) -> None:
        if not self._pending:
            return
        allpos = np.unique(np.concatenate(self._pending))
        self._pending.clear()
        if limit is None:
            out, keep = allpos, allpos[:0]
        else:
            cut = int(np.searchsorted(allpos, limit, "left"))
            out, keep = allpos[:cut], allpos[cut:]
        if out.size:
            if out[0] <= self._last:
                raise ValueError("surface positions added below an already flushed limit")
            out.tofile(self._fh)
            self._last = int(out[-1])
            self.count += out.size
        if keep.size:
            self._pending.append(self.tracker.track(keep.copy()))

    def close(self) -> ActiveSurface:
        self.flush_below(None)
        self._fh.close()
        return ActiveSurface(self.path, self.count)


def surface_merge(prev, additions, path=None, retired=None, chunk: int = 1 << 20,
                  tracker: MemoryTracker | None = None) -> ActiveSurface:
    """Sorted, deduplicated union of ``prev`` and ``additions`` minus ``retired``.

    ``prev`` is streamed from disk in chunks; ``additions`` and ``retired`` are
    held in memory.
    """
    if path is None:
        fd, path = tempfile.mkstemp(suffix=".surf")
        os.close(fd)
    tracker = tracker or default_tracker()
    adds = np.unique(np.asarray(additions, dtype=np.int64))
    ret = np.unique(np.asarray(retired if retired is not None else [], dtype=np.int64))
    if not isinstance(prev, ActiveSurface):
        prev_arr = np.unique(np.asarray(prev, dtype=np.int64))
        chunks = [prev_arr]
    else:
        chunks = (prev.read(i, min(i + chunk, len(prev)), tracker) for i in range(0, len(prev), chunk))
    writer = SurfaceWriter(path, tracker)
    ai = 0
    for c in chunks:
        if not c.size:
            continue
        hi = int(c[-1])
        aj = int(np.searchsorted(adds, hi, "right"))
        merged = np.union1d(c, adds[ai:aj])
        ai = aj
        if ret.size:
            merged = merged[~np.isin(merged, ret)]
        writer.add(merged)
        writer.flush_below(hi + 1)
    rest = adds[ai:]
    if ret.size:
        rest = rest[~np.isin(rest, ret)]
    writer.add(rest)
    return writer.close()
