"""Accounting for resident working buffers.

Every volume window, cached block and streaming buffer the pipeline creates
is registered with a :class:`MemoryTracker`.  Registration is tied to the
lifetime of the numpy array, so the tracked total drops as soon as the
buffer is garbage collected.
"""
from __future__ import annotations

import logging
import weakref

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 256 * 1024 * 1024


class MemoryBudgetExceeded(RuntimeError):
    pass


class MemoryTracker:
    """Track live buffer bytes against a budget.

    Parameters
    ----------
    budget : int
        Soft limit in bytes.  Volume block caches size themselves from it and
        ``strict`` trackers raise once live bytes exceed ``budget + slack``.
    strict : bool
        Raise :class:`MemoryBudgetExceeded` on overrun instead of logging.
    slack : int
        Extra bytes tolerated before a strict tracker raises.
    """

    def __init__(self, budget: int = DEFAULT_BUDGET, strict: bool = False, slack: int = 0):
        if budget <= 0:
            raise ValueError("memory budget must be positive")
        self.budget = int(budget)
        self.strict = strict
        self.slack = int(slack)
        self.live = 0
        self.peak = 0
        self.allocations = 0
        self.largest = 0
        self.whole_volume_materializations = 0

    def track(self, arr: np.ndarray, *, volume_voxels: int | None = None) -> np.ndarray:
        """Register ``arr`` and return it.

        ``volume_voxels`` is the voxel count of the volume the buffer was cut
        from; a buffer covering all of it counts as a whole-volume
        materialization.
        """
        nbytes = int(arr.nbytes)
        if nbytes == 0:
            return arr
        if volume_voxels is not None and volume_voxels > 1 and arr.size >= volume_voxels:
            self.whole_volume_materializations += 1
        self._acquire(nbytes)
        weakref.finalize(arr, self._release, nbytes)
        return arr

    def empty(self, shape, dtype, **kw) -> np.ndarray:
        return self.track(np.empty(shape, dtype=dtype), **kw)

    def full(self, shape, fill, dtype, **kw) -> np.ndarray:
        return self.track(np.full(shape, fill, dtype=dtype), **kw)

    def reserve(self, nbytes: int) -> "_Reservation":
        """Account for memory that is not a single numpy array (e.g. a cache)."""
        return _Reservation(self, int(nbytes))

    def _acquire(self, nbytes: int) -> None:
        self.live += nbytes
        self.allocations += 1
        self.largest = max(self.largest, nbytes)
        if self.live > self.peak:
            self.peak = self.live
        if self.live > self.budget + self.slack:
            msg = f"tracked buffers at {self.live} bytes exceed budget {self.budget}"
            if self.strict:
                self.live -= nbytes
                raise MemoryBudgetExceeded(msg)
            logger.warning(msg)

    def _release(self, nbytes: int) -> None:
        self.live -= nbytes

    def reset_peak(self) -> None:
        self.peak = self.live

    def __repr__(self):
        return (f"MemoryTracker(budget={self.budget}, live={self.live}, "
                f"peak={self.peak}, whole_volume={self.whole_volume_materializations})")


class _Reservation:
    def __init__(self, tracker: MemoryTracker, nbytes: int = 0):
        self.tracker = tracker
        self.nbytes = 0
        self.resize(nbytes)

    def resize(self, nbytes: int) -> None:
        delta = int(nbytes) - self.nbytes
        if delta > 0:
            self.tracker._acquire(delta)
        elif delta < 0:
            self.tracker._release(-delta)
        self.nbytes = int(nbytes)

    def release(self) -> None:
        self.resize(0)


_default = MemoryTracker()


def default_tracker() -> MemoryTracker:
    return _default
