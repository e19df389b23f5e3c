"""Input checking for the estimator facade."""
from __future__ import annotations

import numpy as np

from .memory import MemoryTracker
from .volume import BlockedVolume, volume_from_array


def check_spacing(spacing) -> tuple:
    sp = tuple(float(s) for s in np.ravel(spacing))
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be 3 positive finite numbers, got {spacing!r}")
    return sp


def check_volume(X, spacing=(1.0, 1.0, 1.0), *, scratch_dir=None,
                 tracker: MemoryTracker | None = None) -> BlockedVolume:
    """Return ``X`` as a binary blocked volume.

    ``X`` is either a :class:`BlockedVolume` (returned as is) or a 3-d array
    indexed ``[z, y, x]`` whose nonzero entries are foreground.  Boolean
    arrays and integer or float arrays holding only 0 and 1 are accepted.
    """
    if isinstance(X, BlockedVolume):
        if X.kind != "binary2bit":
            raise ValueError("expected a binary volume, got a label volume")
        return X
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-d array, got shape {arr.shape}")
    if 0 in arr.shape:
        raise ValueError("volume must not be empty along any axis")
    if arr.dtype != bool:
        if not (np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.floating)):
            raise ValueError(f"unsupported dtype {arr.dtype}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("volume must be binary (only 0 and 1)")
    return volume_from_array(arr, check_spacing(spacing), scratch_dir, tracker=tracker)
