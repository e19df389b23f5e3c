"""scikit-learn style entry points."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .memory import DEFAULT_BUDGET, MemoryTracker
from .pipeline import PipelineConfig, run_pipeline
from .thinning import ThinningConfig, ThinningStats, skeletonize
from .validation import check_spacing, check_volume
from .volume import BlockedVolume, is_foreground, volume_to_array


class VesselGraphExtractor(BaseEstimator):
    """Extract an annotated vessel graph from a binary volume.

    Parameters mirror :class:`PipelineConfig`; ``spacing`` applies when
    ``fit`` receives a plain array.

    Attributes
    ----------
    graph_ : VesselGraph
    iteration_stats_ : list of IterationStats
    n_iterations_ : int
    """

    def __init__(self, bulge_threshold=1.5, max_iterations=None, memory_budget=DEFAULT_BUDGET,
                 scratch_dir=None, smoothing_enabled=True, spacing=(1.0, 1.0, 1.0)):
        self.bulge_threshold = bulge_threshold
        self.max_iterations = max_iterations
        self.memory_budget = memory_budget
        self.scratch_dir = scratch_dir
        self.smoothing_enabled = smoothing_enabled
        self.spacing = spacing

    def _config(self) -> PipelineConfig:
        return PipelineConfig(bulge_threshold=self.bulge_threshold, max_iterations=self.max_iterations,
                              memory_budget=self.memory_budget, scratch_dir=self.scratch_dir,
                              smoothing_enabled=self.smoothing_enabled)

    def fit(self, X, y=None):
        cfg = self._config()
        tracker = MemoryTracker(cfg.memory_budget)
        owned = not isinstance(X, BlockedVolume)
        vol = check_volume(X, self.spacing, scratch_dir=self.scratch_dir, tracker=tracker)
        try:
            self.graph_, self.iteration_stats_ = run_pipeline(vol, cfg, tracker=tracker)
        finally:
            if owned:
                vol.close()
        self.n_iterations_ = len(self.iteration_stats_)
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).graph_


class Skeletonizer(TransformerMixin, BaseEstimator):
    """Topology-preserving thinning as a transformer.

    ``transform`` returns a boolean ``[z, y, x]`` array for array input and a
    new :class:`BlockedVolume` for volume input.
    """

    def __init__(self, preserve_line_ends=True, spacing=(1.0, 1.0, 1.0), scratch_dir=None):
        self.preserve_line_ends = preserve_line_ends
        self.spacing = spacing
        self.scratch_dir = scratch_dir

    def fit(self, X, y=None):
        check_spacing(self.spacing)
        self.n_deleted_ = None
        return self

    def transform(self, X):
        check_is_fitted(self, "n_deleted_")
        owned = not isinstance(X, BlockedVolume)
        vol = check_volume(X, self.spacing, scratch_dir=self.scratch_dir)
        stats = ThinningStats()
        try:
            skel = skeletonize(vol, ThinningConfig(preserve_line_ends=self.preserve_line_ends),
                               scratch_dir=self.scratch_dir, stats=stats)
        finally:
            if owned:
                vol.close()
        self.n_deleted_ = stats.deleted
        if not owned:
            return skel
        try:
            return np.asarray(is_foreground(volume_to_array(skel)))
        finally:
            skel.close()
