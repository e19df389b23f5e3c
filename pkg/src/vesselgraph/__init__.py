"""Out-of-core extraction of annotated centerline graphs from binary vessel volumes."""
from .estimator import Skeletonizer, VesselGraphExtractor
from .graph import Edge, EdgeFeatures, Node, NodeKind, VesselGraph
from .io import deserialize_graph, serialize_graph
from .memory import MemoryTracker
from .pipeline import IterationStats, PipelineConfig, run_pipeline
from .validation import check_volume
from .volume import BlockedVolume, create_volume, import_raw, open_volume, volume_from_array

__version__ = "0.1.0"

__all__ = [
    "BlockedVolume", "Edge", "EdgeFeatures", "IterationStats", "MemoryTracker", "Node", "NodeKind",
    "PipelineConfig", "Skeletonizer", "VesselGraph", "VesselGraphExtractor", "check_volume",
    "create_volume", "deserialize_graph", "import_raw", "open_volume", "run_pipeline",
    "serialize_graph", "volume_from_array",
]
