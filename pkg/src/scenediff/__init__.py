"""Online object-level change detection between two observation sessions."""

from .core import (
    Measurement,
    NoiseModel,
    ObjectInstance,
    PointCloud,
    RigidTransform,
    apply,
    compose,
)
from .change import ChangeDetector, ChangeVerdict, DetectorConfig, compare_graphs, build_object_graph
from .spatial_tree import SpatialObjectTree

__version__ = "0.1.0"
