"""Loosely coupled VLP / LiDAR localisation, mapping and navigation in simulation."""
from .geometry import Pose2D, wrap_angle
from .world import LedBeacon, LedFeatureMap, WorldModel, build_lab_world, load_world

__version__ = "0.1.0"

__all__ = ["Pose2D", "wrap_angle", "LedBeacon", "LedFeatureMap", "WorldModel", "build_lab_world",
           "load_world", "__version__"]
