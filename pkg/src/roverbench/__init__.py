"""Terrain worlds, range-sensor simulation and trajectory metrology for rover localization benchmarks."""

__version__ = "0.1.0"

from .evaluation import MetricsReport, TrajectoryEvaluator, evaluate
from .geometry import RigidTransform
from .trajectory import PoseStamped, Trajectory, read_tum, write_tum

__all__ = [
    "MetricsReport",
    "PoseStamped",
    "RigidTransform",
    "Trajectory",
    "TrajectoryEvaluator",
    "evaluate",
    "read_tum",
    "write_tum",
    "__version__",
]
