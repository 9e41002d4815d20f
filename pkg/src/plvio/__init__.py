"""Tightly-coupled stereo visual-inertial odometry with point and line
features and filtering-based loop closure, validated against a deterministic
synthetic sensor front-end."""

from .config import RunConfig
from .evaluation import evaluate_ate, median_protocol
from .geom import Pose, UnitQuaternion
from .pipeline import Pipeline, RunResult, run_pipeline
from .state import FilterState, ImuState

__version__ = "0.1.0"

__all__ = [
    "FilterState",
    "ImuState",
    "Pipeline",
    "Pose",
    "RunConfig",
    "RunResult",
    "UnitQuaternion",
    "evaluate_ate",
    "median_protocol",
    "run_pipeline",
    "__version__",
]
