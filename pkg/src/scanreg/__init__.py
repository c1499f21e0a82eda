"""Incremental multiview point cloud registration.

Core stages: sparse scan graph construction (overlap scoring, feature
matching, geometric verification), incremental registration against
aggregated 3D landmarks with interleaved bundle adjustment, and optional
track refinement for dense coordinate-level matchers. Shipped as a library,
an HTTP service (``scanreg.service``), and a CLI (``scanreg``).
"""

__version__ = "0.1.0"

from .cloud import PointCloud
from .config import PipelineConfig
from .features import KeypointSet, MatchSet
from .geometry import (CorrespondenceSet, RigidTransform, compose, invert,
                       ransac_rigid, rotation_distance, solve_rigid)
from .graph import ScanGraph, build_graph
from .engine import RegistrationModel, mst_baseline, run_incremental
from .evaluation import EvaluationReport, GroundTruth, evaluate
from .synthetic import SceneConfig, generate_synthetic_scene

__all__ = [
    "PointCloud", "PipelineConfig", "KeypointSet", "MatchSet",
    "CorrespondenceSet", "RigidTransform", "compose", "invert",
    "ransac_rigid", "rotation_distance", "solve_rigid",
    "ScanGraph", "build_graph", "RegistrationModel", "mst_baseline",
    "run_incremental", "EvaluationReport", "GroundTruth", "evaluate",
    "SceneConfig", "generate_synthetic_scene", "__version__",
]
