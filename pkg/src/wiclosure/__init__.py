"""Inter-robot loop-closure candidate search from WiFi/UWB range and bearing links."""

from .candidates import (CandidatePair, CandidateSet, EvalReport, brute_force_candidate_set,
                         build_candidate_set, evaluate, mahalanobis_gate)
from .factors import AoaMode, CommMeasurement, OdometryFactor, RangeFactor, Realization
from .lie import Pose
from .overlap import BoundingBox, Cluster, SearchParams, find_overlap_clusters
from .pcm import build_realization, max_consistent_set
from .pipeline import run_pipeline
from .pose_graph import SharedEstimate, Trajectory, relative_pose_covariance, solve_mle
from .sim_io import ScenarioConfig, synthesize

__version__ = "0.1.0"

__all__ = [
    "AoaMode", "BoundingBox", "CandidatePair", "CandidateSet", "Cluster", "CommMeasurement",
    "EvalReport", "OdometryFactor", "Pose", "RangeFactor", "Realization", "ScenarioConfig",
    "SearchParams", "SharedEstimate", "Trajectory", "brute_force_candidate_set",
    "build_candidate_set", "build_realization", "evaluate", "find_overlap_clusters",
    "mahalanobis_gate", "max_consistent_set", "relative_pose_covariance", "run_pipeline",
    "solve_mle", "synthesize",
]
