"""Semantic occupancy mapping with sub-map completion and CRF regularisation."""

from .completion import (CompletionError, CompletionResult, ExternalBackend, HeuristicBackend,
                         NullBackend, OracleBackend)
from .core_map import GlobalMap, MapConfig, VoxelCell, VoxelState, classify_state
from .crf import CrfConfig, regularize
from .evaluation import EvalMode, EvalReport, evaluate
from .integration import FusionPolicyConfig, FusionStats, fuse_label, fuse_submap
from .pipeline import PipelineConfig, RunResult, TimingReport, run_frames, run_sequence
from .sensor import CameraIntrinsics, Pose, SensorNoiseModel, integrate_depth
from .submap import (StalenessConfig, SubMapAnchor, SubMapGrid, compute_frustum, cover_frustum,
                     extract_submap, filter_stale)
from .synth import GroundTruthVolume, RoomSpec, SyntheticScene, build_scene, render_depth

__version__ = "0.1.0"

__all__ = [
    "CompletionError", "CompletionResult", "ExternalBackend", "HeuristicBackend", "NullBackend",
    "OracleBackend", "GlobalMap", "MapConfig", "VoxelCell", "VoxelState", "classify_state",
    "CrfConfig", "regularize", "EvalMode", "EvalReport", "evaluate", "FusionPolicyConfig",
    "FusionStats", "fuse_label", "fuse_submap", "PipelineConfig", "RunResult", "TimingReport",
    "run_frames", "run_sequence", "CameraIntrinsics", "Pose", "SensorNoiseModel",
    "integrate_depth", "StalenessConfig", "SubMapAnchor", "SubMapGrid", "compute_frustum",
    "cover_frustum", "extract_submap", "filter_stale", "GroundTruthVolume", "RoomSpec",
    "SyntheticScene", "build_scene", "render_depth",
]
