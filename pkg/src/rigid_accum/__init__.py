"""Multi-frame LiDAR accumulation by rigid multi-body scene flow.

The static background moves with the sensor and every moving object moves
rigidly, so the flow of each source frame into the target frame is fully
described by one ego transform plus one transform per object instance.
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("rigid-accum")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0.0.0"

from .core import (FlowField, Frame, FrameSequence, RigidTransform, apply_transform, compose,
                   compose_scene_flow, inverse, kabsch_weighted)
from .errors import AccumError
from .pipeline import AccumulationResult, PipelineConfig, accumulate_points, run
from .sim import SceneSpec, crossing_scene, default_scene, generate_scene

__all__ = [
    "__version__", "AccumError", "AccumulationResult", "FlowField", "Frame", "FrameSequence",
    "PipelineConfig", "RigidTransform", "SceneSpec", "accumulate_points", "apply_transform",
    "compose", "compose_scene_flow", "crossing_scene", "default_scene", "generate_scene",
    "inverse", "kabsch_weighted", "run",
]
