"""Anatomy-aware 3D pose lifting: bone directions from a local temporal window,
bone lengths from frames sampled across the whole video."""

from .errors import BonekinError
from .metrics import MetricReport, auc, mpjpe, mpjve, p_mpjpe, pck
from .skeleton import (
    BoneRepresentation,
    CameraModel,
    PoseSequence,
    SkeletonTopology,
    build_topology,
    compose,
    decompose,
    default_topology,
    joint_shifts,
    project,
    rescale_pose,
)

__version__ = "0.1.0"

__all__ = [
    "BonekinError", "MetricReport", "auc", "mpjpe", "mpjve", "p_mpjpe", "pck",
    "BoneRepresentation", "CameraModel", "PoseSequence", "SkeletonTopology", "build_topology",
    "compose", "decompose", "default_topology", "joint_shifts", "project", "rescale_pose",
]
