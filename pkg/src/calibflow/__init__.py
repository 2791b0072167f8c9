"""LiDAR-camera extrinsic calibration via calibration flow, EPnP refinement
and instance-centroid initialization."""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    DegenerateError,
    InsufficientDataError,
    RansacError,
    RefinementError,
)
from .geometry import CameraIntrinsics, PointCloud, ProjectedCloud, Quaternion, RigidTransform, project
from .flow import FlowField, ground_truth_flow, rectify
from .pnp import CorrespondenceSet, RansacConfig, epnp, p3p, ransac_pnp
from .metrics import MetricsReport, evaluate
from .refine import RefinementConfig, exact_oracle, refine_full, refine_stages, sequence_median
from .semantic_init import InstanceSet2D, InstanceSet3D, semantic_initialize

__all__ = [
    "CalibrationError",
    "CameraIntrinsics",
    "CorrespondenceSet",
    "DegenerateError",
    "FlowField",
    "InstanceSet2D",
    "InstanceSet3D",
    "InsufficientDataError",
    "MetricsReport",
    "PointCloud",
    "ProjectedCloud",
    "Quaternion",
    "RansacConfig",
    "RansacError",
    "RefinementConfig",
    "RefinementError",
    "RigidTransform",
    "epnp",
    "evaluate",
    "exact_oracle",
    "ground_truth_flow",
    "p3p",
    "project",
    "rectify",
    "ransac_pnp",
    "refine_full",
    "refine_stages",
    "semantic_initialize",
    "sequence_median",
    "__version__",
]
