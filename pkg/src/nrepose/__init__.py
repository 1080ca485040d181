"""Pose estimation from neural reprojection error (NRE) loss maps.

Submodules
----------
geometry     camera model, poses, warps and bilinear stencils
corrmaps     correspondence maps and sparse truncated loss maps
nre          NRE losses (plain, Gaussian-smoothed, training) and gradients
solvers      P3P, MSAC and damped IRLS / GNC refinement
pipeline     coarse-to-fine estimation with local fine maps
baselines    reprojection-error and feature-metric baselines
synthbench   synthetic scenes and the comparison harness
estimators   scikit-learn style wrappers
"""
from .corrmaps import (CorrespondenceMap, DescriptorGrid, RobustLossMap, correspondence_map,
                       read_loss_map, truncate, write_loss_map)
from .geometry import OUT, CameraIntrinsics, GridFrame, Pose
from .nre import pose_loss, smoothed_pose_loss
from .pipeline import CoarseToFineConfig, estimate_pose_c2f
from .scene import Scene, load_scene, save_scene
from .solvers import EstimationError, GncSchedule, IrlsConfig, MsacConfig

__version__ = "0.1.0"

__all__ = [
    "OUT", "CameraIntrinsics", "GridFrame", "Pose", "DescriptorGrid", "CorrespondenceMap",
    "RobustLossMap", "correspondence_map", "truncate", "read_loss_map", "write_loss_map",
    "pose_loss", "smoothed_pose_loss", "CoarseToFineConfig", "estimate_pose_c2f", "Scene",
    "load_scene", "save_scene", "EstimationError", "GncSchedule", "IrlsConfig", "MsacConfig",
]
