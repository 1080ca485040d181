"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .corrmaps import DescriptorGrid
from .geometry import CameraIntrinsics, Pose
from .scene import Scene


def check_points(points) -> np.ndarray:
    pts = check_array(points, dtype=np.float64, ensure_2d=True)
    if pts.shape[1] != 3:
        raise ValueError(f"points must have 3 columns, got {pts.shape[1]}")
    return pts


def check_descriptors(h, dim: int | None = None, n: int | None = None) -> np.ndarray:
    h = check_array(h, dtype=np.float64, ensure_2d=True)
    if dim is not None and h.shape[1] != dim:
        raise ValueError(f"descriptor dim {h.shape[1]} != grid dim {dim}")
    if n is not None and len(h) != n:
        raise ValueError(f"expected {n} descriptors, got {len(h)}")
    return h


def check_grid(grid, stride: int | None = None, name: str = "grid") -> DescriptorGrid:
    if not isinstance(grid, DescriptorGrid):
        raise TypeError(f"{name} must be a DescriptorGrid, got {type(grid).__name__}")
    if stride is not None and grid.frame.stride != stride:
        raise ValueError(f"{name} has stride {grid.frame.stride}, expected {stride}")
    return grid


def check_scene(scene, need_fine: bool = False) -> Scene:
    if not isinstance(scene, Scene):
        raise TypeError(f"expected a Scene, got {type(scene).__name__}")
    if not isinstance(scene.intrinsics, CameraIntrinsics):
        raise TypeError("scene intrinsics must be CameraIntrinsics")
    if need_fine and scene.fine_descriptors is None:
        raise ValueError("scene has no fine descriptors")
    return scene


def check_pose(pose) -> Pose:
    if not isinstance(pose, Pose):
        raise TypeError(f"expected a Pose, got {type(pose).__name__}")
    return pose
