"""Scene container and its JSON file format (binary arrays as base64 blobs)."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from .corrmaps import DescriptorGrid
from .geometry import CameraIntrinsics, GridFrame, Pose

SCENE_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Scene:
    """3D points with their descriptors, camera intrinsics and optional ground truth."""

    points: np.ndarray
    intrinsics: CameraIntrinsics
    coarse_descriptors: np.ndarray
    fine_descriptors: np.ndarray | None = None
    gt_pose: Pose | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must be an (N, 3) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        cd = np.atleast_2d(np.asarray(self.coarse_descriptors, dtype=float))
        if len(cd) != len(pts):
            raise ValueError("need one coarse descriptor per point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "coarse_descriptors", cd)
        if self.fine_descriptors is not None:
            fd = np.atleast_2d(np.asarray(self.fine_descriptors, dtype=float))
            if len(fd) != len(pts):
                raise ValueError("need one fine descriptor per point")
            object.__setattr__(self, "fine_descriptors", fd)

    def __len__(self):
        return len(self.points)


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {"dtype": a.dtype.str, "shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def encode_grid(g: DescriptorGrid) -> dict:
    return {"stride": g.frame.stride, "rows": g.rows, "cols": g.cols, "dim": g.dim,
            "normalized": g.normalized, "data": encode_array(g.data)}


def decode_grid(d: dict) -> DescriptorGrid:
    frame = GridFrame(int(d["stride"]), int(d["rows"]), int(d["cols"]))
    return DescriptorGrid(decode_array(d["data"]), frame, bool(d.get("normalized", False)))


def scene_to_dict(scene: Scene, coarse_grid: DescriptorGrid | None = None,
                  fine_grid: DescriptorGrid | None = None,
                  meta: dict[str, Any] | None = None) -> dict:
    out: dict[str, Any] = {
        "format": "nrepose-scene",
        "version": SCENE_FORMAT_VERSION,
        "intrinsics": scene.intrinsics.to_dict(),
        "points": encode_array(scene.points),
        "coarse_descriptors": encode_array(scene.coarse_descriptors),
    }
    if scene.fine_descriptors is not None:
        out["fine_descriptors"] = encode_array(scene.fine_descriptors)
    if scene.gt_pose is not None:
        out["gt_pose"] = scene.gt_pose.to_dict()
    if coarse_grid is not None:
        out["coarse_grid"] = encode_grid(coarse_grid)
    if fine_grid is not None:
        out["fine_grid"] = encode_grid(fine_grid)
    if meta:
        out["meta"] = meta
    return out


def scene_from_dict(d: dict):
    """Inverse of :func:`scene_to_dict`: ``(scene, coarse_grid, fine_grid, meta)``."""
    if d.get("format") != "nrepose-scene":
        raise ValueError("not a scene file")
    if d.get("version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene version {d.get('version')}")
    scene = Scene(
        decode_array(d["points"]),
        CameraIntrinsics.from_dict(d["intrinsics"]),
        decode_array(d["coarse_descriptors"]),
        decode_array(d["fine_descriptors"]) if "fine_descriptors" in d else None,
        Pose.from_dict(d["gt_pose"]) if "gt_pose" in d else None,
    )
    coarse = decode_grid(d["coarse_grid"]) if "coarse_grid" in d else None
    fine = decode_grid(d["fine_grid"]) if "fine_grid" in d else None
    return scene, coarse, fine, d.get("meta", {})


def save_scene(path, scene: Scene, coarse_grid=None, fine_grid=None, meta=None) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene, coarse_grid, fine_grid, meta), f, sort_keys=True)


def load_scene(path):
    with open(path) as f:
        return scene_from_dict(json.load(f))
