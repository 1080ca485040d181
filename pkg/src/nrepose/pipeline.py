"""Coarse-to-fine NRE pose estimation.

Coarse loss maps drive MSAC+P3P and a first GNC pass; local high-resolution
loss maps are then built only inside ``local_size x local_size`` windows
around the coarse-pose reprojections, so no full-resolution fine map is
ever materialized.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .corrmaps import (DescriptorGrid, LossMapStack, RobustLossMap, _l2_normalize,
                       correspondence_maps, neg_log_map, truncate)
from .geometry import OUT, CameraIntrinsics, Pose, warp
from .nre import pose_loss
from .scene import Scene
from .solvers import (GncSchedule, IrlsConfig, MsacConfig, UninformativeMapError,
                      gnc_refine, informative, msac_init)

STAGES = ("msac", "coarse_gnc", "fine_gnc")


@dataclass(frozen=True)
class CoarseToFineConfig:
    coarse_stride: int = 16
    fine_stride: int = 2
    local_size: int = 64
    coarse_schedule: GncSchedule = field(default_factory=GncSchedule.coarse_default)
    fine_schedule: GncSchedule = field(default_factory=GncSchedule.fine_default)
    msac: MsacConfig = field(default_factory=MsacConfig)
    irls: IrlsConfig = field(default_factory=IrlsConfig)
    coarse_temperature: float = 1.0
    fine_temperature: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if self.local_size < 8 or self.local_size % 2:
            raise ValueError("local_size must be even and >= 8")
        if self.fine_stride < 1 or self.coarse_stride % self.fine_stride:
            raise ValueError("fine stride must divide coarse stride")
        if not (self.coarse_temperature > 0 and self.fine_temperature > 0):
            raise ValueError("temperatures must be positive")


@dataclass(frozen=True, eq=False)
class LocalFineMap:
    """Loss map over one fine-grid window; ``truncation`` everywhere outside."""

    origin: tuple
    map: RobustLossMap
    full_shape: tuple
    norm_coarse: float
    coarse_cells: float

    @property
    def nbytes(self) -> int:
        return self.map.nbytes

    def to_full_grid(self) -> RobustLossMap:
        """Same sparse entries, indexed in the full fine grid."""
        return self.map.shifted(self.origin[0], self.origin[1], *self.full_shape)


def _coverage(start_px: float, stop_px: float, stride: int, n: int) -> np.ndarray:
    """Fraction of each of ``n`` coarse cells covered by ``[start_px, stop_px)``."""
    lo = np.arange(n) * stride
    hi = lo + stride
    overlap = np.clip(np.minimum(hi, stop_px) - np.maximum(lo, start_px), 0.0, None)
    return overlap / stride


def extract_local_fine_map(H_fine: DescriptorGrid, h_fine, C_coarse, coarse_stride: int,
                           coarse_pose: Pose, u, K: CameraIntrinsics,
                           cfg: CoarseToFineConfig) -> LocalFineMap | None:
    """Local high-resolution loss map at the coarse-pose reprojection of ``u``.

    Returns ``None`` when the reprojection is out of view.
    """
    p = warp(u, coarse_pose, K)
    if p is OUT:
        return None
    C_coarse = getattr(C_coarse, "probs", C_coarse)
    fs = H_fine.frame.stride
    rows, cols = H_fine.rows, H_fine.cols
    sh, sw = min(cfg.local_size, rows), min(cfg.local_size, cols)
    g = np.asarray(p) / fs
    r0 = int(np.clip(np.floor(g[1]) - sh // 2, 0, rows - sh))
    c0 = int(np.clip(np.floor(g[0]) - sw // 2, 0, cols - sw))
    window = H_fine.data[r0:r0 + sh, c0:c0 + sw].reshape(-1, H_fine.dim)
    h = np.asarray(h_fine, dtype=float).reshape(-1)
    if cfg.normalize:
        h = _l2_normalize(h)
        if not H_fine.normalized:
            window = _l2_normalize(window)
    s = window @ h / cfg.fine_temperature
    s = s - s.max()
    e = np.exp(s)
    c_fine = (e / e.sum()).reshape(sh, sw)

    cr, cc = C_coarse.shape
    fy = _coverage(r0 * fs, (r0 + sh) * fs, coarse_stride, cr)
    fx = _coverage(c0 * fs, (c0 + sw) * fs, coarse_stride, cc)
    norm_coarse = float(fy @ C_coarse @ fx)
    n_cells = float(fy.sum() * fx.sum())
    T_fine = float(np.log1p(rows * cols))
    if n_cells > 0:
        c_norm = c_fine * (norm_coarse / n_cells)
    else:
        c_norm = np.zeros_like(c_fine)
    L = truncate(neg_log_map(c_norm), truncation=T_fine)
    return LocalFineMap((r0, c0), L, (rows, cols), norm_coarse, n_cells)


@dataclass
class StageReport:
    pose: Pose
    loss: float
    wall_ms: float
    peak_map_bytes: int

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "loss": self.loss,
                "wall_ms": self.wall_ms, "peak_map_bytes": self.peak_map_bytes}


@dataclass
class EstimationReport:
    stages: dict = field(default_factory=dict)
    n_points: int = 0
    n_informative: int = 0
    n_fine_excluded: int = 0
    traces: dict = field(default_factory=dict)

    @property
    def final(self) -> StageReport:
        for name in reversed(STAGES):
            if name in self.stages:
                return self.stages[name]
        raise KeyError("empty report")

    def to_dict(self) -> dict:
        return {name: st.to_dict() for name, st in self.stages.items()}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def coarse_loss_maps(scene: Scene, coarse_grid: DescriptorGrid, cfg: CoarseToFineConfig):
    probs = correspondence_maps(scene.coarse_descriptors, coarse_grid,
                                cfg.coarse_temperature, cfg.normalize)
    maps = [truncate(neg_log_map(p)) for p in probs]
    return probs, maps


def local_fine_maps(scene: Scene, fine_grid: DescriptorGrid, coarse_probs, coarse_pose: Pose,
                    cfg: CoarseToFineConfig):
    """Local maps for every point; excluded points get an empty full-grid map."""
    fine_maps = []
    full = []
    for n, u in enumerate(scene.points):
        lm = extract_local_fine_map(fine_grid, scene.fine_descriptors[n], coarse_probs[n],
                                    cfg.coarse_stride, coarse_pose, u, scene.intrinsics, cfg)
        fine_maps.append(lm)
        if lm is None:
            full.append(RobustLossMap.empty(fine_grid.rows, fine_grid.cols))
        else:
            full.append(lm.to_full_grid())
    return fine_maps, full


def estimate_pose_c2f(scene: Scene, coarse_grid: DescriptorGrid, fine_grid: DescriptorGrid | None,
                      cfg: CoarseToFineConfig = CoarseToFineConfig(), until: str = "fine_gnc"):
    """Coarse-to-fine estimation; returns ``(pose, report)``.

    Coarse loss maps feed MSAC and a coarse GNC pass; local fine maps
    around the coarse reprojections then feed the fine GNC pass. ``until``
    names the last stage to run.
    """
    if until not in STAGES:
        raise ValueError(f"until must be one of {STAGES}")
    if until == "fine_gnc" and (scene.fine_descriptors is None or fine_grid is None):
        raise ValueError("scene needs fine descriptors")
    if coarse_grid.frame.stride != cfg.coarse_stride or (
            fine_grid is not None and fine_grid.frame.stride != cfg.fine_stride):
        raise ValueError("descriptor grid strides do not match the configuration")
    K = scene.intrinsics
    report = EstimationReport(n_points=len(scene))

    t0 = time.perf_counter()
    probs, maps = coarse_loss_maps(scene, coarse_grid, cfg)
    coarse_bytes = int(sum(m.nbytes for m in maps))
    report.n_informative = len(informative(maps))
    if report.n_informative < 3:
        raise UninformativeMapError(
            f"only {report.n_informative} informative coarse loss maps (need 3)")
    stack = LossMapStack(maps)
    ms = msac_init(scene.points, maps, K, coarse_grid.frame, cfg.msac)
    report.stages["msac"] = StageReport(ms.pose, ms.loss, 1e3 * (time.perf_counter() - t0),
                                        coarse_bytes)
    if until == "msac":
        return ms.pose, report

    t0 = time.perf_counter()
    cg = gnc_refine(scene.points, stack, K, coarse_grid.frame, ms.pose,
                    cfg.coarse_schedule, cfg.irls)
    report.traces["coarse_gnc"] = cg.trace
    report.stages["coarse_gnc"] = StageReport(
        cg.pose, pose_loss(scene.points, stack, cg.pose, K, coarse_grid.frame),
        1e3 * (time.perf_counter() - t0), coarse_bytes)
    if until == "coarse_gnc":
        return cg.pose, report

    t0 = time.perf_counter()
    fine_maps, full = local_fine_maps(scene, fine_grid, probs, cg.pose, cfg)
    report.n_fine_excluded = sum(m is None for m in fine_maps)
    fine_bytes = int(sum(m.nbytes for m in fine_maps if m is not None))
    fstack = LossMapStack(full)
    fg = gnc_refine(scene.points, fstack, K, fine_grid.frame, cg.pose,
                    cfg.fine_schedule, cfg.irls)
    report.traces["fine_gnc"] = fg.trace
    report.stages["fine_gnc"] = StageReport(
        fg.pose, pose_loss(scene.points, fstack, fg.pose, K, fine_grid.frame),
        1e3 * (time.perf_counter() - t0), fine_bytes)
    return fg.pose, report


def max_fine_map_bytes(n_points: int, local_size: int = 64) -> int:
    """Upper bound on fine-stage map storage for ``n_points`` windows."""
    from .corrmaps import HEADER_BYTES, RECORD_BYTES
    return n_points * (local_size * local_size * RECORD_BYTES + HEADER_BYTES)
