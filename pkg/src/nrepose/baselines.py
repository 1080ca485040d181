"""Reprojection-error (RE) and feature-metric (FPR) baselines.

RE reduces every correspondence map to its argmax and minimizes a
Gaussian-kernel robust reprojection loss. With one-hot loss maps this is
the NRE smoothed loss exactly, so both estimators run through the same
MSAC and IRLS code in :mod:`nrepose.solvers`.

FPR instead compares each point descriptor with the query descriptor grid
bilinearly interpolated at the reprojection, under a robust kernel.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corrmaps import CorrespondenceMap, DescriptorGrid, RobustLossMap, _l2_normalize
from .geometry import (CameraIntrinsics, GridFrame, Pose, bilinear_gradient_weights,
                       bilinear_neighbors, project, project_batch, warp_jacobian)
from .nre import KernelTargets, evaluate_smoothed, gaussian_kernel
from .solvers import (EstimationError, GncSchedule, IrlsConfig, MsacConfig, MsacResult,
                      RefineResult, damped_gauss_newton, gnc_refine, msac)


@dataclass(frozen=True)
class Match2d3d:
    point_index: int
    point: np.ndarray
    observation: np.ndarray
    score: float

    def __post_init__(self):
        obs = np.asarray(self.observation, dtype=float).reshape(2)
        if not np.all(np.isfinite(obs)):
            raise ValueError("observation must be finite")
        object.__setattr__(self, "observation", obs)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float).reshape(3))


def extract_matches(points, maps, stride: int) -> list[Match2d3d]:
    """One match per point at the stride-scaled argmax of its map.

    ``maps`` holds correspondence maps (arrays or :class:`CorrespondenceMap`)
    or :class:`RobustLossMap` objects. Ties resolve to the first cell in
    row-major order; points whose map is fully truncated are skipped.
    """
    points = np.asarray(points, dtype=float)
    maps = list(maps)
    if not maps:
        raise ValueError("no maps given")
    if len(maps) != len(points):
        raise ValueError(f"{len(points)} points but {len(maps)} maps")
    out = []
    for n, m in enumerate(maps):
        if isinstance(m, RobustLossMap):
            if len(m) == 0:
                continue
            j = int(np.argmin(m.values))
            r, c = divmod(int(m.index[j]), m.cols)
            score = float(np.exp(-m.values[j]))
        else:
            C = np.asarray(getattr(m, "probs", m), dtype=float)
            T = np.log1p(C.size)
            i = int(np.argmax(C))
            r, c = divmod(i, C.shape[1])
            score = float(C.flat[i])
            if not score > 0 or -np.log(score) >= T:
                continue
        out.append(Match2d3d(n, points[n], (stride * c, stride * r), score))
    return out


def matches_arrays(matches: Sequence[Match2d3d]):
    pts = np.array([m.point for m in matches], dtype=float).reshape(-1, 3)
    obs = np.array([m.observation for m in matches], dtype=float).reshape(-1, 2)
    return pts, obs


def matches_to_csv(matches: Sequence[Match2d3d]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point_index", "u_x", "u_y", "u_z", "obs_x", "obs_y", "score"])
    for m in matches:
        w.writerow([m.point_index, *map(repr, m.point.tolist()),
                    *map(repr, m.observation.tolist()), repr(m.score)])
    return buf.getvalue()


def matches_from_csv(text: str) -> list[Match2d3d]:
    rows = csv.DictReader(io.StringIO(text))
    return [Match2d3d(int(r["point_index"]),
                      [float(r["u_x"]), float(r["u_y"]), float(r["u_z"])],
                      [float(r["obs_x"]), float(r["obs_y"])], float(r["score"]))
            for r in rows]


# ---------------------------------------------------------------------------
# RE

def _re_targets(matches, frame: GridFrame):
    pts, obs = matches_arrays(matches)
    return pts, KernelTargets.one_hot(obs / frame.stride, frame.truncation)


def re_loss(matches: Sequence[Match2d3d], pose: Pose, K: CameraIntrinsics, frame: GridFrame,
            sigma: float) -> float:
    """Gaussian-kernel reprojection loss in grid coordinates.

    Each match contributes ``-ln|grid| * k_sigma(|obs - reprojection|)``;
    out-of-view matches contribute nothing.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not len(matches):
        return 0.0
    pts, targets = _re_targets(matches, frame)
    return evaluate_smoothed(pts, targets, pose, K, frame, sigma).loss


def re_loss_batch(points, observations, R, t, K: CameraIntrinsics, frame: GridFrame,
                  sigma: float, chunk: int = 512) -> np.ndarray:
    """:func:`re_loss` for a batch of candidate poses ``R (C,3,3)``, ``t (C,3)``."""
    obs = np.asarray(observations, dtype=float) / frame.stride
    out = np.empty(len(R))
    for s in range(0, len(R), chunk):
        uv, ok = project_batch(points, R[s:s + chunk], t[s:s + chunk], K)
        d = uv / frame.stride - obs[None]
        k = gaussian_kernel(np.einsum("cnj,cnj->cn", np.nan_to_num(d), np.nan_to_num(d)), sigma)
        out[s:s + chunk] = -frame.truncation * np.where(ok, k, 0.0).sum(axis=1)
    return out


def re_schedule(sigma: float, template: GncSchedule) -> GncSchedule:
    """``template`` rescaled so that it ends at ``sigma``."""
    scale = sigma / template.sigmas[-1]
    return GncSchedule(tuple(s * scale for s in template.sigmas))


@dataclass
class ReResult:
    pose: Pose
    msac: MsacResult
    refine: RefineResult


def re_estimate(matches: Sequence[Match2d3d], K: CameraIntrinsics, frame: GridFrame,
                msac_cfg: MsacConfig = MsacConfig(),
                schedule: GncSchedule = GncSchedule.coarse_default(),
                irls_cfg: IrlsConfig = IrlsConfig(), pose0: Pose | None = None) -> ReResult:
    """MSAC on the raw matches, then GNC on the reprojection loss.

    Candidates are scored by :func:`re_loss` at the final sigma of
    ``schedule``. When ``pose0`` is given, MSAC is skipped and refinement
    starts there.
    """
    if len(matches) < 3:
        raise EstimationError(f"need at least 3 matches, got {len(matches)}")
    pts, targets = _re_targets(matches, frame)
    obs = targets.q * frame.stride
    sigma = schedule.sigmas[-1]
    if pose0 is None:
        ms = msac(pts, obs, np.arange(len(pts)), K,
                  lambda R, t: re_loss_batch(pts, obs, R, t, K, frame, sigma), msac_cfg)
        pose0 = ms.pose
    else:
        ms = None
    ref = gnc_refine(pts, targets, K, frame, pose0, schedule, irls_cfg)
    return ReResult(ref.pose, ms, ref)


# ---------------------------------------------------------------------------
# FPR

@dataclass(frozen=True)
class RobustKernel:
    """Robust penalty ``psi(r)`` on a non-negative residual norm."""

    kind: str = "huber"
    param: float = 0.5

    KINDS = ("huber", "truncated_quadratic", "neg_gaussian")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}")
        if not self.param > 0:
            raise ValueError("kernel parameter must be positive")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        a = self.param
        if self.kind == "huber":
            return np.where(r <= a, 0.5 * r**2, a * (r - 0.5 * a))
        if self.kind == "truncated_quadratic":
            return 0.5 * np.minimum(r, a) ** 2
        return a**2 * (1.0 - np.exp(-0.5 * r**2 / a**2))

    def weight(self, r):
        """IRLS weight ``psi'(r) / r`` (its limit at ``r = 0``)."""
        r = np.asarray(r, dtype=float)
        a = self.param
        if self.kind == "huber":
            return np.where(r <= a, 1.0, a / np.maximum(r, a))
        if self.kind == "truncated_quadratic":
            return np.where(r < a, 1.0, 0.0)
        return np.exp(-0.5 * r**2 / a**2)


def _fpr_inputs(h, grid: DescriptorGrid, normalize: bool):
    h = np.atleast_2d(np.asarray(h, dtype=float))
    if h.shape[1] != grid.dim:
        raise ValueError(f"descriptor dim {h.shape[1]} != grid dim {grid.dim}")
    H = grid.data
    if normalize:
        h = _l2_normalize(h)
        if not grid.normalized:
            H = _l2_normalize(H)
    return h, H


def fpr_ceilings(h, grid: DescriptorGrid, normalize: bool = True) -> np.ndarray:
    """Largest descriptor distance of each point over the grid nodes."""
    h, H = _fpr_inputs(h, grid, normalize)
    Hf = H.reshape(-1, grid.dim)
    d2 = (h**2).sum(1)[:, None] + (Hf**2).sum(1)[None] - 2.0 * h @ Hf.T
    return np.sqrt(np.clip(d2.max(axis=1), 0.0, None))


@dataclass
class FprEval:
    loss: float
    grad: np.ndarray | None = None
    normal_matrix: np.ndarray | None = None
    normal_rhs: np.ndarray | None = None


def evaluate_fpr(points, h, grid: DescriptorGrid, pose: Pose, K: CameraIntrinsics,
                 kernel: RobustKernel, ceilings=None, normalize: bool = True,
                 grad: bool = False, normal: bool = False) -> FprEval:
    points = np.asarray(points, dtype=float)
    h, H = _fpr_inputs(h, grid, normalize)
    if len(h) != len(points):
        raise ValueError(f"{len(points)} points but {len(h)} descriptors")
    if ceilings is None:
        ceilings = fpr_ceilings(h, grid, normalize=False)
    frame = grid.frame
    uv, ok = project(points, pose, K)
    g = np.nan_to_num(uv / frame.stride, nan=-1.0)
    r, c, w, valid = bilinear_neighbors(g, grid.rows, grid.cols)
    live = ok & valid
    Hs = np.einsum("nk,nkd->nd", w, H[r, c])
    e = h - Hs
    res = np.linalg.norm(e, axis=1)
    res = np.where(live, res, np.asarray(ceilings, dtype=float))
    out = FprEval(float(np.sum(kernel(res))))
    if not (grad or normal):
        return out
    dwdx, dwdy = bilinear_gradient_weights(g, grid.rows, grid.cols)
    G = np.stack([np.einsum("nk,nkd->nd", dwdx, H[r, c]),
                  np.einsum("nk,nkd->nd", dwdy, H[r, c])], axis=2)      # dH/dgrid (N, D, 2)
    J = warp_jacobian(points, pose, K, frame.stride)
    B = G @ J                                                         # de/ddelta = -B
    wt = np.where(live, kernel.weight(res), 0.0)
    if grad:
        out.grad = -np.einsum("n,nd,ndj->j", wt, e, B)
    if normal:
        out.normal_matrix = np.einsum("n,ndi,ndj->ij", wt, B, B)
        out.normal_rhs = np.einsum("n,ndj,nd->j", wt, B, e)
    return out


def fpr_loss(points, h, grid: DescriptorGrid, pose: Pose, K: CameraIntrinsics,
             kernel: RobustKernel = RobustKernel(), ceilings=None,
             normalize: bool = True) -> float:
    """Robust descriptor distance at the bilinearly sampled reprojections.

    Out-of-view points are charged ``kernel(ceiling)`` where the ceiling
    defaults to the point's largest distance over the grid.
    """
    return evaluate_fpr(points, h, grid, pose, K, kernel, ceilings, normalize).loss


def fpr_loss_grad(points, h, grid: DescriptorGrid, pose: Pose, K: CameraIntrinsics,
                  kernel: RobustKernel = RobustKernel(), ceilings=None,
                  normalize: bool = True) -> np.ndarray:
    return evaluate_fpr(points, h, grid, pose, K, kernel, ceilings, normalize, grad=True).grad


def fpr_refine(points, h, grid: DescriptorGrid, pose0: Pose, K: CameraIntrinsics,
               kernel: RobustKernel = RobustKernel(), irls_cfg: IrlsConfig = IrlsConfig(),
               normalize: bool = True) -> RefineResult:
    """Damped IRLS on :func:`fpr_loss` starting from ``pose0``."""
    h, H = _fpr_inputs(h, grid, normalize)
    g = DescriptorGrid(H, grid.frame, normalized=normalize or grid.normalized)
    ceil = fpr_ceilings(h, g, normalize=False)

    def evaluate(p):
        e = evaluate_fpr(points, h, g, p, K, kernel, ceil, normalize=False, normal=True)
        return e.loss, e.normal_matrix, e.normal_rhs

    return damped_gauss_newton(evaluate, pose0, irls_cfg)


def fpr_refine_c2f(points, h_coarse, coarse_grid: DescriptorGrid, h_fine,
                   fine_grid: DescriptorGrid, pose0: Pose, K: CameraIntrinsics,
                   kernel: RobustKernel = RobustKernel(),
                   irls_cfg: IrlsConfig = IrlsConfig()) -> RefineResult:
    """FPR on the coarse descriptor grid, then on the fine one."""
    a = fpr_refine(points, h_coarse, coarse_grid, pose0, K, kernel, irls_cfg)
    b = fpr_refine(points, h_fine, fine_grid, a.pose, K, kernel, irls_cfg)
    return RefineResult(b.pose, b.loss, a.iterations + b.iterations,
                        a.degenerate or b.degenerate, a.trace + b.trace)


def re_estimate_c2f(scene, coarse_grid: DescriptorGrid, fine_grid: DescriptorGrid,
                    sigma: float, cfg=None) -> tuple:
    """RE counterpart of :func:`nrepose.pipeline.estimate_pose_c2f`.

    Coarse matches come from the coarse correspondence-map argmax; fine
    matches from the argmax of the local fine maps extracted around the
    coarse RE pose. ``sigma`` is the final kernel width, in cells of each
    grid. Returns ``(pose, {"coarse": ReResult, "fine": ReResult})``.
    """
    from .pipeline import CoarseToFineConfig, coarse_loss_maps, local_fine_maps

    cfg = cfg or CoarseToFineConfig()
    K = scene.intrinsics
    probs, _ = coarse_loss_maps(scene, coarse_grid, cfg)
    cm = extract_matches(scene.points, probs, coarse_grid.frame.stride)
    coarse = re_estimate(cm, K, coarse_grid.frame, cfg.msac,
                         re_schedule(sigma, cfg.coarse_schedule), cfg.irls)
    _, full = local_fine_maps(scene, fine_grid, probs, coarse.pose, cfg)
    fm = extract_matches(scene.points, full, fine_grid.frame.stride)
    if len(fm) < 3:
        return coarse.pose, {"coarse": coarse, "fine": None}
    fine = re_estimate(fm, K, fine_grid.frame, cfg.msac, re_schedule(sigma, cfg.fine_schedule),
                       cfg.irls, pose0=coarse.pose)
    return fine.pose, {"coarse": coarse, "fine": fine}
