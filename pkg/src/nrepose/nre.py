"""NRE terms, the robust pose loss, its Gaussian-smoothed version and the training loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .corrmaps import (CorrespondenceMap, DescriptorGrid, LossMapStack, RobustLossMap,
                       _l2_normalize, as_stack, neg_log_map)
from .geometry import (CameraIntrinsics, GridFrame, Pose, bilinear_neighbors, project,
                       project_batch, warp_jacobian)

log = logging.getLogger(__name__)

MapsLike = Union[LossMapStack, Sequence[RobustLossMap]]


@dataclass(frozen=True)
class SmoothedLossConfig:
    sigma: float
    cutoff: float | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.cutoff is not None and not self.cutoff > 0:
            raise ValueError("cutoff must be positive")


def gaussian_kernel(r2, sigma: float):
    """Isotropic 2D Gaussian ``k_sigma`` evaluated at squared radius ``r2``."""
    return np.exp(-0.5 * np.asarray(r2) / sigma**2) / (2.0 * np.pi * sigma**2)


def _grid_projection(points, pose: Pose, K: CameraIntrinsics, frame: GridFrame):
    uv, ok = project(points, pose, K)
    return uv / frame.stride, ok


# ---------------------------------------------------------------------------
# single terms

def matching_pmf(C: CorrespondenceMap, s: int):
    """Mixture of the correspondence map and the uniform outlier pmf.

    Returns the grid probabilities and the probability of ``out``.
    """
    if s not in (0, 1):
        raise ValueError("selector must be 0 or 1")
    n_cat = C.probs.size + 1
    return s * C.probs + (1 - s) / n_cat, s * C.out_prob + (1 - s) / n_cat


def nre_term(u, C: CorrespondenceMap, pose: Pose, K: CameraIntrinsics,
             frame: GridFrame, s: int) -> float:
    """Cross-entropy between reprojection and matching pmfs for one point."""
    if s not in (0, 1):
        raise ValueError("selector must be 0 or 1")
    T = float(np.log1p(C.probs.size))
    if s == 0:
        return T
    g, ok = _grid_projection(np.asarray(u, dtype=float).reshape(1, 3), pose, K, frame)
    dense = neg_log_map(C)
    r, c, w, valid = bilinear_neighbors(g[0], *dense.shape)
    if not (ok[0] and valid):
        return float("inf")
    vals = dense[r, c]
    used = w > 0
    if np.any(np.isinf(vals[used])):
        return float("inf")
    return float(np.sum(w[used] * vals[used]))


# ---------------------------------------------------------------------------
# robust pose loss

def pose_loss(points, maps: MapsLike, pose: Pose, K: CameraIntrinsics,
              frame: GridFrame) -> float:
    """Sum over points of the truncated loss map sampled at the reprojection."""
    stack = as_stack(maps)
    points = np.asarray(points, dtype=float)
    if len(points) != len(stack):
        raise ValueError(f"{len(points)} points but {len(stack)} loss maps")
    g, ok = _grid_projection(points, pose, K, frame)
    return float(np.sum(stack.sample(g, ok)))


def pose_loss_batch(points, maps: MapsLike, R, t, K: CameraIntrinsics,
                    frame: GridFrame, chunk: int = 512) -> np.ndarray:
    """:func:`pose_loss` for ``C`` candidate poses given as ``R (C,3,3)``, ``t (C,3)``."""
    stack = as_stack(maps)
    points = np.asarray(points, dtype=float)
    if len(points) != len(stack):
        raise ValueError(f"{len(points)} points but {len(stack)} loss maps")
    out = np.empty(len(R))
    for s in range(0, len(R), chunk):
        uv, ok = project_batch(points, R[s:s + chunk], t[s:s + chunk], K)
        out[s:s + chunk] = stack.sample(uv / frame.stride, ok).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# smoothed loss

@dataclass(frozen=True, eq=False)
class KernelTargets:
    """Flattened Gaussian-kernel targets shared by NRE and RE losses.

    Target ``j`` belongs to point ``owner[j]``, sits at grid location
    ``q[j] = (x, y)`` and carries amplitude ``amp[j] = T - L(q)``.
    """

    owner: np.ndarray
    q: np.ndarray
    amp: np.ndarray
    n_points: int

    @classmethod
    def from_maps(cls, maps: MapsLike) -> "KernelTargets":
        stack = as_stack(maps)
        q = np.stack([stack.index % stack.cols, stack.index // stack.cols], axis=1).astype(float)
        return cls(stack.owner, q, stack.truncation - stack.values, len(stack))

    @classmethod
    def one_hot(cls, observations, truncation: float, valid=None) -> "KernelTargets":
        """One target of amplitude ``truncation`` per observation (RE case)."""
        obs = np.asarray(observations, dtype=float).reshape(-1, 2)
        keep = np.ones(len(obs), bool) if valid is None else np.asarray(valid, bool)
        owner = np.flatnonzero(keep)
        return cls(owner, obs[keep], np.full(len(owner), float(truncation)), len(obs))


def as_targets(maps_or_targets) -> KernelTargets:
    if isinstance(maps_or_targets, KernelTargets):
        return maps_or_targets
    return KernelTargets.from_maps(maps_or_targets)


@dataclass
class SmoothedEval:
    loss: float
    grad: np.ndarray | None = None
    normal_matrix: np.ndarray | None = None
    normal_rhs: np.ndarray | None = None


def evaluate_smoothed(points, targets: KernelTargets, pose: Pose, K: CameraIntrinsics,
                      frame: GridFrame, sigma: float, cutoff: float | None = None,
                      grad: bool = False, normal: bool = False) -> SmoothedEval:
    """Smoothed loss and optionally its gradient and IRLS normal equations.

    Out-of-view points contribute nothing. The IRLS weight of target ``j``
    is ``amp_j * k_sigma(|q_j - w_n|)`` and the residual is ``q_j - w_n``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    points = np.asarray(points, dtype=float)
    if len(points) != targets.n_points:
        raise ValueError(f"{len(points)} points but targets for {targets.n_points}")
    g, ok = _grid_projection(points, pose, K, frame)
    own = targets.owner
    live = ok[own]
    res = np.where(live[:, None], targets.q - np.nan_to_num(g[own]), 0.0)
    r2 = np.einsum("ij,ij->i", res, res)
    k = gaussian_kernel(r2, sigma)
    k = np.where(live, k, 0.0)
    if cutoff is not None:
        k = np.where(r2 <= (cutoff * sigma) ** 2, k, 0.0)
    w = targets.amp * k
    out = SmoothedEval(loss=-float(np.sum(w)))
    if not (grad or normal):
        return out
    n = len(points)
    # per-point sums of weights and weighted residuals
    wsum = np.bincount(own, weights=w, minlength=n)
    wres = np.stack([np.bincount(own, weights=w * res[:, 0], minlength=n),
                     np.bincount(own, weights=w * res[:, 1], minlength=n)], axis=1)
    J = warp_jacobian(points, pose, K, frame.stride)
    J[~ok] = 0.0
    if grad:
        out.grad = -np.einsum("ni,nij->j", wres, J) / sigma**2
    if normal:
        out.normal_matrix = np.einsum("n,nij,nik->jk", wsum, J, J)
        out.normal_rhs = np.einsum("ni,nij->j", wres, J)
    return out


def smoothed_pose_loss(points, maps, pose: Pose, K: CameraIntrinsics, frame: GridFrame,
                       cfg: Union[SmoothedLossConfig, float]) -> float:
    """Gaussian-smoothed robust loss, summed over the non-truncated cells."""
    cfg = cfg if isinstance(cfg, SmoothedLossConfig) else SmoothedLossConfig(float(cfg))
    return evaluate_smoothed(points, as_targets(maps), pose, K, frame,
                             cfg.sigma, cfg.cutoff).loss


def smoothed_pose_loss_grad(points, maps, pose: Pose, K: CameraIntrinsics, frame: GridFrame,
                            cfg: Union[SmoothedLossConfig, float]) -> np.ndarray:
    """Gradient of :func:`smoothed_pose_loss` w.r.t. the retraction at zero."""
    cfg = cfg if isinstance(cfg, SmoothedLossConfig) else SmoothedLossConfig(float(cfg))
    return evaluate_smoothed(points, as_targets(maps), pose, K, frame,
                             cfg.sigma, cfg.cutoff, grad=True).grad


# ---------------------------------------------------------------------------
# training loss

@dataclass
class TrainingEval:
    loss: float
    grad_grid: np.ndarray | None
    grad_desc: np.ndarray | None
    n_skipped: int
    per_term: np.ndarray


def _normalize_backward(v, g):
    """Pull a gradient through ``v / |v|`` along the last axis."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    n = np.where(n > 0, n, 1.0)
    vh = v / n
    return (g - vh * np.sum(vh * g, axis=-1, keepdims=True)) / n


def evaluate_training(points, grid: DescriptorGrid, h, pose: Pose, K: CameraIntrinsics,
                      temperature: float = 1.0, normalize: bool = True,
                      grad: bool = True) -> TrainingEval:
    """Sum of NRE terms with the selector fixed to one, plus descriptor gradients.

    Terms whose ground-truth reprojection falls out of view are skipped and
    counted.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    points = np.asarray(points, dtype=float)
    h = np.atleast_2d(np.asarray(h, dtype=float))
    if len(h) != len(points):
        raise ValueError("need one descriptor per point")
    if h.shape[1] != grid.dim:
        raise ValueError(f"descriptor dim {h.shape[1]} != grid dim {grid.dim}")
    frame = grid.frame
    g, ok = _grid_projection(points, pose, K, frame)
    r, c, w, inside = bilinear_neighbors(g, grid.rows, grid.cols)
    live = ok & inside
    n_skipped = int(np.sum(~live))
    if n_skipped:
        log.warning("training loss: skipped %d out-of-view terms", n_skipped)

    Hflat = grid.data.reshape(-1, grid.dim)
    Hn = _l2_normalize(Hflat) if normalize else Hflat
    hn = _l2_normalize(h) if normalize else h
    logits = Hn @ hn.T / temperature                        # (RC, N)
    m = logits.max(axis=0)
    lse = m + np.log(np.exp(logits - m).sum(axis=0))
    flat = r * grid.cols + c                                # (N, 4)
    cols_idx = np.arange(len(points))[:, None]
    neg_log = lse[:, None] - logits[flat, cols_idx]
    per_term = np.where(live, np.sum(w * neg_log, axis=1), 0.0)
    loss = float(np.sum(per_term))
    if not grad:
        return TrainingEval(loss, None, None, n_skipped, per_term)

    G = np.exp(logits - lse)                                # softmax, (RC, N)
    np.add.at(G, (flat, np.broadcast_to(cols_idx, flat.shape)), -w)
    G[:, ~live] = 0.0
    gHn = G @ hn / temperature
    ghn = G.T @ Hn / temperature
    if normalize:
        gH = _normalize_backward(Hflat, gHn)
        gh = _normalize_backward(h, ghn)
    else:
        gH, gh = gHn, ghn
    return TrainingEval(loss, gH.reshape(grid.data.shape), gh, n_skipped, per_term)


def training_loss(points, grid: DescriptorGrid, h, pose: Pose, K: CameraIntrinsics,
                  temperature: float = 1.0, normalize: bool = True) -> float:
    return evaluate_training(points, grid, h, pose, K, temperature, normalize, grad=False).loss


def training_loss_grad_descriptors(points, grid: DescriptorGrid, h, pose: Pose,
                                   K: CameraIntrinsics, temperature: float = 1.0,
                                   normalize: bool = True):
    """Gradients of the training loss w.r.t. the grid and the point descriptors."""
    ev = evaluate_training(points, grid, h, pose, K, temperature, normalize)
    return ev.grad_grid, ev.grad_desc


@dataclass
class TrainingHistory:
    grid: DescriptorGrid
    descriptors: np.ndarray
    losses: list


def train_descriptors(points, grid: DescriptorGrid, h, pose: Pose, K: CameraIntrinsics,
                      steps: int = 200, lr: float = 0.1, temperature: float = 0.1,
                      normalize: bool = True) -> TrainingHistory:
    """Plain gradient descent on the grid and point descriptors."""
    H = np.array(grid.data, dtype=float)
    d = np.array(h, dtype=float)
    losses = []
    for _ in range(steps):
        ev = evaluate_training(points, DescriptorGrid(H, grid.frame), d, pose, K,
                               temperature, normalize)
        losses.append(ev.loss)
        H -= lr * ev.grad_grid
        d -= lr * ev.grad_desc
    final = DescriptorGrid(H, grid.frame)
    losses.append(training_loss(points, final, d, pose, K, temperature, normalize))
    return TrainingHistory(final, d, losses)
