"""Finite-difference checks of every analytic gradient in the package.

Gradient functions are looked up through their modules at call time, so a
patched (or broken) implementation is what gets checked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import baselines, nre
from .corrmaps import DescriptorGrid, neg_log_map, truncate
from .geometry import CameraIntrinsics, GridFrame, Pose, project, se3_retract

FD_STEP = 1e-6


@dataclass
class GradCheck:
    name: str
    max_rel_err: float
    tol: float
    n_configs: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:g}, {self.n_configs} configs)")


def rel_err(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=float).ravel()
    f = np.asarray(numeric, dtype=float).ravel()
    return float(np.max(np.abs(a - f)) / max(np.max(np.abs(f)), 1e-12))


def _pose_fd(fun, pose: Pose, step: float = FD_STEP) -> np.ndarray:
    g = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = step
        g[i] = (fun(se3_retract(pose, e)) - fun(se3_retract(pose, -e))) / (2 * step)
    return g


def _random_pose(rng, scale=0.3) -> Pose:
    return se3_retract(Pose.identity(), rng.normal(scale=scale, size=6) * [1, 1, 1, 0.5, 0.5, 0.5])


def _points_in_view(rng, K: CameraIntrinsics, pose: Pose, n: int, margin: float = 20.0):
    px = rng.uniform([margin, margin], [K.width - margin, K.height - margin], size=(n, 2))
    z = rng.uniform(3.0, 8.0, size=n)
    Xc = np.stack([(px[:, 0] - K.cx) / K.fx * z, (px[:, 1] - K.cy) / K.fy * z, z], axis=1)
    return (Xc - pose.translation) @ pose.rotation


_K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def check_smoothed_pose(n_configs: int = 20, seed: int = 0, tol: float = 1e-4) -> GradCheck:
    rng = np.random.default_rng(seed)
    frame = GridFrame.for_image(_K, 16)
    worst = 0.0
    for _ in range(n_configs):
        gt = _random_pose(rng)
        pts = _points_in_view(rng, _K, gt, 12)
        logits = rng.normal(scale=3.0, size=(len(pts), frame.rows, frame.cols))
        p = np.exp(logits - logits.max(axis=(1, 2), keepdims=True))
        p /= p.sum(axis=(1, 2), keepdims=True)
        maps = [truncate(neg_log_map(c)) for c in p]
        pose = se3_retract(gt, rng.normal(scale=0.01, size=6))
        sigma = float(rng.uniform(0.5, 3.0))
        a = nre.smoothed_pose_loss_grad(pts, maps, pose, _K, frame, sigma)
        f = _pose_fd(lambda q: nre.smoothed_pose_loss(pts, maps, q, _K, frame, sigma), pose)
        worst = max(worst, rel_err(a, f))
    return GradCheck("smoothed loss / pose", worst, tol, n_configs)


def _smooth_grid(rng, rows, cols, dim, frame) -> DescriptorGrid:
    # low-frequency random field so the bilinear interpolant is well scaled
    yy, xx = np.mgrid[0:rows, 0:cols]
    data = np.zeros((rows, cols, dim))
    for _ in range(4):
        k = rng.normal(scale=0.3, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=dim)
        data += np.cos(k[0] * xx[..., None] + k[1] * yy[..., None] + ph)
    return DescriptorGrid(data + 0.1 * rng.normal(size=data.shape), frame)


def check_fpr_pose(n_configs: int = 20, seed: int = 1, tol: float = 1e-4) -> GradCheck:
    rng = np.random.default_rng(seed)
    frame = GridFrame.for_image(_K, 16)
    worst = 0.0
    done = 0
    while done < n_configs:
        gt = _random_pose(rng)
        pts = _points_in_view(rng, _K, gt, 10, margin=40.0)
        grid = _smooth_grid(rng, frame.rows, frame.cols, 8, frame)
        h = rng.normal(size=(len(pts), 8))
        pose = se3_retract(gt, rng.normal(scale=0.005, size=6))
        uv, _ = project(pts, pose, _K)
        g = uv / frame.stride
        # the bilinear interpolant has kinks on the lattice lines; keep clear of them
        frac = np.abs(g - np.round(g))
        if np.min(frac) < 1e-3:
            continue
        kern = baselines.RobustKernel(("huber", "truncated_quadratic", "neg_gaussian")[done % 3],
                                      float(rng.uniform(0.5, 3.0)))
        a = baselines.fpr_loss_grad(pts, h, grid, pose, _K, kern)
        f = _pose_fd(lambda q: baselines.fpr_loss(pts, h, grid, q, _K, kern), pose, 1e-7)
        worst = max(worst, rel_err(a, f))
        done += 1
    return GradCheck("feature-metric loss / pose", worst, tol, n_configs)


def _training_setup(rng):
    K = CameraIntrinsics(200.0, 200.0, 128.0, 128.0, 256, 256)
    frame = GridFrame.for_image(K, 16)
    pose = _random_pose(rng, 0.1)
    pts = _points_in_view(rng, K, pose, 6, margin=24.0)
    grid = DescriptorGrid(rng.normal(size=(frame.rows, frame.cols, 6)), frame)
    h = rng.normal(size=(len(pts), 6))
    return K, pose, pts, grid, h


def _check_training(which: str, n_configs: int, seed: int, tol: float) -> GradCheck:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        K, pose, pts, grid, h = _training_setup(rng)
        T = float(rng.uniform(0.3, 2.0))
        gH, gh = nre.training_loss_grad_descriptors(pts, grid, h, pose, K, T)
        target = grid.data if which == "grid" else h
        analytic = gH if which == "grid" else gh
        idx = [tuple(rng.integers(0, s) for s in target.shape) for _ in range(12)]
        num, ana = [], []
        for ix in idx:
            vals = []
            for sgn in (1, -1):
                X = np.array(target, dtype=float)
                X[ix] += sgn * FD_STEP
                if which == "grid":
                    vals.append(nre.training_loss(pts, DescriptorGrid(X, grid.frame), h, pose, K, T))
                else:
                    vals.append(nre.training_loss(pts, grid, X, pose, K, T))
            num.append((vals[0] - vals[1]) / (2 * FD_STEP))
            ana.append(analytic[ix])
        worst = max(worst, rel_err(ana, num))
    label = "grid descriptors" if which == "grid" else "point descriptors"
    return GradCheck(f"training loss / {label}", worst, tol, n_configs)


def check_training_grid(n_configs: int = 20, seed: int = 2, tol: float = 1e-4) -> GradCheck:
    return _check_training("grid", n_configs, seed, tol)


def check_training_desc(n_configs: int = 20, seed: int = 3, tol: float = 1e-4) -> GradCheck:
    return _check_training("desc", n_configs, seed, tol)


CHECKS = (check_smoothed_pose, check_fpr_pose, check_training_grid, check_training_desc)


def run_gradchecks(n_configs: int = 20, tol: float = 1e-4) -> list[GradCheck]:
    return [c(n_configs=n_configs, tol=tol) for c in CHECKS]
