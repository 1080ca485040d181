"""scikit-learn style wrappers around the functional API.

``fit`` consumes a scene and its query descriptor grids and stores the
estimated pose in ``pose_``; ``predict`` reprojects 3D points with it.
Hyperparameters are plain constructor arguments, so ``get_params`` /
``set_params`` / ``clone`` work as usual.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_descriptors, check_grid, check_points, check_pose, check_scene
from .baselines import RobustKernel, fpr_refine_c2f, re_estimate_c2f
from .corrmaps import correspondence_maps, neg_log_map, truncate
from .geometry import project
from .pipeline import CoarseToFineConfig, estimate_pose_c2f
from .solvers import GncSchedule, IrlsConfig, MsacConfig


class LossMapBuilder(TransformerMixin, BaseEstimator):
    """Turn point descriptors into sparse robust loss maps over a fitted grid."""

    def __init__(self, temperature: float = 1.0, normalize: bool = True):
        self.temperature = temperature
        self.normalize = normalize

    def fit(self, grid, y=None):
        self.grid_ = check_grid(grid)
        self.n_features_in_ = self.grid_.dim
        return self

    def transform(self, h):
        check_is_fitted(self, "grid_")
        h = check_descriptors(h, dim=self.grid_.dim)
        probs = correspondence_maps(h, self.grid_, self.temperature, self.normalize)
        return [truncate(neg_log_map(p)) for p in probs]


class _PoseEstimatorBase(BaseEstimator):

    def _config(self) -> CoarseToFineConfig:
        return CoarseToFineConfig(
            coarse_stride=self.coarse_stride, fine_stride=self.fine_stride,
            local_size=self.local_size,
            coarse_schedule=GncSchedule.geometric(*self.coarse_sigmas, self.n_sigmas),
            fine_schedule=GncSchedule.geometric(*self.fine_sigmas, self.n_sigmas),
            msac=MsacConfig(self.msac_iterations, self.random_state),
            irls=IrlsConfig(self.max_iter, self.tol),
            coarse_temperature=self.coarse_temperature,
            fine_temperature=self.fine_temperature, normalize=self.normalize)

    def _check_inputs(self, scene, coarse_grid, fine_grid):
        scene = check_scene(scene, need_fine=True)
        check_grid(coarse_grid, self.coarse_stride, "coarse_grid")
        check_grid(fine_grid, self.fine_stride, "fine_grid")
        return scene

    def predict(self, points):
        """Pixel reprojections of ``points`` (NaN where out of view)."""
        check_is_fitted(self, "pose_")
        uv, _ = project(check_points(points), self.pose_, self.intrinsics_)
        return uv


class NrePoseEstimator(_PoseEstimatorBase):
    """Coarse-to-fine pose estimation on neural reprojection error maps."""

    def __init__(self, coarse_stride=16, fine_stride=2, local_size=64,
                 coarse_sigmas=(2.0, 0.6), fine_sigmas=(8.0, 0.6), n_sigmas=8,
                 msac_iterations=1000, random_state=0, max_iter=100, tol=1e-6,
                 coarse_temperature=1.0, fine_temperature=1.0, normalize=True):
        self.coarse_stride = coarse_stride
        self.fine_stride = fine_stride
        self.local_size = local_size
        self.coarse_sigmas = coarse_sigmas
        self.fine_sigmas = fine_sigmas
        self.n_sigmas = n_sigmas
        self.msac_iterations = msac_iterations
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol
        self.coarse_temperature = coarse_temperature
        self.fine_temperature = fine_temperature
        self.normalize = normalize

    def fit(self, scene, coarse_grid, fine_grid):
        scene = self._check_inputs(scene, coarse_grid, fine_grid)
        self.pose_, self.report_ = estimate_pose_c2f(scene, coarse_grid, fine_grid,
                                                     self._config())
        self.intrinsics_ = scene.intrinsics
        return self


class RePoseEstimator(_PoseEstimatorBase):
    """Coarse-to-fine reprojection-error baseline on correspondence-map argmax matches.

    ``sigma`` is the final kernel width in cells; the schedules are the
    NRE ones rescaled to end there.
    """

    def __init__(self, sigma=1.0, coarse_stride=16, fine_stride=2, local_size=64,
                 coarse_sigmas=(2.0, 0.6), fine_sigmas=(8.0, 0.6), n_sigmas=8,
                 msac_iterations=1000, random_state=0, max_iter=100, tol=1e-6,
                 coarse_temperature=1.0, fine_temperature=1.0, normalize=True):
        self.sigma = sigma
        self.coarse_stride = coarse_stride
        self.fine_stride = fine_stride
        self.local_size = local_size
        self.coarse_sigmas = coarse_sigmas
        self.fine_sigmas = fine_sigmas
        self.n_sigmas = n_sigmas
        self.msac_iterations = msac_iterations
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol
        self.coarse_temperature = coarse_temperature
        self.fine_temperature = fine_temperature
        self.normalize = normalize

    def fit(self, scene, coarse_grid, fine_grid):
        scene = self._check_inputs(scene, coarse_grid, fine_grid)
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        self.pose_, self.stages_ = re_estimate_c2f(scene, coarse_grid, fine_grid,
                                                   float(self.sigma), self._config())
        self.intrinsics_ = scene.intrinsics
        return self


class FeatureMetricRefiner(BaseEstimator):
    """Feature-metric refinement on the coarse, then the fine descriptor grid."""

    def __init__(self, kernel="huber", kernel_param=0.5, max_iter=100, tol=1e-6):
        self.kernel = kernel
        self.kernel_param = kernel_param
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, scene, coarse_grid, fine_grid, init_pose):
        scene = check_scene(scene, need_fine=True)
        check_grid(coarse_grid, name="coarse_grid")
        check_grid(fine_grid, name="fine_grid")
        res = fpr_refine_c2f(scene.points, scene.coarse_descriptors, coarse_grid,
                             scene.fine_descriptors, fine_grid, check_pose(init_pose),
                             scene.intrinsics, RobustKernel(self.kernel, self.kernel_param),
                             IrlsConfig(self.max_iter, self.tol))
        self.pose_ = res.pose
        self.result_ = res
        self.intrinsics_ = scene.intrinsics
        return self

    def predict(self, points):
        check_is_fitted(self, "pose_")
        uv, _ = project(check_points(points), self.pose_, self.intrinsics_)
        return np.asarray(uv)
