"""Small scene builders shared by the test modules."""
import numpy as np
from scipy.spatial.transform import Rotation

from nrepose.corrmaps import neg_log_map, truncate
from nrepose.geometry import CameraIntrinsics, GridFrame, Pose, project

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
COARSE = GridFrame.for_image(K, 16)     # 30 x 40
FINE = GridFrame.for_image(K, 2)


def random_pose(rng, t_scale=1.0) -> Pose:
    R = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    return Pose(R, rng.normal(scale=t_scale, size=3))


def points_at_pixels(pixels, depths, pose: Pose, K=K):
    pixels = np.asarray(pixels, dtype=float)
    rays = np.c_[(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(len(pixels))]
    cam = np.asarray(depths, dtype=float)[:, None] * rays
    return (cam - pose.translation) @ pose.rotation


def points_in_view(rng, pose: Pose, n: int, margin=40.0, K=K, depth=(4.0, 12.0)):
    px = rng.uniform([margin, margin], [K.width - margin, K.height - margin], size=(n, 2))
    return points_at_pixels(px, rng.uniform(*depth, size=n), pose, K)


def one_hot_maps(points, pose: Pose, frame: GridFrame = COARSE, K=K):
    """One-hot loss maps at the rounded grid reprojections; also returns the cells (x, y)."""
    uv, ok = project(points, pose, K)
    assert np.all(ok)
    cells = np.round(uv / frame.stride).astype(int)
    cells[:, 0] = np.clip(cells[:, 0], 0, frame.cols - 1)
    cells[:, 1] = np.clip(cells[:, 1], 0, frame.rows - 1)
    maps = []
    for x, y in cells:
        p = np.zeros((frame.rows, frame.cols))
        p[y, x] = 1.0
        maps.append(truncate(neg_log_map(p)))
    return maps, cells


def random_prob_maps(rng, n, frame: GridFrame = COARSE, scale=3.0):
    logits = rng.normal(scale=scale, size=(n, frame.rows, frame.cols))
    p = np.exp(logits - logits.max(axis=(1, 2), keepdims=True))
    return p / p.sum(axis=(1, 2), keepdims=True)


def pose_fd(fun, pose, step=1e-6):
    from nrepose.geometry import se3_retract
    g = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = step
        g[i] = (fun(se3_retract(pose, e)) - fun(se3_retract(pose, -e))) / (2 * step)
    return g
