"""Pinhole projection, rigid poses, bilinear weights and the reprojection pmf.

Conventions used throughout the package:

* continuous 2D points are ``(x, y)`` (x along columns, y along rows);
* integer grid cells are ``(row, col)``;
* grid coordinates are pixel coordinates divided by the stride, with no
  half-cell offset, so cell ``(i, j)`` covers pixels
  ``[stride*j, stride*(j+1)) x [stride*i, stride*(i+1))``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Union

import numpy as np

ORTHO_TOL = 1e-9
REORTHO_EVERY = 100


class OutOfView:
    """Sentinel for the ``out`` matching category."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "OUT"

    def __reduce__(self):
        return (OutOfView, ())


OUT = OutOfView()


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class GridFrame:
    """Feature-map resolution: ``stride`` image pixels per grid cell."""

    stride: int
    rows: int
    cols: int

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.rows * self.cols < 1 or self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one cell")

    @classmethod
    def for_image(cls, K: CameraIntrinsics, stride: int) -> "GridFrame":
        return cls(stride, max(1, K.height // stride), max(1, K.width // stride))

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def truncation(self) -> float:
        """ln of the number of matching categories (cells + ``out``)."""
        return float(np.log1p(self.rows * self.cols))


def _as_rotation(R) -> np.ndarray:
    R = np.array(R, dtype=float).reshape(3, 3)
    R.setflags(write=False)
    return R


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from the global frame to the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray
    n_updates: int = field(default=0, compare=False)

    def __post_init__(self):
        R = _as_rotation(self.rotation)
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.linalg.norm(R.T @ R - np.eye(3)) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not 1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def apply(self, points) -> np.ndarray:
        """Map global-frame points ``(..., 3)`` into the camera frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def to_dict(self) -> dict:
        q = rotation_to_quaternion(self.rotation)
        return {"q": [float(v) for v in q], "t": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(quaternion_to_rotation(d["q"]), d["t"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "Pose":
        return cls.from_dict(json.loads(s))


def rotation_to_quaternion(R) -> np.ndarray:
    """Unit quaternion ``[w, x, y, z]`` with ``w >= 0``."""
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    w, x, y, z = (float(v) for v in q)
    R = Rotation.from_quat([x, y, z, w]).as_matrix()
    return polar_project(R)


def polar_project(M) -> np.ndarray:
    """Closest rotation matrix to ``M`` in Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def hat(w) -> np.ndarray:
    """Skew-symmetric matrices for vectors ``(..., 3)``."""
    w = np.asarray(w, dtype=float)
    S = np.zeros(w.shape[:-1] + (3, 3))
    S[..., 0, 1] = -w[..., 2]
    S[..., 0, 2] = w[..., 1]
    S[..., 1, 0] = w[..., 2]
    S[..., 1, 2] = -w[..., 0]
    S[..., 2, 0] = -w[..., 1]
    S[..., 2, 1] = w[..., 0]
    return S


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return (np.eye(3) + np.sin(theta) / theta * W
            + (1.0 - np.cos(theta)) / theta**2 * W @ W)


def se3_retract(pose: Pose, delta) -> Pose:
    """Left rotation-exponential update with additive translation.

    ``delta = (w_x, w_y, w_z, v_x, v_y, v_z)``; ``R' = exp(w) R``,
    ``t' = t + v``. The rotation is re-projected onto SO(3) every
    ``REORTHO_EVERY`` updates.
    """
    delta = np.asarray(delta, dtype=float).reshape(6)
    if not np.all(np.isfinite(delta)):
        raise ValueError("delta must be finite")
    if not np.any(delta):
        return pose
    R = so3_exp(delta[:3]) @ pose.rotation
    n = pose.n_updates + 1
    if n % REORTHO_EVERY == 0:
        R = polar_project(R)
    return Pose(R, pose.translation + delta[3:], n)


# --------------------------------------------------------------------------
# projection

def project(points, pose: Pose, K: CameraIntrinsics):
    """Vectorized warp.

    Returns pixel coordinates ``(N, 2)`` and an in-view mask. Out-of-view
    entries (non-positive depth or outside ``[0, width) x [0, height)``)
    hold NaN.
    """
    X = pose.apply(points)
    return _pixels_from_camera(X, K)


def project_batch(points, R, t, K: CameraIntrinsics):
    """Project ``(N, 3)`` points under ``C`` poses: returns ``(C, N, 2)``."""
    X = np.einsum("cij,nj->cni", R, points) + t[:, None, :]
    return _pixels_from_camera(X, K)


def _pixels_from_camera(X, K: CameraIntrinsics):
    z = X[..., 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(front, z, 1.0)
        u = K.fx * X[..., 0] / zs + K.cx
        v = K.fy * X[..., 1] / zs + K.cy
    inside = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    uv = np.stack([u, v], axis=-1)
    uv[~inside] = np.nan
    return uv, inside


def warp(u, pose: Pose, K: CameraIntrinsics) -> Union[np.ndarray, OutOfView]:
    u = np.asarray(u, dtype=float).reshape(3)
    if not np.all(np.isfinite(u)):
        raise ValueError("point must be finite")
    uv, ok = project(u[None], pose, K)
    return uv[0] if ok[0] else OUT


def to_grid(p, frame: GridFrame) -> np.ndarray:
    return np.asarray(p, dtype=float) / frame.stride


def warp_jacobian(points, pose: Pose, K: CameraIntrinsics, stride: int = 1):
    """Jacobian ``(N, 2, 6)`` of grid coordinates w.r.t. the retraction.

    Evaluated at ``delta = 0`` for :func:`se3_retract`. Rows of points
    behind the camera are zero.
    """
    points = np.asarray(points, dtype=float)
    a = points @ pose.rotation.T
    X = a + pose.translation
    z = X[:, 2]
    safe = np.where(z > 0, z, 1.0)
    P = np.zeros((len(points), 2, 3))
    P[:, 0, 0] = K.fx / safe
    P[:, 0, 2] = -K.fx * X[:, 0] / safe**2
    P[:, 1, 1] = K.fy / safe
    P[:, 1, 2] = -K.fy * X[:, 1] / safe**2
    P[z <= 0] = 0.0
    dX = np.concatenate([-hat(a), np.broadcast_to(np.eye(3), (len(points), 3, 3))], axis=2)
    return P @ dX / stride


# --------------------------------------------------------------------------
# bilinear interpolation

def bilinear_weights(p):
    """Base location ``floor(p)`` and weights ``(w00, w10, w01, w11)``.

    Uses fractional parts ``x = p_x - floor(p_x)`` so the weights form a pmf.
    ``w10`` belongs to ``base + (1, 0)`` i.e. one step along x.
    """
    p = np.asarray(p, dtype=float).reshape(2)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    base = np.floor(p)
    x, y = p - base
    return ((int(base[0]), int(base[1])),
            (1 - x) * (1 - y), x * (1 - y), (1 - x) * y, x * y)


def bilinear_neighbors(p, rows: int, cols: int):
    """Vectorized bilinear stencil on a ``rows x cols`` grid.

    Parameters
    ----------
    p : array (..., 2)
        Continuous grid points ``(x, y)``.

    Returns
    -------
    r, c : int arrays (..., 4)
        Neighbor cells ordered ``00, 10, 01, 11``.
    w : float array (..., 4)
        Weights; zero for invalid points.
    valid : bool array (...)
        ``False`` where ``p`` lies outside ``[0, cols) x [0, rows)``.

    In the last row/column band the stencil is clamped to the grid, which
    renormalizes the weights onto the remaining valid neighbors.
    """
    p = np.asarray(p, dtype=float)
    x = p[..., 0]
    y = p[..., 1]
    with np.errstate(invalid="ignore"):
        valid = (x >= 0) & (x < cols) & (y >= 0) & (y < rows)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    fx = np.where(x0 >= cols - 1, 0.0, fx)
    fy = np.where(y0 >= rows - 1, 0.0, fy)
    x1 = np.minimum(x0 + 1, cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)
    r = np.stack([y0, y0, y1, y1], axis=-1)
    c = np.stack([x0, x1, x0, x1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    w = np.where(valid[..., None], w, 0.0)
    return r, c, w, valid


def bilinear_gradient_weights(p, rows: int, cols: int):
    """Derivatives of the four stencil weights w.r.t. ``x`` and ``y``.

    Returns arrays ``(..., 4)`` for ``dw/dx`` and ``dw/dy``, zero in the
    clamped band and for invalid points.
    """
    p = np.asarray(p, dtype=float)
    r, c, w, valid = bilinear_neighbors(p, rows, cols)
    xs = np.where(valid, p[..., 0], 0.0)
    ys = np.where(valid, p[..., 1], 0.0)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    ax = np.where(x0 >= cols - 1, 0.0, 1.0) * valid
    ay = np.where(y0 >= rows - 1, 0.0, 1.0) * valid
    fx = fx * ax
    fy = fy * ay
    dwdx = np.stack([-(1 - fy), (1 - fy), -fy, fy], axis=-1) * ax[..., None]
    dwdy = np.stack([-(1 - fx), -fx, (1 - fx), fx], axis=-1) * ay[..., None]
    return dwdx, dwdy


@dataclass(frozen=True)
class ReprojectionPmf:
    """Support as ``((row, col) | OUT, weight)`` pairs."""

    support: tuple

    def total(self) -> float:
        return float(sum(w for _, w in self.support))

    def as_dict(self) -> dict:
        d: dict = {}
        for loc, w in self.support:
            d[loc] = d.get(loc, 0.0) + w
        return d


def reprojection_pmf(u, pose: Pose, K: CameraIntrinsics, frame: GridFrame) -> ReprojectionPmf:
    p = warp(u, pose, K)
    if p is OUT:
        return ReprojectionPmf(((OUT, 1.0),))
    r, c, w, valid = bilinear_neighbors(to_grid(p, frame)[None], frame.rows, frame.cols)
    if not valid[0]:
        return ReprojectionPmf(((OUT, 1.0),))
    merged: dict = {}
    for rr, cc, ww in zip(r[0], c[0], w[0]):
        if ww > 0:
            key = (int(rr), int(cc))
            merged[key] = merged.get(key, 0.0) + float(ww)
    return ReprojectionPmf(tuple(merged.items()))
