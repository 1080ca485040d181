import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from nrepose.geometry import (OUT, CameraIntrinsics, GridFrame, Pose, bilinear_neighbors,
                              bilinear_weights, project, reprojection_pmf, se3_retract,
                              to_grid, warp, warp_jacobian)

K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


def test_warp_optical_axis():
    np.testing.assert_allclose(warp([0, 0, 2], Pose.identity(), K100), [50, 50])


def test_warp_negative_depth_is_out():
    assert warp([0, 0, -1], Pose.identity(), K100) is OUT


def test_warp_right_edge_is_out():
    # lands at x = 100, outside [0, 100)
    assert warp([1, 0.5, 2], Pose.identity(), K100) is OUT


def test_warp_rejects_non_finite():
    with pytest.raises(ValueError):
        warp([np.nan, 0, 1], Pose.identity(), K100)


@pytest.mark.parametrize("p,stride,expected", [((32, 48), 16, (2.0, 3.0)),
                                               ((8, 8), 2, (4.0, 4.0)),
                                               ((33.6, 0), 16, (2.1, 0.0))])
def test_to_grid(p, stride, expected):
    np.testing.assert_allclose(to_grid(p, GridFrame(stride, 10, 10)), expected)


def test_bilinear_weights_examples():
    base, *w = bilinear_weights((2.25, 3.75))
    assert base == (2, 3)
    np.testing.assert_allclose(w, [0.1875, 0.0625, 0.5625, 0.1875])
    base, *w = bilinear_weights((5.0, 7.0))
    assert base == (5, 7) and w == [1, 0, 0, 0]
    base, *w = bilinear_weights((0.5, 0.5))
    assert base == (0, 0)
    np.testing.assert_allclose(w, 0.25)


@given(st.floats(0, 1e4), st.floats(0, 1e4))
def test_bilinear_weights_form_a_pmf(x, y):
    _, *w = bilinear_weights((x, y))
    w = np.array(w)
    assert np.all(w >= 0) and np.all(w <= 1)
    assert abs(w.sum() - 1) < 1e-12


def test_bilinear_border_band_renormalizes():
    r, c, w, ok = bilinear_neighbors(np.array([9.5, 3.25]), rows=10, cols=10)
    assert ok
    assert np.all(c <= 9) and abs(w.sum() - 1) < 1e-15
    _, _, w, ok = bilinear_neighbors(np.array([10.0, 3.0]), rows=10, cols=10)
    assert not ok and np.all(w == 0)


def _pose_landing_at(K, pixel, depth=5.0):
    """Identity rotation; a point placed to land exactly on ``pixel``."""
    x = (pixel[0] - K.cx) / K.fx * depth
    y = (pixel[1] - K.cy) / K.fy * depth
    return np.array([x, y, depth])


def test_reprojection_pmf_examples():
    frame = GridFrame(10, 10, 10)
    assert reprojection_pmf([0, 0, -1], Pose.identity(), K100, frame).support == ((OUT, 1.0),)
    u = _pose_landing_at(K100, (40.0, 30.0))          # grid (4, 3) -> row 3, col 4
    pmf = reprojection_pmf(u, Pose.identity(), K100, frame)
    d = pmf.as_dict()
    assert list(d) == [(3, 4)] and d[(3, 4)] == pytest.approx(1.0, abs=1e-12)
    u = _pose_landing_at(K100, (22.5, 37.5))          # grid (2.25, 3.75)
    d = reprojection_pmf(u, Pose.identity(), K100, frame).as_dict()
    np.testing.assert_allclose([d[(3, 2)], d[(3, 3)], d[(4, 2)], d[(4, 3)]],
                               [0.1875, 0.0625, 0.5625, 0.1875], atol=1e-9)


def test_se3_retract_examples():
    rng = np.random.default_rng(0)
    pose = Pose(Rotation.random(random_state=1).as_matrix(), rng.normal(size=3))
    same = se3_retract(pose, np.zeros(6))
    assert np.array_equal(same.rotation, pose.rotation)
    assert np.array_equal(same.translation, pose.translation)
    p = se3_retract(Pose.identity(), [0, 0, 0, 1, 2, 3])
    np.testing.assert_array_equal(p.rotation, np.eye(3))
    np.testing.assert_array_equal(p.translation, [1, 2, 3])
    # Rodrigues oracle for a quarter turn about x
    p = se3_retract(Pose.identity(), [np.pi / 2, 0, 0, 0, 0, 0])
    w = np.array([1.0, 0, 0])
    W = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    th = np.pi / 2
    R = np.eye(3) + np.sin(th) * W + (1 - np.cos(th)) * W @ W
    np.testing.assert_allclose(p.rotation, R, atol=1e-15)


def test_retract_keeps_orthonormality_over_many_updates():
    rng = np.random.default_rng(3)
    pose = Pose.identity()
    for _ in range(10_000):
        pose = se3_retract(pose, rng.normal(scale=1e-2, size=6))
    R = pose.rotation
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_warp_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    for _ in range(10):
        pose = Pose(Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(),
                    [0, 0, 8.0])
        cam = np.c_[rng.uniform(-1, 1, (5, 2)), rng.uniform(4, 10, 5)]
        pts = (cam - pose.translation) @ pose.rotation
        J = warp_jacobian(pts, pose, K, stride=16)
        num = np.zeros_like(J)
        h = 1e-6
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            a = se3_retract(pose, e).apply(pts)
            b = se3_retract(pose, -e).apply(pts)
            pa = K.fx * a[:, :2] / a[:, 2:] / 16
            pb = K.fx * b[:, :2] / b[:, 2:] / 16
            num[:, :, i] = (pa - pb) / (2 * h)
        assert np.max(np.abs(J - num)) / np.max(np.abs(num)) < 1e-5


def test_identity_warp_is_pinhole():
    rng = np.random.default_rng(5)
    pts = np.c_[rng.uniform(-0.4, 0.4, (50, 2)), rng.uniform(1, 5, 50)]
    uv, ok = project(pts, Pose.identity(), K100)
    expect = 100 * pts[:, :2] / pts[:, 2:] + 50
    np.testing.assert_allclose(uv[ok], expect[ok])


def test_pose_json_roundtrip_and_canonical_quaternion():
    R = Rotation.from_quat([0.1, 0.2, 0.3, -0.9]).as_matrix()     # scalar-last, w < 0
    pose = Pose(R, [1, 2, 3])
    d = json.loads(pose.to_json())
    assert d["q"][0] >= 0
    back = Pose.from_json(pose.to_json())
    np.testing.assert_allclose(back.rotation, pose.rotation, atol=1e-15)
    np.testing.assert_array_equal(back.translation, pose.translation)


@pytest.mark.parametrize("R", [np.diag([1, 1, -1.0]), 2 * np.eye(3)])
def test_pose_rejects_bad_rotation(R):
    with pytest.raises(ValueError):
        Pose(R, np.zeros(3))


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 0, 0, 0, 10)
