import json

import numpy as np
import pytest
from _helpers import points_at_pixels

from nrepose.corrmaps import DescriptorGrid
from nrepose.geometry import CameraIntrinsics, GridFrame, Pose
from nrepose.pipeline import (CoarseToFineConfig, estimate_pose_c2f, extract_local_fine_map,
                              max_fine_map_bytes)
from nrepose.scene import Scene
from nrepose.solvers import EstimationError
from nrepose.synthbench import SceneSpec, generate_scene, pose_errors, reprojection_error

K_BIG = CameraIntrinsics(800.0, 800.0, 640.0, 640.0, 1280, 1280)   # fine grid 640 x 640


def _window_setup(fine_desc, coarse_mass_in_window, h=(1.0, 0.0)):
    fine = DescriptorGrid(fine_desc, GridFrame(2, 640, 640))
    u = points_at_pixels([[640.0, 640.0]], [5.0], Pose.identity(), K_BIG)[0]
    C = np.zeros((80, 80))
    if coarse_mass_in_window:
        # the window spans fine rows/cols 288..351 -> coarse cells 36..43
        C[36:44, 36:44] = coarse_mass_in_window / 64
        C[0, 0] = 1 - coarse_mass_in_window
    else:
        C[0, 0] = 1.0
    cfg = CoarseToFineConfig(normalize=False)
    return extract_local_fine_map(fine, np.asarray(h), C, 16, Pose.identity(), u, K_BIG, cfg)


def test_uniform_window_arithmetic():
    lm = _window_setup(np.zeros((640, 640, 2)), 1.0)
    assert lm.origin == (288, 288)
    assert lm.norm_coarse == pytest.approx(1.0)
    assert lm.coarse_cells == 64
    assert len(lm.map) == 4096
    np.testing.assert_allclose(lm.map.values, np.log(262144.0), rtol=1e-12)
    assert lm.map.truncation == np.log1p(640 * 640)


def test_window_without_coarse_mass_is_empty():
    lm = _window_setup(np.zeros((640, 640, 2)), 0.0)
    assert lm.norm_coarse == 0.0
    assert len(lm.map) == 0


def test_planted_fine_peak_value():
    data = np.zeros((640, 640, 2))
    a = np.log(0.9 * 4095 / 0.1)                 # softmax over the window gives 0.9 here
    data[300, 310, 0] = a
    lm = _window_setup(data, 0.5)
    r, c = 300 - lm.origin[0], 310 - lm.origin[1]
    assert lm.map.value_at(r, c) == pytest.approx(-np.log(0.9 * 0.5 / 64), rel=1e-12)


def test_window_mass_bound_and_clamping():
    rng = np.random.default_rng(0)
    fine = DescriptorGrid(rng.normal(size=(240, 320, 4)), GridFrame(2, 240, 320))
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    C = rng.dirichlet(np.ones(30 * 40)).reshape(30, 40)
    cfg = CoarseToFineConfig(fine_temperature=0.3)
    for px in ([3.0, 2.0], [636.0, 477.0], [320.0, 240.0]):
        u = points_at_pixels([px], [6.0], Pose.identity(), K)[0]
        lm = extract_local_fine_map(fine, rng.normal(size=4), C, 16, Pose.identity(), u, K, cfg)
        r0, c0 = lm.origin
        assert 0 <= r0 <= 240 - 64 and 0 <= c0 <= 320 - 64
        assert (lm.map.rows, lm.map.cols) == (64, 64)
        assert np.exp(-lm.map.values).sum() <= lm.norm_coarse / lm.coarse_cells + 1e-9
        assert lm.nbytes <= max_fine_map_bytes(1)


def test_out_of_view_point_is_excluded():
    fine = DescriptorGrid(np.zeros((240, 320, 2)), GridFrame(2, 240, 320))
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    lm = extract_local_fine_map(fine, [1.0, 0.0], np.ones((30, 40)) / 1200, 16, Pose.identity(),
                                [0, 0, -2.0], K, CoarseToFineConfig())
    assert lm is None


def _synthetic(seed, **kw):
    s = generate_scene(SceneSpec(seed=seed, **kw))
    cfg = CoarseToFineConfig(coarse_temperature=s.coarse_temperature,
                             fine_temperature=s.fine_temperature)
    return s, cfg


def test_noiseless_round_trip_and_report():
    s, cfg = _synthetic(3, snap_to_nodes=True)
    pose, rep = estimate_pose_c2f(s.scene, s.coarse_grid, s.fine_grid, cfg)
    assert reprojection_error(s.scene.points, pose, s.scene.gt_pose, s.scene.intrinsics, 2) < 1e-3
    assert set(rep.stages) == {"msac", "coarse_gnc", "fine_gnc"}
    d = json.loads(rep.to_json())
    for stage in d.values():
        assert set(stage) == {"pose", "loss", "wall_ms", "peak_map_bytes"}
    assert rep.stages["fine_gnc"].peak_map_bytes <= max_fine_map_bytes(len(s.scene))


def test_until_stops_early():
    s, cfg = _synthetic(4)
    _, rep = estimate_pose_c2f(s.scene, s.coarse_grid, s.fine_grid, cfg, until="msac")
    assert list(rep.stages) == ["msac"]
    _, rep = estimate_pose_c2f(s.scene, s.coarse_grid, None, cfg, until="coarse_gnc")
    assert list(rep.stages) == ["msac", "coarse_gnc"]
    with pytest.raises(ValueError):
        estimate_pose_c2f(s.scene, s.coarse_grid, s.fine_grid, cfg, until="bogus")


def test_deterministic():
    s, cfg = _synthetic(5, outlier_rate=0.3, pixel_noise=0.5)
    a, _ = estimate_pose_c2f(s.scene, s.coarse_grid, s.fine_grid, cfg)
    b, _ = estimate_pose_c2f(s.scene, s.coarse_grid, s.fine_grid, cfg)
    assert np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)


def test_too_few_informative_maps_fail_with_diagnostic():
    # a softmax map always keeps its largest cell (>= 1/n > 1/(n+1)), so the
    # only way to lack informative coarse maps is to lack points
    s, cfg = _synthetic(6)
    sc = s.scene
    two = Scene(sc.points[:2], sc.intrinsics, sc.coarse_descriptors[:2],
                sc.fine_descriptors[:2], sc.gt_pose)
    with pytest.raises(EstimationError, match="informative"):
        estimate_pose_c2f(two, s.coarse_grid, s.fine_grid, cfg)


def test_stride_mismatch_rejected():
    s, cfg = _synthetic(7)
    with pytest.raises(ValueError):
        estimate_pose_c2f(s.scene, s.fine_grid, s.fine_grid, cfg)


def test_max_fine_map_bytes():
    from nrepose.corrmaps import HEADER_BYTES, RECORD_BYTES
    assert max_fine_map_bytes(10) == 10 * (4096 * RECORD_BYTES + HEADER_BYTES)
