from itertools import combinations

import numpy as np
import pytest
from _helpers import (COARSE, K, one_hot_maps, points_at_pixels, points_in_view, random_pose,
                      random_prob_maps)

from nrepose.corrmaps import RobustLossMap, neg_log_map, truncate
from nrepose.geometry import CameraIntrinsics, Pose, project
from nrepose.nre import pose_loss, pose_loss_batch, smoothed_pose_loss
from nrepose.solvers import (EstimationError, GncSchedule, IrlsConfig, MsacConfig,
                             UninformativeMapError, gnc_refine, irls_refine, map_argmin,
                             msac_init, p3p, p3p_batch, trace_to_csv, trial_triples)
from nrepose.synthbench import rotation_error


def _rot_err_rad(R1, R2):
    return np.radians(rotation_error(R1, R2))


def test_p3p_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gt = random_pose(rng)
        pts = points_in_view(rng, gt, 3)
        uv, _ = project(pts, gt, K)
        sols = p3p(list(zip(pts, uv)), K)
        assert sols
        best = min(sols, key=lambda s: _rot_err_rad(s.rotation, gt.rotation)
                   + np.linalg.norm(s.translation - gt.translation))
        assert _rot_err_rad(best.rotation, gt.rotation) < 1e-6
        assert np.linalg.norm(best.translation - gt.translation) < 1e-6
        for s in sols:
            r, _ = project(pts, s, K)
            assert np.max(np.abs(r - uv)) < 1e-6


def test_p3p_collinear_is_empty():
    pts = np.array([[0, 0, 2.0], [1, 0, 2.0], [2, 0, 2.0]])
    uv, _ = project(pts, Pose.identity(), CameraIntrinsics(100, 100, 50, 50, 400, 400))
    assert p3p(list(zip(pts, uv)), CameraIntrinsics(100, 100, 50, 50, 400, 400)) == []


def test_p3p_identity_example():
    K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 200)
    pts = np.array([[0, 0, 2.0], [1, 0, 2.0], [0, 1, 3.0]])
    obs = np.array([[50, 50], [100, 50], [50, 50 + 100 / 3]])
    sols = p3p(list(zip(pts, obs)), K100)
    assert any(_rot_err_rad(s.rotation, np.eye(3)) < 1e-6
               and np.linalg.norm(s.translation) < 1e-6 for s in sols)


def test_p3p_needs_three():
    with pytest.raises(ValueError):
        p3p([(np.zeros(3), np.zeros(2))] * 2, K)


def _map_from_dense(d):
    return truncate(np.asarray(d, dtype=float))


def test_map_argmin_examples():
    d = np.full((4, 8), np.inf)
    d[2, 3] = 1.0
    assert map_argmin(_map_from_dense(d)) == (2, 3)
    d = np.full((4, 8), np.inf)
    d[0, 5] = 0.2
    d[1, 2] = 0.2
    assert map_argmin(_map_from_dense(d)) == (0, 5)
    with pytest.raises(UninformativeMapError):
        map_argmin(RobustLossMap.empty(4, 8))


def test_map_argmin_matches_dense_scan():
    rng = np.random.default_rng(1)
    for p in random_prob_maps(rng, 20):
        L = truncate(neg_log_map(p))
        D = L.dense()
        assert map_argmin(L) == np.unravel_index(np.argmin(D), D.shape)


def test_trial_triples_distinct_and_deterministic():
    a = trial_triples(10, 100, 5)
    assert np.array_equal(a, trial_triples(10, 100, 5))
    assert all(len(set(t)) == 3 for t in a)
    # trial k does not depend on how many trials are drawn
    assert np.array_equal(trial_triples(10, 30, 5), a[:30])


def _node_scene(rng, n, outliers=0, gt=None):
    gt = gt or random_pose(rng)
    px = 16.0 * np.stack([rng.choice(np.arange(3, 37), n, replace=False),
                          rng.integers(3, 27, n)], axis=1)
    pts = points_at_pixels(px, rng.uniform(4, 10, n), gt)
    maps, cells = one_hot_maps(pts, gt)
    for i in range(outliers):
        p = np.zeros((COARSE.rows, COARSE.cols))
        x, y = cells[i]
        p[(y + 11) % COARSE.rows, (x + 17) % COARSE.cols] = 1.0
        maps[i] = truncate(neg_log_map(p))
    return gt, pts, maps


def test_msac_noiseless_has_zero_loss():
    rng = np.random.default_rng(2)
    gt, pts, maps = _node_scene(rng, 15)
    res = msac_init(pts, maps, K, COARSE, MsacConfig(50, 0))
    assert res.loss == pytest.approx(0.0, abs=1e-9)
    assert np.all(res.loss <= res.candidate_losses)


def test_msac_with_outliers_vs_exhaustive_triples():
    rng = np.random.default_rng(42)
    gt, pts, maps = _node_scene(rng, 12, outliers=4)       # ~30% outliers
    res = msac_init(pts, maps, K, COARSE, MsacConfig(200, 42))
    assert rotation_error(res.pose.rotation, gt.rotation) < 5.0
    # oracle: every triple, every P3P solution
    obs = np.array([[16.0 * map_argmin(m)[1], 16.0 * map_argmin(m)[0]] for m in maps])
    tri = np.array(list(combinations(range(12), 3)))
    R, t, _ = p3p_batch(pts[tri], obs[tri], K)
    exhaustive = pose_loss_batch(pts, maps, R, t, K, COARSE).min()
    assert res.loss >= exhaustive - 1e-12
    assert res.loss <= 4 * COARSE.truncation + 1e-9


def test_msac_deterministic_and_errors():
    rng = np.random.default_rng(3)
    gt, pts, maps = _node_scene(rng, 10, outliers=3)
    a = msac_init(pts, maps, K, COARSE, MsacConfig(100, 9))
    b = msac_init(pts, maps, K, COARSE, MsacConfig(100, 9))
    assert np.array_equal(a.pose.rotation, b.pose.rotation)
    assert np.array_equal(a.pose.translation, b.pose.translation)
    empty = [RobustLossMap.empty(COARSE.rows, COARSE.cols)] * 8 + maps[:2]
    with pytest.raises(EstimationError):
        msac_init(pts, empty, K, COARSE)


def _shift(pose, dx_cells, depth, dy_cells=0.0, stride=16):
    """Translate so that points at ``depth`` move by (dx, dy) cells."""
    dt = np.array([dx_cells * stride * depth / K.fx, dy_cells * stride * depth / K.fy, 0.0])
    return Pose(pose.rotation, pose.translation + dt)


def test_irls_stationary_at_symmetric_minimum():
    gt = Pose.identity()
    pts = points_at_pixels([[320.0, 240.0]], [8.0], gt)
    maps, _ = one_hot_maps(pts, gt)
    res = irls_refine(pts, maps, K, COARSE, gt, 1.0)
    assert np.array_equal(res.pose.translation, gt.translation)
    assert res.iterations == 0


def _bump_maps(pts, gt, width=1.5):
    uv, _ = project(pts, gt, K)
    yy, xx = np.mgrid[0:COARSE.rows, 0:COARSE.cols]
    maps = []
    for x, y in uv / 16:
        d2 = (xx - x) ** 2 + (yy - y) ** 2
        logits = -d2 / (2 * width**2)
        p = np.exp(logits) / np.exp(logits).sum()
        maps.append(truncate(neg_log_map(p)))
    return maps


def test_irls_converges_from_displaced_start():
    rng = np.random.default_rng(4)
    gt = Pose.identity()
    px = 16.0 * np.stack([rng.integers(4, 36, 12), rng.integers(4, 26, 12)], axis=1)
    pts = points_at_pixels(px, np.full(12, 8.0), gt)
    maps = _bump_maps(pts, gt)
    start = _shift(gt, 0.4, 8.0)
    res = irls_refine(pts, maps, K, COARSE, start, 1.0)
    # dense search over in-plane shifts of the same objective
    grid = np.linspace(-0.1, 0.1, 41)
    vals = [[smoothed_pose_loss(pts, maps, _shift(gt, dx, 8.0, dy), K, COARSE, 1.0)
             for dx in grid] for dy in grid]
    iy, ix = np.unravel_index(np.argmin(vals), (41, 41))
    best = np.array([grid[ix], grid[iy]])
    uv, _ = project(pts, res.pose, K)
    ref, _ = project(pts, _shift(gt, *best, 8.0), K)
    assert np.max(np.linalg.norm(uv - ref, axis=1)) / 16 < 0.02


def test_irls_monotone_descent():
    rng = np.random.default_rng(5)
    for _ in range(20):
        gt = random_pose(rng)
        pts = points_in_view(rng, gt, 12)
        maps = [truncate(neg_log_map(p)) for p in random_prob_maps(rng, 12, scale=2.0)]
        start = _shift(gt, rng.uniform(-1, 1), 8.0, rng.uniform(-1, 1))
        sigma = rng.uniform(0.6, 3)
        res = irls_refine(pts, maps, K, COARSE, start, sigma, IrlsConfig(30))
        losses = [r.loss for r in res.trace]
        assert np.all(np.diff(losses) <= 1e-12)
        assert res.loss <= smoothed_pose_loss(pts, maps, start, K, COARSE, sigma) + 1e-12
        R = res.pose.rotation
        assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-9


def _two_peak_scene():
    """True block of cells around each reprojection plus a sharp decoy 3 cells to the right."""
    gt = Pose.identity()
    rng = np.random.default_rng(6)
    px = 16.0 * np.stack([rng.choice(np.arange(4, 32), 10, replace=False),
                          rng.integers(4, 26, 10)], axis=1)
    pts = points_at_pixels(px, np.full(10, 8.0), gt)
    maps = []
    for x, y in (px / 16).astype(int):
        d = np.full((COARSE.rows, COARSE.cols), np.inf)
        d[y - 1:y + 2, x - 1:x + 2] = 0.5
        d[y, x] = 0.3
        d[y, x + 3] = 0.0
        maps.append(truncate(d))
    return gt, pts, maps


def test_gnc_escapes_decoy_that_traps_single_sigma():
    gt, pts, maps = _two_peak_scene()
    start = _shift(gt, 2.2, 8.0)
    fixed = irls_refine(pts, maps, K, COARSE, start, 0.6).pose
    gnc = gnc_refine(pts, maps, K, COARSE, start, GncSchedule.geometric(2.0, 0.6)).pose

    def offset(pose):
        uv, _ = project(pts, pose, K)
        uv0, _ = project(pts, gt, K)
        return np.mean(uv[:, 0] - uv0[:, 0]) / 16

    # dense search at the final sigma: the global minimum is the true block
    xs = np.linspace(-1, 4, 101)
    vals = [smoothed_pose_loss(pts, maps, _shift(gt, x, 8.0), K, COARSE, 0.6) for x in xs]
    assert abs(xs[int(np.argmin(vals))]) < 0.2
    assert abs(offset(gnc)) < 0.2
    assert abs(offset(fixed) - 3.0) < 0.5


def test_single_sigma_schedule_equals_irls():
    rng = np.random.default_rng(7)
    gt = random_pose(rng)
    pts = points_in_view(rng, gt, 8)
    maps = [truncate(neg_log_map(p)) for p in random_prob_maps(rng, 8)]
    start = _shift(gt, 0.5, 8.0)
    a = irls_refine(pts, maps, K, COARSE, start, 0.6)
    b = gnc_refine(pts, maps, K, COARSE, start, GncSchedule((0.6,)))
    assert np.array_equal(a.pose.rotation, b.pose.rotation)
    assert np.array_equal(a.pose.translation, b.pose.translation)


def test_schedules():
    c = GncSchedule.coarse_default().sigmas
    f = GncSchedule.fine_default().sigmas
    assert c[0] == 2.0 and c[-1] == pytest.approx(0.6) and len(c) == 8
    assert f[0] == 8.0 and f[-1] == pytest.approx(0.6)
    with pytest.raises(ValueError):
        GncSchedule((1.0, 2.0))
    with pytest.raises(ValueError):
        GncSchedule((1.0, -1.0))


def test_trace_csv_header():
    gt, pts, maps = _two_peak_scene()
    res = irls_refine(pts, maps, K, COARSE, _shift(gt, 0.4, 8.0), 1.0)
    text = trace_to_csv(res.trace)
    assert text.splitlines()[0] == "iter,sigma,loss,step_norm"
    assert len(text.splitlines()) == len(res.trace) + 1
