"""Minimal P3P solver, MSAC initialization and GNC/IRLS refinement."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corrmaps import LossMapStack, RobustLossMap, as_stack
from .geometry import CameraIntrinsics, GridFrame, Pose, se3_retract
from .nre import KernelTargets, as_targets, evaluate_smoothed, pose_loss_batch


class EstimationError(RuntimeError):
    """Raised when a pose cannot be estimated from the available data."""


class UninformativeMapError(EstimationError):
    """A loss map with an empty non-truncated set."""


# ---------------------------------------------------------------------------
# configs

@dataclass(frozen=True)
class MsacConfig:
    iterations: int = 1000
    rng_seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class GncSchedule:
    sigmas: tuple

    def __post_init__(self):
        s = tuple(float(v) for v in self.sigmas)
        if not s:
            raise ValueError("schedule must not be empty")
        if any(not v > 0 for v in s):
            raise ValueError("sigmas must be positive")
        if any(b >= a for a, b in zip(s, s[1:])):
            raise ValueError("sigmas must be strictly decreasing")
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def geometric(cls, start: float, stop: float, n: int = 8) -> "GncSchedule":
        if n == 1 or start == stop:
            return cls((float(stop),))
        return cls(tuple(np.geomspace(start, stop, n)))

    @classmethod
    def coarse_default(cls) -> "GncSchedule":
        return cls.geometric(2.0, 0.6, 8)

    @classmethod
    def fine_default(cls) -> "GncSchedule":
        return cls.geometric(8.0, 0.6, 8)


@dataclass(frozen=True)
class IrlsConfig:
    max_iters: int = 100
    rel_tol: float = 1e-6
    lambda0: float = 1e-6
    max_rejections: int = 12
    cutoff: float | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")


# ---------------------------------------------------------------------------
# P3P (Grunert)

def _rays(pixels, K: CameraIntrinsics):
    x = (pixels[..., 0] - K.cx) / K.fx
    y = (pixels[..., 1] - K.cy) / K.fy
    b = np.stack([x, y, np.ones_like(x)], axis=-1)
    return b / np.linalg.norm(b, axis=-1, keepdims=True)


def _grunert_quartic(a2, b2, c2, ca, cb, cg):
    """Coefficients (A4..A0) of Grunert's quartic in ``v = s3 / s1``."""
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca**2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca**2 * cb)
    A2 = 2 * (amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg**2
    return np.stack([A4, A3, A2, A1, A0], axis=-1)


def _kabsch(P, X):
    """Rotations/translations with ``X ≈ R P + t`` for batches ``(M, 3, 3)``."""
    Pc = P - P.mean(axis=1, keepdims=True)
    Xc = X - X.mean(axis=1, keepdims=True)
    H = np.einsum("mki,mkj->mij", Pc, Xc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("mji,mkj->mik", Vt, U)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.einsum("mji,mjk,mlk->mil", Vt, D, U)
    t = X.mean(axis=1) - np.einsum("mij,mj->mi", R, P.mean(axis=1))
    return R, t


def p3p_batch(P, pixels, K: CameraIntrinsics, reproj_tol: float = 1e-6):
    # degenerate samples produce NaN roots; they fail verification below
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        return _p3p_batch(P, pixels, K, reproj_tol)


def _p3p_batch(P, pixels, K: CameraIntrinsics, reproj_tol: float = 1e-6):
    """Solve many P3P problems at once.

    Parameters
    ----------
    P : array (M, 3, 3)
        World points per problem.
    pixels : array (M, 3, 2)
        Observed pixels per problem.

    Returns
    -------
    R : (S, 3, 3), t : (S, 3), problem : (S,)
        All verified solutions and the problem each came from, ordered by
        problem index.
    """
    P = np.asarray(P, dtype=float).reshape(-1, 3, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 3, 2)
    M = len(P)
    empty = (np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    if M == 0:
        return empty
    j = _rays(pixels, K)
    d12 = P[:, 0] - P[:, 1]
    d13 = P[:, 0] - P[:, 2]
    d23 = P[:, 1] - P[:, 2]
    a2 = np.einsum("mi,mi->m", d23, d23)
    b2 = np.einsum("mi,mi->m", d13, d13)
    c2 = np.einsum("mi,mi->m", d12, d12)
    cross = np.linalg.norm(np.cross(d12, d13), axis=1)
    ok = (cross > 1e-9 * np.sqrt(c2 * b2)) & np.all(np.isfinite(j), axis=(1, 2))
    ok &= b2 > 0
    ca = np.einsum("mi,mi->m", j[:, 1], j[:, 2])
    cb = np.einsum("mi,mi->m", j[:, 0], j[:, 2])
    cg = np.einsum("mi,mi->m", j[:, 0], j[:, 1])
    b2s = np.where(ok, b2, 1.0)
    A = _grunert_quartic(a2, b2s, c2, ca, cb, cg)
    lead = A[:, 0]
    scale = np.max(np.abs(A), axis=1)
    ok &= np.abs(lead) > 1e-14 * np.where(scale > 0, scale, 1.0)
    lead = np.where(ok, lead, 1.0)
    comp = np.zeros((M, 4, 4))
    comp[:, 0, :] = -A[:, 1:] / lead[:, None]
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    comp[~ok] = np.diag([1.0, 1.0, 1.0], -1)
    roots = np.linalg.eigvals(comp)                                    # (M, 4)

    prob = np.repeat(np.arange(M), 4)
    v = roots.reshape(-1)
    keep = np.repeat(ok, 4) & (np.abs(v.imag) <= 1e-4 * (1 + np.abs(v.real)))
    prob, v = prob[keep], v[keep].real
    amc = (a2[prob] - c2[prob]) / b2s[prob]
    den = 2 * (cg[prob] - v * ca[prob])
    num = (amc - 1) * v**2 - 2 * amc * cb[prob] * v + 1 + amc
    with np.errstate(divide="ignore", invalid="ignore"):
        u = num / den
        s1sq = b2s[prob] / (1 + v**2 - 2 * v * cb[prob])
    good = np.isfinite(u) & (s1sq > 0) & (v > 0) & (u > 0)
    prob, u, v, s1sq = prob[good], u[good], v[good], s1sq[good]
    s1 = np.sqrt(s1sq)
    s = np.stack([s1, u * s1, v * s1], axis=1)

    # Newton polish on the three law-of-cosines equations
    cosm = np.stack([cg[prob], cb[prob], ca[prob]], axis=1)         # pairs (12, 13, 23)
    target = np.stack([c2[prob], b2s[prob], a2[prob]], axis=1)
    pairs = ((0, 1), (0, 2), (1, 2))
    for _ in range(6):
        F = np.stack([s[:, i] ** 2 + s[:, k] ** 2 - 2 * s[:, i] * s[:, k] * cosm[:, e] - target[:, e]
                      for e, (i, k) in enumerate(pairs)], axis=1)
        Jm = np.zeros((len(s), 3, 3))
        for e, (i, k) in enumerate(pairs):
            Jm[:, e, i] = 2 * s[:, i] - 2 * s[:, k] * cosm[:, e]
            Jm[:, e, k] = 2 * s[:, k] - 2 * s[:, i] * cosm[:, e]
        det = np.linalg.det(Jm)
        solvable = np.abs(det) > 1e-300
        step = np.zeros_like(s)
        if np.any(solvable):
            step[solvable] = np.linalg.solve(Jm[solvable], -F[solvable][..., None])[..., 0]
        s = s + step
    good = np.all(s > 0, axis=1) & np.all(np.isfinite(s), axis=1)
    prob, s = prob[good], s[good]
    if len(prob) == 0:
        return empty

    X = s[:, :, None] * j[prob]
    R, t = _kabsch(P[prob], X)
    # verify: reprojection of the three points
    Xc = np.einsum("mij,mkj->mki", R, P[prob]) + t[:, None, :]
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.stack([K.fx * Xc[..., 0] / z + K.cx, K.fy * Xc[..., 1] / z + K.cy], axis=-1)
    err = np.linalg.norm(px - pixels[prob], axis=-1).max(axis=1)
    orth = np.linalg.norm(np.einsum("mji,mjk->mik", R, R) - np.eye(3), axis=(1, 2))
    good = (err <= reproj_tol) & np.all(z > 0, axis=1) & (orth <= 1e-10)
    good &= np.abs(np.linalg.det(R) - 1) <= 1e-10
    R, t, prob = R[good], t[good], prob[good]

    # drop duplicate roots within a problem
    keep = np.ones(len(prob), bool)
    for i in range(1, len(prob)):
        for k in range(i - 1, -1, -1):
            if prob[k] != prob[i]:
                break
            if keep[k] and np.abs(R[i] - R[k]).max() < 1e-9 and np.abs(t[i] - t[k]).max() < 1e-9:
                keep[i] = False
                break
    return R[keep], t[keep], prob[keep]


def p3p(correspondences, K: CameraIntrinsics) -> list[Pose]:
    """Up to four poses explaining three 2D-3D correspondences.

    ``correspondences`` is a sequence of three ``(point3, pixel)`` pairs.
    Degenerate (collinear) configurations return an empty list.
    """
    corr = list(correspondences)
    if len(corr) != 3:
        raise ValueError("P3P needs exactly three correspondences")
    P = np.array([np.asarray(c[0], dtype=float).reshape(3) for c in corr])
    px = np.array([np.asarray(c[1], dtype=float).reshape(2) for c in corr])
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(px))):
        raise ValueError("correspondences must be finite")
    R, t, _ = p3p_batch(P[None], px[None], K)
    return [Pose(r, tt) for r, tt in zip(R, t)]


# ---------------------------------------------------------------------------
# MSAC

def map_argmin(L: RobustLossMap) -> tuple:
    """Cell ``(row, col)`` of the smallest stored value (first in row-major order)."""
    if len(L) == 0:
        raise UninformativeMapError("loss map is fully truncated")
    i = int(L.index[np.argmin(L.values)])
    return divmod(i, L.cols)


def trial_triples(n_items: int, iterations: int, seed: int) -> np.ndarray:
    """Three distinct indices per trial, each from its own counter-seeded stream."""
    out = np.empty((iterations, 3), dtype=np.int64)
    for k in range(iterations):
        rng = np.random.Generator(np.random.Philox(key=seed & (2**64 - 1), counter=k))
        out[k] = rng.choice(n_items, size=3, replace=False)
    return out


@dataclass
class MsacResult:
    pose: Pose
    loss: float
    candidate_losses: np.ndarray
    candidate_trials: np.ndarray

    @property
    def n_candidates(self) -> int:
        return len(self.candidate_losses)


def msac(points, observations, usable, K: CameraIntrinsics,
         score: Callable[[np.ndarray, np.ndarray], np.ndarray], cfg: MsacConfig) -> MsacResult:
    """Sample-consensus over P3P hypotheses with a bounded score.

    ``observations`` are pixel positions used for the minimal solver,
    ``usable`` indexes the points eligible for sampling and ``score`` maps
    candidate rotations/translations to losses (lower is better).
    """
    points = np.asarray(points, dtype=float)
    usable = np.asarray(usable, dtype=np.int64)
    if len(usable) < 3:
        raise EstimationError(f"need at least 3 informative points, got {len(usable)}")
    tri = usable[trial_triples(len(usable), cfg.iterations, cfg.rng_seed)]
    R, t, trial = p3p_batch(points[tri], observations[tri], K)
    if len(R):
        # cheirality of the sampled points is already enforced inside p3p_batch
        losses = score(R, t)
    else:
        losses = np.zeros(0)
    if len(losses) == 0:
        raise EstimationError("no valid P3P hypothesis")
    best = int(np.argmin(losses))
    return MsacResult(Pose(R[best], t[best]), float(losses[best]), losses, trial)


def informative(maps: Sequence[RobustLossMap]) -> np.ndarray:
    return np.array([i for i, m in enumerate(maps) if len(m)], dtype=np.int64)


def msac_init(points, maps: Sequence[RobustLossMap], K: CameraIntrinsics, frame: GridFrame,
              cfg: MsacConfig = MsacConfig()) -> MsacResult:
    """MSAC over loss maps: P3P on map argmins, scored by the robust pose loss."""
    maps = list(maps)
    points = np.asarray(points, dtype=float)
    if len(points) != len(maps):
        raise ValueError(f"{len(points)} points but {len(maps)} loss maps")
    usable = informative(maps)
    if len(usable) < 3:
        raise UninformativeMapError(
            f"need at least 3 informative loss maps, got {len(usable)}")
    obs = np.zeros((len(maps), 2))
    for i in usable:
        r, c = map_argmin(maps[i])
        obs[i] = (frame.stride * c, frame.stride * r)
    stack = LossMapStack(maps)
    return msac(points, obs, usable, K,
                lambda R, t: pose_loss_batch(points, stack, R, t, K, frame), cfg)


# ---------------------------------------------------------------------------
# IRLS / GNC

@dataclass
class TraceRow:
    iter: int
    sigma: float
    loss: float
    step_norm: float


@dataclass
class RefineResult:
    pose: Pose
    loss: float
    iterations: int
    degenerate: bool = False
    trace: list = field(default_factory=list)


def damped_gauss_newton(evaluate: Callable, pose0: Pose, cfg: IrlsConfig,
                        sigma: float = float("nan")) -> RefineResult:
    """Levenberg-damped Gauss-Newton on the pose retraction.

    ``evaluate(pose)`` returns ``(loss, A, b)``; the step solves
    ``(A + lam * tr(A)/6 * I) delta = b``. Steps that do not lower the loss
    are rejected and the damping raised, so the loss sequence never
    increases.
    """
    pose = pose0
    loss, A, b = evaluate(pose)
    trace = [TraceRow(0, sigma, loss, 0.0)]
    lam = cfg.lambda0
    degenerate = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        scale = np.trace(A) / 6.0
        if not np.isfinite(scale) or scale <= 0:
            degenerate = True
            it -= 1
            break
        accepted = False
        for _ in range(cfg.max_rejections):
            try:
                step = np.linalg.solve(A + lam * scale * np.eye(6), b)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(step)):
                lam *= 10.0
                continue
            cand = se3_retract(pose, step)
            new = evaluate(cand)
            if new[0] < loss:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            it -= 1
            break
        rel = (loss - new[0]) / max(abs(loss), 1e-300)
        pose = cand
        loss, A, b = new
        lam = max(lam / 10.0, 1e-12)
        trace.append(TraceRow(it, sigma, loss, float(np.linalg.norm(step))))
        if rel < cfg.rel_tol:
            break
    return RefineResult(pose, loss, it, degenerate, trace)


def irls_refine(points, maps, K: CameraIntrinsics, frame: GridFrame, pose0: Pose,
                sigma: float, cfg: IrlsConfig = IrlsConfig()) -> RefineResult:
    """Minimize the smoothed loss at fixed ``sigma`` by damped IRLS.

    Each step solves the kernel-weighted Gauss-Newton normal equations in
    the retraction parameters, with residuals running from the current
    reprojection to every non-truncated cell.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    targets = as_targets(maps)
    points = np.asarray(points, dtype=float)

    def evaluate(p):
        e = evaluate_smoothed(points, targets, p, K, frame, sigma, cfg.cutoff, normal=True)
        return e.loss, e.normal_matrix, e.normal_rhs

    return damped_gauss_newton(evaluate, pose0, cfg, sigma)


def gnc_refine(points, maps, K: CameraIntrinsics, frame: GridFrame, pose0: Pose,
               schedule: GncSchedule, irls_cfg: IrlsConfig = IrlsConfig()) -> RefineResult:
    """Run :func:`irls_refine` over a decreasing sigma schedule, warm-starting each stage."""
    targets = as_targets(maps)
    pose = pose0
    trace: list = []
    total = 0
    res = None
    degenerate = False
    for sigma in schedule.sigmas:
        res = irls_refine(points, targets, K, frame, pose, sigma, irls_cfg)
        pose = res.pose
        total += res.iterations
        degenerate |= res.degenerate
        trace.extend(res.trace)
    return RefineResult(pose, res.loss, total, degenerate, trace)


def trace_to_csv(trace: Sequence[TraceRow]) -> str:
    lines = ["iter,sigma,loss,step_norm"]
    lines += [f"{r.iter},{r.sigma!r},{r.loss!r},{r.step_norm!r}" for r in trace]
    return "\n".join(lines) + "\n"
