"""Planar pose from a homography, with two-solution disambiguation, and jitter metrics.

The marker frame has its origin at the (0,0) corner, x and y along the marker
edges and z = x cross y. Translations are in the unit of ``marker_side``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .render import CameraIntrinsics, UNIT_CORNERS

_EPS_PX = 1e-9


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    t: np.ndarray
    reprojection_error: float
    ambiguity_gap: float
    marker_side: float = 1.0
    alternative: tuple | None = None  # (R, t, reprojection_error) of the rejected candidate

    def to_dict(self) -> dict:
        return {
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t],
            "reprojection_error": float(self.reprojection_error),
            "ambiguity_gap": float(self.ambiguity_gap),
        }


def _K(K) -> np.ndarray:
    return K.K if isinstance(K, CameraIntrinsics) else np.asarray(K, dtype=float)


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rodrigues(w: np.ndarray) -> np.ndarray:
    th = float(np.linalg.norm(w))
    if th < 1e-15:
        return np.eye(3)
    k = w / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(th) * Kx + (1 - math.cos(th)) * Kx @ Kx


def rotation_angle(R: np.ndarray) -> float:
    # atan2 form stays accurate near zero, where acos(trace) loses half the digits
    s = 0.5 * math.sqrt((R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2)
    c = 0.5 * (np.trace(R) - 1.0)
    return math.atan2(s, c)


def project(K, pose_or_R, points3, t=None) -> np.ndarray:
    """Pixel projections of marker-frame 3D points."""
    if t is None:
        R, t = pose_or_R.R, pose_or_R.t
    else:
        R = pose_or_R
    X = np.asarray(points3, dtype=float).reshape(-1, 3)
    Xc = X @ np.asarray(R).T + np.asarray(t).reshape(1, 3)
    x = Xc @ _K(K).T
    return x[:, :2] / x[:, 2:3]


def _corners3(side: float) -> np.ndarray:
    return np.column_stack([UNIT_CORNERS * side, np.zeros(4)])


def _reproj_rms(K, R, t, X, x) -> float:
    return float(np.sqrt(np.mean(np.sum((project(K, R, X, t) - x) ** 2, axis=1))))


def _translation_for(Kinv, R, X, x) -> np.ndarray:
    # x ~ K (R X + t): cross-product constraints are linear in t
    rows, rhs = [], []
    for Xi, xi in zip(X, x):
        m = Kinv @ np.array([xi[0], xi[1], 1.0])
        mx = np.array([[0, -m[2], m[1]], [m[2], 0, -m[0]], [-m[1], m[0], 0]])
        rows.append(mx)
        rhs.append(-mx @ (R @ Xi))
    t, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    return t


def _polish(K, R, t, X, x, iterations: int = 10):
    """Gauss-Newton on the corner reprojection error (rotation as a left increment)."""
    def resid(p):
        return (project(K, rodrigues(p[:3]) @ R, X, t + p[3:]) - x).ravel()

    p = np.zeros(6)
    r = resid(p)
    for _ in range(iterations):
        J = np.empty((r.size, 6))
        for k in range(6):
            dp = np.zeros(6)
            h = 1e-7 * (1.0 if k < 3 else max(1.0, float(np.linalg.norm(t))))
            dp[k] = h
            J[:, k] = (resid(p + dp) - resid(p - dp)) / (2 * h)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        r_new = resid(p + step)
        if r_new @ r_new >= r @ r:
            break
        p = p + step
        r = r_new
        if np.linalg.norm(step) < 1e-12:
            break
    return rodrigues(p[:3]) @ R, t + p[3:]


def _cheiral(R, t, X) -> bool:
    return bool(np.all((X @ R.T + t)[:, 2] > 0))


def pose_from_homography(H, K, marker_side: float = 1.0, polish: bool = True) -> Pose:
    """Pose of a planar marker from H (metric marker plane to pixels).

    The homography decomposition gives one rotation; the other candidate
    reflects the plane about the line of sight to the marker center. Both are
    polished on the corner reprojection error and the smaller error wins.
    """
    Km = _K(K)
    Kinv = np.linalg.inv(Km)
    A = Kinv @ np.asarray(H, dtype=float)
    a1, a2, a3 = A[:, 0], A[:, 1], A[:, 2]
    lam = 2.0 / (np.linalg.norm(a1) + np.linalg.norm(a2))
    center = np.array([0.5 * marker_side, 0.5 * marker_side, 1.0])
    if (A @ center)[2] < 0:
        lam = -lam
    r1, r2 = lam * a1, lam * a2
    R1 = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    t1 = lam * a3

    X = _corners3(marker_side)
    x = geom.apply_homography(H, UNIT_CORNERS * marker_side)

    c = R1 @ np.array([0.5 * marker_side, 0.5 * marker_side, 0.0]) + t1
    v = c / np.linalg.norm(c)
    Rf = np.eye(3) - 2 * np.outer(v, v)
    R2 = Rf @ R1 @ np.diag([1.0, 1.0, -1.0])
    t2 = _translation_for(Kinv, R2, X, x)
    if polish:
        R1, t1 = _polish(Km, R1, t1, X, x)
        R2, t2 = _polish(Km, R2, t2, X, x)
    cands = []
    for R, t in ((R1, t1), (R2, t2)):
        if _cheiral(R, t, X):
            cands.append((R, t, _reproj_rms(Km, R, t, X, x)))
    if not cands:
        raise geom.DegenerateGeometry("marker is behind the camera for both pose candidates")
    cands.sort(key=lambda c: c[2])
    best = cands[0]
    if len(cands) == 2:
        gap = (cands[1][2] + _EPS_PX) / (best[2] + _EPS_PX)
        alt = cands[1]
    else:
        gap, alt = math.inf, None
    return Pose(best[0], best[1], best[2], gap, marker_side, alt)


def pose_from_unit_homography(H_unit, K, marker_side: float = 1.0, **kw) -> Pose:
    """Same as :func:`pose_from_homography` for H defined on the unit marker square."""
    S = np.diag([1.0 / marker_side, 1.0 / marker_side, 1.0])
    return pose_from_homography(np.asarray(H_unit) @ S, K, marker_side, **kw)


# ---------------------------------------------------------------------------
# jitter


@dataclass(frozen=True)
class JitterStats:
    """Spread of per-frame estimates around their mean.

    Each value is sqrt(sum ||d_i||^2 / (n - 1)) over the deviations d_i from
    the mean: rotation angles in degrees, translations in pose units and
    projected centers in pixels.
    """

    rotation_std: float
    translation_std: float
    center_std: float
    sample_count: int


def chordal_mean(Rs) -> np.ndarray:
    return nearest_rotation(np.mean(np.asarray(Rs), axis=0))


def _spread(dev: np.ndarray) -> float:
    n = len(dev)
    return float(math.sqrt(np.sum(np.asarray(dev) ** 2) / (n - 1)))


def center_spread(points) -> float:
    p = np.asarray(points, dtype=float)
    if len(p) < 2:
        raise ValueError("need at least two samples")
    return _spread(np.linalg.norm(p - p.mean(axis=0), axis=1))


def homography_centers(Hs, marker_center=(0.5, 0.5)) -> np.ndarray:
    c = np.array([marker_center], dtype=float)
    return np.vstack([geom.apply_homography(H, c) for H in Hs])


def jitter_stats(poses, K, marker_center=(0.5, 0.5)) -> JitterStats:
    """``marker_center`` is in unit marker-plane coordinates."""
    poses = list(poses)
    n = len(poses)
    if n < 2:
        raise ValueError("jitter needs at least two poses")
    Rm = chordal_mean([p.R for p in poses])
    angles = np.array([math.degrees(rotation_angle(Rm.T @ p.R)) for p in poses])
    T = np.array([p.t for p in poses])
    dt = np.linalg.norm(T - T.mean(axis=0), axis=1)
    side = poses[0].marker_side
    c3 = np.array([[marker_center[0] * side, marker_center[1] * side, 0.0]])
    cen = np.vstack([project(K, p, c3) for p in poses])
    dc = np.linalg.norm(cen - cen.mean(axis=0), axis=1)
    return JitterStats(_spread(angles), _spread(dt), _spread(dc), n)
