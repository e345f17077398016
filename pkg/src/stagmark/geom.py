"""Planar projective geometry used by detection and refinement.

Homographies are plain 3x3 float arrays mapping marker-plane points to image
points (``x' = H x``). Conics are 3x3 symmetric arrays ``C`` with ``x^T C x = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numba import njit


class DegenerateGeometry(ValueError):
    """Raised when an input configuration does not determine the requested object."""


# ---------------------------------------------------------------------------
# homogeneous helpers


def to_homogeneous(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return np.hstack([p, np.ones((p.shape[0], 1))])


def from_homogeneous(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return p[:, :2] / p[:, 2:3]


def apply_homography(H, points) -> np.ndarray:
    """Map an (N, 2) array of points through H."""
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    q = p @ H[:, :2].T + H[:, 2]
    out = q[:, :2] / q[:, 2:3]
    return out[0] if single else out


def normalize_homography(H) -> np.ndarray:
    """Canonical scale: unit Frobenius norm with non-negative H[2, 2]."""
    H = np.asarray(H, dtype=float)
    n = np.linalg.norm(H)
    if n == 0:
        raise DegenerateGeometry("zero homography")
    H = H / n
    if H[2, 2] < 0:
        H = -H
    return H


def is_invertible(H, tol: float = 1e-12) -> bool:
    H = np.asarray(H, dtype=float)
    scale = np.linalg.norm(H)
    return scale > 0 and abs(np.linalg.det(H / scale)) > tol


def _similarity_normalizer(points: np.ndarray) -> np.ndarray:
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    if d == 0:
        raise DegenerateGeometry("coincident points")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _has_collinear_triple(points: np.ndarray, tol: float = 1e-9) -> bool:
    n = len(points)
    scale = max(np.ptp(points, axis=0).max(), 1e-300)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b, c = points[i], points[j], points[k]
                area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
                if abs(area) <= tol * scale * scale:
                    return True
    return False


def homography_from_corners(marker_corners, image_corners) -> np.ndarray:
    """Normalized DLT homography taking ``marker_corners`` onto ``image_corners``."""
    src = np.asarray(marker_corners, dtype=float)[:, :2]
    dst = np.asarray(image_corners, dtype=float)[:, :2]
    if src.shape != dst.shape or src.shape[0] < 4:
        raise ValueError("need at least 4 point correspondences")
    if src.shape[0] == 4 and (_has_collinear_triple(src) or _has_collinear_triple(dst)):
        raise DegenerateGeometry("three corners are collinear")
    Ts = _similarity_normalizer(src)
    Td = _similarity_normalizer(dst)
    s = from_homogeneous(to_homogeneous(src) @ Ts.T)
    d = from_homogeneous(to_homogeneous(dst) @ Td.T)
    rows = []
    for (x, y), (u, v) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, sv, vt = np.linalg.svd(np.asarray(rows))
    if sv.size >= 8 and sv[7] <= 1e-12 * sv[0]:
        raise DegenerateGeometry("correspondences do not determine a homography")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if not is_invertible(H):
        raise DegenerateGeometry("singular homography")
    return normalize_homography(H)


# ---------------------------------------------------------------------------
# conics


@dataclass(frozen=True)
class Ellipse:
    """Center, semi-axes (a >= b) and major-axis orientation in (-pi/2, pi/2]."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float = 0.0

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.a, self.b, self.theta)

    def conic(self) -> np.ndarray:
        return conic_from_ellipse(self)

    def sample(self, n: int, phase: float = 0.0) -> np.ndarray:
        t = phase + 2 * np.pi * np.arange(n) / n
        c, s = math.cos(self.theta), math.sin(self.theta)
        x = self.a * np.cos(t)
        y = self.b * np.sin(t)
        return np.column_stack([self.cx + c * x - s * y, self.cy + s * x + c * y])


def circle_conic(cx: float, cy: float, r: float) -> np.ndarray:
    return conic_from_ellipse(Ellipse(cx, cy, r, r, 0.0))


def conic_from_ellipse(e: Ellipse) -> np.ndarray:
    c, s = math.cos(e.theta), math.sin(e.theta)
    R = np.array([[c, -s], [s, c]])
    A = R @ np.diag([1.0 / e.a**2, 1.0 / e.b**2]) @ R.T
    ctr = np.array([e.cx, e.cy])
    b = -A @ ctr
    f = ctr @ A @ ctr - 1.0
    C = np.empty((3, 3))
    C[:2, :2] = A
    C[:2, 2] = b
    C[2, :2] = b
    C[2, 2] = f
    return C


def conic_from_coefficients(A, B, C, D, E, F) -> np.ndarray:
    """Matrix of ``A x^2 + B xy + C y^2 + D x + E y + F = 0``."""
    return np.array([[A, B / 2, D / 2], [B / 2, C, E / 2], [D / 2, E / 2, F]], dtype=float)


def is_ellipse(C) -> bool:
    return ellipse_from_conic(C) is not None


def ellipse_from_conic(C) -> Ellipse | None:
    """Ellipse parameters of a real, non-degenerate ellipse conic; None otherwise."""
    C = np.asarray(C, dtype=float)
    C = (C + C.T) / 2
    A = C[:2, :2]
    det = A[0, 0] * A[1, 1] - A[0, 1] ** 2
    scale = np.abs(A).max()
    if not np.isfinite(det) or scale == 0 or det <= 1e-14 * scale * scale:
        return None
    if A[0, 0] < 0:
        C = -C
        A = -A
    b = C[:2, 2]
    ctr = -np.linalg.solve(A, b)
    k = C[2, 2] + b @ ctr
    if not k < 0:
        return None
    # A is symmetric positive definite: closed form 2x2 eigen-decomposition
    p, q, r = A[0, 0], A[0, 1], A[1, 1]
    mean = (p + r) / 2
    half = math.hypot((p - r) / 2, q)
    lam_small = mean - half
    lam_big = mean + half
    if lam_small <= 0:
        return None
    a = math.sqrt(-k / lam_small)
    bb = math.sqrt(-k / lam_big)
    # eigenvector of lam_small gives the major axis direction
    theta = 0.5 * math.atan2(2 * q, p - r) + math.pi / 2
    theta = _wrap_half_pi(theta)
    return Ellipse(float(ctr[0]), float(ctr[1]), a, bb, theta)


def _wrap_half_pi(theta: float) -> float:
    # orientation of an undirected axis, reported in (-pi/2, pi/2]
    theta = math.fmod(theta, math.pi)
    if theta <= -math.pi / 2:
        theta += math.pi
    elif theta > math.pi / 2:
        theta -= math.pi
    return theta


def transform_conic(C, H, direction: str = "forward") -> np.ndarray:
    """Move a conic through H.

    forward: ``C' = H^-T C H^-1`` (conic in the source plane to the image plane).
    backward: ``C = H^T C' H`` (image conic back to the source plane).
    """
    C = np.asarray(C, dtype=float)
    H = np.asarray(H, dtype=float)
    if direction == "backward":
        out = H.T @ C @ H
    elif direction == "forward":
        if not is_invertible(H):
            raise DegenerateGeometry("near-singular homography")
        Hi = np.linalg.inv(H)
        out = Hi.T @ C @ Hi
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return (out + out.T) / 2


# ---------------------------------------------------------------------------
# line at infinity and relative depth


def line_through(p, q) -> np.ndarray:
    return np.cross([p[0], p[1], 1.0], [q[0], q[1], 1.0])


def line_at_infinity_image(H) -> np.ndarray:
    """Image of the line at infinity, ``H^-T (0, 0, 1)``, scaled to unit length."""
    H = np.asarray(H, dtype=float)
    if not is_invertible(H):
        raise DegenerateGeometry("near-singular homography")
    l = np.linalg.solve(H.T, np.array([0.0, 0.0, 1.0]))
    l = l / np.linalg.norm(l)
    if math.hypot(l[0], l[1]) < 1e-12:
        return np.array([0.0, 0.0, 1.0])
    return l


def vanishing_line_from_quad(quad) -> np.ndarray:
    """Line through the two vanishing points of opposite quad sides."""
    q = np.asarray(quad, dtype=float)
    sides = [line_through(q[i], q[(i + 1) % 4]) for i in range(4)]
    v1 = np.cross(sides[0], sides[2])
    v2 = np.cross(sides[1], sides[3])
    l = np.cross(v1, v2)
    n = np.linalg.norm(l)
    if n == 0:
        raise DegenerateGeometry("quad sides are pairwise parallel in a degenerate way")
    return l / n


def relative_depth(quad, H) -> float:
    """Ratio of farthest to nearest corner depth, from corner distances to the vanishing line."""
    l = line_at_infinity_image(H)
    norm = math.hypot(l[0], l[1])
    if norm == 0 or abs(l[2]) / max(norm, 1e-300) > 1e15:
        return 1.0
    l = l / norm
    q = np.asarray(quad, dtype=float)[:, :2]
    d = np.abs(q @ l[:2] + l[2])
    dmin, dmax = d.min(), d.max()
    if dmin <= 0:
        return math.inf
    return float(dmax / dmin)


def worked_example_alpha(marker_side: float, nearest_distance: float) -> float:
    """Largest relative depth of a square of side ``marker_side`` kept at least
    ``nearest_distance`` from the camera: the far corner is at most one
    diagonal further away."""
    return (nearest_distance + math.sqrt(2.0) * marker_side) / nearest_distance


# ---------------------------------------------------------------------------
# line segments


@dataclass(frozen=True)
class LineSegment:
    """Least-squares line over ``points[start:end]`` of one chain.

    ``point`` is the centroid, ``direction`` the unit direction oriented along
    the chain, and ``p0``/``p1`` the projections of the first and last points.
    """

    start: int
    end: int
    point: tuple[float, float]
    direction: tuple[float, float]
    p0: tuple[float, float]
    p1: tuple[float, float]

    @property
    def length(self) -> float:
        return math.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1])

    @property
    def count(self) -> int:
        return self.end - self.start

    def homogeneous(self) -> np.ndarray:
        # normal form n . x + c = 0
        nx, ny = -self.direction[1], self.direction[0]
        return (nx, ny, -(nx * self.point[0] + ny * self.point[1]))


@njit(cache=True)
def _line_from_moments(n, sx, sy, sxx, sxy, syy):
    mx = sx / n
    my = sy / n
    cxx = sxx / n - mx * mx
    cxy = sxy / n - mx * my
    cyy = syy / n - my * my
    # principal direction of the 2x2 covariance
    ang = 0.5 * math.atan2(2.0 * cxy, cxx - cyy)
    return mx, my, math.cos(ang), math.sin(ang)


@njit(cache=True)
def _fit_line_ranges(xs, ys, tol, min_len, out):
    """Greedy fit-and-extend; writes (start, end, mx, my, dx, dy) rows into out."""
    n = xs.shape[0]
    count = 0
    i = 0
    while i + min_len <= n:
        sx = 0.0
        sy = 0.0
        sxx = 0.0
        sxy = 0.0
        syy = 0.0
        for k in range(i, i + min_len):
            sx += xs[k]
            sy += ys[k]
            sxx += xs[k] * xs[k]
            sxy += xs[k] * ys[k]
            syy += ys[k] * ys[k]
        mx, my, dx, dy = _line_from_moments(min_len, sx, sy, sxx, sxy, syy)
        # the seed itself must be straight
        worst = 0.0
        for k in range(i, i + min_len):
            dd = abs(-(xs[k] - mx) * dy + (ys[k] - my) * dx)
            if dd > worst:
                worst = dd
        if worst > tol:
            i += 1
            continue
        j = i + min_len
        while j < n:
            dd = abs(-(xs[j] - mx) * dy + (ys[j] - my) * dx)
            if dd > tol:
                break
            sx += xs[j]
            sy += ys[j]
            sxx += xs[j] * xs[j]
            sxy += xs[j] * ys[j]
            syy += ys[j] * ys[j]
            j += 1
            mx, my, dx, dy = _line_from_moments(j - i, sx, sy, sxx, sxy, syy)
        # orient along the chain
        if (xs[j - 1] - xs[i]) * dx + (ys[j - 1] - ys[i]) * dy < 0:
            dx = -dx
            dy = -dy
        out[count, 0] = i
        out[count, 1] = j
        out[count, 2] = mx
        out[count, 3] = my
        out[count, 4] = dx
        out[count, 5] = dy
        count += 1
        i = j
    return count


def _segment_from_row(row, xs, ys) -> LineSegment:
    i, j = int(row[0]), int(row[1])
    mx, my, dx, dy = row[2], row[3], row[4], row[5]
    t0 = (xs[i] - mx) * dx + (ys[i] - my) * dy
    t1 = (xs[j - 1] - mx) * dx + (ys[j - 1] - my) * dy
    return LineSegment(
        i, j, (float(mx), float(my)), (float(dx), float(dy)),
        (float(mx + t0 * dx), float(my + t0 * dy)),
        (float(mx + t1 * dx), float(my + t1 * dy)),
    )


def fit_line_segments(points, tolerance: float = 1.0, min_length: int = 12) -> list[LineSegment]:
    """Split an ordered point chain into straight runs (fit a seed, then extend)."""
    p = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    if p.shape[0] < min_length:
        return []
    xs = np.ascontiguousarray(p[:, 0])
    ys = np.ascontiguousarray(p[:, 1])
    out = np.empty((p.shape[0] // max(min_length, 1) + 1, 6))
    k = _fit_line_ranges(xs, ys, float(tolerance), int(min_length), out)
    return [_segment_from_row(out[r], xs, ys) for r in range(k)]


def fit_line(points) -> LineSegment:
    """Total least-squares line through all points."""
    p = np.asarray(points, dtype=float)
    m = p.mean(axis=0)
    cov = np.cov((p - m).T, bias=True)
    w, v = np.linalg.eigh(cov)
    d = v[:, 1]
    if (p[-1] - p[0]) @ d < 0:
        d = -d
    t0 = (p[0] - m) @ d
    t1 = (p[-1] - m) @ d
    return LineSegment(0, len(p), tuple(m), tuple(d), tuple(m + t0 * d), tuple(m + t1 * d))


def intersect_lines(l1, l2) -> np.ndarray | None:
    a1, b1, c1 = float(l1[0]), float(l1[1]), float(l1[2])
    a2, b2, c2 = float(l2[0]), float(l2[1]), float(l2[2])
    x = b1 * c2 - c1 * b2
    y = c1 * a2 - a1 * c2
    w = a1 * b2 - b1 * a2
    if abs(w) < 1e-12 * max(abs(x), abs(y), 1e-300):
        return None
    return np.array([x / w, y / w])


# ---------------------------------------------------------------------------
# ellipse fitting


def fit_ellipse(points) -> np.ndarray:
    """Direct ellipse-specific least-squares fit; returns the conic matrix.

    Uses the numerically stable split of the scatter matrix into quadratic and
    linear parts, on coordinates normalized to zero mean and unit spread.
    """
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[0] < 6:
        raise DegenerateGeometry("need at least 6 points")
    T = _similarity_normalizer(p)
    q = from_homogeneous(to_homogeneous(p) @ T.T)
    x, y = q[:, 0], q[:, 1]
    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1 = D1.T @ D1
    S2 = D1.T @ D2
    S3 = D2.T @ D2
    try:
        Tm = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometry("collinear points") from exc
    M = S1 + S2 @ Tm
    M = np.array([M[2] / 2, -M[1], M[0] / 2])
    w, v = np.linalg.eig(M)
    v = np.real(v)
    cond = 4 * v[0] * v[2] - v[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if ok.size == 0:
        raise DegenerateGeometry("no ellipse solution")
    if ok.size > 1:
        # noiseless data can make several eigenvalues tiny; keep the best residual
        ok = ok[np.argsort(np.abs(np.real(w[ok])))[:1]]
    a1 = v[:, ok[0]]
    coef = np.concatenate([a1, Tm @ a1])
    Cn = conic_from_coefficients(*coef)
    C = T.T @ Cn @ T
    C = C / np.linalg.norm(C)
    if ellipse_from_conic(C) is None:
        raise DegenerateGeometry("fitted conic is not a real ellipse")
    return C


def _ellipse_axis_distance(u, v, a, b, iterations: int = 64):
    """Distance from (u, v) >= 0 in the ellipse's axis frame to the curve; broadcasts."""
    u, v, a, b = np.broadcast_arrays(*(np.asarray(z, dtype=float) for z in (u, v, a, b)))
    # closest point is (a^2 u/(t + a^2), b^2 v/(t + b^2)) for the root t of a
    # decreasing function on (-b^2, inf); bracket it and bisect
    lo = -b * b + b * v
    hi = -b * b + np.sqrt((a * u) ** 2 + (b * v) ** 2)
    for _ in range(iterations):
        mid = (lo + hi) / 2
        fx = a * u / (mid + a * a)
        fy = b * v / (mid + b * b)
        pos = fx * fx + fy * fy > 1
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    t = (lo + hi) / 2
    x = a * a * u / (t + a * a)
    y = b * b * v / (t + b * b)
    d = np.hypot(u - x, v - y)
    # v == 0 inside the ellipse: the nearest point may be off-axis
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = (v == 0) & (u < (a * a - b * b) / a)
    if np.any(inner):
        ai, bi, ui = a[inner], b[inner], u[inner]
        x0 = ai * ai * ui / (ai * ai - bi * bi)
        y0 = bi * np.sqrt(np.clip(1 - (x0 / ai) ** 2, 0, None))
        d[inner] = np.hypot(ui - x0, y0)
    return d


def _axis_frame(cx, cy, theta, px, py):
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = px - cx, py - cy
    return np.abs(c * dx + s * dy), np.abs(-s * dx + c * dy)


def ellipse_point_distance(e: Ellipse, points, iterations: int = 64) -> np.ndarray:
    """Euclidean distance from each point to the ellipse curve (vectorized bisection)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    u, v = _axis_frame(e.cx, e.cy, e.theta, p[:, 0], p[:, 1])
    return _ellipse_axis_distance(u, v, e.a, e.b, iterations)


def ellipse_point_distances(params, points, iterations: int = 64) -> np.ndarray:
    """Batched distances: ``params`` (T, 5) rows of (cx, cy, a, b, theta), ``points`` (n, 2) -> (T, n)."""
    q = np.asarray(params, dtype=float).reshape(-1, 5)
    p = np.atleast_2d(np.asarray(points, dtype=float))
    cx, cy, a, b, th = (q[:, k:k + 1] for k in range(5))
    u, v = _axis_frame(cx, cy, th, p[None, :, 0], p[None, :, 1])
    return _ellipse_axis_distance(u, v, a, b, iterations)


# ---------------------------------------------------------------------------
# refinement


def circle_ellipse_discrepancy(ellipse: Ellipse | None, cx: float, cy: float, r: float) -> float:
    """Distance between an ellipse and a circle in (center, semi-axes) space."""
    if ellipse is None:
        return math.inf
    return math.sqrt(
        (ellipse.cx - cx) ** 2 + (ellipse.cy - cy) ** 2 + (ellipse.a - r) ** 2 + (ellipse.b - r) ** 2
    )


@dataclass(frozen=True)
class NelderMeadOptions:
    xtol: float = 1e-8
    ftol: float = 1e-10
    max_iters: int = 500
    initial_rel_step: float = 1e-3
    initial_min_step: float = 1e-4


@dataclass(frozen=True)
class NelderMeadResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    converged: bool


def nelder_mead(f: Callable[[np.ndarray], float], x0, options: NelderMeadOptions = NelderMeadOptions()) -> NelderMeadResult:
    """Downhill simplex minimization with the standard coefficients (1, 2, 1/2, 1/2).

    Stops when every vertex lies within ``xtol`` (max-norm) of the best vertex
    and the objective spread is below ``ftol``, or after ``max_iters``.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    simplex = np.empty((n + 1, n))
    simplex[0] = x0
    for i in range(n):
        v = x0.copy()
        v[i] += max(options.initial_min_step, options.initial_rel_step * abs(x0[i]))
        simplex[i + 1] = v
    fs = np.array([f(v) for v in simplex])
    nfev = n + 1
    it = 0
    converged = False
    while True:
        order = np.argsort(fs, kind="stable")
        simplex, fs = simplex[order], fs[order]
        spread_x = np.abs(simplex[1:] - simplex[0]).max()
        spread_f = fs[-1] - fs[0] if np.isfinite(fs[-1]) else math.inf
        if spread_x <= options.xtol and spread_f <= options.ftol:
            converged = True
            break
        if it >= options.max_iters:
            break
        it += 1
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = f(xr)
        nfev += 1
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = f(xe)
            nfev += 1
            if fe < fr:
                simplex[-1], fs[-1] = xe, fe
            else:
                simplex[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-2]:
            simplex[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-1]:
            xc = centroid + 0.5 * (xr - centroid)
        else:
            xc = centroid + 0.5 * (worst - centroid)
        fc = f(xc)
        nfev += 1
        if fc < min(fr, fs[-1]):
            simplex[-1], fs[-1] = xc, fc
            continue
        for i in range(1, n + 1):
            simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
            fs[i] = f(simplex[i])
        nfev += n
    best = int(np.argmin(fs))
    return NelderMeadResult(simplex[best].copy(), float(fs[best]), it, nfev, converged)


@dataclass(frozen=True)
class RefinementResult:
    H: np.ndarray
    skipped: bool
    iterations: int
    epsilon_initial: float
    epsilon_final: float


@njit(cache=True)
def _epsilon_normalized(p, Cn, cx, cy, r):
    # H_n = [[p0 p1 p2] [p3 p4 p5] [p6 p7 1]], backprojected conic = H_n^T Cn H_n
    h = np.empty((3, 3))
    h[0, 0] = p[0]; h[0, 1] = p[1]; h[0, 2] = p[2]
    h[1, 0] = p[3]; h[1, 1] = p[4]; h[1, 2] = p[5]
    h[2, 0] = p[6]; h[2, 1] = p[7]; h[2, 2] = 1.0
    M = h.T @ Cn @ h
    A = M[0, 0]
    B = 0.5 * (M[0, 1] + M[1, 0])
    D = M[1, 1]
    det = A * D - B * B
    sc = max(abs(A), abs(D), abs(B))
    if not (det > 1e-14 * sc * sc):
        return np.inf
    sgn = 1.0 if A > 0 else -1.0
    A *= sgn
    B *= sgn
    D *= sgn
    bx = 0.5 * (M[0, 2] + M[2, 0]) * sgn
    by = 0.5 * (M[1, 2] + M[2, 1]) * sgn
    f = M[2, 2] * sgn
    ex = -(D * bx - B * by) / det
    ey = -(-B * bx + A * by) / det
    k = f + bx * ex + by * ey
    if not (k < 0):
        return np.inf
    mean = 0.5 * (A + D)
    half = math.hypot(0.5 * (A - D), B)
    ls = mean - half
    lb = mean + half
    if ls <= 0:
        return np.inf
    a = math.sqrt(-k / ls)
    b = math.sqrt(-k / lb)
    return math.sqrt((ex - cx) ** 2 + (ey - cy) ** 2 + (a - r) ** 2 + (b - r) ** 2)


@njit(cache=True)
def _nelder_mead_refine(x0, Cn, cx, cy, r, xtol, ftol, max_iters, rel_step, min_step):
    """Compiled twin of :func:`nelder_mead` for the refinement objective.

    Same coefficients, stable ordering and stopping rule, so both routes
    walk the same simplex sequence.
    """
    n = x0.size
    S = np.empty((n + 1, n))
    F = np.empty(n + 1)
    S[0] = x0
    for i in range(n):
        S[i + 1] = x0
        S[i + 1, i] += max(min_step, rel_step * abs(x0[i]))
    for i in range(n + 1):
        F[i] = _epsilon_normalized(S[i], Cn, cx, cy, r)
    it = 0
    converged = False
    cen = np.empty(n)
    while True:
        # stable insertion sort of the vertices by objective value
        for i in range(1, n + 1):
            fv = F[i]
            row = S[i].copy()
            j = i - 1
            while j >= 0 and F[j] > fv:
                F[j + 1] = F[j]
                S[j + 1] = S[j]
                j -= 1
            F[j + 1] = fv
            S[j + 1] = row
        spread_x = 0.0
        for i in range(1, n + 1):
            for k in range(n):
                d = abs(S[i, k] - S[0, k])
                if d > spread_x:
                    spread_x = d
        spread_f = F[n] - F[0] if np.isfinite(F[n]) else np.inf
        if spread_x <= xtol and spread_f <= ftol:
            converged = True
            break
        if it >= max_iters:
            break
        it += 1
        for k in range(n):
            acc = 0.0
            for i in range(n):
                acc += S[i, k]
            cen[k] = acc / n
        worst = S[n].copy()
        xr = cen + (cen - worst)
        fr = _epsilon_normalized(xr, Cn, cx, cy, r)
        if fr < F[0]:
            xe = cen + 2.0 * (cen - worst)
            fe = _epsilon_normalized(xe, Cn, cx, cy, r)
            if fe < fr:
                S[n] = xe
                F[n] = fe
            else:
                S[n] = xr
                F[n] = fr
            continue
        if fr < F[n - 1]:
            S[n] = xr
            F[n] = fr
            continue
        if fr < F[n]:
            xc = cen + 0.5 * (xr - cen)
        else:
            xc = cen + 0.5 * (worst - cen)
        fc = _epsilon_normalized(xc, Cn, cx, cy, r)
        if fc < min(fr, F[n]):
            S[n] = xc
            F[n] = fc
            continue
        for i in range(1, n + 1):
            S[i] = S[0] + 0.5 * (S[i] - S[0])
            F[i] = _epsilon_normalized(S[i], Cn, cx, cy, r)
    best = 0
    for i in range(1, n + 1):
        if F[i] < F[best]:
            best = i
    return S[best].copy(), F[best], it, converged


def backprojection_discrepancy(H, image_conic, cx: float, cy: float, r: float) -> float:
    """Discrepancy of the image ellipse pulled back to the marker plane through H."""
    return circle_ellipse_discrepancy(ellipse_from_conic(transform_conic(image_conic, H, "backward")), cx, cy, r)


def refine_homography(
    H0,
    detected_ellipse,
    circle: tuple[float, float, float],
    options: NelderMeadOptions = NelderMeadOptions(),
    compiled: bool = True,
) -> RefinementResult:
    """Adjust H0 so the image ellipse backprojects onto the marker circle.

    ``detected_ellipse`` is a conic in image coordinates (or None when no
    ellipse was found) and ``circle`` is (cx, cy, r) in the marker plane. The
    eight entries of a conditioned copy of H are optimized with Nelder-Mead;
    the result is never worse than H0. ``compiled=False`` runs the generic
    :func:`nelder_mead` instead of its compiled twin.
    """
    H0 = normalize_homography(H0)
    cx, cy, r = circle
    if detected_ellipse is None:
        return RefinementResult(H0, True, 0, math.inf, math.inf)
    img_e = ellipse_from_conic(detected_ellipse)
    if img_e is None:
        return RefinementResult(H0, True, 0, math.inf, math.inf)
    # condition the image frame on the detected ellipse so all entries are O(1)
    s = 1.0 / img_e.a
    T = np.array([[s, 0, -s * img_e.cx], [0, s, -s * img_e.cy], [0, 0, 1.0]])
    Ti = np.linalg.inv(T)
    Cn = Ti.T @ np.asarray(detected_ellipse, dtype=float) @ Ti
    Cn = Cn / np.linalg.norm(Cn)
    Hn = T @ H0
    if abs(Hn[2, 2]) < 1e-12 * np.linalg.norm(Hn):
        return RefinementResult(H0, True, 0, math.inf, math.inf)
    Hn = Hn / Hn[2, 2]
    p0 = Hn.ravel()[:8].copy()

    def objective(p):
        return _epsilon_normalized(p, Cn, cx, cy, r)

    eps0 = objective(p0)
    if not math.isfinite(eps0):
        return RefinementResult(H0, True, 0, math.inf, math.inf)
    if eps0 <= options.ftol:
        return RefinementResult(H0, False, 0, eps0, eps0)
    if compiled:
        x, fun, iters, _ = _nelder_mead_refine(p0, Cn, cx, cy, r, options.xtol, options.ftol, options.max_iters,
                                               options.initial_rel_step, options.initial_min_step)
    else:
        res = nelder_mead(objective, p0, options)
        x, fun, iters = res.x, res.fun, res.iterations
    if not fun < eps0:
        return RefinementResult(H0, False, iters, eps0, eps0)
    Hr = Ti @ np.append(x, 1.0).reshape(3, 3)
    return RefinementResult(normalize_homography(Hr), False, iters, eps0, float(fun))
