"""Detection pipeline: edges, lines, corners, quads, validation, decoding,
ellipse localization and homography refinement.

Edge segments come from an edge-drawing detector (anchors on gradient ridges,
greedy routing along the ridge). Instead of a parameter-free a-contrario test,
segments are validated by their mean gradient magnitude.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import cv2
import numpy as np
from numba import njit

from . import geom
from .codec import DecodeResult, MarkerLibrary, decode
from .render import DEFAULT_GEOMETRY, UNIT_CORNERS, MarkerGeometry

HORIZONTAL = 0  # edge runs horizontally, gradient mostly vertical
VERTICAL = 1
LEFT, RIGHT, UP, DOWN = 0, 1, 2, 3


@dataclass(frozen=True)
class EdgeParams:
    smoothing_sigma: float = 1.0
    gradient_threshold: float = 5.0  # gray levels per pixel
    anchor_threshold: float = 1.0
    scan_interval: int = 2
    min_segment_length: int = 12
    validation_threshold: float = 8.0  # mean gradient magnitude along a segment


@dataclass(frozen=True)
class DetectorConfig:
    edge: EdgeParams = EdgeParams()
    line_tolerance: float = 1.0
    line_min_length: int = 12
    min_corner_angle_deg: float = 20.0
    completion_reach: float = 1.5
    dedup_distance: float = 2.0
    min_quad_side: float = 10.0
    alpha_rel_max: float = geom.worked_example_alpha(10.0, 20.0)
    validate_perspective: bool = True
    max_correct: int | None = None
    min_contrast: float = 20.0
    ellipse_samples: int = 16
    ellipse_threshold: float = 0.05
    refine: bool = True
    nelder_mead: geom.NelderMeadOptions = geom.NelderMeadOptions()
    geometry: MarkerGeometry = DEFAULT_GEOMETRY


# ---------------------------------------------------------------------------
# edge segments


@dataclass(frozen=True)
class EdgeSegment:
    """Ordered 8-connected pixel chain; ``points`` holds sub-pixel positions."""

    pixels: np.ndarray  # (N, 2) int (x, y)
    points: np.ndarray  # (N, 2) float (x, y)
    closed: bool
    mean_gradient: float

    def __len__(self) -> int:
        return len(self.pixels)


def gradient_field(image: np.ndarray, sigma: float = 1.0):
    """Gradient magnitude (gray levels per pixel) and edge orientation map."""
    img = np.asarray(image, dtype=np.float32)
    if sigma > 0:
        img = cv2.GaussianBlur(img, (0, 0), sigma)
    gx = cv2.Sobel(img, cv2.CV_32F, 1, 0, ksize=3, scale=0.125)
    gy = cv2.Sobel(img, cv2.CV_32F, 0, 1, ksize=3, scale=0.125)
    # cv2.magnitude is not bit-reproducible across calls; numpy's sqrt is correctly rounded
    G = np.sqrt(gx * gx + gy * gy)
    D = (np.abs(gx) >= np.abs(gy)).astype(np.uint8)  # VERTICAL where gradient is horizontal
    return G, D


def find_anchors(G: np.ndarray, D: np.ndarray, params: EdgeParams) -> tuple[np.ndarray, np.ndarray]:
    """Ridge maxima across the edge, tested on every ``scan_interval``-th row and column."""
    h, w = G.shape
    if h < 3 or w < 3:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    c = G[1:-1, 1:-1]
    # ties on a two-pixel plateau go to the first pixel
    up, down = G[:-2, 1:-1], G[2:, 1:-1]
    left, right = G[1:-1, :-2], G[1:-1, 2:]
    horiz = (D[1:-1, 1:-1] == HORIZONTAL) & (c >= up) & (c > down) & (2 * c - up - down >= params.anchor_threshold)
    vert = (D[1:-1, 1:-1] == VERTICAL) & (c >= left) & (c > right) & (2 * c - left - right >= params.anchor_threshold)
    mask = (horiz | vert) & (c >= params.gradient_threshold)
    k = params.scan_interval
    if k > 1:
        rows = (np.arange(1, h - 1) % k == 0)[:, None]
        cols = (np.arange(1, w - 1) % k == 0)[None, :]
        mask &= rows | cols
    r, cc = np.nonzero(mask)
    r += 1
    cc += 1
    order = np.argsort(-G[r, cc], kind="stable")
    return r[order].astype(np.int64), cc[order].astype(np.int64)


@njit(cache=True)
def _walk(G, D, E, r0, c0, d, thr, buf_r, buf_c):
    h, w = G.shape
    r, c = r0, c0
    n = 0
    while True:
        if d == LEFT or d == RIGHT:
            dc = -1 if d == LEFT else 1
            a = G[r - 1, c + dc]
            b = G[r, c + dc]
            e = G[r + 1, c + dc]
            if a > b and a > e:
                nr, nc = r - 1, c + dc
            elif e > b and e > a:
                nr, nc = r + 1, c + dc
            else:
                nr, nc = r, c + dc
        else:
            dr = -1 if d == UP else 1
            a = G[r + dr, c - 1]
            b = G[r + dr, c]
            e = G[r + dr, c + 1]
            if a > b and a > e:
                nr, nc = r + dr, c - 1
            elif e > b and e > a:
                nr, nc = r + dr, c + 1
            else:
                nr, nc = r + dr, c
        if nr < 1 or nc < 1 or nr >= h - 1 or nc >= w - 1:
            break
        if E[nr, nc] or G[nr, nc] < thr:
            break
        mr, mc = nr - r, nc - c
        r, c = nr, nc
        E[r, c] = 1
        buf_r[n] = r
        buf_c[n] = c
        n += 1
        # on a switch keep the sense of the last diagonal step
        if D[r, c] == HORIZONTAL and (d == UP or d == DOWN):
            if mc != 0:
                d = LEFT if mc < 0 else RIGHT
            else:
                gl = -1.0 if E[r, c - 1] else G[r, c - 1]
                gr = -1.0 if E[r, c + 1] else G[r, c + 1]
                d = LEFT if gl > gr else RIGHT
        elif D[r, c] == VERTICAL and (d == LEFT or d == RIGHT):
            if mr != 0:
                d = UP if mr < 0 else DOWN
            else:
                gu = -1.0 if E[r - 1, c] else G[r - 1, c]
                gd = -1.0 if E[r + 1, c] else G[r + 1, c]
                d = UP if gu > gd else DOWN
    return n


@njit(cache=True)
def _draw_edges(G, D, ar, ac, thr, min_len, min_mean):
    h, w = G.shape
    E = np.zeros((h, w), np.uint8)
    b1r = np.empty(h * w, np.int64)
    b1c = np.empty(h * w, np.int64)
    b2r = np.empty(h * w, np.int64)
    b2c = np.empty(h * w, np.int64)
    out_r = np.empty(h * w, np.int64)
    out_c = np.empty(h * w, np.int64)
    starts = np.zeros(h * w // 2 + 2, np.int64)
    closed = np.zeros(h * w // 2 + 2, np.uint8)
    nseg = 0
    total = 0
    for k in range(ar.shape[0]):
        r = ar[k]
        c = ac[k]
        if E[r, c]:
            continue
        E[r, c] = 1
        if D[r, c] == HORIZONTAL:
            n1 = _walk(G, D, E, r, c, LEFT, thr, b1r, b1c)
            n2 = _walk(G, D, E, r, c, RIGHT, thr, b2r, b2c)
        else:
            n1 = _walk(G, D, E, r, c, UP, thr, b1r, b1c)
            n2 = _walk(G, D, E, r, c, DOWN, thr, b2r, b2c)
        n = n1 + n2 + 1
        if n < min_len:
            continue
        s = 0.0
        for i in range(n1):
            s += G[b1r[i], b1c[i]]
        for i in range(n2):
            s += G[b2r[i], b2c[i]]
        s += G[r, c]
        if s / n < min_mean:
            continue
        starts[nseg] = total
        for i in range(n1 - 1, -1, -1):
            out_r[total] = b1r[i]
            out_c[total] = b1c[i]
            total += 1
        out_r[total] = r
        out_c[total] = c
        total += 1
        for i in range(n2):
            out_r[total] = b2r[i]
            out_c[total] = b2c[i]
            total += 1
        fr = out_r[starts[nseg]]
        fc = out_c[starts[nseg]]
        lr = out_r[total - 1]
        lc = out_c[total - 1]
        if n >= 8 and abs(fr - lr) <= 1 and abs(fc - lc) <= 1:
            closed[nseg] = 1
        nseg += 1
    starts[nseg] = total
    return out_r[:total].copy(), out_c[:total].copy(), starts[: nseg + 1].copy(), closed[:nseg].copy()


@njit(cache=True)
def _subpixel(G, D, rr, cc):
    n = rr.shape[0]
    out = np.empty((n, 2))
    for i in range(n):
        r = rr[i]
        c = cc[i]
        if D[r, c] == HORIZONTAL:
            a, b, e = G[r - 1, c], G[r, c], G[r + 1, c]
        else:
            a, b, e = G[r, c - 1], G[r, c], G[r, c + 1]
        den = a - 2.0 * b + e
        off = 0.0
        if den < 0:
            off = 0.5 * (a - e) / den
            if off > 0.5:
                off = 0.5
            elif off < -0.5:
                off = -0.5
        if D[r, c] == HORIZONTAL:
            out[i, 0] = c
            out[i, 1] = r + off
        else:
            out[i, 0] = c + off
            out[i, 1] = r
    return out


@njit(cache=True)
def _segment_means(G, rr, cc, starts):
    m = starts.shape[0] - 1
    out = np.empty(m)
    for k in range(m):
        s = 0.0
        for i in range(starts[k], starts[k + 1]):
            s += G[rr[i], cc[i]]
        out[k] = s / max(starts[k + 1] - starts[k], 1)
    return out


def detect_edge_segments(image: np.ndarray, params: EdgeParams = EdgeParams()) -> list[EdgeSegment]:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("expected a single-channel image")
    G, D = gradient_field(img, params.smoothing_sigma)
    G = G.astype(np.float64)
    ar, ac = find_anchors(G, D, params)
    rr, cc, starts, closed = _draw_edges(G, D, ar, ac, params.gradient_threshold,
                                         params.min_segment_length, params.validation_threshold)
    pts = _subpixel(G, D, rr, cc)
    means = _segment_means(G, rr, cc, starts)
    pix = np.column_stack([cc, rr])
    return [
        EdgeSegment(pix[starts[k]:starts[k + 1]], pts[starts[k]:starts[k + 1]], bool(closed[k]), float(means[k]))
        for k in range(len(starts) - 1)
    ]


# ---------------------------------------------------------------------------
# corners and quads


@dataclass(frozen=True)
class Corner:
    location: tuple[float, float]
    incoming: geom.LineSegment
    outgoing: geom.LineSegment
    segment_id: int
    turn: float  # signed turning angle, radians


@dataclass(frozen=True)
class QuadCandidate:
    """Four corners ordered with positive signed area in image coordinates
    (the orientation of the marker-plane corners)."""

    corners: np.ndarray
    H0: np.ndarray
    provenance: str  # "four-corner" or "three-corner-completed"
    segment_id: int = -1


def _signed_area(p) -> float:
    pts = np.asarray(p, dtype=float).tolist()
    a = 0.0
    for i in range(len(pts)):
        (x0, y0), (x1, y1) = pts[i - 1], pts[i]
        a += x0 * y1 - x1 * y0
    return 0.5 * a


def quad_is_valid(p: np.ndarray, min_angle_deg: float, min_side: float = 0.0) -> bool:
    """Convex, positively oriented, interior angles inside (min, 180 - min)."""
    if not np.all(np.isfinite(p)) or _signed_area(p) <= 0:
        return False
    lo = math.radians(min_angle_deg)
    pts = np.asarray(p, dtype=float).tolist()
    for i in range(4):
        (ax, ay), (bx, by), (cx, cy) = pts[i - 1], pts[i], pts[(i + 1) % 4]
        ux, uy, vx, vy = ax - bx, ay - by, cx - bx, cy - by
        nu, nv = math.hypot(ux, uy), math.hypot(vx, vy)
        if nv < max(min_side, 1e-9) or nu < 1e-9:
            return False
        if vx * uy - vy * ux <= 0:
            return False
        ang = math.acos(max(-1.0, min(1.0, (ux * vx + uy * vy) / (nu * nv))))
        if not lo < ang < math.pi - lo:
            return False
    return True


def _canonical_quad(p: np.ndarray) -> np.ndarray:
    if _signed_area(p) < 0:
        p = p[::-1]
    start = int(np.argmin(p[:, 0] + p[:, 1]))
    return p[(np.arange(4) + start) % 4]


def _segment_corners(lines, closed, seg_id, cfg: DetectorConfig):
    m = len(lines)
    pairs = m if (closed and m >= 3) else m - 1
    corners = [None] * m
    lo = math.radians(cfg.min_corner_angle_deg)
    for k in range(pairs):
        l1, l2 = lines[k], lines[(k + 1) % m]
        (ax, ay), (bx, by) = l1.direction, l2.direction
        turn = math.atan2(ax * by - ay * bx, ax * bx + ay * by)
        if not lo <= abs(turn) <= math.pi - lo:
            continue
        p = geom.intersect_lines(l1.homogeneous(), l2.homogeneous())
        if p is None:
            continue
        px, py = float(p[0]), float(p[1])
        reach = 0.5 * min(l1.length, l2.length) + 5.0
        if math.hypot(px - l1.p1[0], py - l1.p1[1]) > reach or math.hypot(px - l2.p0[0], py - l2.p0[1]) > reach:
            continue
        corners[k] = Corner((px, py), l1, l2, seg_id, turn)
    return corners


def segment_lines(seg: EdgeSegment, cfg: DetectorConfig) -> list[geom.LineSegment]:
    """Line segments of one chain; on a closed loop the wrap-around run is merged."""
    lines = geom.fit_line_segments(seg.points, cfg.line_tolerance, cfg.line_min_length)
    if seg.closed and len(lines) >= 2:
        first, last = lines[0], lines[-1]
        if first.start == 0 and last.end == len(seg.points):
            d1, d2 = np.array(first.direction), np.array(last.direction)
            if d1 @ d2 > math.cos(math.radians(cfg.min_corner_angle_deg)):
                pts = np.vstack([seg.points[last.start:], seg.points[:first.end]])
                merged = geom.fit_line(pts)
                lines = [merged] + lines[1:-1]
    return lines


def fit_all_lines(segments, config: DetectorConfig = DetectorConfig()) -> list[list[geom.LineSegment]]:
    """Lines per segment; chains too short to hold four lines get an empty list."""
    need = 4 * config.line_min_length
    return [segment_lines(s, config) if len(s) >= need else [] for s in segments]


def _quads_from_lines(seg: EdgeSegment, lines, seg_id: int, cfg: DetectorConfig) -> list[tuple]:
    m = len(lines)
    if m < 4:
        return []
    corners = _segment_corners(lines, seg.closed, seg_id, cfg)
    out = []
    last_k = m if seg.closed else m - 3
    for k in range(last_k):
        idx = [(k + j) % m for j in range(3)]
        cs = [corners[i] for i in idx]
        if any(c is None for c in cs):
            continue
        signs = {c.turn > 0 for c in cs}
        if len(signs) != 1:
            continue
        l_in = lines[k]
        l_out = lines[(k + 3) % m]
        p4 = geom.intersect_lines(l_out.homogeneous(), l_in.homogeneous())
        if p4 is None:
            continue
        xs = [c.location[0] for c in cs]
        ys = [c.location[1] for c in cs]
        diag = math.hypot(max(xs) - min(xs), max(ys) - min(ys))
        if math.hypot(p4[0] - sum(xs) / 3, p4[1] - sum(ys) / 3) > cfg.completion_reach * diag:
            continue
        closing = corners[(k + 3) % m] if (seg.closed or k + 3 <= m - 2) else None
        four = closing is not None and math.hypot(closing.location[0] - p4[0],
                                                  closing.location[1] - p4[1]) <= cfg.dedup_distance
        tri = np.array([xs, ys]).T
        quad = _canonical_quad(np.vstack([tri, p4]))
        if not quad_is_valid(quad, cfg.min_corner_angle_deg, cfg.min_quad_side):
            continue
        out.append((quad, "four-corner" if four else "three-corner-completed", seg_id))
    return out


def _same_quad(a: np.ndarray, b: np.ndarray, tol: float) -> bool:
    # matching corners within tol forces the centroids within tol
    ca, cb = a.sum(axis=0), b.sum(axis=0)
    if math.hypot(ca[0] - cb[0], ca[1] - cb[1]) > 4 * tol:
        return False
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])  # d[i, j] = |a_i - b_j|
    idx = np.arange(4)
    return any(d[idx, (idx - s) % 4].max() <= tol for s in range(4))


def quads_from_lines(segments, lines_per_segment, config: DetectorConfig = DetectorConfig()) -> list[QuadCandidate]:
    raw: list[tuple] = []
    for sid, (seg, lines) in enumerate(zip(segments, lines_per_segment)):
        if len(lines) < 4:
            continue
        for q in _quads_from_lines(seg, lines, sid, config):
            for i, old in enumerate(raw):
                if _same_quad(old[0], q[0], config.dedup_distance):
                    if old[1] != "four-corner" and q[1] == "four-corner":
                        raw[i] = q
                    break
            else:
                raw.append(q)
    # corner homographies only for the survivors of deduplication
    quads = []
    for corners, prov, sid in raw:
        try:
            H0 = geom.homography_from_corners(UNIT_CORNERS, corners)
        except geom.DegenerateGeometry:
            continue
        quads.append(QuadCandidate(corners, H0, prov, sid))
    return quads


def extract_quads(segments, config: DetectorConfig = DetectorConfig()) -> list[QuadCandidate]:
    """Corners from consecutive lines of each chain, then quads from three or
    four consecutive corners, deduplicated within ``dedup_distance`` pixels."""
    return quads_from_lines(segments, fit_all_lines(segments, config), config)


def validate_perspective(quad: QuadCandidate, alpha_rel_max: float = DetectorConfig.alpha_rel_max) -> bool:
    return geom.relative_depth(quad.corners, quad.H0) <= alpha_rel_max


# ---------------------------------------------------------------------------
# decoding


def bilinear(image: np.ndarray, pts: np.ndarray) -> np.ndarray | None:
    """Bilinear samples at (x, y) pixel positions; None if any falls outside."""
    h, w = image.shape
    x, y = pts[:, 0], pts[:, 1]
    if not (np.all(x >= 0) and np.all(y >= 0) and np.all(x <= w - 1) and np.all(y <= h - 1)):
        return None
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    fx, fy = x - x0, y - y0
    v00 = image[y0, x0].astype(float)
    v01 = image[y0, x0 + 1].astype(float)
    v10 = image[y0 + 1, x0].astype(float)
    v11 = image[y0 + 1, x0 + 1].astype(float)
    return (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01 + (1 - fx) * fy * v10 + fx * fy * v11


def otsu_threshold(values: np.ndarray) -> float:
    """Split maximizing the between-class variance (exhaustive over sorted values)."""
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    if n < 2 or v[0] == v[-1]:
        return float(v[0]) if n else 0.0
    csum = np.cumsum(v)
    k = np.arange(1, n)
    w0 = k / n
    m0 = csum[:-1] / k
    m1 = (csum[-1] - csum[:-1]) / (n - k)
    between = w0 * (1 - w0) * (m0 - m1) ** 2
    i = int(np.argmax(between))
    return 0.5 * (v[i] + v[i + 1])


def _patch_offsets(step: float) -> np.ndarray:
    g = np.array([-1.0, 0.0, 1.0]) * step
    X, Y = np.meshgrid(g, g)
    return np.column_stack([X.ravel(), Y.ravel()])


def sample_points(image, H, points: np.ndarray, step: float) -> np.ndarray | None:
    """Mean of 3x3 bilinear samples around each marker-plane point."""
    off = _patch_offsets(step)
    grid = (points[:, None, :] + off[None, :, :]).reshape(-1, 2)
    vals = bilinear(image, geom.apply_homography(H, grid))
    if vals is None:
        return None
    return vals.reshape(len(points), 9).mean(axis=1)


@lru_cache(maxsize=8)
def _sampling_grid(geometry: MarkerGeometry):
    """All 3x3 patch points for disks, black and white references, plus the split sizes."""
    pts = np.vstack([geometry.disk_centers, geometry.black_reference_points(), geometry.white_reference_points()])
    off = _patch_offsets(0.35 * geometry.disk_radius)
    grid = (pts[:, None, :] + off[None, :, :]).reshape(-1, 2)
    n_disk = len(geometry.disk_centers)
    n_black = len(geometry.black_reference_points())
    return grid, n_disk, n_black


@dataclass(frozen=True)
class DecodedCandidate:
    quad: QuadCandidate
    result: DecodeResult
    H: np.ndarray  # rotation-corrected corner homography
    corners: np.ndarray
    threshold: float


def read_word(image, H, geometry: MarkerGeometry = DEFAULT_GEOMETRY, min_contrast: float = 20.0):
    """Threshold disk samples against frame and annulus references.

    Returns (word, threshold) or None when more than a quarter of either
    reference set lands on the wrong side of the threshold.
    """
    grid, n_disk, n_black = _sampling_grid(geometry)
    vals = bilinear(image, geom.apply_homography(H, grid))
    if vals is None:
        return None
    means = vals.reshape(-1, 9).mean(axis=1)
    disks, black, white = means[:n_disk], means[n_disk:n_disk + n_black], means[n_disk + n_black:]
    if np.median(white) - np.median(black) < min_contrast:
        return None
    thr = otsu_threshold(np.concatenate([disks, black, white]))
    # an occluder may cover a few references; reject only when many disagree
    if np.count_nonzero(black >= thr) > len(black) // 4 or np.count_nonzero(white <= thr) > len(white) // 4:
        return None
    bits = disks < thr
    word = 0
    for i in np.nonzero(bits)[0]:
        word |= 1 << int(i)
    return word, thr


def sample_and_decode(image, quad: QuadCandidate, library: MarkerLibrary,
                      geometry: MarkerGeometry = DEFAULT_GEOMETRY, max_correct: int | None = None,
                      min_contrast: float = 20.0) -> DecodedCandidate | None:
    read = read_word(image, quad.H0, geometry, min_contrast)
    if read is None:
        return None
    word, thr = read
    res = decode(word, library, max_correct)
    if res is None:
        return None
    # the read word is the codeword turned by res.rotation quarter-turns
    M = geometry.rotation_homography(res.rotation)
    corners = geom.apply_homography(quad.H0 @ M, UNIT_CORNERS)
    H = geom.homography_from_corners(UNIT_CORNERS, corners)
    return DecodedCandidate(quad, res, H, corners, thr)


# ---------------------------------------------------------------------------
# ellipse localization and refinement


def _inside_convex(quad: np.ndarray, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
    ok = np.ones(len(pts), dtype=bool)
    for i in range(4):
        a, b = quad[i], quad[(i + 1) % 4]
        e = b - a
        n = np.hypot(*e)
        cross = (e[0] * (pts[:, 1] - a[1]) - e[1] * (pts[:, 0] - a[0])) / n
        ok &= cross >= margin
    return ok


def localize_ellipse(segments, corners: np.ndarray, H: np.ndarray, geometry: MarkerGeometry = DEFAULT_GEOMETRY,
                     samples: int = 16, threshold: float = 0.05):
    """Closed loop inside the quad whose backprojection best matches the circle.

    Returns (conic, score) or (None, best score).
    """
    Hi = np.linalg.inv(H)
    cx, cy, rho = geometry.circle
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    best, best_score = None, math.inf
    for seg in segments:
        if not seg.closed or len(seg) < 6:
            continue
        p = seg.points
        if p[:, 0].min() < lo[0] or p[:, 1].min() < lo[1] or p[:, 0].max() > hi[0] or p[:, 1].max() > hi[1]:
            continue
        if not np.all(_inside_convex(corners, p, 1.0)):
            continue
        idx = (np.arange(samples) * len(p)) // samples
        back = geom.apply_homography(Hi, p[idx])
        score = float(np.mean(np.abs(np.hypot(back[:, 0] - cx, back[:, 1] - cy) - rho)))
        if score < best_score:
            best, best_score = seg, score
    if best is None or best_score > threshold:
        return None, best_score
    try:
        return geom.fit_ellipse(best.points), best_score
    except geom.DegenerateGeometry:
        return None, best_score


@dataclass
class MarkerDetection:
    marker_id: int
    rotation: int
    corners: np.ndarray
    H_initial: np.ndarray
    H_refined: np.ndarray
    refinement_skipped: bool
    ellipse_image: np.ndarray | None
    decode_distance: int
    epsilon_initial: float = math.inf
    epsilon_refined: float = math.inf
    provenance: str = ""
    pose: object = None

    def to_dict(self) -> dict:
        e = geom.ellipse_from_conic(self.ellipse_image) if self.ellipse_image is not None else None
        d = {
            "id": int(self.marker_id),
            "rotation": int(self.rotation),
            "corners": np.round(self.corners, 6).tolist(),
            "H_initial": [float(v) for v in self.H_initial.ravel()],
            "H_refined": [float(v) for v in self.H_refined.ravel()],
            "ellipse": None if e is None else [float(v) for v in e.as_tuple()],
            "decode_distance": int(self.decode_distance),
            "refinement_skipped": bool(self.refinement_skipped),
        }
        if self.pose is not None:
            d["pose"] = self.pose.to_dict()
        return d


@dataclass
class DetectionTrace:
    """Per-stage candidates and timings, for ablations and profiling."""

    segments: list = field(default_factory=list)
    quads: list = field(default_factory=list)
    validated: list = field(default_factory=list)
    decoded: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def _refine(det_segments, cand: DecodedCandidate, cfg: DetectorConfig):
    g = cfg.geometry
    conic, _ = localize_ellipse(det_segments, cand.corners, cand.H, g, cfg.ellipse_samples, cfg.ellipse_threshold)
    return conic


def detect_markers(image, library: MarkerLibrary, config: DetectorConfig = DetectorConfig(),
                   trace: DetectionTrace | None = None) -> list[MarkerDetection]:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    tm = {}
    t = time.perf_counter()
    segments = detect_edge_segments(img, config.edge)
    tm["edge"] = time.perf_counter() - t

    t = time.perf_counter()
    lines = fit_all_lines(segments, config)
    tm["lines"] = time.perf_counter() - t

    t = time.perf_counter()
    quads = quads_from_lines(segments, lines, config)
    tm["candidates"] = time.perf_counter() - t

    t = time.perf_counter()
    validated = [q for q in quads if not config.validate_perspective or validate_perspective(q, config.alpha_rel_max)]
    tm["validation"] = time.perf_counter() - t

    t = time.perf_counter()
    decoded = []
    for q in validated:
        c = sample_and_decode(img, q, library, config.geometry, config.max_correct, config.min_contrast)
        if c is not None:
            decoded.append(c)
    # one detection per physical marker: overlapping decodes keep the best
    decoded.sort(key=lambda c: (c.result.hamming_distance, c.quad.provenance != "four-corner"))
    kept = []
    for c in decoded:
        if not any(_same_quad(k.corners, c.corners, max(config.dedup_distance, 0.05 * _quad_scale(k.corners)))
                   for k in kept):
            kept.append(c)
    tm["decoding"] = time.perf_counter() - t

    t_ell = 0.0
    t_ref = 0.0
    detections = []
    cx, cy, rho = config.geometry.circle
    for c in kept:
        t = time.perf_counter()
        conic = _refine(segments, c, config) if config.refine else None
        t_ell += time.perf_counter() - t
        t = time.perf_counter()
        if config.refine and conic is not None:
            rr = geom.refine_homography(c.H, conic, (cx, cy, rho), config.nelder_mead)
            H_ref, skipped, e0, e1 = rr.H, rr.skipped, rr.epsilon_initial, rr.epsilon_final
        else:
            H_ref, skipped, e0, e1 = geom.normalize_homography(c.H), True, math.inf, math.inf
        t_ref += time.perf_counter() - t
        detections.append(MarkerDetection(
            c.result.marker_id, c.result.rotation, c.corners, geom.normalize_homography(c.H), H_ref, skipped,
            conic, c.result.hamming_distance, e0, e1, c.quad.provenance))
    tm["ellipse"] = t_ell
    tm["refinement"] = t_ref
    detections.sort(key=lambda d: (d.marker_id, float(d.corners[0, 1]), float(d.corners[0, 0])))
    tm["total"] = sum(tm.values())
    if trace is not None:
        trace.segments, trace.quads, trace.validated, trace.decoded = segments, quads, validated, decoded
        trace.timings = tm
    return detections


def _quad_scale(c: np.ndarray) -> float:
    return float(np.sqrt(abs(_signed_area(c))))


def detections_to_json(detections, config: DetectorConfig | None = None, **extra) -> str:
    doc = {"detections": [d.to_dict() for d in detections]}
    if config is not None:
        cfg = asdict(config)
        doc["config"] = json.loads(json.dumps(cfg, default=float))
    doc.update(extra)
    return json.dumps(doc, indent=2)


def draw_overlay(image, detections, K=None, axis_length: float = 0.5) -> np.ndarray:
    """Color overlay with borders, the id and (when poses are present) axes."""
    vis = cv2.cvtColor(np.asarray(image, dtype=np.uint8), cv2.COLOR_GRAY2BGR)
    for d in detections:
        pts = np.round(d.corners).astype(np.int32)
        cv2.polylines(vis, [pts], True, (0, 255, 0), 2)
        cv2.circle(vis, tuple(int(v) for v in pts[0]), 4, (0, 0, 255), -1)
        cen = geom.apply_homography(d.H_refined, np.array([[0.5, 0.5]]))[0]
        cv2.putText(vis, str(d.marker_id), (int(cen[0]), int(cen[1])), cv2.FONT_HERSHEY_SIMPLEX, 0.6, (255, 0, 0), 2)
        if d.pose is not None and K is not None:
            from .pose import project
            side = d.pose.marker_side
            o = np.array([[0.5 * side, 0.5 * side, 0.0]])
            axes = o + axis_length * side * np.eye(3) * np.array([1, 1, -1])
            ip = project(K, d.pose, np.vstack([o, axes]))
            for k, col in enumerate([(0, 0, 255), (0, 255, 0), (255, 0, 0)]):
                cv2.line(vis, tuple(np.round(ip[0]).astype(int)), tuple(np.round(ip[k + 1]).astype(int)), col, 2)
    return vis
