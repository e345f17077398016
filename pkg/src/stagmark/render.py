"""Marker layout, rasterization and synthetic scenes.

Marker-plane coordinates: the detection square is the unit square with corners
(0,0), (1,0), (1,1), (0,1), x to the right and y downwards, so a fronto-parallel
marker keeps its orientation in the image. The black frame fills the square
outside the circle of radius ``circle_radius`` around (0.5, 0.5); the coding
disks live on the white disk inside it.

Pixel centers sit at integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np
from numba import njit

from . import geom
from .codec import MarkerLibrary, ROTATIONS

UNIT_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
SUPERSAMPLE = 4


# ---------------------------------------------------------------------------
# disk packing


@dataclass(frozen=True)
class DiskLayout:
    """Disk centers in a frame centered on the circle center, plus the common radius.

    Index ``i + 12 q`` is disk ``i`` turned by ``q`` quarter-turns, so a
    quarter-turn of the marker maps disk ``i`` to disk ``i + count/4``.
    """

    centers: np.ndarray
    radius: float

    @property
    def count(self) -> int:
        return len(self.centers)


def quarter_turn_matrix(q: int = 1) -> np.ndarray:
    """2x2 rotation by ``q`` quarter-turns taking +x to +y (clockwise on screen)."""
    c = [1, 0, -1, 0][q % 4]
    s = [0, 1, 0, -1][q % 4]
    return np.array([[c, -s], [s, c]], dtype=float)


def _initial_rings(count: int, region_radius: float) -> np.ndarray:
    # feasible start: concentric rings whose sizes are multiples of 4
    rings = []
    remaining = count
    k = 1
    while remaining > 0:
        n = min(remaining, 4 * k)
        rings.append(n)
        remaining -= n
        k += 1
    pts = []
    nr = len(rings)
    for ri, n in enumerate(rings):
        rad = region_radius * (ri + 0.7) / (nr + 0.2)
        off = (ri * 0.37) % (2 * math.pi / n)
        for j in range(n):
            a = off + 2 * math.pi * j / n
            pts.append((rad * math.cos(a), rad * math.sin(a)))
    return np.array(pts)


@njit(cache=True)
def _common_radius(c, R):
    n = c.shape[0]
    best = 1e300
    for i in range(n):
        slack = R - math.hypot(c[i, 0], c[i, 1])
        if slack < best:
            best = slack
        for j in range(i + 1, n):
            d = 0.5 * math.hypot(c[i, 0] - c[j, 0], c[i, 1] - c[j, 1])
            if d < best:
                best = d
    return best


@njit(cache=True)
def _replicate(free, out):
    m = free.shape[0]
    for q in range(4):
        cq = (1.0, 0.0, -1.0, 0.0)[q]
        sq = (0.0, 1.0, 0.0, -1.0)[q]
        for k in range(m):
            x = free[k, 0]
            y = free[k, 1]
            out[q * m + k, 0] = cq * x - sq * y
            out[q * m + k, 1] = sq * x + cq * y


@njit(cache=True)
def _pair_tables(full, R, D, S):
    n = full.shape[0]
    for i in range(n):
        S[i] = R - math.hypot(full[i, 0], full[i, 1])
        for j in range(n):
            D[i, j] = 0.5 * math.hypot(full[i, 0] - full[j, 0], full[i, 1] - full[j, 1]) if i != j else 1e300


@njit(cache=True)
def _table_min(D, S):
    n = D.shape[0]
    m = 1e300
    for i in range(n):
        if S[i] < m:
            m = S[i]
        for j in range(i + 1, n):
            if D[i, j] < m:
                m = D[i, j]
    return m


@njit(cache=True)
def _anneal(free, R, seed, proposals, t0, cooling, cool_every, kappa):
    np.random.seed(seed)
    m = free.shape[0]
    n = 4 * m
    full = np.empty((n, 2))
    _replicate(free, full)
    D = np.empty((n, n))
    S = np.empty(n)
    _pair_tables(full, R, D, S)
    D2 = D.copy()
    S2 = S.copy()
    cur = _table_min(D, S)
    best = cur
    best_free = free.copy()
    T = t0
    trial = free.copy()
    for it in range(proposals):
        k = np.random.randint(m)
        ox = trial[k, 0]
        oy = trial[k, 1]
        trial[k, 0] = ox + np.random.normal() * T
        trial[k, 1] = oy + np.random.normal() * T
        _replicate(trial, full)
        # only the four copies of disk k moved
        for q in range(4):
            a = q * m + k
            S2[a] = R - math.hypot(full[a, 0], full[a, 1])
            for j in range(n):
                if j != a:
                    v = 0.5 * math.hypot(full[a, 0] - full[j, 0], full[a, 1] - full[j, 1])
                    D2[a, j] = v
                    D2[j, a] = v
        val = _table_min(D2, S2)
        accept = val >= cur or np.random.random() < math.exp((val - cur) / (kappa * T))
        for q in range(4):
            a = q * m + k
            if accept:
                S[a] = S2[a]
                for j in range(n):
                    D[a, j] = D2[a, j]
                    D[j, a] = D2[j, a]
            else:
                S2[a] = S[a]
                for j in range(n):
                    D2[a, j] = D[a, j]
                    D2[j, a] = D[j, a]
        if accept:
            cur = val
            if val > best:
                best = val
                best_free[:, :] = trial
        else:
            trial[k, 0] = ox
            trial[k, 1] = oy
        if (it + 1) % cool_every == 0:
            T *= cooling
    return best_free, best


def _canonical_order(free: np.ndarray, radius: float) -> np.ndarray:
    # representative of each 4-orbit: the copy with angle in [0, 90deg)
    reps = []
    for p in free:
        for q in range(4):
            v = quarter_turn_matrix(q) @ p
            ang = math.atan2(v[1], v[0])
            if 0 <= ang < math.pi / 2 - 1e-12:
                reps.append(v)
                break
        else:
            reps.append(p)
    reps = np.array(reps)
    r = np.hypot(reps[:, 0], reps[:, 1])
    ang = np.arctan2(reps[:, 1], reps[:, 0])
    order = np.argsort(r, kind="stable")
    ring = np.zeros(len(reps), dtype=int)
    for a, b in zip(order[:-1], order[1:]):
        ring[b] = ring[a] + (1 if r[b] - r[a] > 0.5 * radius else 0)
    idx = sorted(range(len(reps)), key=lambda i: (ring[i], ang[i]))
    return reps[idx]


def pack_disks(
    count: int = 48,
    region_radius: float = 1.0,
    seed: int = 0,
    proposals: int = 100_000,
    cooling: float = 0.995,
    acceptance_scale: float = 0.01,
) -> DiskLayout:
    """Simulated annealing for equal disks with 4-fold symmetry inside a circle.

    ``count/4`` free centers are optimized; the rest are their quarter-turn
    copies. The objective is the largest common radius that keeps every disk
    inside the region and disjoint from the others.

    Proposals jitter one free center by N(0, T). The temperature is cooled
    by ``cooling`` once per ``proposals/1000`` proposals, and the Metropolis
    test uses ``acceptance_scale * T``: objective changes are orders of
    magnitude smaller than the jitter, so using T directly accepts nearly
    everything.
    """
    if count % 4:
        raise ValueError("count must be divisible by 4")
    m = count // 4
    full0 = _initial_rings(count, region_radius)
    ang = np.arctan2(full0[:, 1], full0[:, 0])
    free = np.ascontiguousarray(full0[(ang >= 0) & (ang < math.pi / 2 - 1e-12)], dtype=np.float64)
    assert len(free) == m
    cool_every = max(proposals // 1000, 1)
    best_free, best = _anneal(free, float(region_radius), int(seed), int(proposals),
                              0.1 * region_radius, float(cooling), cool_every,
                              float(acceptance_scale))
    reps = _canonical_order(best_free, best)
    full = np.empty((count, 2))
    _replicate(np.ascontiguousarray(reps), full)
    radius = float(_common_radius(full, float(region_radius)))
    full.setflags(write=False)
    return DiskLayout(full, radius)


@lru_cache(maxsize=8)
def default_layout(count: int = 48, region_radius: float = 0.34, seed: int = 0) -> DiskLayout:
    return pack_disks(count, region_radius, seed)


# ---------------------------------------------------------------------------
# marker geometry


@dataclass(frozen=True)
class MarkerGeometry:
    """Single source of truth for marker proportions (marker-plane units).

    ``circle_radius`` is the radius of the white disk cut out of the black
    frame; its edge is the conic used for refinement. At mid-edge the frame is
    ``0.5 - circle_radius`` thick. Disks are packed inside
    ``code_region_radius``, leaving a white annulus for reference samples.
    """

    circle_radius: float = 0.4
    code_region_radius: float = 0.34
    quiet_zone: float = 0.1
    code_length: int = 48
    morphology_iterations: int = 1
    packing_seed: int = 0

    @property
    def center(self) -> tuple[float, float]:
        return (0.5, 0.5)

    @property
    def border_thickness(self) -> float:
        return 0.5 - self.circle_radius

    @property
    def layout(self) -> DiskLayout:
        return default_layout(self.code_length, self.code_region_radius, self.packing_seed)

    @property
    def disk_centers(self) -> np.ndarray:
        """(48, 2) disk centers in marker-plane coordinates."""
        return self.layout.centers + np.array(self.center)

    @property
    def disk_radius(self) -> float:
        return self.layout.radius

    @property
    def circle(self) -> tuple[float, float, float]:
        return (0.5, 0.5, self.circle_radius)

    def circle_conic(self) -> np.ndarray:
        return geom.circle_conic(*self.circle)

    @property
    def sheet_margin(self) -> float:
        """Quiet zone width in marker units (quiet_zone is a fraction of the raster side)."""
        return self.quiet_zone / (1 - 2 * self.quiet_zone)

    def white_reference_points(self, n: int = 8) -> np.ndarray:
        rad = 0.5 * (self.circle_radius + self.code_region_radius)
        t = 2 * np.pi * (np.arange(n) + 0.5) / n
        return np.column_stack([0.5 + rad * np.cos(t), 0.5 + rad * np.sin(t)])

    def black_reference_points(self) -> np.ndarray:
        b = 0.5 * self.border_thickness
        return np.array([[b, b], [1 - b, b], [1 - b, 1 - b], [b, 1 - b],
                         [0.5, b], [1 - b, 0.5], [0.5, 1 - b], [b, 0.5]])

    def rotation_homography(self, q: int) -> np.ndarray:
        """Marker-plane map of ``q`` quarter-turns about the circle center."""
        R = quarter_turn_matrix(q)
        c = np.array(self.center)
        M = np.eye(3)
        M[:2, :2] = R
        M[:2, 2] = c - R @ c
        return M


DEFAULT_GEOMETRY = MarkerGeometry()


# ---------------------------------------------------------------------------
# code rasters


def apply_code_morphology(code_image: np.ndarray, iterations: int, radius_px: float) -> np.ndarray:
    """``iterations`` rounds of dilate-then-erode of the black (True) pixels."""
    img = np.asarray(code_image, dtype=bool)
    if iterations <= 0:
        return img.copy()
    r = max(int(round(radius_px)), 1)
    se = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * r + 1, 2 * r + 1))
    out = img.astype(np.uint8)
    for _ in range(iterations):
        # pad so the closing does not see the raster border as background
        pad = cv2.copyMakeBorder(out, r, r, r, r, cv2.BORDER_REPLICATE)
        pad = cv2.erode(cv2.dilate(pad, se), se)
        out = pad[r:-r, r:-r]
    return out.astype(bool)


def code_disk_mask(bits, geometry: MarkerGeometry, resolution: int) -> np.ndarray:
    """Black disks (bit 1) over the marker unit square, before morphology."""
    coords = (np.arange(resolution) + 0.5) / resolution
    X, Y = np.meshgrid(coords, coords)
    mask = np.zeros((resolution, resolution), dtype=bool)
    r2 = geometry.disk_radius**2
    for (cx, cy), b in zip(geometry.disk_centers, bits):
        if b:
            mask |= (X - cx) ** 2 + (Y - cy) ** 2 <= r2
    return mask


@lru_cache(maxsize=256)
def code_texture(word: int, geometry: MarkerGeometry = DEFAULT_GEOMETRY, resolution: int = 1024) -> np.ndarray:
    """Binary code pattern (True = black) after morphology, marker-unit raster."""
    bits = [(word >> i) & 1 for i in range(geometry.code_length)]
    mask = code_disk_mask(bits, geometry, resolution)
    out = apply_code_morphology(mask, geometry.morphology_iterations, 0.25 * geometry.disk_radius * resolution)
    out.setflags(write=False)
    return out


def marker_intensity(u: np.ndarray, v: np.ndarray, texture: np.ndarray, geometry: MarkerGeometry) -> np.ndarray:
    """Reflectance (0 black, 1 white) at marker-plane points; NaN off the printed sheet."""
    m = geometry.sheet_margin
    out = np.full(u.shape, np.nan)
    sheet = (u >= -m) & (u <= 1 + m) & (v >= -m) & (v <= 1 + m)
    out[sheet] = 1.0
    square = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    r2 = (u - 0.5) ** 2 + (v - 0.5) ** 2
    inside = square & (r2 < geometry.circle_radius**2)
    out[square & ~inside] = 0.0
    res = texture.shape[0]
    iu = np.clip((u[inside] * res).astype(int), 0, res - 1)
    iv = np.clip((v[inside] * res).astype(int), 0, res - 1)
    out[inside] = np.where(texture[iv, iu], 0.0, 1.0)
    return out


@dataclass
class MarkerRaster:
    pixels: np.ndarray
    side: int
    marker_id: int
    library: MarkerLibrary = field(repr=False)
    H: np.ndarray = field(repr=False, default=None)

    def save(self, path) -> None:
        write_image(path, self.pixels)


def raster_homography(side: int, geometry: MarkerGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Unit marker plane to pixel coordinates of a ``side``-pixel marker raster."""
    q = geometry.quiet_zone * side
    s = side - 2 * q
    return np.array([[s, 0, q - 0.5], [0, s, q - 0.5], [0, 0, 1.0]])


def _supersampled_grid(x0: int, y0: int, w: int, h: int, ss: int = SUPERSAMPLE):
    off = (np.arange(ss) + 0.5) / ss - 0.5
    xs = (np.arange(x0, x0 + w)[:, None] + off[None, :]).ravel()
    ys = (np.arange(y0, y0 + h)[:, None] + off[None, :]).ravel()
    return np.meshgrid(xs, ys)


def _downsample(a: np.ndarray, ss: int = SUPERSAMPLE) -> np.ndarray:
    h, w = a.shape[0] // ss, a.shape[1] // ss
    return a.reshape(h, ss, w, ss).mean(axis=(1, 3))


def render_marker(
    library: MarkerLibrary, marker_id: int, side: int = 512, geometry: MarkerGeometry = DEFAULT_GEOMETRY
) -> MarkerRaster:
    if not 0 <= marker_id < len(library):
        raise IndexError(f"marker id {marker_id} out of range for library of {len(library)}")
    if side < 64:
        raise ValueError("side must be at least 64 pixels")
    H = raster_homography(side, geometry)
    Hi = np.linalg.inv(H)
    X, Y = _supersampled_grid(0, 0, side, side)
    u = Hi[0, 0] * X + Hi[0, 2]
    v = Hi[1, 1] * Y + Hi[1, 2]
    tex = code_texture(library.codewords[marker_id], geometry)
    val = marker_intensity(u, v, tex, geometry)
    val = np.where(np.isnan(val), 1.0, val)
    img = np.round(255 * _downsample(val)).astype(np.uint8)
    return MarkerRaster(img, side, marker_id, library, H)


def render_sheet(library: MarkerLibrary, ids, side: int = 256, columns: int | None = None,
                 geometry: MarkerGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Grid of markers for printing; each cell keeps its own quiet zone."""
    ids = list(ids)
    if columns is None:
        columns = max(1, math.ceil(math.sqrt(len(ids))))
    rows = max(1, math.ceil(len(ids) / columns))
    sheet = np.full((rows * side, columns * side), 255, np.uint8)
    for k, i in enumerate(ids):
        r, c = divmod(k, columns)
        sheet[r * side:(r + 1) * side, c * side:(c + 1) * side] = render_marker(library, i, side, geometry).pixels
    return sheet


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @classmethod
    def for_image(cls, width: int, height: int, fov_deg: float = 60.0) -> "CameraIntrinsics":
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    blur_sigma: float = 0.0
    gradient: float = 0.0  # peak-to-peak illumination change as a fraction, left to right
    black_level: float = 20.0
    white_level: float = 235.0


@dataclass(frozen=True)
class MarkerPlacement:
    library: MarkerLibrary
    marker_id: int
    R: np.ndarray
    t: np.ndarray
    side: float = 1.0  # physical side length; t is in the same units
    geometry: MarkerGeometry = DEFAULT_GEOMETRY


@dataclass(frozen=True)
class GroundTruth:
    marker_id: int
    H: np.ndarray
    R: np.ndarray
    t: np.ndarray
    corners: np.ndarray
    ellipse: np.ndarray
    side: float

    def ellipse_params(self) -> geom.Ellipse:
        return geom.ellipse_from_conic(self.ellipse)

    def record(self) -> str:
        e = self.ellipse_params()
        pose = np.hstack([self.R, self.t.reshape(3, 1)])
        vals = [self.marker_id, *self.H.ravel(), *pose.ravel(), *self.corners.ravel(), *e.as_tuple()]
        return " ".join(str(vals[0]) if i == 0 else repr(float(x)) for i, x in enumerate(vals))


@dataclass
class SyntheticScene:
    """Noise-free rendering plus ground truth; ``noisy`` draws sensor noise."""

    clean: np.ndarray
    ground_truth: list[GroundTruth]
    camera: CameraIntrinsics
    noise: NoiseSpec

    @property
    def image(self) -> np.ndarray:
        return quantize(self.clean)

    def noisy(self, rng: np.random.Generator) -> np.ndarray:
        if self.noise.sigma <= 0:
            return self.image
        return quantize(self.clean + rng.normal(0.0, self.noise.sigma, self.clean.shape))

    def write_ground_truth(self, path) -> None:
        Path(path).write_text("".join(g.record() + "\n" for g in self.ground_truth))


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def marker_homography(camera: CameraIntrinsics, R, t, side: float = 1.0) -> np.ndarray:
    """Unit marker plane to pixels for a marker whose (0,0) corner sits at ``t``."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float).reshape(3)
    M = np.column_stack([R[:, 0] * side, R[:, 1] * side, t])
    return camera.K @ M


def look_at_pose(angle_deg: float, distance: float, side: float = 1.0, axis: str = "y",
                 offset=(0.0, 0.0), roll_deg: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Marker rotated by ``angle_deg`` about its own vertical (or horizontal) axis,
    with its center at ``distance`` along the optical axis (shifted by ``offset``)."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    if axis == "y":
        Ra = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    else:
        Ra = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    g = math.radians(roll_deg)
    Rr = np.array([[math.cos(g), -math.sin(g), 0], [math.sin(g), math.cos(g), 0], [0, 0, 1.0]])
    R = Ra @ Rr
    center = np.array([offset[0], offset[1], distance])
    t = center - R @ np.array([0.5 * side, 0.5 * side, 0.0])
    return R, t


def make_background(kind, shape, seed: int = 0, level: float = 128.0) -> np.ndarray:
    h, w = shape
    if isinstance(kind, np.ndarray):
        bg = kind.astype(float)
        if bg.shape != shape:
            bg = cv2.resize(bg, (w, h), interpolation=cv2.INTER_AREA)
        return bg
    if kind is None or kind == "flat":
        return np.full(shape, float(level))
    if kind == "texture":
        rng = np.random.default_rng(seed)
        acc = np.zeros(shape)
        amp = 1.0
        for octave in range(5):
            cell = 2 ** (octave + 2)
            small = rng.random((h // cell + 2, w // cell + 2))
            acc += amp * cv2.resize(small, (w, h), interpolation=cv2.INTER_CUBIC)
            amp *= 0.5
        acc = (acc - acc.min()) / max(np.ptp(acc), 1e-9)
        return 60 + 140 * acc
    raise ValueError(f"unknown background {kind!r}")


def render_scene(
    markers,
    camera: CameraIntrinsics,
    image_size: tuple[int, int],
    noise: NoiseSpec = NoiseSpec(),
    background="flat",
    seed: int = 0,
) -> SyntheticScene:
    """Project planar markers through a pinhole camera (inverse warp, 4x4 supersampling).

    ``image_size`` is (width, height). Blur and illumination gradient are
    applied to the clean image; additive noise is drawn per frame by
    :meth:`SyntheticScene.noisy`.
    """
    w, h = image_size
    refl_bg = make_background(background, (h, w), seed) / 255.0
    refl = refl_bg.copy()
    truths = []
    for mk in markers:
        R = np.asarray(mk.R, dtype=float)
        t = np.asarray(mk.t, dtype=float).reshape(3)
        g = mk.geometry
        m = g.sheet_margin
        sheet = np.array([[-m, -m], [1 + m, -m], [1 + m, 1 + m], [-m, 1 + m]])
        pts3 = (R[:, :2] @ (sheet * mk.side).T).T + t
        if np.any(pts3[:, 2] <= 0):
            raise ValueError("marker is behind the camera")
        normal = R[:, 2]
        center3 = R[:, :2] @ np.array([0.5, 0.5]) * mk.side + t
        if abs(normal @ center3) < 1e-9 * np.linalg.norm(center3):
            raise ValueError("marker is seen edge-on")
        H = marker_homography(camera, R, t, mk.side)
        Hn = H / H[2, 2] if H[2, 2] != 0 else H
        img_pts = geom.apply_homography(Hn, sheet)
        x0 = max(int(math.floor(img_pts[:, 0].min())) - 1, 0)
        x1 = min(int(math.ceil(img_pts[:, 0].max())) + 2, w)
        y0 = max(int(math.floor(img_pts[:, 1].min())) - 1, 0)
        y1 = min(int(math.ceil(img_pts[:, 1].max())) + 2, h)
        if x1 > x0 and y1 > y0:
            X, Y = _supersampled_grid(x0, y0, x1 - x0, y1 - y0)
            Hi = np.linalg.inv(Hn)
            den = Hi[2, 0] * X + Hi[2, 1] * Y + Hi[2, 2]
            u = (Hi[0, 0] * X + Hi[0, 1] * Y + Hi[0, 2]) / den
            v = (Hi[1, 0] * X + Hi[1, 1] * Y + Hi[1, 2]) / den
            tex = code_texture(mk.library.codewords[mk.marker_id], g)
            val = marker_intensity(u, v, tex, g)
            under = np.repeat(np.repeat(refl[y0:y1, x0:x1], SUPERSAMPLE, 0), SUPERSAMPLE, 1)
            val = np.where(np.isnan(val), under, val)
            refl[y0:y1, x0:x1] = _downsample(val)
        Hu = geom.normalize_homography(H)
        corners = geom.apply_homography(Hu, UNIT_CORNERS)
        ell = geom.transform_conic(g.circle_conic(), Hu, "forward")
        truths.append(GroundTruth(mk.marker_id, Hu, R, t, corners, ell / np.linalg.norm(ell), mk.side))
    img = noise.black_level + (noise.white_level - noise.black_level) * refl
    if noise.gradient:
        ramp = 1.0 + noise.gradient * (np.arange(w) / max(w - 1, 1) - 0.5)
        img = img * ramp[None, :]
    if noise.blur_sigma > 0:
        img = cv2.GaussianBlur(img, (0, 0), noise.blur_sigma)
    return SyntheticScene(img, truths, camera, noise)


# ---------------------------------------------------------------------------
# image files


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    img = np.asarray(img, dtype=np.uint8)
    if path.suffix.lower() in (".pgm", ".pnm"):
        h, w = img.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(np.ascontiguousarray(img).tobytes())
        return
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def read_image(path) -> np.ndarray:
    """8-bit grayscale image from PGM/PNG (or anything OpenCV reads)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise OSError(f"could not read image {path}")
    return img
