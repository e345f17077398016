import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.measure import label

from conftest import scene_at
from oracles import hamming_loop, project_points, rotate_list, sample_ellipse
from stagmark import geom
from stagmark.codec import DecodeResult, MarkerLibrary, decode
from stagmark.render import (
    DEFAULT_GEOMETRY,
    CameraIntrinsics,
    MarkerPlacement,
    NoiseSpec,
    apply_code_morphology,
    code_disk_mask,
    look_at_pose,
    pack_disks,
    quarter_turn_matrix,
    read_image,
    render_marker,
    render_scene,
    render_sheet,
    write_image,
)

G = DEFAULT_GEOMETRY


def sampled_word(raster):
    """Oracle reader: nearest pixel at each disk center of an axis-aligned raster."""
    px = project_points(raster.H, G.disk_centers)
    vals = raster.pixels[np.round(px[:, 1]).astype(int), np.round(px[:, 0]).astype(int)]
    return sum(1 << i for i, v in enumerate(vals) if v < 128)


# --- disk packing -----------------------------------------------------------

def best_symmetric_single_disk(steps=20001):
    # one free center at distance d, copies at 90 degree steps
    d = np.linspace(0, 1, steps)
    r = np.minimum(1 - d, d * math.sqrt(2) / 2)
    return r.max()


def test_pack_four_disks_against_grid_oracle():
    lay = pack_disks(4, 1.0, seed=0)
    oracle = best_symmetric_single_disk()
    assert lay.radius >= 0.29
    assert lay.radius == pytest.approx(oracle, rel=0.01)
    assert np.allclose(lay.centers[1], quarter_turn_matrix(1) @ lay.centers[0])


def test_pack_deterministic():
    a, b = pack_disks(8, 1.0, seed=3, proposals=20_000), pack_disks(8, 1.0, seed=3, proposals=20_000)
    assert np.array_equal(a.centers, b.centers) and a.radius == b.radius


def test_pack_rejects_bad_count():
    with pytest.raises(ValueError):
        pack_disks(10, 1.0)


def test_default_layout_feasible():
    c, r = G.layout.centers, G.disk_radius
    assert len(c) == 48
    d = np.linalg.norm(c[:, None] - c[None], axis=2)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 2 * r - 1e-12
    assert np.linalg.norm(c, axis=1).max() + r <= G.code_region_radius + 1e-12
    assert G.code_region_radius < G.circle_radius


def test_layout_quarter_turn_permutes_by_twelve():
    c = G.layout.centers
    for i in range(48):
        assert np.allclose(quarter_turn_matrix(1) @ c[i], c[(i + 12) % 48], atol=1e-12)


def test_representatives_sorted_by_angle_in_first_quadrant():
    ang = np.degrees(np.arctan2(G.layout.centers[:12, 1], G.layout.centers[:12, 0]))
    assert np.all((ang >= -1e-9) & (ang < 90))


# --- morphology -------------------------------------------------------------

def test_morphology_constant_images_unchanged():
    for v in (False, True):
        img = np.full((64, 64), v)
        assert np.array_equal(apply_code_morphology(img, 3, 4), img)


def test_morphology_merges_near_tangent_disks():
    Y, X = np.mgrid[:200, :300]
    img = ((X - 100) ** 2 + (Y - 100) ** 2 <= 40**2) | ((X - 182) ** 2 + (Y - 100) ** 2 <= 40**2)
    assert label(img, connectivity=1).max() == 2
    out = apply_code_morphology(img, 1, 10)
    assert label(out, connectivity=1).max() == 1
    assert np.all(out[img])  # closing never removes black


def test_morphology_settles():
    bits = [(0x5A5A_F0F0_3C3C >> i) & 1 for i in range(48)]
    mask = code_disk_mask(bits, G, 512)
    r = 0.25 * G.disk_radius * 512
    once = apply_code_morphology(mask, 3, r)
    again = apply_code_morphology(once, 1, r)
    assert np.mean(once != again) < 1e-3


def test_checkerboard_word_survives_morphology():
    word = sum(1 << i for i in range(0, 48, 2))
    lib = MarkerLibrary(48, 1, (word,))
    assert sampled_word(render_marker(lib, 0, 512)) == word


# --- marker rasters ---------------------------------------------------------

@pytest.mark.parametrize("marker_id", [0, 1, 17, 1234, 29759])
def test_render_round_trip(lib11, marker_id):
    r = render_marker(lib11, marker_id, 512)
    assert r.pixels.dtype == np.uint8 and r.pixels.shape == (512, 512)
    assert sampled_word(r) == lib11.codewords[marker_id]


@pytest.mark.parametrize("k", [1, 2, 3])
def test_rotated_raster_decodes_with_rotation(lib11, k):
    r = render_marker(lib11, 42, 512)
    turned = r.pixels
    for _ in range(k):
        turned = np.rot90(turned, k=-1)  # clockwise on screen
    raster = type(r)(np.ascontiguousarray(turned), r.side, r.marker_id, lib11, r.H)
    word = sampled_word(raster)
    assert word == rotate_list(lib11.codewords[42], k, 48)
    assert decode(word, lib11) == DecodeResult(42, k, 0)


def test_distinct_ids_differ_in_min_hd_disks(lib19):
    words = [sampled_word(render_marker(lib19, i, 256)) for i in range(len(lib19))]
    for i in range(len(words)):
        for j in range(i + 1, len(words)):
            assert hamming_loop(words[i], words[j], 48) >= lib19.min_hamming_distance


def test_quiet_zone_and_black_frame(lib11):
    side = 512
    p = render_marker(lib11, 3, side).pixels
    q = int(0.1 * side)
    border = np.concatenate([p[:q].ravel(), p[-q:].ravel(), p[:, :q].ravel(), p[:, -q:].ravel()])
    assert np.all(border == 255)
    # frame just inside the quiet zone at mid-edge is black
    mid = side // 2
    assert p[q + 5, mid] == 0 and p[mid, q + 5] == 0
    assert p.min() == 0 and p.max() == 255


def test_render_marker_errors(lib23):
    with pytest.raises(IndexError):
        render_marker(lib23, len(lib23), 128)
    with pytest.raises(ValueError):
        render_marker(lib23, 0, 32)


def test_sheet_layout(lib23):
    sheet = render_sheet(lib23, range(4), side=128)
    assert sheet.shape == (256, 256)
    assert np.array_equal(sheet[128:, :128], render_marker(lib23, 2, 128).pixels)


# --- scenes -----------------------------------------------------------------

def test_empty_scene_is_background(vga):
    s = render_scene([], vga, (640, 480), NoiseSpec())
    expected = round(20 + 215 * 128 / 255)
    assert s.ground_truth == [] and np.all(s.image == expected)


def test_marker_behind_camera(lib23, vga):
    R, t = look_at_pose(0, -3)
    with pytest.raises(ValueError):
        render_scene([MarkerPlacement(lib23, 0, R, t)], vga, (640, 480))


def test_fronto_scene_ellipse_is_circle_image(lib23):
    # 200 px across: distance chosen from the focal length
    cam = CameraIntrinsics.for_image(640, 480)
    s = scene_at(lib23, 1, angle=0, distance=cam.fx / 200)
    gt = s.ground_truth[0]
    assert np.ptp(gt.corners[:, 0]) == pytest.approx(200, rel=1e-9)
    pts = project_points(gt.H, sample_ellipse(*G.circle, G.circle[2], 0, 64))
    hp = np.column_stack([pts, np.ones(64)])
    assert np.abs(np.einsum("ni,ij,nj->n", hp, gt.ellipse, hp)).max() < 1e-9
    e = gt.ellipse_params()
    assert e.a == pytest.approx(0.4 * 200, rel=1e-9) and e.b == pytest.approx(e.a, rel=1e-9)


@given(st.floats(0, 70), st.floats(3, 9), st.sampled_from(["x", "y"]), st.floats(0, 360))
def test_ground_truth_depth_ratio(angle, dist, axis, roll):
    lib = MarkerLibrary(48, 1, (0x0F0F_0F0F_0F0F,))
    cam = CameraIntrinsics.for_image(160, 120)
    R, t = look_at_pose(angle, dist, axis=axis, roll_deg=roll)
    s = render_scene([MarkerPlacement(lib, 0, R, t)], cam, (160, 120))
    gt = s.ground_truth[0]
    unit = np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]])
    z = (np.column_stack([unit, np.zeros(4)]) @ gt.R.T + gt.t)[:, 2]
    assert geom.relative_depth(gt.corners, gt.H) == pytest.approx(z.max() / z.min(), rel=1e-6)
    assert np.allclose(project_points(cam.K @ np.column_stack([R[:, 0], R[:, 1], t]), unit), gt.corners, atol=1e-9)


def test_noise_only_touches_noisy_frames(lib23):
    s = scene_at(lib23, 0, noise=NoiseSpec(sigma=3.0))
    a = s.noisy(np.random.default_rng(0))
    b = s.noisy(np.random.default_rng(0))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, s.image)
    assert abs(float(np.std(a.astype(float) - s.clean))) == pytest.approx(3.0, rel=0.1)


def test_ground_truth_sidecar(tmp_path, lib23):
    s = scene_at(lib23, 2, angle=30)
    path = tmp_path / "gt.txt"
    s.write_ground_truth(path)
    fields = path.read_text().split()
    assert len(fields) == 1 + 9 + 12 + 8 + 5
    assert int(fields[0]) == 2
    assert np.allclose(np.array(fields[1:10], float).reshape(3, 3), s.ground_truth[0].H)


@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_image_io_round_trip(tmp_path, suffix):
    img = np.random.default_rng(0).integers(0, 256, (37, 53), dtype=np.uint8)
    p = tmp_path / f"x{suffix}"
    write_image(p, img)
    assert np.array_equal(read_image(p), img)
    if suffix == ".pgm":
        assert p.read_bytes().startswith(b"P5\n53 37\n255\n")


def test_read_missing_image(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_image(tmp_path / "nope.png")
