import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multigrasp.errors import DegeneratePolygon, DimensionMismatch, EmptyRegion, NonConvexSweep
from multigrasp.raster import (
    BinaryRaster,
    Polygon2D,
    centroid,
    convex_hull,
    distance_to_boundary_map,
    intersection,
    overlap_count,
    rasterize_polygon,
    read_pgm,
    sweep_convex,
    union,
    write_pgm,
)
from tests.oracles import brute_distance, convex_center_raster, naive_centroid, naive_overlap, supersampled_area


def random_raster(rng, w=32, h=32, p=0.5):
    return BinaryRaster.from_array(rng.random((h, w)) < p)


@st.composite
def rasters(draw, w=16, h=16):
    bits = draw(st.integers(min_value=0, max_value=(1 << (w * h)) - 1))
    return BinaryRaster(w, h, bits)


@st.composite
def raster_pairs(draw):
    w = draw(st.integers(1, 20))
    h = draw(st.integers(1, 20))
    a = draw(st.integers(0, (1 << (w * h)) - 1))
    b = draw(st.integers(0, (1 << (w * h)) - 1))
    return BinaryRaster(w, h, a), BinaryRaster(w, h, b)


def random_convex(rng, cx=32, cy=32, r=20, n=7):
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = rng.uniform(0.3 * r, r, n)
    pts = [(cx + a * math.cos(t), cy + a * math.sin(t)) for a, t in zip(radii, angles)]
    return Polygon2D(tuple(convex_hull(pts)))


# --------------------------------------------------------------------------
# BinaryRaster basics


def test_array_round_trip():
    rng = np.random.default_rng(0)
    arr = rng.random((7, 13)) < 0.4
    r = BinaryRaster.from_array(arr)
    assert (r.width, r.height) == (13, 7)
    assert np.array_equal(r.to_array(), arr)
    assert r.popcount() == arr.sum()


def test_bit_layout_is_row_major():
    r = BinaryRaster.from_pixels(4, 3, [(1, 2)])
    assert r.bits == 1 << (2 * 4 + 1)
    assert r.get(1, 2) and not r.get(2, 1)


def test_bits_beyond_size_rejected():
    with pytest.raises(ValueError):
        BinaryRaster(2, 2, 1 << 4)


def test_invert_stays_in_bounds():
    r = BinaryRaster.from_pixels(3, 3, [(0, 0)])
    assert (~r).popcount() == 8


# --------------------------------------------------------------------------
# set algebra


def test_overlap_self_is_popcount():
    r = random_raster(np.random.default_rng(1))
    assert overlap_count(r, r) == r.popcount()


def test_overlap_disjoint_is_zero():
    a = BinaryRaster.from_pixels(8, 8, [(0, 0), (1, 1)])
    b = BinaryRaster.from_pixels(8, 8, [(2, 2)])
    assert overlap_count(a, b) == 0


def test_overlap_matches_naive_loop():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b = random_raster(rng), random_raster(rng)
        assert overlap_count(a, b) == naive_overlap(a.to_array(), b.to_array())


def test_overlap_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        overlap_count(BinaryRaster.empty(4, 4), BinaryRaster.empty(4, 5))
    with pytest.raises(DimensionMismatch):
        intersection(BinaryRaster.empty(4, 4), BinaryRaster.empty(5, 4))


def test_intersection_identities():
    r = random_raster(np.random.default_rng(3))
    assert intersection(r, BinaryRaster.full(32, 32)) == r
    assert intersection(r, BinaryRaster.empty(32, 32)) == BinaryRaster.empty(32, 32)


def test_intersection_matches_naive():
    rng = np.random.default_rng(4)
    a, b = random_raster(rng), random_raster(rng)
    expected = np.zeros((32, 32), dtype=bool)
    aa, bb = a.to_array(), b.to_array()
    for j in range(32):
        for i in range(32):
            expected[j, i] = aa[j, i] and bb[j, i]
    got = intersection(a, b)
    assert np.array_equal(got.to_array(), expected)
    assert got.popcount() == overlap_count(a, b)


@given(raster_pairs())
def test_overlap_symmetric(pair):
    a, b = pair
    assert overlap_count(a, b) == overlap_count(b, a)


@given(raster_pairs())
def test_intersection_bounded(pair):
    a, b = pair
    assert intersection(a, b).popcount() <= min(a.popcount(), b.popcount())


# --------------------------------------------------------------------------
# centroid


def test_centroid_single_pixel():
    assert centroid(BinaryRaster.from_pixels(8, 8, [(3, 5)])) == (3.5, 5.5)


def test_centroid_full():
    assert centroid(BinaryRaster.full(10, 6)) == (5.0, 3.0)


def test_centroid_empty_raises():
    with pytest.raises(EmptyRegion):
        centroid(BinaryRaster.empty(4, 4))


def test_centroid_matches_naive():
    rng = np.random.default_rng(5)
    for _ in range(5):
        r = random_raster(rng, p=0.3)
        cx, cy = centroid(r)
        ox, oy = naive_centroid(r.to_array())
        assert abs(cx - ox) <= 1e-9 and abs(cy - oy) <= 1e-9


@given(rasters(), rasters())
def test_centroid_of_disjoint_union_is_weighted_mean(a, b):
    b = BinaryRaster(b.width, b.height, b.bits & ~a.bits)
    if a.popcount() == 0 or b.popcount() == 0:
        return
    na, nb = a.popcount(), b.popcount()
    ax, ay = centroid(a)
    bx, by = centroid(b)
    ux, uy = centroid(union(a, b))
    assert abs(ux - (na * ax + nb * bx) / (na + nb)) <= 1e-9
    assert abs(uy - (na * ay + nb * by) / (na + nb)) <= 1e-9


# --------------------------------------------------------------------------
# rasterization


def test_square_sets_four_pixels():
    r = rasterize_polygon(Polygon2D.rectangle(1, 1, 3, 3), 8, 8)
    assert sorted(r.pixels()) == [(1, 1), (1, 2), (2, 1), (2, 2)]


def test_square_outside_is_clipped():
    assert rasterize_polygon(Polygon2D.rectangle(10, 10, 12, 12), 8, 8).popcount() == 0


def test_partially_outside_is_clipped():
    r = rasterize_polygon(Polygon2D.rectangle(-2, -2, 2, 2), 8, 8)
    assert sorted(r.pixels()) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_boundary_centers_are_inside():
    # the edge x = 2.5 passes exactly through the centers of column 2
    r = rasterize_polygon(Polygon2D.rectangle(0.5, 0.5, 2.5, 1.5), 4, 4)
    assert sorted(r.pixels()) == [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]


def test_nonconvex_polygon():
    # L shape: 4x4 square minus its top-right 2x2 quadrant
    poly = Polygon2D(((0, 0), (2, 0), (2, 2), (4, 2), (4, 4), (0, 4)))
    r = rasterize_polygon(poly, 4, 4)
    arr = r.to_array()
    assert arr.sum() == 12
    assert not arr[0:2, 2:4].any()


def test_degenerate_polygons():
    with pytest.raises(DegeneratePolygon):
        rasterize_polygon(Polygon2D(((0, 0), (1, 1))), 4, 4)
    with pytest.raises(DegeneratePolygon):
        rasterize_polygon(Polygon2D(((0, 0), (1, 1), (2, 2))), 4, 4)


def test_vertex_order_does_not_matter():
    cw = Polygon2D(((1, 1), (1, 5), (6, 5), (6, 1)))
    ccw = Polygon2D(((1, 1), (6, 1), (6, 5), (1, 5)))
    assert rasterize_polygon(cw, 8, 8) == rasterize_polygon(ccw, 8, 8)


def test_popcount_close_to_supersampled_area():
    rng = np.random.default_rng(6)
    for _ in range(20):
        poly = random_convex(rng)
        r = rasterize_polygon(poly, 64, 64)
        est = supersampled_area(poly.as_array(), 64, 64)
        assert abs(r.popcount() - est) <= poly.perimeter()


HEXAGON = Polygon2D(((10, 5), (22, 7), (25, 15), (18, 22), (8, 18), (5, 10)))


def test_fixed_hexagon_against_frozen_oracles():
    # 4x supersampled area 228.75; 235 centers inside-or-on by the cross-product oracle
    # (several edges pass exactly through pixel centers)
    r = rasterize_polygon(HEXAGON, 32, 32)
    assert r.popcount() == 235
    assert abs(r.popcount() - 228.75) <= HEXAGON.perimeter()


def test_convex_rasterization_matches_center_oracle():
    rng = np.random.default_rng(9)
    for _ in range(10):
        poly = random_convex(rng)
        expected = convex_center_raster(poly.vertices, 64, 64)
        assert np.array_equal(rasterize_polygon(poly, 64, 64).to_array(), expected)


@settings(max_examples=50)
@given(
    st.integers(-5, 5),
    st.integers(-5, 5),
    st.floats(2, 10),
    st.floats(2, 10),
    st.floats(0, math.pi),
)
def test_integer_translation_equivariance(k, l, a, b, angle):
    base = Polygon2D.rectangle(-a, -b, a, b).transformed(angle, 16.3, 15.7)
    r0 = rasterize_polygon(base, 32, 32).to_array()
    r1 = rasterize_polygon(base.translated(k, l), 32, 32).to_array()
    for j in range(32):
        for i in range(32):
            if 0 <= i + k < 32 and 0 <= j + l < 32:
                assert r1[j + l, i + k] == r0[j, i]


# --------------------------------------------------------------------------
# sweeps


def test_sweep_zero_displacement_keeps_vertices():
    sq = Polygon2D.rectangle(0, 0, 1, 1)
    swept = sweep_convex(sq, (0.0, 0.0))
    assert set(swept.vertices) == set(sq.vertices)
    assert swept.area() == pytest.approx(sq.area(), abs=1e-9)


def test_unit_square_swept_along_x():
    swept = sweep_convex(Polygon2D.rectangle(0, 0, 1, 1), (2.0, 0.0))
    assert set(swept.vertices) == {(0, 0), (3, 0), (3, 1), (0, 1)}


def test_sweep_rejects_nonconvex():
    poly = Polygon2D(((0, 0), (2, 0), (2, 2), (4, 2), (4, 4), (0, 4)))
    with pytest.raises(NonConvexSweep):
        sweep_convex(poly, (1.0, 0.0))


@settings(max_examples=100)
@given(
    st.floats(0.5, 20),
    st.floats(0.5, 20),
    st.floats(0, 2 * math.pi),
    st.floats(-30, 30),
    st.floats(-30, 30),
)
def test_sweep_area_matches_shoelace_formula(a, b, angle, dx, dy):
    rect = Polygon2D.rectangle(-a / 2, -b / 2, a / 2, b / 2).transformed(angle, 0, 0)
    d = math.hypot(dx, dy)
    if d > 0:
        nx, ny = -dy / d, dx / d
        proj = [x * nx + y * ny for x, y in rect.vertices]
        extent = max(proj) - min(proj)
    else:
        extent = 0.0
    expected = a * b + d * extent
    assert sweep_convex(rect, (dx, dy)).area() == pytest.approx(expected, rel=1e-9, abs=1e-9)


# --------------------------------------------------------------------------
# distance map


def test_distance_empty():
    assert not distance_to_boundary_map(BinaryRaster.empty(8, 8)).any()


def test_distance_single_pixel():
    d = distance_to_boundary_map(BinaryRaster.from_pixels(8, 8, [(3, 4)]))
    assert d[4, 3] == 1.0
    assert d.sum() == 1.0


def test_distance_block_peak():
    arr = np.zeros((32, 32), dtype=bool)
    arr[12:21, 12:21] = True
    d = distance_to_boundary_map(BinaryRaster.from_array(arr))
    assert np.unravel_index(np.argmax(d), d.shape) == (16, 16)
    # brute-force nearest-unset value at the block center
    assert d[16, 16] == 5.0
    assert np.allclose(d, brute_distance(arr))


def test_distance_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(7)
    for _ in range(3):
        arr = rng.random((24, 20)) < 0.7
        assert np.allclose(distance_to_boundary_map(BinaryRaster.from_array(arr)), brute_distance(arr))


def test_distance_border_counts_as_unset():
    d = distance_to_boundary_map(BinaryRaster.full(5, 5))
    assert d[0, 0] == 1.0 and d[2, 2] == 3.0


# --------------------------------------------------------------------------
# PGM


def test_pgm_round_trip(tmp_path):
    r = random_raster(np.random.default_rng(8), 17, 9)
    write_pgm(r, tmp_path / "a.pgm")
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n17 9\n255\n")
    assert set(data[len(b"P5\n17 9\n255\n"):]) <= {0, 255}
    assert read_pgm(tmp_path / "a.pgm") == r
