import numpy as np
import pytest

import partgraph.render as render
from partgraph.dataset import LandmarkAnnotation, PartDef
from partgraph.errors import DataError
from partgraph.raster import ImageRaster

from conftest import noise_image


def test_square_polygon_exact_pixels():
    # centers strictly inside [2, 6) x [3, 7) -> columns 2..5, rows 3..6
    m = render.rasterize_polygon([(2, 3), (6, 3), (6, 7), (2, 7)], 10, 10)
    expect = np.zeros((10, 10), dtype=bool)
    expect[3:7, 2:6] = True
    np.testing.assert_array_equal(m, expect)
    assert m.sum() == 16


def test_triangle_half_plane():
    # right triangle (0,0)-(8,0)-(0,8): pixel centers below x+y=8
    m = render.rasterize_polygon([(0, 0), (8, 0), (0, 8)], 8, 8)
    yy, xx = np.mgrid[0:8, 0:8]
    expect = (xx + 0.5) + (yy + 0.5) < 8
    np.testing.assert_array_equal(m, expect)


def test_polygon_clipped_at_borders():
    m = render.rasterize_polygon([(-5, -5), (4, -5), (4, 4), (-5, 4)], 8, 8)
    expect = np.zeros((8, 8), dtype=bool)
    expect[:4, :4] = True
    np.testing.assert_array_equal(m, expect)


def test_degenerate_polygons_empty():
    assert not render.rasterize_polygon([(1, 1), (5, 5)], 8, 8).any()
    assert not render.rasterize_polygon([(1, 1), (5, 1), (3, 1)], 8, 8).any()


def test_label_map_priority_compositing():
    polys = [(0, 0, [(0, 0), (8, 0), (8, 8), (0, 8)]),
             (1, 5, [(2, 2), (6, 2), (6, 6), (2, 6)])]
    label = render.render_label_map(polys, 8, 8)
    assert label[0, 0] == 0
    assert label[3, 3] == 1  # higher priority wins the overlap
    label2 = render.render_label_map(list(reversed(polys)), 8, 8)
    np.testing.assert_array_equal(label, label2)  # order given by priority
    assert (label == -1).sum() == 0


def test_overlay_empty_inputs_is_copy():
    img = noise_image(12, 12, 3)
    out = render.render_overlay(img)
    np.testing.assert_array_equal(out.rgb, img.rgb)
    assert out.rgb is not img.rgb


def test_overlay_deterministic_and_marks_landmarks():
    img = noise_image(16, 16, 4)
    polys = [(0, 0, [(2, 2), (10, 2), (10, 10), (2, 10)])]
    lms = [(5, 5, 0), (12, 3, 1)]
    a = render.render_overlay(img, lms, polys)
    b = render.render_overlay(img, lms, polys)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    assert tuple(a.rgb[5, 5]) == render.PALETTE[0]
    assert tuple(a.rgb[3, 12]) == render.PALETTE[1]
    assert not np.array_equal(a.rgb, img.rgb)


def test_overlay_rejects_outside_landmark():
    img = noise_image(8, 8, 1)
    with pytest.raises(DataError):
        render.render_overlay(img, [(9, 1, 0)])


def test_polygons_from_landmarks_ring_order_and_minimum():
    parts = [PartDef(0, "a", "a", 2), PartDef(1, "b", "b", 1)]
    lms = [LandmarkAnnotation(0, 4, 0, 0, "contour", 1),
           LandmarkAnnotation(1, 0, 0, 0, "contour", 0),
           LandmarkAnnotation(2, 4, 4, 0, "contour", 2),
           LandmarkAnnotation(3, 2, 2, 0, "inner", 3),
           LandmarkAnnotation(4, 7, 7, 1, "contour", 0),
           LandmarkAnnotation(5, 9, 9, 1, "contour", 1)]
    polys = render.polygons_from_landmarks(lms, parts)
    assert len(polys) == 1  # part 1 has too few contour points
    pid, prio, pts = polys[0]
    assert (pid, prio) == (0, 2)
    assert pts == [(0, 0), (4, 0), (4, 4)]  # sorted by ring_order, inner skipped
