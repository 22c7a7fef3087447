import json
import logging
import os

import numpy as np
import pytest

import partgraph.dataset as ds
from partgraph.errors import ConfigError, DataError, SchemaError
from partgraph.raster import ImageRaster, save_png

from conftest import noise_image, solid_image


PARTS = [
    {"id": 0, "name": "body", "category": "body", "render_priority": 0},
    {"id": 1, "name": "wheel", "category": "wheel", "render_priority": 1},
]

# two viewpoints mirroring each other, 3 landmarks each
VIEWPOINTS = [
    {"id": 0, "landmark_ids": [0, 1, 2], "mirror_viewpoint": 1},
    {"id": 1, "landmark_ids": [10, 11, 12], "mirror_viewpoint": 0},
]

MIRRORS = {
    0: {0: 10, 1: 11, 2: 12},
    1: {10: 0, 11: 1, 12: 2},
}


def _landmarks(ids, coords):
    return [{"id": i, "x": x, "y": y, "part": 0 if k < 2 else 1, "kind": "contour",
             "ring_order": k} for k, (i, (x, y)) in enumerate(zip(ids, coords))]


def write_manifest(tmp_path, images, parts=PARTS, viewpoints=VIEWPOINTS,
                   name="manifest.json"):
    entries = []
    for i, (img, vp, lms) in enumerate(images):
        rel = f"img_{i}.png"
        save_png(img, str(tmp_path / rel))
        entries.append({"path": rel, "viewpoint": vp, "landmarks": lms})
    manifest = {"parts": parts, "viewpoints": viewpoints, "images": entries}
    path = tmp_path / name
    path.write_text(json.dumps(manifest))
    return str(path)


def two_image_manifest(tmp_path):
    img0 = noise_image(90, 100, 1)
    img1 = noise_image(100, 90, 2)
    lms0 = _landmarks([0, 1, 2], [(10, 5), (50, 40), (99, 89)])
    lms1 = _landmarks([10, 11, 12], [(0, 0), (30, 30), (89, 99)])
    return write_manifest(tmp_path, [(img0, 0, lms0), (img1, 1, lms1)])


def test_load_round_trip_two_images(tmp_path):
    tset = ds.load_dataset(two_image_manifest(tmp_path))
    assert len(tset.positives) == 2
    assert tset.positives[0].viewpoint == 0
    assert tset.positives[1].viewpoint == 1
    assert [lm.landmark_id for lm in tset.positives[0].landmarks] == [0, 1, 2]
    assert not tset.positives[0].flipped
    assert tset.negatives == []


def test_landmark_outside_bounds_rejected(tmp_path):
    img = noise_image(90, 100, 1)
    lms = _landmarks([0, 1, 2], [(10, 5), (100, 40), (20, 20)])  # x == width
    path = write_manifest(tmp_path, [(img, 0, lms)])
    with pytest.raises(SchemaError, match="outside"):
        ds.load_dataset(path)


def test_landmark_count_mismatch_names_image(tmp_path):
    img = noise_image(90, 100, 1)
    lms = _landmarks([0, 1], [(10, 5), (50, 40)])  # one short
    path = write_manifest(tmp_path, [(img, 0, lms)])
    with pytest.raises(DataError, match="img_0.png"):
        ds.load_dataset(path)


def test_wrong_landmark_ids_rejected(tmp_path):
    img = noise_image(90, 100, 1)
    lms = _landmarks([0, 1, 5], [(10, 5), (50, 40), (20, 20)])
    path = write_manifest(tmp_path, [(img, 0, lms)])
    with pytest.raises(DataError, match="do not match"):
        ds.load_dataset(path)


def test_schema_rejects_bad_kind(tmp_path):
    img = noise_image(90, 100, 1)
    lms = _landmarks([0, 1, 2], [(1, 1), (2, 2), (3, 3)])
    lms[0]["kind"] = "edge"
    path = write_manifest(tmp_path, [(img, 0, lms)])
    with pytest.raises(SchemaError):
        ds.load_dataset(path)


def test_schema_rejects_missing_key(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"parts": PARTS, "images": []}))
    with pytest.raises(SchemaError):
        ds.load_dataset(str(path))


def test_missing_manifest_raises():
    with pytest.raises(DataError, match="not found"):
        ds.load_dataset("/nonexistent/manifest.json")


def test_duplicate_ring_order_rejected(tmp_path):
    img = noise_image(90, 100, 1)
    lms = _landmarks([0, 1, 2], [(1, 1), (2, 2), (3, 3)])
    lms[1]["ring_order"] = lms[0]["ring_order"]
    lms[1]["part"] = lms[0]["part"]
    path = write_manifest(tmp_path, [(img, 0, lms)])
    with pytest.raises(DataError, match="ring_order"):
        ds.load_dataset(path)


def test_sparse_part_ids_rejected(tmp_path):
    parts = [{"id": 0, "name": "a", "category": "a", "render_priority": 0},
             {"id": 2, "name": "b", "category": "b", "render_priority": 1}]
    path = write_manifest(tmp_path, [], parts=parts)
    with pytest.raises(DataError, match="dense"):
        ds.load_dataset(path)


def test_non_involutive_mirror_rejected(tmp_path):
    vps = [{"id": 0, "landmark_ids": [0], "mirror_viewpoint": 1},
           {"id": 1, "landmark_ids": [1], "mirror_viewpoint": 1}]
    path = write_manifest(tmp_path, [], viewpoints=vps)
    with pytest.raises(DataError, match="involution"):
        ds.load_dataset(path)


def test_min_size_filter_warns_and_skips(tmp_path, caplog):
    small = noise_image(50, 60, 3)
    big = noise_image(90, 100, 1)
    lms_small = _landmarks([0, 1, 2], [(1, 1), (2, 2), (3, 3)])
    lms_big = _landmarks([0, 1, 2], [(1, 1), (2, 2), (3, 3)])
    path = write_manifest(tmp_path, [(small, 0, lms_small), (big, 0, lms_big)])
    with caplog.at_level(logging.WARNING, logger="partgraph.dataset"):
        tset = ds.load_dataset(path, min_size=80)
    assert len(tset.positives) == 1
    assert "below minimum" in caplog.text


def test_nonpositive_C_rejected(tmp_path):
    path = two_image_manifest(tmp_path)
    with pytest.raises(ConfigError):
        ds.load_dataset(path, C=0.0)


def test_flip_reflection_arithmetic(tmp_path):
    img = noise_image(90, 100, 1)
    lms = _landmarks([0, 1, 2], [(10, 5), (50, 40), (99, 89)])
    path = write_manifest(tmp_path, [(img, 0, lms)])
    tset = ds.load_dataset(path)
    doubled = ds.flip_augment(tset, MIRRORS)
    assert len(doubled.positives) == 2
    flip = doubled.positives[1]
    assert flip.viewpoint == 1
    assert flip.flipped
    by_id = {lm.landmark_id: lm for lm in flip.landmarks}
    assert (by_id[10].x, by_id[10].y) == (100 - 1 - 10, 5)
    np.testing.assert_array_equal(flip.image.rgb, img.rgb[:, ::-1])


@pytest.mark.parametrize("width", [20, 21])
def test_double_flip_is_involution(tmp_path, width):
    img = noise_image(20, width, 4)
    lms = _landmarks([0, 1, 2], [(0, 0), (width // 2, 10), (width - 1, 19)])
    path = write_manifest(tmp_path, [(img, 0, lms)])
    tset = ds.load_dataset(path, min_size=1)
    twice = ds.flip_augment(ds.flip_augment(tset, MIRRORS), MIRRORS)
    orig, back = twice.positives[0], twice.positives[3]
    assert back.viewpoint == orig.viewpoint
    assert not back.flipped
    for a, b in zip(orig.landmarks, back.landmarks):
        assert (a.landmark_id, a.x, a.y, a.ring_order) == \
               (b.landmark_id, b.x, b.y, b.ring_order)
    np.testing.assert_array_equal(back.image.rgb, orig.image.rgb)


def test_flip_doubles_count(tmp_path):
    tset = ds.load_dataset(two_image_manifest(tmp_path))
    assert len(ds.flip_augment(tset, MIRRORS).positives) == 2 * len(tset.positives)


def test_flip_missing_mirror_entry(tmp_path):
    tset = ds.load_dataset(two_image_manifest(tmp_path))
    with pytest.raises(ConfigError, match="landmark 2"):
        ds.flip_augment(tset, {0: {0: 10, 1: 11}, 1: MIRRORS[1]})
    with pytest.raises(ConfigError, match="no landmark mirror map"):
        ds.flip_augment(tset, {0: MIRRORS[0]})


def test_sample_negative_windows_bounds_and_count():
    src = noise_image(500, 500, 7)
    wins = ds.sample_negative_windows([src], 5, [(80, 80)], seed=3)
    assert len(wins) == 5
    for w in wins:
        assert w.rgb.shape == (80, 80, 3)


def test_sample_negative_windows_deterministic():
    srcs = [noise_image(200, 300, 1), noise_image(300, 200, 2)]
    a = ds.sample_negative_windows(srcs, 20, [(80, 80), (100, 120)], seed=11)
    b = ds.sample_negative_windows(srcs, 20, [(80, 80), (100, 120)], seed=11)
    c = ds.sample_negative_windows(srcs, 20, [(80, 80), (100, 120)], seed=12)
    assert [w.image_id for w in a] == [w.image_id for w in b]
    for wa, wb in zip(a, b):
        np.testing.assert_array_equal(wa.rgb, wb.rgb)
    assert any(not np.array_equal(wa.rgb, wc.rgb) for wa, wc in zip(a, c))


def test_sample_negative_windows_size_nowhere_fits():
    src = noise_image(100, 100, 7)
    with pytest.raises(DataError, match="120x90"):
        ds.sample_negative_windows([src], 2, [(120, 90)], seed=0)


def test_sample_negative_windows_bad_count():
    src = noise_image(100, 100, 7)
    with pytest.raises(ConfigError):
        ds.sample_negative_windows([src], 0, [(80, 80)], seed=0)


def test_save_load_round_trip_bit_exact(tmp_path):
    tset = ds.load_dataset(two_image_manifest(tmp_path))
    out = tmp_path / "resaved"
    manifest2 = ds.save_dataset(tset, str(out))
    tset2 = ds.load_dataset(manifest2)
    assert len(tset2.positives) == len(tset.positives)
    for a, b in zip(tset.positives, tset2.positives):
        np.testing.assert_array_equal(a.image.rgb, b.image.rgb)
        assert a.viewpoint == b.viewpoint
        for la, lb in zip(a.landmarks, b.landmarks):
            assert (la.landmark_id, la.x, la.y, la.part_id, la.kind,
                    la.ring_order) == (lb.landmark_id, lb.x, lb.y, lb.part_id,
                                       lb.kind, lb.ring_order)
    assert [p.part_id for p in tset2.parts] == [p.part_id for p in tset.parts]
    assert tset2.viewpoints.keys() == tset.viewpoints.keys()
