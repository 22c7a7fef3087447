"""Deterministic toy-car scene generator with exact landmark annotations.

Scenes are drawn by rasterizing the same part polygons that become the
ground-truth annotations, so landmarks lie exactly on painted boundaries.
Viewpoint 0 faces left, 3 is the front view, 6 faces right; 0 and 6 are
mirror images, 3 mirrors onto itself.
"""

import numpy as np
from scipy import ndimage

from .dataset import (AnnotatedImage, LandmarkAnnotation, PartDef,
                      TrainingSet, ViewpointDef)
from .errors import ConfigError
from .model import HOG_DIM, EdgeParam, MixtureModel, ModelGraph, NodeParam
from .raster import ImageRaster
from .render import render_label_map
from .segmentation import build_hierarchy

BACKGROUND = (168, 172, 176)
PART_COLORS = {
    0: (196, 44, 44),     # body
    1: (72, 128, 216),    # window
    2: (32, 32, 36),      # wheels share a family
    3: (32, 32, 36),
    4: (232, 232, 208),   # plate
    5: (248, 208, 64),    # lights share a family
    6: (248, 208, 64),
}

SIDE_BOX = (125, 89)
FRONT_BOX = (97, 87)


def _hexagon(cx, cy, r):
    dy = round(r * np.sqrt(3.0) / 2.0)
    dx = r // 2
    return [(cx + r, cy), (cx + dx, cy + dy), (cx - dx, cy + dy),
            (cx - r, cy), (cx - dx, cy - dy), (cx + dx, cy - dy)]


def _side_layout():
    return [
        (0, [(0, 28), (124, 28), (124, 76), (0, 76)]),
        (1, [(28, 32), (88, 32), (88, 48), (28, 48)]),
        (2, _hexagon(24, 76, 14)),
        (3, _hexagon(100, 76, 14)),
        (4, [(104, 52), (124, 52), (124, 62), (104, 62)]),
        (5, [(0, 30), (14, 30), (0, 44)]),
        (6, [(124, 30), (110, 30), (124, 44)]),
    ]


def _front_layout():
    return [
        (0, [(8, 24), (88, 24), (88, 72), (8, 72)]),
        (1, [(20, 30), (76, 30), (76, 44), (20, 44)]),
        (2, _hexagon(16, 76, 12)),
        (3, _hexagon(80, 76, 12)),
        (4, [(36, 58), (60, 58), (60, 68), (36, 68)]),
        (5, [(12, 48), (26, 48), (12, 60)]),
        (6, [(84, 48), (70, 48), (84, 60)]),
    ]


def _mirror_rings(layout, box_w):
    return [(pid, [(box_w - 1 - x, y) for x, y in ring])
            for pid, ring in layout]


def car_layout(viewpoint: int, car_scale: int = 1):
    """Part polygons in car-local coordinates plus the bounding box size."""
    if viewpoint == 0:
        layout, box = _side_layout(), SIDE_BOX
    elif viewpoint == 6:
        layout, box = _mirror_rings(_side_layout(), SIDE_BOX[0]), SIDE_BOX
    elif viewpoint == 3:
        layout, box = _front_layout(), FRONT_BOX
    else:
        raise ConfigError(f"no car layout for viewpoint {viewpoint}")
    if car_scale != int(car_scale) or car_scale < 1:
        raise ConfigError(f"car_scale must be a positive integer, got {car_scale}")
    s = int(car_scale)
    if s > 1:
        layout = [(pid, [(x * s, y * s) for x, y in ring])
                  for pid, ring in layout]
        box = (box[0] * s - s + 1, box[1] * s - s + 1)
    return layout, box


def car_parts() -> list[PartDef]:
    return [PartDef(0, "body", "body", 0),
            PartDef(1, "window", "window", 1),
            PartDef(2, "wheel-front", "wheel", 2),
            PartDef(3, "wheel-back", "wheel", 3),
            PartDef(4, "plate", "plate", 4),
            PartDef(5, "light-front", "light", 5),
            PartDef(6, "light-back", "light", 6)]


def _landmark_count():
    return sum(len(ring) for _, ring in _side_layout())


def car_viewpoint_defs() -> dict[int, ViewpointDef]:
    ids = tuple(range(_landmark_count()))
    return {0: ViewpointDef(0, ids, 6),
            3: ViewpointDef(3, ids, 3),
            6: ViewpointDef(6, ids, 0)}


def landmark_mirror_map(viewpoint: int) -> dict[int, int]:
    """Landmark id permutation applied when an image is flipped."""
    if viewpoint in (0, 6):
        # viewpoint 6 is defined as the per-landmark mirror of viewpoint 0
        return {i: i for i in range(_landmark_count())}
    layout, (box_w, _) = car_layout(3)
    pos = {}
    lid = 0
    for _, ring in layout:
        for x, y in ring:
            pos[(x, y)] = lid
            lid += 1
    out = {}
    lid = 0
    for _, ring in layout:
        for x, y in ring:
            out[lid] = pos[(box_w - 1 - x, y)]
            lid += 1
    return out


def _edge_structure(layout):
    """Chain within each ring plus a star of cross edges on the body."""
    first = {}
    nid = 0
    nodes = []
    for pid, ring in layout:
        first[pid] = nid
        for _ in ring:
            nodes.append(pid)
            nid += 1
    edges = []
    nid = 0
    for pid, ring in layout:
        for k in range(len(ring) - 1):
            edges.append((nid + k, nid + k + 1))
        nid += len(ring)
    edges += [(0, first[1]), (3, first[2]), (2, first[3]),
              (2, first[4]), (0, first[5]), (1, first[6])]
    return nodes, edges


def car_model_skeleton(viewpoints=(0, 3, 6), patch_size: int = 16,
                       num_levels: int = 3) -> MixtureModel:
    """Untrained mixture with the toy car's tree structure per viewpoint."""
    vdefs = car_viewpoint_defs()
    graphs = {}
    for v in viewpoints:
        if v not in vdefs:
            raise ConfigError(f"no car layout for viewpoint {v}")
        layout, _ = car_layout(v)
        node_parts, edge_pairs = _edge_structure(layout)
        nodes = []
        nid = 0
        for pid, ring in layout:
            for ring_order in range(len(ring)):
                nodes.append(NodeParam(nid, pid, np.zeros(HOG_DIM), 0.0,
                                       ring_order, "contour"))
                nid += 1
        edges = [EdgeParam(i, j, None, None, np.zeros(2),
                           np.zeros(8) if node_parts[i] == node_parts[j]
                           else None)
                 for i, j in edge_pairs]
        graphs[v] = ModelGraph(v, vdefs[v].mirror_viewpoint, nodes, edges,
                               0.0, patch_size, num_levels,
                               landmark_mirror_map(v))
    return MixtureModel(parts=car_parts(), graphs=graphs)


def _scene_polygons(viewpoint, ox, oy, car_scale=1):
    layout, box = car_layout(viewpoint, car_scale)
    prio = {p.part_id: p.render_priority for p in car_parts()}
    polys = [(pid, prio[pid], [(x + ox, y + oy) for x, y in ring])
             for pid, ring in layout]
    return polys, box


def _paint_clutter(rng, pixels):
    h, w = pixels.shape[:2]
    families = list(PART_COLORS.values())
    for _ in range(int(rng.integers(8, 16))):
        cw = int(rng.integers(12, 56))
        ch = int(rng.integers(12, 56))
        x0 = int(rng.integers(0, max(1, w - cw)))
        y0 = int(rng.integers(0, max(1, h - ch)))
        if rng.random() < 0.5:
            base = families[int(rng.integers(len(families)))]
            color = np.clip(np.asarray(base) + rng.integers(-30, 31, 3),
                            0, 255)
        else:
            color = rng.integers(48, 208, 3)
        pixels[y0:y0 + ch, x0:x0 + cw] = color


def _finish(rng, pixels, noise, image_id):
    if noise > 0:
        pixels = pixels + rng.normal(0.0, noise * 255.0, pixels.shape)
    return ImageRaster(image_id, np.clip(pixels, 0, 255).astype(np.uint8))


def generate_scene(rng, viewpoint: int, noise: float, width: int, height: int,
                   image_id: str, car_scale: int = 1) -> AnnotatedImage:
    """One car scene over clutter; annotations are the drawn polygons."""
    _, (box_w, box_h) = car_layout(viewpoint, car_scale)
    margin = 8
    if width < box_w + 2 * margin or height < box_h + 2 * margin:
        raise ConfigError(f"{width}x{height} scene cannot hold a "
                          f"{box_w}x{box_h} car with margin {margin}")
    ox = int(rng.integers(margin, width - box_w - margin + 1))
    oy = int(rng.integers(margin, height - box_h - margin + 1))
    pixels = np.empty((height, width, 3), dtype=np.float64)
    pixels[:] = BACKGROUND
    _paint_clutter(rng, pixels)

    polys, _ = _scene_polygons(viewpoint, ox, oy, car_scale)
    label = render_label_map(polys, height, width)
    for pid, base in PART_COLORS.items():
        jitter = rng.integers(-10, 11, 3)
        pixels[label == pid] = np.clip(np.asarray(base) + jitter, 0, 255)

    image = _finish(rng, pixels, noise, image_id)
    landmarks = []
    lid = 0
    for pid, _prio, ring in polys:
        for ring_order, (x, y) in enumerate(ring):
            landmarks.append(LandmarkAnnotation(lid, int(x), int(y), pid,
                                                "contour", ring_order))
            lid += 1
    return AnnotatedImage(image, viewpoint, landmarks)


def generate_negative(rng, width: int, height: int, noise: float,
                      image_id: str) -> ImageRaster:
    pixels = np.empty((height, width, 3), dtype=np.float64)
    pixels[:] = BACKGROUND
    _paint_clutter(rng, pixels)
    return _finish(rng, pixels, noise, image_id)


def generate_dataset(count: int, seed: int, noise: float = 0.03,
                     mix: dict[int, int] | None = None,
                     width: int = 192, height: int = 144,
                     negative_count: int = 0,
                     negative_size: tuple[int, int] = (128, 128),
                     C: float = 0.002, car_scale: int = 1) -> TrainingSet:
    """Scenes plus clutter-only negatives, reproducible from the seed."""
    if count < 1:
        raise ConfigError(f"scene count must be >= 1, got {count}")
    if mix is None:
        mix = {0: (count + 1) // 2, 3: count // 2}
    else:
        if any(c < 0 for c in mix.values()):
            raise ConfigError("negative viewpoint count in mix")
        if sum(mix.values()) != count:
            raise ConfigError(f"viewpoint mix totals {sum(mix.values())}, "
                              f"expected {count}")
    vdefs = car_viewpoint_defs()
    for v in mix:
        if v not in vdefs:
            raise ConfigError(f"no car layout for viewpoint {v}")

    ss = np.random.SeedSequence(seed)
    children = ss.spawn(count + negative_count)
    positives = []
    i = 0
    for v in sorted(mix):
        for _ in range(mix[v]):
            rng = np.random.default_rng(children[i])
            positives.append(generate_scene(rng, v, noise, width, height,
                                            f"car-{v}-{i:04d}", car_scale))
            i += 1
    negatives = []
    for k in range(negative_count):
        rng = np.random.default_rng(children[count + k])
        nw, nh = negative_size
        negatives.append(generate_negative(rng, nw, nh, noise,
                                           f"bg-{k:04d}"))
    return TrainingSet(car_parts(), vdefs, positives, negatives, C)


def boundary_recall(ann: AnnotatedImage, parts, level: int = 1,
                    num_levels: int = 3, seed_cell: int = 8) -> float:
    """Fraction of GT part-boundary pixels within 1 px of a segment boundary
    at the given 1-based hierarchy level."""
    prio = {p.part_id: p.render_priority for p in parts}
    ring: dict[int, list] = {}
    for lm in ann.landmarks:
        ring.setdefault(lm.part_id, []).append(lm)
    polys = [(pid, prio[pid],
              [(lm.x, lm.y) for lm in sorted(lms, key=lambda l: l.ring_order)])
             for pid, lms in sorted(ring.items())]
    gt = render_label_map(polys, ann.image.height, ann.image.width)
    gt_boundary = np.zeros(gt.shape, dtype=bool)
    gt_boundary[:, :-1] |= gt[:, :-1] != gt[:, 1:]
    gt_boundary[:-1, :] |= gt[:-1, :] != gt[1:, :]

    hier = build_hierarchy(ann.image, num_levels=num_levels,
                           seed_cell=seed_cell)
    seg = hier.levels[level - 1].boundary
    near = ndimage.binary_dilation(seg, structure=np.ones((3, 3), dtype=bool))
    total = int(gt_boundary.sum())
    if total == 0:
        return 1.0
    return float((gt_boundary & near).sum()) / total
