"""Polygon rasterization, part label maps, and overlay images.

One scanline rasterizer serves ground-truth masks, parse label maps, and the
synthetic generator, so predicted and reference masks go through identical
geometry. A pixel (r, c) belongs to a polygon when its center (c+0.5, r+0.5)
is inside by the even-odd rule.
"""
from __future__ import annotations

import numpy as np

from .errors import DataError
from .raster import ImageRaster

# fixed part palette; part_id indexes modulo the table
PALETTE = (
    (228, 26, 28), (55, 126, 184), (77, 175, 74), (152, 78, 163),
    (255, 127, 0), (255, 255, 51), (166, 86, 40), (247, 129, 191),
    (153, 153, 153), (66, 206, 227),
)


def rasterize_polygon(points, height: int, width: int) -> np.ndarray:
    """Boolean mask of the polygon given as an (x, y) vertex sequence."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DataError(f"polygon needs (N, 2) vertices, got {pts.shape}")
    mask = np.zeros((height, width), dtype=bool)
    n = len(pts)
    if n < 3:
        return mask
    x1 = pts[:, 0]
    y1 = pts[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    for r in range(height):
        sy = r + 0.5
        # half-open span per edge so shared vertices count once
        lo = np.minimum(y1, y2)
        hi = np.maximum(y1, y2)
        hit = (lo <= sy) & (sy < hi)
        if not hit.any():
            continue
        t = (sy - y1[hit]) / (y2[hit] - y1[hit])
        xs = np.sort(x1[hit] + t * (x2[hit] - x1[hit]))
        for a, b in zip(xs[0::2], xs[1::2]):
            c0 = int(np.ceil(a - 0.5))
            c1 = int(np.ceil(b - 0.5))
            if c1 > c0:
                mask[r, max(0, c0):min(width, c1)] = True
    return mask


def render_label_map(polygons, height: int, width: int) -> np.ndarray:
    """Compose (part_id, render_priority, points) polygons into a label map.

    Higher render_priority paints later and wins overlaps; background is -1.
    """
    label = np.full((height, width), -1, dtype=np.int32)
    for part_id, _prio, points in sorted(polygons, key=lambda p: p[1]):
        m = rasterize_polygon(points, height, width)
        label[m] = part_id
    return label


def render_overlay(image: ImageRaster, landmarks=(), polygons=(),
                   alpha: float = 0.45, new_id: str | None = None) -> ImageRaster:
    """Translucent part fills plus landmark dots; colors keyed by part_id.

    landmarks: iterable of (x, y, part_id). polygons: as render_label_map.
    Empty inputs return an unmodified pixel copy.
    """
    out = image.rgb.astype(np.float64)
    h, w = out.shape[:2]
    for part_id, _prio, points in sorted(polygons, key=lambda p: p[1]):
        m = rasterize_polygon(points, h, w)
        color = np.array(PALETTE[part_id % len(PALETTE)], dtype=np.float64)
        out[m] = (1.0 - alpha) * out[m] + alpha * color
    rgb = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    for x, y, part_id in landmarks:
        x, y = int(round(x)), int(round(y))
        if not (0 <= x < w and 0 <= y < h):
            raise DataError(f"landmark ({x}, {y}) outside {w}x{h} image")
        color = PALETTE[part_id % len(PALETTE)]
        rgb[max(0, y - 1):y + 2, max(0, x - 1):x + 2] = color
    return ImageRaster(new_id or image.image_id + "#overlay", rgb)


def polygons_from_landmarks(landmarks, parts) -> list[tuple[int, int, list]]:
    """Group contour landmarks into per-part polygons ordered by ring_order.

    landmarks: iterable with .part_id, .kind, .ring_order, .x, .y.
    parts: PartDef list supplying render priorities. Parts with fewer than
    three contour landmarks yield no polygon.
    """
    prio = {p.part_id: p.render_priority for p in parts}
    ring: dict[int, list] = {}
    for lm in landmarks:
        if lm.kind == "contour":
            ring.setdefault(lm.part_id, []).append(lm)
    out = []
    for pid, lms in sorted(ring.items()):
        if len(lms) < 3:
            continue
        lms.sort(key=lambda lm: lm.ring_order)
        out.append((pid, prio[pid], [(lm.x, lm.y) for lm in lms]))
    return out
