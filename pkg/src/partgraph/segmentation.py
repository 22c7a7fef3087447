"""Hierarchical segmentation and the segment-pair machinery built on it.

A hierarchy is a strictly nested stack of label maps (level 1 = finest).
Each level eagerly caches per-segment appearance (color histogram + GLCM),
all-pairs chi-square distances between segments, and the ordered segment
pair carried by every pixel. Pair assignment at boundary pixels goes through
a 3x3 lookup table; interior pixels copy the nearest boundary pixel.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError
from ._kernels import grow_regions_kernel
from . import features as fe
from .features import chi_square_matrix, color_histogram, glcm_features
from .raster import ImageRaster

log = logging.getLogger(__name__)

# 8-neighborhood (dy, dx) in clockwise order starting at the upper-left.
CLOCKWISE_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1),
)

_SENTINEL = np.iinfo(np.int32).max


# ---------------------------------------------------------------------------
# 3x3 boundary-pattern lookup table


@dataclass(frozen=True)
class PairLookupTable:
    """Accepted 3x3 binary border patterns and their group split.

    Patterns are encoded as 8-bit codes: bit i is the border cell at
    CLOCKWISE_OFFSETS[i] (center cell always 1 and not encoded).
    group[code] is 0 (own segment first), 1 (other segment first), or -1.
    """

    accepted: np.ndarray  # (256,) bool
    group: np.ndarray     # (256,) int8

    def matrices(self) -> list[tuple[np.ndarray, int]]:
        """The accepted patterns as 3x3 matrices with their group, for dumps."""
        out = []
        for code in range(256):
            if not self.accepted[code]:
                continue
            m = np.zeros((3, 3), dtype=np.uint8)
            m[1, 1] = 1
            for i, (dy, dx) in enumerate(CLOCKWISE_OFFSETS):
                m[1 + dy, 1 + dx] = (code >> i) & 1
            out.append((m, int(self.group[code])))
        return out


def build_pair_lookup() -> PairLookupTable:
    """Enumerate all 256 border patterns and keep the valid boundary ones.

    A pattern is kept when walking the 8 border cells circularly crosses
    between 0 and 1 exactly twice and the number of zero cells is strictly
    between 1 and 6. The ones then form a single circular run; patterns whose
    run starts in the first four clockwise positions put the pixel's own
    segment first, the rest put the neighboring segment first.
    """
    accepted = np.zeros(256, dtype=bool)
    group = np.full(256, -1, dtype=np.int8)
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        jumps = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        zeros = 8 - sum(bits)
        if jumps != 2 or not (1 < zeros < 6):
            continue
        run_start = next(i for i in range(8) if bits[i] == 1 and bits[i - 1] == 0)
        accepted[code] = True
        group[code] = 0 if run_start < 4 else 1
    return PairLookupTable(accepted=accepted, group=group)


_DEFAULT_TABLE: PairLookupTable | None = None


def default_pair_lookup() -> PairLookupTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = build_pair_lookup()
    return _DEFAULT_TABLE


# ---------------------------------------------------------------------------
# level data


@dataclass
class PairField:
    """Ordered segment pair per pixel. Pair id 0 is the no-pair sentinel."""

    pair_map: np.ndarray  # (H, W) int32
    s1: np.ndarray        # (P,) int32; s1[0] == s2[0] == -1
    s2: np.ndarray


@dataclass
class SegmentationLevel:
    labels: np.ndarray      # (H, W) int32, dense ids 0..n_segments-1
    n_segments: int
    boundary: np.ndarray    # (H, W) bool
    color_hist: np.ndarray  # (n, 96)
    glcm: np.ndarray        # (n, 96)
    chi_color: np.ndarray   # (n, n)
    chi_glcm: np.ndarray    # (n, n)
    pairs: PairField
    # (8, P, P) chi-square gathers shared by every edge's weight table;
    # filled lazily on first use
    consistency_stack: np.ndarray | None = field(default=None, repr=False)


@dataclass
class SegmentationHierarchy:
    image: ImageRaster
    levels: list[SegmentationLevel]  # index 0 is the finest level
    prox_cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def level_proximity(hierarchy: SegmentationHierarchy, level: int,
                    sigma_e: float) -> np.ndarray:
    """Edge-proximity map of one level (0-based), memoized per (level, sigma)."""
    key = (int(level), float(sigma_e))
    got = hierarchy.prox_cache.get(key)
    if got is None:
        got = edge_proximity(hierarchy.levels[level].boundary, sigma_e)
        hierarchy.prox_cache[key] = got
    return got


def segment_appearance(hierarchy: SegmentationHierarchy, level: int,
                       segment_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Cached (color_hist, glcm) of one segment; level is 0-based here."""
    lv = hierarchy.levels[level]
    if not 0 <= segment_id < lv.n_segments:
        raise DataError(f"segment {segment_id} out of range at level {level}")
    return lv.color_hist[segment_id], lv.glcm[segment_id]


def sac_vector(level: SegmentationLevel, pid_i: int, pid_j: int) -> np.ndarray:
    """Appearance-consistency vector between two ordered segment pairs.

    Layout: for each of the four segment combinations (s1i,s1j), (s1i,s2j),
    (s2i,s1j), (s2i,s2j), the color chi-square then the GLCM chi-square.
    Either side missing a pair gives the zero vector.
    """
    if pid_i == 0 or pid_j == 0:
        return np.zeros(8, dtype=np.float64)
    a1, a2 = int(level.pairs.s1[pid_i]), int(level.pairs.s2[pid_i])
    b1, b2 = int(level.pairs.s1[pid_j]), int(level.pairs.s2[pid_j])
    cc, cg = level.chi_color, level.chi_glcm
    return np.array([
        cc[a1, b1], cg[a1, b1],
        cc[a1, b2], cg[a1, b2],
        cc[a2, b1], cg[a2, b1],
        cc[a2, b2], cg[a2, b2],
    ])


# ---------------------------------------------------------------------------
# default segmenter: seeded growing + agglomerative merge schedule


def _grid_seeds(image: ImageRaster, seed_cell: int) -> np.ndarray:
    """One seed pixel per grid cell: the lowest-gradient pixel, row-major ties."""
    gray = image.gray()
    gy, gx = np.gradient(gray)
    gm = np.hypot(gx, gy)
    h, w = gm.shape
    seeds = []
    for y0 in range(0, h, seed_cell):
        for x0 in range(0, w, seed_cell):
            block = gm[y0:y0 + seed_cell, x0:x0 + seed_cell]
            k = int(np.argmin(block))
            seeds.append((y0 + k // block.shape[1], x0 + k % block.shape[1]))
    return np.asarray(seeds, dtype=np.int64)


def _grow_regions(image: ImageRaster, seeds: np.ndarray) -> np.ndarray:
    """Greedy edge-weight growth of the seeds over the 4-connected pixel graph.

    The cheapest unassigned pixel adjacent to any region is absorbed next;
    the cost of an edge is the RGB distance between its endpoints. Ties break
    by insertion order, which makes the result deterministic.
    """
    rgb = np.ascontiguousarray(image.rgb.astype(np.float64))
    labels = np.full((image.height, image.width), -1, dtype=np.int32)
    grow_regions_kernel(rgb, np.ascontiguousarray(seeds), labels)
    return labels


def _region_adjacency(labels: np.ndarray) -> set[tuple[int, int]]:
    pairs = set()
    a, b = labels[:, :-1].ravel(), labels[:, 1:].ravel()
    m = a != b
    pairs.update(zip(np.minimum(a[m], b[m]).tolist(), np.maximum(a[m], b[m]).tolist()))
    a, b = labels[:-1, :].ravel(), labels[1:, :].ravel()
    m = a != b
    pairs.update(zip(np.minimum(a[m], b[m]).tolist(), np.maximum(a[m], b[m]).tolist()))
    return pairs


def default_segmenter(image: ImageRaster, num_levels: int, seed_cell: int = 8,
                      eps_color: float = 1e-6, branch: float = 3.0) -> list[np.ndarray]:
    """Label maps for each level, finest first.

    Starts from seeded region growing, then repeatedly merges the adjacent
    region pair with the smallest mean-color distance. Level l snapshots the
    merge state once the region count reaches n0 / branch**l; pairs whose
    distance is at most eps_color keep merging past the target so flat images
    collapse to a single segment.
    """
    seeds = _grid_seeds(image, seed_cell)
    grown = _grow_regions(image, seeds)
    n0 = len(seeds)

    areas = np.bincount(grown.ravel(), minlength=n0).astype(np.float64)
    sums = np.zeros((n0, 3), dtype=np.float64)
    for ch in range(3):
        sums[:, ch] = np.bincount(grown.ravel(), weights=image.rgb[..., ch].ravel().astype(np.float64),
                                  minlength=n0)
    means = sums / areas[:, None]

    parent = np.arange(n0, dtype=np.int64)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return int(i)

    neighbors: list[set[int]] = [set() for _ in range(n0)]
    for a, b in _region_adjacency(grown):
        neighbors[a].add(b)
        neighbors[b].add(a)

    version = np.zeros(n0, dtype=np.int64)
    heap: list[tuple[float, int, int, int, int]] = []

    def dist(a: int, b: int) -> float:
        d = means[a] - means[b]
        return float(np.sqrt(d @ d))

    for a in range(n0):
        for b in neighbors[a]:
            if a < b:
                heapq.heappush(heap, (dist(a, b), a, b, 0, 0))

    alive = n0

    def merge_once(max_dist: float | None) -> bool:
        """Merge the cheapest valid pair; returns False when none qualifies."""
        nonlocal alive
        while heap:
            d, a, b, va, vb = heap[0]
            if version[a] != va or version[b] != vb:
                heapq.heappop(heap)
                continue
            if max_dist is not None and d > max_dist:
                return False
            heapq.heappop(heap)
            # merge b into a; a keeps the smaller id by construction
            sums[a] += sums[b]
            areas[a] += areas[b]
            means[a] = sums[a] / areas[a]
            parent[b] = a
            version[a] += 1
            version[b] += 1
            nbs = (neighbors[a] | neighbors[b]) - {a, b}
            neighbors[a] = set()
            for c0 in nbs:
                c = find(c0)
                if c == a:
                    continue
                neighbors[a].add(c)
                neighbors[c].discard(b)
                neighbors[c].add(a)
                lo, hi = (a, c) if a < c else (c, a)
                heapq.heappush(heap, (dist(lo, hi), lo, hi,
                                      int(version[lo]), int(version[hi])))
            neighbors[b] = set()
            alive -= 1
            return True
        return False

    out: list[np.ndarray] = []
    root_cache = np.empty(n0, dtype=np.int64)
    for lv in range(1, num_levels + 1):
        target = max(1, int(np.floor(n0 / branch ** lv + 0.5)))
        while alive > target and merge_once(None):
            pass
        while alive > 1 and merge_once(eps_color):
            pass
        for i in range(n0):
            root_cache[i] = find(i)
        roots = root_cache[grown]
        _, dense = np.unique(roots, return_inverse=True)
        out.append(dense.reshape(grown.shape).astype(np.int32))
    return out


# ---------------------------------------------------------------------------
# hierarchy assembly


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbor in a different segment (both sides marked)."""
    b = np.zeros(labels.shape, dtype=bool)
    diff_h = labels[:, :-1] != labels[:, 1:]
    b[:, :-1] |= diff_h
    b[:, 1:] |= diff_h
    diff_v = labels[:-1, :] != labels[1:, :]
    b[:-1, :] |= diff_v
    b[1:, :] |= diff_v
    return b


def _segment_masks(labels: np.ndarray, n: int):
    """Yield (segment id, ys, xs) with pixel coordinates of each segment."""
    order = np.argsort(labels.ravel(), kind="stable")
    flat_sorted = labels.ravel()[order]
    starts = np.searchsorted(flat_sorted, np.arange(n))
    ends = np.append(starts[1:], labels.size)
    w = labels.shape[1]
    for sid in range(n):
        idx = order[starts[sid]:ends[sid]]
        yield sid, idx // w, idx % w


def _level_appearance_reference(image: ImageRaster, labels: np.ndarray, n: int):
    """Per-segment calls to the public descriptors; kept as the oracle the
    vectorized cache builder is tested against."""
    ch = np.empty((n, 96), dtype=np.float64)
    cg = np.empty((n, 96), dtype=np.float64)
    for sid, ys, xs in _segment_masks(labels, n):
        y0, y1 = int(ys.min()), int(ys.max()) + 1
        x0, x1 = int(xs.min()), int(xs.max()) + 1
        crop = ImageRaster(f"{image.image_id}@seg", image.rgb[y0:y1, x0:x1])
        mask = np.zeros((y1 - y0, x1 - x0), dtype=bool)
        mask[ys - y0, xs - x0] = True
        ch[sid] = color_histogram(crop, mask)
        cg[sid] = glcm_features(crop, mask)
    return ch, cg


def _level_appearance(image: ImageRaster, labels: np.ndarray, n: int):
    """All segments' appearance rows in one pass over the image.

    Counts are integers either way and every per-segment float reduction
    runs over the same contiguous block in the same order, so each row is
    bit-identical to color_histogram/glcm_features on the segment's mask.
    """
    flat = labels.ravel().astype(np.int64)

    hsv = image.hsv().reshape(-1, 3)
    h, s = hsv[:, 0], hsv[:, 1]
    hue_bin = np.minimum((h * fe.HUE_BINS).astype(np.int64), fe.HUE_BINS - 1)
    hue_bin = np.where(s < fe.GRAY_SAT, 0, hue_bin)
    sat_bin = np.minimum((s * fe.SAT_BINS).astype(np.int64), fe.SAT_BINS - 1)
    counts = np.bincount(flat * fe.COLOR_DIM + hue_bin * fe.SAT_BINS + sat_bin,
                         minlength=n * fe.COLOR_DIM)
    ch = counts.reshape(n, fe.COLOR_DIM).astype(np.float64)
    ch /= ch.sum(axis=1, keepdims=True)

    quant = (image.rgb >> 4).astype(np.int64)
    lv = fe.GLCM_LEVELS
    idx = np.arange(lv, dtype=np.float64)
    hom_den = 1.0 + (idx[:, None] - idx[None, :]) ** 2
    px_count = np.bincount(flat, minlength=n).astype(np.float64)
    hh, ww = labels.shape
    cg = np.empty((n, fe.GLCM_DIM), dtype=np.float64)
    k = 0
    for chn in range(3):
        q = quant[..., chn]
        mean_level = np.bincount(flat, weights=q.ravel().astype(np.float64),
                                 minlength=n) / px_count
        for dy, dx in fe.GLCM_OFFSETS:
            ys = slice(max(0, -dy), min(hh, hh - dy))
            xs = slice(max(0, -dx), min(ww, ww - dx))
            yd = slice(max(0, dy), min(hh, hh + dy))
            xd = slice(max(0, dx), min(ww, ww + dx))
            ls = labels[ys, xs].ravel().astype(np.int64)
            ok = ls == labels[yd, xd].ravel()
            seg = ls[ok]
            a = q[ys, xs].ravel()[ok]
            b = q[yd, xd].ravel()[ok]
            cnt = (np.bincount((seg * lv + a) * lv + b, minlength=n * lv * lv)
                   + np.bincount((seg * lv + b) * lv + a, minlength=n * lv * lv))
            P = cnt.reshape(n, lv, lv).astype(np.float64)
            tot = P.sum(axis=(1, 2))
            live = tot > 0
            P[live] /= tot[live, None, None]
            px = P.sum(axis=2)
            py = P.sum(axis=1)
            mx = np.sum(idx[None, :] * px, axis=1)
            my = np.sum(idx[None, :] * py, axis=1)
            block = np.empty((n, fe.GLCM_STATS), dtype=np.float64)
            block[:, 0] = np.sum(P / hom_den[None], axis=(1, 2))
            block[:, 1] = np.sum(P * P, axis=(1, 2))
            block[:, 2] = P.max(axis=(1, 2))
            block[:, 3] = mx
            block[:, 4] = my
            block[:, 5] = np.sum((idx[None, :] - mx[:, None]) ** 2 * px, axis=1)
            block[:, 6] = np.sum((idx[None, :] - my[:, None]) ** 2 * py, axis=1)
            block[:, 7] = np.sum((idx[None, :, None] - mx[:, None, None])
                                 * (idx[None, None, :] - my[:, None, None])
                                 * P, axis=(1, 2))
            if not live.all():
                for sid in np.flatnonzero(~live):
                    block[sid] = fe._glcm_degenerate(mean_level[sid])
            cg[:, k:k + fe.GLCM_STATS] = block
            k += fe.GLCM_STATS
    return ch, cg


def assign_segment_pairs(labels: np.ndarray,
                         table: PairLookupTable | None = None) -> PairField:
    """Ordered segment pair for every pixel of one level.

    Boundary pixels match their 3x3 same-segment pattern against the lookup
    table; the pixel's own segment and the modal different segment (smaller
    id on count ties) fill the two slots in the group's order. Pixels whose
    pattern misses the table carry no pair. Off-boundary pixels copy the
    nearest boundary pixel.
    """
    table = table or default_pair_lookup()
    labels = np.asarray(labels, dtype=np.int32)
    h, w = labels.shape
    boundary = boundary_mask(labels)
    pair_map = np.zeros((h, w), dtype=np.int32)
    if not boundary.any():
        return PairField(pair_map,
                         np.array([-1], dtype=np.int32), np.array([-1], dtype=np.int32))

    nb = np.full((8, h, w), -1, dtype=np.int32)
    for i, (dy, dx) in enumerate(CLOCKWISE_OFFSETS):
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        yd = slice(max(0, dy), min(h, h + dy))
        xd = slice(max(0, dx), min(w, w + dx))
        nb[i][ys, xs] = labels[yd, xd]

    same = (nb == labels[None]) & (nb >= 0)
    code = np.zeros((h, w), dtype=np.int64)
    for i in range(8):
        code |= same[i].astype(np.int64) << i

    by, bx = np.nonzero(boundary)
    group = table.group[code[by, bx]]

    # modal different-segment id among the valid 0-cells, smaller id on ties
    cand = nb[:, by, bx].copy()
    invalid = ~((cand >= 0) & (cand != labels[by, bx][None]))
    cand[invalid] = _SENTINEL
    cand.sort(axis=0)
    run_val = cand[0]
    run_cnt = (run_val != _SENTINEL).astype(np.int64)
    best_val = np.where(run_cnt > 0, run_val, _SENTINEL)
    best_cnt = run_cnt.copy()
    for r in range(1, 8):
        row = cand[r]
        cont = (row == run_val) & (row != _SENTINEL)
        run_cnt = np.where(cont, run_cnt + 1, np.where(row != _SENTINEL, 1, 0))
        run_val = row
        better = run_cnt > best_cnt
        best_val = np.where(better, run_val, best_val)
        best_cnt = np.where(better, run_cnt, best_cnt)

    hit = (group >= 0) & (best_cnt > 0)
    own = labels[by, bx][hit]
    other = best_val[hit].astype(np.int32)
    grp = group[hit]
    s1 = np.where(grp == 0, own, other)
    s2 = np.where(grp == 0, other, own)

    stacked = np.stack([s1, s2], axis=1)
    uniq, inverse = np.unique(stacked, axis=0, return_inverse=True)
    pair_ids = np.zeros(len(by), dtype=np.int32)
    pair_ids[hit] = (inverse + 1).astype(np.int32)
    pair_map[by, bx] = pair_ids

    ind = ndimage.distance_transform_edt(~boundary, return_distances=False,
                                         return_indices=True)
    pair_map = pair_map[ind[0], ind[1]]

    s1_arr = np.concatenate([[-1], uniq[:, 0]]).astype(np.int32)
    s2_arr = np.concatenate([[-1], uniq[:, 1]]).astype(np.int32)
    return PairField(pair_map, s1_arr, s2_arr)


def edge_proximity(boundary: np.ndarray, sigma_e: float) -> np.ndarray:
    """max(0, 1 - D / sigma_e) with D the exact distance to the boundary set."""
    if sigma_e <= 0:
        raise ValueError(f"sigma_e must be positive, got {sigma_e}")
    boundary = np.asarray(boundary, dtype=bool)
    if not boundary.any():
        log.warning("edge_proximity: empty boundary mask, proximity is all zero")
        return np.zeros(boundary.shape, dtype=np.float64)
    dist = ndimage.distance_transform_edt(~boundary)
    return np.maximum(0.0, 1.0 - dist / sigma_e)


def build_hierarchy(image: ImageRaster, num_levels: int = 6, seed_cell: int = 8,
                    eps_color: float = 1e-6, branch: float = 3.0,
                    segmenter=None,
                    table: PairLookupTable | None = None) -> SegmentationHierarchy:
    """Build the nested hierarchy plus every per-level cache.

    A custom segmenter may be passed (signature: image, num_levels -> list of
    label maps, finest first); its output is validated for strict nesting.
    """
    if num_levels < 1:
        raise ValueError(f"num_levels must be >= 1, got {num_levels}")
    if segmenter is None:
        label_maps = default_segmenter(image, num_levels, seed_cell=seed_cell,
                                       eps_color=eps_color, branch=branch)
    else:
        label_maps = segmenter(image, num_levels)
        label_maps = [np.asarray(m, dtype=np.int32) for m in label_maps]
    if len(label_maps) != num_levels:
        raise DataError(f"segmenter produced {len(label_maps)} levels, wanted {num_levels}")

    table = table or default_pair_lookup()
    levels: list[SegmentationLevel] = []
    prev: np.ndarray | None = None
    for li, labels in enumerate(label_maps):
        if labels.shape != (image.height, image.width):
            raise DataError(f"level {li + 1} label map shape {labels.shape} "
                            f"does not match image {image.image_id!r}")
        n = int(labels.max()) + 1
        counts = np.bincount(labels.ravel(), minlength=n)
        if (counts == 0).any():
            raise DataError(f"level {li + 1} has empty segment ids")
        if prev is not None:
            _check_nesting(prev, labels, li)
        prev = labels

        bnd = boundary_mask(labels)
        ch, cg = _level_appearance(image, labels, n)
        levels.append(SegmentationLevel(
            labels=labels, n_segments=n, boundary=bnd,
            color_hist=ch, glcm=cg,
            chi_color=chi_square_matrix(ch), chi_glcm=chi_square_matrix(cg),
            pairs=assign_segment_pairs(labels, table)))
    return SegmentationHierarchy(image=image, levels=levels)


def _check_nesting(fine: np.ndarray, coarse: np.ndarray, li: int) -> None:
    """Every fine segment must map into exactly one coarse segment."""
    n_fine = int(fine.max()) + 1
    mapping = np.full(n_fine, -1, dtype=np.int64)
    f, c = fine.ravel(), coarse.ravel()
    mapping[f] = c  # last write wins; verify consistency below
    if not (mapping[f] == c).all():
        raise DataError(f"hierarchy not nested between levels {li} and {li + 1}")
    if int(coarse.max()) + 1 > n_fine:
        raise DataError(f"level {li + 1} has more segments than level {li}")
