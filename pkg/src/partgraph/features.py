"""Local appearance features: oriented-gradient patch descriptors, joint
hue/saturation histograms, gray-level co-occurrence statistics, and the
chi-square distance used to compare them.
"""
from __future__ import annotations

import numpy as np

from .errors import DataError
from .raster import ImageRaster, _linear_weights

# --- gradient descriptor geometry -------------------------------------------
HOG_BINS = 9           # unsigned orientation bins over 180 degrees
HOG_CELL = 8           # pixels per cell side after resampling
HOG_GRID = 4           # cells per patch side; patches resample to 32x32
HOG_BLOCK = 2          # cells per block side
HOG_CLIP = 0.2         # L2-hys clipping threshold
_BLOCKS = HOG_GRID - HOG_BLOCK + 1
HOG_DIM = _BLOCKS * _BLOCKS * HOG_BLOCK * HOG_BLOCK * HOG_BINS  # 324
_PATCH_RES = HOG_GRID * HOG_CELL  # 32

# --- color histogram geometry ------------------------------------------------
HUE_BINS = 12
SAT_BINS = 8
COLOR_DIM = HUE_BINS * SAT_BINS  # 96
GRAY_SAT = 0.05        # below this saturation the hue is meaningless

# --- co-occurrence geometry ---------------------------------------------------
GLCM_LEVELS = 16
# (dy, dx) displacements for 0, 45, 90, 135 degrees
GLCM_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))
GLCM_STATS = 8         # HOM, ASM, MAX, mean_x, mean_y, var_x, var_y, cov_xy
GLCM_DIM = 3 * len(GLCM_OFFSETS) * GLCM_STATS  # 96

CHI_EPS = 1e-12


def chi_square(a: np.ndarray, b: np.ndarray) -> float:
    """0.5 * sum((a-b)^2 / (|a|+|b|+eps)). Bounded by 1 for unit-sum
    histograms, where it reduces to the usual chi-square; the magnitudes in
    the denominator keep signed inputs (GLCM covariances) from dividing by a
    near-cancelling sum."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"chi_square: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(0.5 * np.sum(d * d / (np.abs(a) + np.abs(b) + CHI_EPS)))


def chi_square_matrix(feats: np.ndarray, chunk: int = 64) -> np.ndarray:
    """All-pairs chi-square distances between the rows of (n, d) feats.

    Row-chunked so the (n, n, d) broadcast never materializes whole.
    Entry [i, j] is bit-identical to chi_square(feats[i], feats[j]).
    """
    feats = np.asarray(feats, dtype=np.float64)
    n = feats.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d = feats[lo:hi, None, :] - feats[None, :, :]
        s = np.abs(feats[lo:hi, None, :]) + np.abs(feats[None, :, :]) + CHI_EPS
        out[lo:hi] = 0.5 * np.sum(d * d / s, axis=-1)
    return out


# ---------------------------------------------------------------------------
# color histogram


def color_histogram(image: ImageRaster, mask: np.ndarray) -> np.ndarray:
    """Joint hue x saturation histogram (12 x 8 = 96 bins), L1-normalized.

    Pixels with saturation < GRAY_SAT land in hue bin 0.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (image.height, image.width):
        raise ValueError("mask shape does not match image")
    if not mask.any():
        raise DataError(f"color_histogram: empty mask on image {image.image_id!r}")
    hsv = image.hsv()[mask]
    return hist_from_hsv_pixels(hsv)


def hist_from_hsv_pixels(hsv: np.ndarray) -> np.ndarray:
    """Histogram core on an (N, 3) pixel list."""
    h, s = hsv[:, 0], hsv[:, 1]
    hue_bin = np.minimum((h * HUE_BINS).astype(np.int64), HUE_BINS - 1)
    hue_bin = np.where(s < GRAY_SAT, 0, hue_bin)
    sat_bin = np.minimum((s * SAT_BINS).astype(np.int64), SAT_BINS - 1)
    idx = hue_bin * SAT_BINS + sat_bin
    hist = np.bincount(idx, minlength=COLOR_DIM).astype(np.float64)
    return hist / hist.sum()


# ---------------------------------------------------------------------------
# co-occurrence features


def _glcm_stats(p: np.ndarray) -> np.ndarray:
    """Eight statistics of one normalized 16x16 co-occurrence matrix."""
    i = np.arange(GLCM_LEVELS, dtype=np.float64)
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    hom = float(np.sum(p / (1.0 + (i[:, None] - i[None, :]) ** 2)))
    asm = float(np.sum(p * p))
    mx = float(np.sum(i * px))
    my = float(np.sum(i * py))
    vx = float(np.sum((i - mx) ** 2 * px))
    vy = float(np.sum((i - my) ** 2 * py))
    cov = float(np.sum((i[:, None] - mx) * (i[None, :] - my) * p))
    return np.array([hom, asm, float(p.max()), mx, my, vx, vy, cov])


def _glcm_degenerate(mean_level: float) -> np.ndarray:
    # what a constant image would produce: a single point mass
    return np.array([1.0, 1.0, 1.0, mean_level, mean_level, 0.0, 0.0, 0.0])


def glcm_features(image: ImageRaster, mask: np.ndarray) -> np.ndarray:
    """Co-occurrence statistics per RGB channel and direction, 96 values.

    Levels are the top 4 bits of each channel. Accumulation is symmetric, so
    for each in-mask pixel pair both (a, b) and (b, a) are counted. Layout:
    channel-major, then direction, then the 8 statistics.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (image.height, image.width):
        raise ValueError("mask shape does not match image")
    if not mask.any():
        raise DataError(f"glcm_features: empty mask on image {image.image_id!r}")
    quant = (image.rgb >> 4).astype(np.int64)
    out = np.empty(GLCM_DIM, dtype=np.float64)
    k = 0
    for ch in range(3):
        q = quant[..., ch]
        mean_level = float(q[mask].mean())
        for dy, dx in GLCM_OFFSETS:
            a, b = _shifted_pairs(q, mask, dy, dx)
            if a.size == 0:
                out[k:k + GLCM_STATS] = _glcm_degenerate(mean_level)
            else:
                counts = np.bincount(a * GLCM_LEVELS + b, minlength=GLCM_LEVELS ** 2)
                counts = counts + np.bincount(b * GLCM_LEVELS + a, minlength=GLCM_LEVELS ** 2)
                p = counts.astype(np.float64).reshape(GLCM_LEVELS, GLCM_LEVELS)
                out[k:k + GLCM_STATS] = _glcm_stats(p / p.sum())
            k += GLCM_STATS
    return out


def _shifted_pairs(q: np.ndarray, mask: np.ndarray, dy: int, dx: int):
    """Level pairs (q[p], q[p+d]) for pixels where both ends are in the mask."""
    h, w = q.shape
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    yd = slice(max(0, dy), min(h, h + dy))
    xd = slice(max(0, dx), min(w, w + dx))
    ok = mask[ys, xs] & mask[yd, xd]
    return q[ys, xs][ok], q[yd, xd][ok]


# ---------------------------------------------------------------------------
# oriented-gradient patch descriptor


def hog_at(image: ImageRaster, location: tuple[int, int], patch_size: int) -> np.ndarray:
    """Descriptor of the patch_size square centered at (x, y); length 324."""
    return hog_batch(image, np.asarray([location], dtype=np.int64), patch_size)[0]


def hog_batch(image: ImageRaster, locations: np.ndarray, patch_size: int) -> np.ndarray:
    """Descriptors for many centers at once; row i matches hog_at(locations[i]).

    Patches are clipped against the image with zero padding, resampled to
    32x32, and binned into 4x4 cells of 9 unsigned orientation bins; 2x2-cell
    blocks are L2-hys normalized and concatenated.
    """
    locations = np.asarray(locations, dtype=np.int64)
    if locations.ndim != 2 or locations.shape[1] != 2:
        raise ValueError("locations must be (N, 2) of x, y")
    if patch_size < 2:
        raise ValueError(f"patch_size must be >= 2, got {patch_size}")
    h, w = image.height, image.width
    xs, ys = locations[:, 0], locations[:, 1]
    if ((xs < 0) | (xs >= w) | (ys < 0) | (ys >= h)).any():
        raise DataError(f"descriptor location outside image {image.image_id!r}")

    half = patch_size // 2
    pad = half + patch_size  # generous; keeps every patch fully inside
    padded = np.zeros((h + 2 * pad, w + 2 * pad), dtype=np.float64)
    padded[pad:pad + h, pad:pad + w] = image.gray()
    offs = np.arange(patch_size, dtype=np.int64)
    rows = (ys - half + pad)[:, None] + offs[None, :]
    cols = (xs - half + pad)[:, None] + offs[None, :]
    patches = padded[rows[:, :, None], cols[:, None, :]]  # (N, ps, ps)

    if patch_size != _PATCH_RES:
        r0, r1, wr = _linear_weights(patch_size, _PATCH_RES)
        c0, c1, wc = _linear_weights(patch_size, _PATCH_RES)
        patches = patches[:, r0] * (1.0 - wr)[None, :, None] + patches[:, r1] * wr[None, :, None]
        patches = patches[:, :, c0] * (1.0 - wc)[None, None, :] + patches[:, :, c1] * wc[None, None, :]

    gy = np.gradient(patches, axis=1)
    gx = np.gradient(patches, axis=2)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx) % np.pi
    bins = np.minimum((ang / (np.pi / HOG_BINS)).astype(np.int64), HOG_BINS - 1)

    n = patches.shape[0]
    cy = np.arange(_PATCH_RES) // HOG_CELL
    cell_idx = cy[:, None] * HOG_GRID + cy[None, :]  # (32, 32) cell of each pixel
    flat = (np.arange(n)[:, None, None] * (HOG_GRID * HOG_GRID * HOG_BINS)
            + cell_idx[None] * HOG_BINS + bins)
    cells = np.bincount(flat.ravel(), weights=mag.ravel(),
                        minlength=n * HOG_GRID * HOG_GRID * HOG_BINS)
    cells = cells.reshape(n, HOG_GRID, HOG_GRID, HOG_BINS)

    out = np.empty((n, HOG_DIM), dtype=np.float64)
    k = 0
    span = HOG_BLOCK * HOG_BLOCK * HOG_BINS
    for by in range(_BLOCKS):
        for bx in range(_BLOCKS):
            v = cells[:, by:by + HOG_BLOCK, bx:bx + HOG_BLOCK, :].reshape(n, span)
            v = _l2hys(v)
            out[:, k:k + span] = v
            k += span
    return out


def _l2hys(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    v = np.where(norm > 0, v / np.where(norm == 0, 1.0, norm), 0.0)
    v = np.minimum(v, HOG_CLIP)
    norm = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    return np.where(norm > 0, v / np.where(norm == 0, 1.0, norm), 0.0)


# ---------------------------------------------------------------------------
# patch sizing


def patch_size_from_distances(distances: np.ndarray) -> int:
    """Patch side from the 80th percentile of neighbor-landmark distances,
    rounded half-up to the nearest even integer, floored at 8.

    The percentile rounds up to an observed value (no interpolation).
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise DataError("patch_size_from_distances: no landmark distances")
    p = float(np.percentile(d, 80, method="higher"))
    even = 2 * int(np.floor(p / 2.0 + 0.5))
    return max(8, even)


def ring_neighbor_distances(ann) -> list[float]:
    """Euclidean distances between consecutive contour landmarks per part.

    Consecutive means adjacent in ring_order; rings of three or more
    landmarks also contribute the closing pair. Inner landmarks are skipped.
    """
    out: list[float] = []
    by_part: dict[int, list] = {}
    for lm in ann.landmarks:
        if lm.kind == "contour":
            by_part.setdefault(lm.part_id, []).append(lm)
    for lms in by_part.values():
        lms.sort(key=lambda lm: lm.ring_order)
        if len(lms) < 2:
            continue
        pairs = list(zip(lms, lms[1:]))
        if len(lms) >= 3:
            pairs.append((lms[-1], lms[0]))
        for a, b in pairs:
            out.append(float(np.hypot(a.x - b.x, a.y - b.y)))
    return out


def percentile_patch_size(training, viewpoint: int) -> int:
    """HOG patch side for one viewpoint, from its positives' landmark spacing."""
    distances: list[float] = []
    for ann in training.positives:
        if ann.viewpoint == viewpoint:
            distances.extend(ring_neighbor_distances(ann))
    if not distances:
        raise DataError(f"viewpoint {viewpoint}: no positives with neighboring "
                        "contour landmarks")
    return patch_size_from_distances(np.asarray(distances))
