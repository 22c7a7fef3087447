"""8-bit RGB image container plus the raster primitives everything else shares.

All derived planes are computed with fixed float64 arithmetic so repeated
runs produce bit-identical results.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DataError

# ITU-R BT.601 luma weights.
_LUMA_R = 0.299
_LUMA_G = 0.587
_LUMA_B = 0.114


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luma plane in [0, 255], float64."""
    r = rgb[..., 0].astype(np.float64)
    g = rgb[..., 1].astype(np.float64)
    b = rgb[..., 2].astype(np.float64)
    return _LUMA_R * r + _LUMA_G * g + _LUMA_B * b


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """HSV planes with H in [0, 1), S and V in [0, 1], float64.

    Matches the textbook hexcone conversion; grayscale pixels get H = 0.
    """
    x = rgb.astype(np.float64) / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    v = x.max(axis=-1)
    mn = x.min(axis=-1)
    c = v - mn
    safe_c = np.where(c == 0.0, 1.0, c)
    h = np.zeros_like(v)
    is_r = (v == r) & (c > 0)
    is_g = (v == g) & (c > 0) & ~is_r
    is_b = (c > 0) & ~is_r & ~is_g
    h = np.where(is_r, ((g - b) / safe_c) % 6.0, h)
    h = np.where(is_g, (b - r) / safe_c + 2.0, h)
    h = np.where(is_b, (r - g) / safe_c + 4.0, h)
    h = h / 6.0
    # guard against h == 1.0 from rounding of the modulo above
    h = np.where(h >= 1.0, h - 1.0, h)
    s = np.where(v == 0.0, 0.0, c / np.where(v == 0.0, 1.0, v))
    return np.stack([h, s, v], axis=-1)


def _linear_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index pairs and blend weights for 1-D bilinear resampling.

    Uses the half-pixel-center convention: output sample x maps to source
    coordinate (x + 0.5) * n_in / n_out - 0.5, clamped to the valid range.
    """
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, w1


def resize_plane(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-D float plane. Deterministic, float64."""
    plane = np.asarray(plane, dtype=np.float64)
    r0, r1, wr = _linear_weights(plane.shape[0], out_h)
    c0, c1, wc = _linear_weights(plane.shape[1], out_w)
    rows = plane[r0] * (1.0 - wr)[:, None] + plane[r1] * wr[:, None]
    return rows[:, c0] * (1.0 - wc)[None, :] + rows[:, c1] * wc[None, :]


def resize_rgb(rgb: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) uint8 image back to uint8."""
    out = np.empty((out_h, out_w, 3), dtype=np.float64)
    for ch in range(3):
        out[..., ch] = resize_plane(rgb[..., ch].astype(np.float64), out_h, out_w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@dataclass
class ImageRaster:
    """An identified RGB image with cached derived planes."""

    image_id: str
    rgb: np.ndarray  # (H, W, 3) uint8
    _gray: np.ndarray | None = field(default=None, repr=False, compare=False)
    _hsv: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.rgb)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise DataError(
                f"image {self.image_id!r}: expected (H, W, 3) uint8, got "
                f"shape {arr.shape} dtype {arr.dtype}"
            )
        self.rgb = arr

    @property
    def height(self) -> int:
        return int(self.rgb.shape[0])

    @property
    def width(self) -> int:
        return int(self.rgb.shape[1])

    def gray(self) -> np.ndarray:
        if self._gray is None:
            self._gray = rgb_to_gray(self.rgb)
        return self._gray

    def hsv(self) -> np.ndarray:
        if self._hsv is None:
            self._hsv = rgb_to_hsv(self.rgb)
        return self._hsv

    def flipped(self, new_id: str | None = None) -> "ImageRaster":
        """Horizontal mirror; pixel column x maps to width-1-x."""
        return ImageRaster(new_id or self.image_id + "#flip", self.rgb[:, ::-1].copy())

    def scaled(self, scale: float, new_id: str | None = None) -> "ImageRaster":
        out_h = max(1, int(round(self.height * scale)))
        out_w = max(1, int(round(self.width * scale)))
        return ImageRaster(new_id or f"{self.image_id}#s{scale:g}",
                           resize_rgb(self.rgb, out_h, out_w))

    def crop(self, x0: int, y0: int, w: int, h: int, new_id: str) -> "ImageRaster":
        if x0 < 0 or y0 < 0 or x0 + w > self.width or y0 + h > self.height:
            raise DataError(f"crop {x0},{y0},{w},{h} outside image {self.image_id!r}")
        return ImageRaster(new_id, self.rgb[y0:y0 + h, x0:x0 + w].copy())


def load_png(path: str, image_id: str | None = None) -> ImageRaster:
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"image file not found: {path}")
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}")
    return ImageRaster(image_id or str(path), rgb)


def save_png(image: ImageRaster | np.ndarray, path: str) -> None:
    rgb = image.rgb if isinstance(image, ImageRaster) else np.asarray(image, dtype=np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG", compress_level=6)
