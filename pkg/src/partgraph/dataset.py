"""Dataset loading, annotation validation, flip augmentation, window sampling."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .raster import ImageRaster, load_png, save_png

log = logging.getLogger(__name__)

DEFAULT_MIN_SIZE = 80
DEFAULT_C = 0.002

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["parts", "viewpoints", "images"],
    "additionalProperties": False,
    "properties": {
        "meta": {"type": "object"},
        "parts": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "name", "category", "render_priority"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "name": {"type": "string", "minLength": 1},
                    "category": {"type": "string", "minLength": 1},
                    "render_priority": {"type": "integer"},
                },
            },
        },
        "viewpoints": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "landmark_ids", "mirror_viewpoint"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "landmark_ids": {
                        "type": "array",
                        "minItems": 1,
                        "items": {"type": "integer", "minimum": 0},
                    },
                    "mirror_viewpoint": {"type": "integer", "minimum": 0},
                },
            },
        },
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["path", "viewpoint", "landmarks"],
                "additionalProperties": False,
                "properties": {
                    "path": {"type": "string", "minLength": 1},
                    "viewpoint": {"type": "integer", "minimum": 0},
                    "landmarks": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["id", "x", "y", "part", "kind", "ring_order"],
                            "additionalProperties": False,
                            "properties": {
                                "id": {"type": "integer", "minimum": 0},
                                "x": {"type": "integer", "minimum": 0},
                                "y": {"type": "integer", "minimum": 0},
                                "part": {"type": "integer", "minimum": 0},
                                "kind": {"enum": ["contour", "inner"]},
                                "ring_order": {"type": "integer", "minimum": 0},
                            },
                        },
                    },
                },
            },
        },
    },
}


@dataclass
class PartDef:
    part_id: int
    name: str
    category: str
    render_priority: int


@dataclass
class ViewpointDef:
    viewpoint_id: int
    landmark_ids: tuple[int, ...]
    mirror_viewpoint: int


@dataclass
class LandmarkAnnotation:
    landmark_id: int
    x: int
    y: int
    part_id: int
    kind: str
    ring_order: int


@dataclass
class AnnotatedImage:
    image: ImageRaster
    viewpoint: int
    landmarks: list[LandmarkAnnotation]
    flipped: bool = False


@dataclass
class TrainingSet:
    """Positives carry annotations; negatives are plain windows, label -1."""

    parts: list[PartDef]
    viewpoints: dict[int, ViewpointDef]
    positives: list[AnnotatedImage]
    negatives: list[ImageRaster] = field(default_factory=list)
    C: float = DEFAULT_C

    def __post_init__(self) -> None:
        if not self.C > 0:
            raise ConfigError(f"regularization constant must be positive, got {self.C}")


def _build_parts(raw_parts: list[dict]) -> list[PartDef]:
    ids = sorted(p["id"] for p in raw_parts)
    if ids != list(range(len(raw_parts))):
        raise DataError(f"part ids must be dense 0..{len(raw_parts) - 1}, got {ids}")
    prios = [p["render_priority"] for p in raw_parts]
    if len(set(prios)) != len(prios):
        raise DataError("render priorities must be unique across parts")
    ordered = sorted(raw_parts, key=lambda p: p["id"])
    return [PartDef(p["id"], p["name"], p["category"], p["render_priority"]) for p in ordered]


def _build_viewpoints(raw_vps: list[dict]) -> dict[int, ViewpointDef]:
    vps: dict[int, ViewpointDef] = {}
    for v in raw_vps:
        vid = v["id"]
        if vid in vps:
            raise DataError(f"duplicate viewpoint id {vid}")
        lids = v["landmark_ids"]
        if len(set(lids)) != len(lids):
            raise DataError(f"viewpoint {vid}: duplicate landmark ids")
        vps[vid] = ViewpointDef(vid, tuple(lids), v["mirror_viewpoint"])
    for vid, vdef in vps.items():
        m = vdef.mirror_viewpoint
        if m not in vps:
            raise DataError(f"viewpoint {vid}: mirror viewpoint {m} not defined")
        if vps[m].mirror_viewpoint != vid:
            raise DataError(f"viewpoint mirror map must be an involution ({vid} -> {m} -> {vps[m].mirror_viewpoint})")
    return vps


def _check_landmarks(entry_path: str, lms: list[LandmarkAnnotation], vdef: ViewpointDef,
                     image: ImageRaster, parts: list[PartDef]) -> None:
    want = len(vdef.landmark_ids)
    if len(lms) != want:
        raise DataError(
            f"image {entry_path!r}: {len(lms)} landmarks where viewpoint "
            f"{vdef.viewpoint_id} requires {want}")
    got = sorted(lm.landmark_id for lm in lms)
    if got != sorted(vdef.landmark_ids):
        raise DataError(f"image {entry_path!r}: landmark ids do not match viewpoint "
                        f"{vdef.viewpoint_id} definition")
    part_ids = {p.part_id for p in parts}
    ring_seen: dict[int, set[int]] = {}
    for lm in lms:
        if not (0 <= lm.x < image.width and 0 <= lm.y < image.height):
            raise SchemaError(f"image {entry_path!r}: landmark {lm.landmark_id} at "
                              f"({lm.x}, {lm.y}) outside {image.width}x{image.height}")
        if lm.part_id not in part_ids:
            raise DataError(f"image {entry_path!r}: landmark {lm.landmark_id} "
                            f"references unknown part {lm.part_id}")
        orders = ring_seen.setdefault(lm.part_id, set())
        if lm.ring_order in orders:
            raise DataError(f"image {entry_path!r}: duplicate ring_order "
                            f"{lm.ring_order} within part {lm.part_id}")
        orders.add(lm.ring_order)


def load_manifest(manifest_path: str) -> dict:
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(raw, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"manifest {manifest_path}: {exc.message} at {exc.json_path}") from None
    return raw


def load_dataset(manifest_path: str, *, min_size: int = DEFAULT_MIN_SIZE,
                 C: float = DEFAULT_C) -> TrainingSet:
    """Load and validate an annotation manifest into a TrainingSet.

    Images smaller than min_size in either dimension are skipped with a
    warning.  Negatives start empty; use sample_negative_windows to fill
    them from background images.
    """
    raw = load_manifest(manifest_path)
    parts = _build_parts(raw["parts"])
    viewpoints = _build_viewpoints(raw["viewpoints"])
    base = os.path.dirname(os.path.abspath(manifest_path))

    positives: list[AnnotatedImage] = []
    for entry in raw["images"]:
        rel = entry["path"]
        image = load_png(os.path.join(base, rel), image_id=rel)
        if image.width < min_size or image.height < min_size:
            log.warning("skipping %s: %dx%d below minimum size %d",
                        rel, image.width, image.height, min_size)
            continue
        vp = entry["viewpoint"]
        if vp not in viewpoints:
            raise DataError(f"image {rel!r}: viewpoint {vp} not defined in manifest")
        lms = [LandmarkAnnotation(d["id"], d["x"], d["y"], d["part"], d["kind"],
                                  d["ring_order"]) for d in entry["landmarks"]]
        _check_landmarks(rel, lms, viewpoints[vp], image, parts)
        positives.append(AnnotatedImage(image, vp, lms))
    return TrainingSet(parts, viewpoints, positives, [], C)


def flip_augment(tset: TrainingSet, landmark_mirrors: dict[int, dict[int, int]],
                 part_mirror: dict[int, int] | None = None) -> TrainingSet:
    """Return a new set holding the originals plus horizontal mirror copies.

    landmark_mirrors maps, per source viewpoint, each landmark id to its
    counterpart in the mirror viewpoint.  Mirrored x is width-1-x, so a
    double application restores coordinates exactly.
    """
    out = list(tset.positives)
    for ann in tset.positives:
        vp = ann.viewpoint
        vdef = tset.viewpoints.get(vp)
        if vdef is None:
            raise ConfigError(f"viewpoint {vp} has no definition")
        mvp = vdef.mirror_viewpoint
        if mvp not in tset.viewpoints:
            raise ConfigError(f"viewpoint {vp}: mirror viewpoint {mvp} not defined")
        mmap = landmark_mirrors.get(vp)
        if mmap is None:
            raise ConfigError(f"no landmark mirror map for viewpoint {vp}")
        w = ann.image.width
        mirrored = []
        for lm in ann.landmarks:
            try:
                mid = mmap[lm.landmark_id]
            except KeyError:
                raise ConfigError(f"viewpoint {vp}: no mirror entry for landmark "
                                  f"{lm.landmark_id}") from None
            pid = lm.part_id
            if part_mirror is not None:
                pid = part_mirror.get(pid, pid)
            mirrored.append(LandmarkAnnotation(mid, w - 1 - lm.x, lm.y, pid,
                                               lm.kind, lm.ring_order))
        got = sorted(m.landmark_id for m in mirrored)
        if got != sorted(tset.viewpoints[mvp].landmark_ids):
            raise ConfigError(f"mirror map for viewpoint {vp} does not cover "
                              f"viewpoint {mvp}'s landmark set")
        out.append(AnnotatedImage(ann.image.flipped(), mvp, mirrored,
                                  flipped=not ann.flipped))
    return TrainingSet(tset.parts, tset.viewpoints, out, list(tset.negatives), tset.C)


def sample_negative_windows(images: list[ImageRaster], count: int,
                            sizes: list[tuple[int, int]], seed: int) -> list[ImageRaster]:
    """Crop `count` windows from background images, sizes drawn from `sizes`.

    Deterministic for a fixed seed and input order.
    """
    if count < 1:
        raise ConfigError(f"window count must be >= 1, got {count}")
    if not images:
        raise DataError("no background images to sample from")
    if not sizes:
        raise ConfigError("no window sizes given")
    sizes = [(int(w), int(h)) for w, h in sizes]
    fits = {s: [im for im in images if im.width >= s[0] and im.height >= s[1]]
            for s in sizes}
    for (w, h), pool in fits.items():
        if not pool:
            raise DataError(f"no background image can hold a {w}x{h} window")

    rng = np.random.default_rng(seed)
    windows = []
    for i in range(count):
        w, h = sizes[int(rng.integers(len(sizes)))]
        pool = fits[(w, h)]
        src = pool[int(rng.integers(len(pool)))]
        x0 = int(rng.integers(src.width - w + 1))
        y0 = int(rng.integers(src.height - h + 1))
        windows.append(src.crop(x0, y0, w, h, f"{src.image_id}#n{i}"))
    return windows


def _safe_name(image_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", image_id)


def save_dataset(tset: TrainingSet, out_dir: str,
                 manifest_name: str = "manifest.json") -> str:
    """Write images as PNGs plus a manifest; returns the manifest path.

    PNG is lossless, so load_dataset(save_dataset(s)) reproduces pixels and
    annotations bit-exactly.
    """
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    entries = []
    used: set[str] = set()
    for ann in tset.positives:
        stem = _safe_name(ann.image.image_id)
        name = stem
        k = 1
        while name in used:
            k += 1
            name = f"{stem}_{k}"
        used.add(name)
        rel = os.path.join("images", name + ".png")
        save_png(ann.image, os.path.join(out_dir, rel))
        entries.append({
            "path": rel,
            "viewpoint": ann.viewpoint,
            "landmarks": [{"id": lm.landmark_id, "x": lm.x, "y": lm.y,
                           "part": lm.part_id, "kind": lm.kind,
                           "ring_order": lm.ring_order} for lm in ann.landmarks],
        })
    manifest = {
        "meta": {"schema": "partgraph/dataset", "version": 1},
        "parts": [{"id": p.part_id, "name": p.name, "category": p.category,
                   "render_priority": p.render_priority} for p in tset.parts],
        "viewpoints": [{"id": v.viewpoint_id, "landmark_ids": list(v.landmark_ids),
                        "mirror_viewpoint": v.mirror_viewpoint}
                       for v in tset.viewpoints.values()],
        "images": entries,
    }
    path = os.path.join(out_dir, manifest_name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    if tset.negatives:
        neg_dir = os.path.join(out_dir, "negatives")
        os.makedirs(neg_dir, exist_ok=True)
        for i, neg in enumerate(tset.negatives):
            save_png(neg, os.path.join(neg_dir, f"{_safe_name(neg.image_id)}_{i}.png"))
    return path
