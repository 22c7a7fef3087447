"""Localization and segmentation metrics with cumulative error curves."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .render import polygons_from_landmarks, render_label_map


def _category_map(parts) -> dict[int, str]:
    return {p.part_id: p.category for p in parts}


def localization_error(pred, gt, image_width, parts) -> dict[str, float]:
    """Mean landmark distance per part category, normalized by image width.

    Distances are averaged within each category first and divided by the
    width once; parts sharing a category are merged before averaging.
    """
    if image_width <= 0:
        raise DataError(f"image width must be positive, got {image_width}")
    cat = _category_map(parts)
    gt_by_id = {lm.landmark_id: lm for lm in gt}
    pred_by_id = {lm.landmark_id: lm for lm in pred}
    if set(gt_by_id) != set(pred_by_id):
        only_gt = sorted(set(gt_by_id) - set(pred_by_id))
        only_pred = sorted(set(pred_by_id) - set(gt_by_id))
        raise DataError("landmark id mismatch: missing from prediction "
                        f"{only_gt}, unexpected {only_pred}")
    dists: dict[str, list[float]] = {}
    for lid, glm in gt_by_id.items():
        if glm.part_id not in cat:
            raise DataError(f"landmark {lid}: unknown part {glm.part_id}")
        plm = pred_by_id[lid]
        dists.setdefault(cat[glm.part_id], []).append(
            math.hypot(plm.x - glm.x, plm.y - glm.y))
    return {c: float(np.mean(v)) / image_width for c, v in dists.items()}


def segmentation_error(pred_label, gt_label, parts) -> dict[str, float]:
    """1 - IOU per part category over merged-category pixel sets.

    Both sides empty counts as a perfect 0; exactly one side empty as 1.
    """
    pred_label = np.asarray(pred_label)
    gt_label = np.asarray(gt_label)
    if pred_label.shape != gt_label.shape:
        raise DataError("label map shapes differ: "
                        f"{pred_label.shape} vs {gt_label.shape}")
    groups: dict[str, list[int]] = {}
    for p in parts:
        groups.setdefault(p.category, []).append(p.part_id)
    out = {}
    for c, ids in groups.items():
        pm = np.isin(pred_label, ids)
        gm = np.isin(gt_label, ids)
        union = int(np.logical_or(pm, gm).sum())
        if union == 0:
            out[c] = 0.0
        else:
            inter = int(np.logical_and(pm, gm).sum())
            out[c] = 1.0 - inter / union
    return out


def cumulative_curve(errors, xs=None):
    """Empirical CDF of the errors: fraction with error <= x at each sample.

    Default samples run from 0 to the largest error, so the curve ends at 1.
    """
    e = np.sort(np.asarray(list(errors), dtype=np.float64))
    if e.size == 0:
        raise DataError("no errors to build a curve from")
    if xs is None:
        xs = np.linspace(0.0, float(e[-1]), 51)
    xs = np.asarray(xs, dtype=np.float64)
    frac = np.searchsorted(e, xs, side="right") / e.size
    return xs, frac


def gt_label_map(annotated, parts) -> np.ndarray:
    """Rasterize ground-truth part polygons with the inference compositing."""
    return render_label_map(
        polygons_from_landmarks(annotated.landmarks, parts),
        annotated.image.height, annotated.image.width)


@dataclass
class EvalReport:
    localization: dict      # image_id -> category -> normalized error
    segmentation: dict      # image_id -> category -> 1 - IOU
    loc_curves: dict        # category -> (xs, fractions)
    seg_curves: dict
    mean_localization: dict
    mean_segmentation: dict


def evaluate_run(records, parts, curve_xs=None) -> EvalReport:
    """Score a batch of (gt AnnotatedImage, pred landmarks, pred label map).

    A record's label map may be None; it is then rasterized from the
    predicted landmarks at the ground-truth image size.
    """
    loc: dict[str, dict[str, float]] = {}
    seg: dict[str, dict[str, float]] = {}
    for gt, pred_landmarks, pred_label in records:
        img = gt.image
        if pred_label is None:
            pred_label = render_label_map(
                polygons_from_landmarks(pred_landmarks, parts),
                img.height, img.width)
        loc[img.image_id] = localization_error(
            pred_landmarks, gt.landmarks, img.width, parts)
        seg[img.image_id] = segmentation_error(
            pred_label, gt_label_map(gt, parts), parts)

    def collect(per_image):
        cats: dict[str, list[float]] = {}
        for errs in per_image.values():
            for c, v in errs.items():
                cats.setdefault(c, []).append(v)
        curves = {c: cumulative_curve(v, curve_xs) for c, v in cats.items()}
        means = {c: float(np.mean(v)) for c, v in cats.items()}
        return curves, means

    loc_curves, mean_loc = collect(loc)
    seg_curves, mean_seg = collect(seg)
    return EvalReport(loc, seg, loc_curves, seg_curves, mean_loc, mean_seg)
