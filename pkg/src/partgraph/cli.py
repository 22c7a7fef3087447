"""Command-line entry points.

Every command reads its settings from defaults, an optional TOML file, and
explicit flags, in that precedence order, then runs one module pipeline.
Errors exit with 2 (config), 3 (data), or 4 (numerical) and a structured
message on stderr.
"""
from __future__ import annotations

import csv
import functools
import glob
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import click
import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .dataset import (LandmarkAnnotation, TrainingSet, flip_augment,
                      load_dataset, save_dataset)
from .errors import ConfigError, DataError, NumericalError
from .evaluate import evaluate_run
from .inference import CandidateGrid, parse
from .learning import TrainHyper, train
from .model import ModelGraph, load_model, save_model
from .raster import load_png, save_png
from .render import render_overlay, polygons_from_landmarks
from .segmentation import build_hierarchy
from . import synth

log = logging.getLogger(__name__)


def _fail(code: int, kind: str, exc: Exception) -> None:
    click.echo(json.dumps({"error": kind, "message": str(exc)}), err=True)
    sys.exit(code)


def _command(fn):
    @functools.wraps(fn)
    def wrapped(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(2, "config", exc)
        except DataError as exc:
            _fail(3, "data", exc)
        except NumericalError as exc:
            _fail(4, "numerical", exc)
    return wrapped


def _cfg(config_path: str | None, flags: dict) -> RunConfig:
    overrides = {k: v for k, v in flags.items() if v is not None}
    return load_config(config_path, overrides)


def _common(fn):
    fn = click.option("--threads", type=int, default=None,
                      help="Worker threads; PARTGRAPH_THREADS caps it.")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--workdir", default=None,
                      help="Base directory all paths are relative to.")(fn)
    fn = click.option("--config", "config_path", default=None,
                      help="TOML config file; flags override it.")(fn)
    return fn


def _echo_doc(doc: dict) -> None:
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


def _write_doc(doc: dict, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__)
def main():
    """Landmark-based part parsing pipelines."""
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# data commands


@main.command()
@_common
@click.option("--manifest", default=None, help="Annotation manifest to load.")
@click.option("--out", default=None, help="Write a normalized copy here.")
@_command
def ingest(config_path, out, **flags):
    """Validate a dataset manifest and report its contents."""
    flags["out"] = out
    cfg = _cfg(config_path, flags)
    tset = load_dataset(cfg.path("manifest"), C=cfg.C)
    per_vp: dict[int, int] = {}
    for ann in tset.positives:
        per_vp[ann.viewpoint] = per_vp.get(ann.viewpoint, 0) + 1
    doc = {
        "schema": "partgraph/ingest-summary", "version": 1,
        "images": len(tset.positives),
        "parts": [p.name for p in tset.parts],
        "viewpoints": {str(v): per_vp.get(v, 0) for v in sorted(tset.viewpoints)},
    }
    if out:
        doc["copied_to"] = save_dataset(tset, cfg.path("out"))
    _echo_doc(doc)


@main.command("synth")
@_common
@click.option("--out", default=None, help="Dataset output directory.")
@click.option("--count", type=int, default=None)
@click.option("--noise", type=float, default=None)
@click.option("--mix", default=None, help='Viewpoint mix, e.g. "0:5,3:5".')
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--negative-count", type=int, default=None)
@click.option("--car-scale", type=int, default=None)
@_command
def synth_cmd(config_path, **flags):
    """Generate a synthetic car dataset plus a model skeleton."""
    cfg = _cfg(config_path, flags)
    tset = synth.generate_dataset(
        cfg.count, cfg.seed, cfg.noise, cfg.mix_table(),
        cfg.width, cfg.height, cfg.negative_count,
        (cfg.negative_width, cfg.negative_height), C=cfg.C,
        car_scale=cfg.car_scale)
    out_dir = cfg.path("out")
    manifest = save_dataset(tset, out_dir)
    mix = cfg.mix_table() or {0: (cfg.count + 1) // 2, 3: cfg.count // 2}
    vdefs = synth.car_viewpoint_defs()
    # include each bin's mirror so --flip has a graph to land on
    vps = sorted(set(mix) | {vdefs[v].mirror_viewpoint for v in mix})
    skeleton = synth.car_model_skeleton(
        viewpoints=tuple(vps),
        patch_size=cfg.patch_size or 16, num_levels=cfg.num_levels)
    skel_path = os.path.join(out_dir, "skeleton.json")
    save_model(skeleton, skel_path)
    _echo_doc({
        "schema": "partgraph/synth-summary", "version": 1,
        "manifest": manifest, "skeleton": skel_path,
        "positives": len(tset.positives), "negatives": len(tset.negatives),
    })


def _load_negatives(dir_path: str) -> list:
    files = sorted(glob.glob(os.path.join(dir_path, "*.png")))
    if not files:
        raise DataError(f"no negative .png files in {dir_path}")
    return [load_png(p, image_id=os.path.basename(p)) for p in files]


# ---------------------------------------------------------------------------
# train


@main.command("train")
@_common
@click.option("--manifest", default=None)
@click.option("--negatives-dir", default=None,
              help="Directory of background PNGs for hard mining.")
@click.option("--skeleton", default=None, help="Untrained model JSON.")
@click.option("--model", default=None, help="Output model path.")
@click.option("--C", "C", type=float, default=None)
@click.option("--max-iters", type=int, default=None)
@click.option("--mining-rounds", type=int, default=None)
@click.option("--max-epochs", type=int, default=None)
@click.option("--patch-size", type=int, default=None)
@click.option("--stride", type=int, default=None)
@click.option("--flip/--no-flip", default=None,
              help="Add horizontally mirrored positives.")
@_command
def train_cmd(config_path, **flags):
    """Fit model weights on an annotated dataset."""
    cfg = _cfg(config_path, flags)
    tset = load_dataset(cfg.path("manifest"), C=cfg.C)
    negatives = _load_negatives(cfg.path("negatives_dir"))
    skeleton = load_model(cfg.path("skeleton"))
    if cfg.flip:
        mirrors = {v: g.landmark_mirror
                   for v, g in skeleton.graphs.items()
                   if g.landmark_mirror is not None}
        tset = flip_augment(tset, mirrors)
    present = {ann.viewpoint for ann in tset.positives}
    missing = present - set(skeleton.graphs)
    if missing:
        raise DataError(f"no skeleton graph for viewpoints {sorted(missing)}")
    for v in sorted(set(skeleton.graphs) - present):
        log.info("dropping mixture %d: no positives in this dataset", v)
        del skeleton.graphs[v]
    if cfg.patch_size:
        for v, g in list(skeleton.graphs.items()):
            skeleton.graphs[v] = ModelGraph(
                g.viewpoint, g.mirror_viewpoint, g.nodes, g.edges, g.bias,
                cfg.patch_size, g.num_levels, g.landmark_mirror)
    tset = TrainingSet(tset.parts, tset.viewpoints, tset.positives,
                       negatives, cfg.C)
    hyper = TrainHyper(C=cfg.C, tol_outer=cfg.tol_outer,
                       tol_inner=cfg.tol_inner, max_iters=cfg.max_iters,
                       mining_rounds=cfg.mining_rounds,
                       max_epochs=cfg.max_epochs, stride=cfg.stride)
    model, state = train(tset, skeleton, hyper, seed=cfg.seed)
    model_path = cfg.path("model")
    save_model(model, model_path)
    _echo_doc({
        "schema": "partgraph/train-summary", "version": 1,
        "model": model_path, "iterations": state.iteration,
        "objective_history": state.history,
        "mixtures": sorted(model.graphs),
    })


# ---------------------------------------------------------------------------
# parse


def _grid_from(cfg: RunConfig) -> CandidateGrid:
    return CandidateGrid(stride=cfg.stride, scales=cfg.scale_tuple(),
                         r_w=cfg.r_w or None, sigma_e=cfg.sigma_e or None)


@main.command("parse")
@_common
@click.option("--model", default=None)
@click.option("--image", default=None)
@click.option("--out", default=None, help="Also write the JSON here.")
@click.option("--overlay", default=None, help="Write an overlay PNG here.")
@click.option("--stride", type=int, default=None)
@click.option("--scales", default=None, help='Fixed scales, e.g. "0.5,1.0".')
@_command
def parse_cmd(config_path, out, overlay, **flags):
    """Parse one image and print the result as JSON."""
    cfg = _cfg(config_path, flags)
    model = load_model(cfg.path("model"))
    path = cfg.path("image")
    image = load_png(path, image_id=os.path.basename(path))
    res = parse(model, image, _grid_from(cfg))
    doc = {"schema": "partgraph/parse", "version": 1, **res.to_json_dict()}
    _echo_doc(doc)
    if out:
        _write_doc(doc, os.path.join(cfg.workdir, out))
    if overlay:
        img = render_overlay(image,
                             [(lm.x, lm.y, lm.part_id) for lm in res.landmarks],
                             res.polygons, alpha=cfg.alpha)
        save_png(img, os.path.join(cfg.workdir, overlay))


# ---------------------------------------------------------------------------
# eval


def _parse_records(model, positives, grid, threads):
    def one(ann):
        res = parse(model, ann.image, grid)
        return (ann, res.landmarks, res.label_map)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, positives))
    return [one(ann) for ann in positives]


@main.command("eval")
@_common
@click.option("--manifest", default=None, help="Ground-truth manifest.")
@click.option("--model", default=None, help="Parse with this model.")
@click.option("--pred", default=None,
              help="Or compare against this prediction manifest.")
@click.option("--out", default=None, help="Directory for CSV/JSON reports.")
@click.option("--stride", type=int, default=None)
@click.option("--scales", default=None)
@_command
def eval_cmd(config_path, **flags):
    """Evaluate predictions against ground truth."""
    if flags.get("model") and flags.get("pred"):
        raise ConfigError("eval takes either --model or --pred, not both")
    cfg = _cfg(config_path, flags)
    gt = load_dataset(cfg.path("manifest"), C=cfg.C)
    if cfg.pred:
        pred = load_dataset(cfg.path("pred"), C=cfg.C)
        by_id = {ann.image.image_id: ann for ann in pred.positives}
        records = []
        for ann in gt.positives:
            got = by_id.get(ann.image.image_id)
            if got is None:
                raise DataError(f"prediction manifest is missing "
                                f"{ann.image.image_id!r}")
            records.append((ann, got.landmarks, None))
    else:
        model = load_model(cfg.path("model"))
        records = _parse_records(model, gt.positives, _grid_from(cfg),
                                 cfg.resolve_threads())
    rep = evaluate_run(records, gt.parts)
    overall_loc = float(np.mean([v for d in rep.localization.values()
                                 for v in d.values()]))
    overall_seg = float(np.mean([v for d in rep.segmentation.values()
                                 for v in d.values()]))
    doc = {
        "schema": "partgraph/eval-summary", "version": 1,
        "images": len(records),
        "mean_localization": rep.mean_localization,
        "mean_segmentation": rep.mean_segmentation,
        "overall_localization": overall_loc,
        "overall_segmentation": overall_seg,
    }
    if cfg.out:
        out_dir = cfg.path("out")
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "per_image.csv"), "w",
                  newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "category", "localization", "segmentation"])
            for img_id in sorted(rep.localization):
                loc, seg = rep.localization[img_id], rep.segmentation[img_id]
                for cat in sorted(loc):
                    w.writerow([img_id, cat, f"{loc[cat]:.6f}",
                                f"{seg[cat]:.6f}"])
        with open(os.path.join(out_dir, "curves.csv"), "w",
                  newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "category", "threshold", "fraction"])
            for metric, curves in (("localization", rep.loc_curves),
                                   ("segmentation", rep.seg_curves)):
                for cat in sorted(curves):
                    xs, fr = curves[cat]
                    for x, f in zip(xs, fr):
                        w.writerow([metric, cat, f"{x:.6f}", f"{f:.6f}"])
        _write_doc(doc, os.path.join(out_dir, "summary.json"))
    _echo_doc(doc)


# ---------------------------------------------------------------------------
# render / dump-segmentation


@main.command("render")
@_common
@click.option("--image", default=None)
@click.option("--parse", "parse_json", default=None,
              help="Overlay this parse result JSON.")
@click.option("--manifest", default=None,
              help="Or overlay ground truth from this manifest.")
@click.option("--index", type=int, default=0,
              help="Image index within the manifest.")
@click.option("--model", default=None,
              help="Model giving landmark part ids for --parse mode.")
@click.option("--out", default=None, help="Output PNG path.")
@_command
def render_cmd(config_path, parse_json, index, out, **flags):
    """Write an overlay PNG for a parse result or a GT annotation."""
    if not out:
        raise ConfigError("render needs --out")
    flags["out"] = out
    cfg = _cfg(config_path, flags)
    if bool(parse_json) == bool(cfg.manifest):
        raise ConfigError("render needs exactly one of --parse or --manifest")
    if parse_json:
        model = load_model(cfg.path("model"))
        path = cfg.path("image")
        image = load_png(path, image_id=os.path.basename(path))
        with open(os.path.join(cfg.workdir, parse_json), encoding="utf-8") as fh:
            doc = json.load(fh)
        graph = model.graphs.get(doc.get("viewpoint"))
        if graph is None:
            raise DataError(f"model has no mixture {doc.get('viewpoint')!r}")
        node = {n.landmark_id: n for n in graph.nodes}
        lms = []
        for d in doc["landmarks"]:
            n = node.get(d["id"])
            if n is None:
                raise DataError(f"parse landmark {d['id']} not in the model")
            lms.append(LandmarkAnnotation(d["id"], d["x"], d["y"], n.part_id,
                                          n.kind, n.ring_order))
    else:
        tset = load_dataset(cfg.path("manifest"), C=cfg.C)
        if not 0 <= index < len(tset.positives):
            raise ConfigError(f"index {index} outside the manifest's "
                              f"{len(tset.positives)} images")
        ann = tset.positives[index]
        image, lms = ann.image, ann.landmarks
        model = None
    parts = model.parts if parse_json else tset.parts
    overlay = render_overlay(image, [(lm.x, lm.y, lm.part_id) for lm in lms],
                             polygons_from_landmarks(lms, parts),
                             alpha=cfg.alpha)
    out_path = cfg.path("out")
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    save_png(overlay, out_path)
    _echo_doc({"schema": "partgraph/render-summary", "version": 1,
               "out": out_path})


def _label_colors(labels: np.ndarray) -> np.ndarray:
    # deterministic hash palette so adjacent ids rarely collide
    ids = labels.astype(np.uint64) + 1
    mixed = (ids * np.uint64(2654435761)) & np.uint64(0xFFFFFF)
    rgb = np.empty((*labels.shape, 3), dtype=np.uint8)
    rgb[..., 0] = (mixed >> np.uint64(16)) & np.uint64(255)
    rgb[..., 1] = (mixed >> np.uint64(8)) & np.uint64(255)
    rgb[..., 2] = mixed & np.uint64(255)
    return rgb


@main.command("dump-segmentation")
@_common
@click.option("--image", default=None)
@click.option("--num-levels", type=int, default=None)
@click.option("--out", default=None, help="Output directory.")
@_command
def dump_segmentation(config_path, **flags):
    """Write each hierarchy level's labels and boundaries as PNGs."""
    cfg = _cfg(config_path, flags)
    path = cfg.path("image")
    image = load_png(path, image_id=os.path.basename(path))
    hier = build_hierarchy(image, num_levels=cfg.num_levels)
    out_dir = cfg.path("out")
    os.makedirs(out_dir, exist_ok=True)
    levels = []
    for i, lv in enumerate(hier.levels):
        save_png(_label_colors(lv.labels),
                 os.path.join(out_dir, f"level_{i + 1}_labels.png"))
        save_png(np.repeat(lv.boundary[..., None], 3, axis=2)
                 .astype(np.uint8) * 255,
                 os.path.join(out_dir, f"level_{i + 1}_boundary.png"))
        levels.append({"level": i + 1, "segments": lv.n_segments})
    doc = {"schema": "partgraph/segmentation-summary", "version": 1,
           "image": image.image_id, "levels": levels}
    _write_doc(doc, os.path.join(out_dir, "levels.json"))
    _echo_doc(doc)


if __name__ == "__main__":
    main()
