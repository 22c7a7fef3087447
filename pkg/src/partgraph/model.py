"""Mixture-of-trees model: graph structure, parameters, feature map, score.

One tree per viewpoint. The score of a configuration (positions L, per-part
levels H, mixture v) is linear in the parameters, so every mixture packs into
one flat weight vector and the feature map fills exactly that mixture's
slots. Slot order per mixture: node HOG blocks, node edge-proximity scalars,
edge deformation pairs, within-part appearance-consistency 8-blocks, bias.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .dataset import AnnotatedImage, PartDef
from .errors import ConfigError, DataError
from .features import HOG_DIM, hog_at, hog_batch
from .raster import ImageRaster

log = logging.getLogger(__name__)
from .segmentation import SegmentationHierarchy, level_proximity, sac_vector

SAC_DIM = 8


@dataclass
class NodeParam:
    landmark_id: int
    part_id: int
    w_f: np.ndarray  # (HOG_DIM,)
    w_e: float
    # silhouette metadata so parses can be rasterized into part polygons
    ring_order: int = 0
    kind: str = "contour"


@dataclass
class EdgeParam:
    i: int
    j: int
    anchor_x: float | None
    anchor_y: float | None
    w_d: np.ndarray            # (2,) nonnegative after training
    w_A: np.ndarray | None     # (8,) on within-part edges only


@dataclass
class Configuration:
    """Positions L per node, level H per part (1-based), mixture id v."""

    L: list[tuple[int, int]]
    H: dict[int, int]
    v: int


class ModelGraph:
    """One viewpoint's tree. Validates structure on construction."""

    def __init__(self, viewpoint: int, mirror_viewpoint: int,
                 nodes: list[NodeParam], edges: list[EdgeParam], bias: float,
                 patch_size: int | None, num_levels: int,
                 landmark_mirror: dict[int, int] | None = None):
        self.viewpoint = viewpoint
        self.mirror_viewpoint = mirror_viewpoint
        self.nodes = nodes
        self.edges = edges
        self.bias = float(bias)
        self.patch_size = patch_size
        self.num_levels = num_levels
        self.landmark_mirror = dict(landmark_mirror or {})
        self._validate()
        # parts in first-appearance node order; inference iterates this
        seen: dict[int, None] = {}
        for n in nodes:
            seen.setdefault(n.part_id, None)
        self.parts_present: tuple[int, ...] = tuple(seen)
        self.within_edges: tuple[int, ...] = tuple(
            t for t, e in enumerate(edges)
            if nodes[e.i].part_id == nodes[e.j].part_id)
        self.cross_edges: tuple[int, ...] = tuple(
            t for t in range(len(edges)) if t not in set(self.within_edges))

    def _validate(self) -> None:
        V = len(self.nodes)
        if V == 0:
            raise DataError(f"viewpoint {self.viewpoint}: model has no nodes")
        lids = [n.landmark_id for n in self.nodes]
        if len(set(lids)) != V:
            raise DataError(f"viewpoint {self.viewpoint}: duplicate landmark ids")
        if len(self.edges) != V - 1:
            raise DataError(f"viewpoint {self.viewpoint}: {len(self.edges)} edges "
                            f"for {V} nodes, a tree needs {V - 1}")
        seen_pairs = set()
        adj: list[list[int]] = [[] for _ in range(V)]
        for e in self.edges:
            if not (0 <= e.i < V and 0 <= e.j < V) or e.i == e.j:
                raise DataError(f"viewpoint {self.viewpoint}: bad edge "
                                f"({e.i}, {e.j})")
            key = (min(e.i, e.j), max(e.i, e.j))
            if key in seen_pairs:
                raise DataError(f"viewpoint {self.viewpoint}: duplicate edge {key}")
            seen_pairs.add(key)
            adj[e.i].append(e.j)
            adj[e.j].append(e.i)
            within = self.nodes[e.i].part_id == self.nodes[e.j].part_id
            if within and e.w_A is None:
                raise DataError(f"viewpoint {self.viewpoint}: within-part edge "
                                f"{key} has no appearance weights")
            if not within and e.w_A is not None:
                raise DataError(f"viewpoint {self.viewpoint}: cross-part edge "
                                f"{key} must not carry appearance weights")
        if V > 1 and self._reached(range(V), adj, start=0) != V:
            raise DataError(f"viewpoint {self.viewpoint}: edge set is not connected")
        # each part must induce a connected subtree or per-part level
        # maximization is ill-posed
        by_part: dict[int, list[int]] = {}
        for idx, n in enumerate(self.nodes):
            by_part.setdefault(n.part_id, []).append(idx)
        for pid, members in by_part.items():
            mset = set(members)
            padj: list[list[int]] = [[] for _ in range(V)]
            for e in self.edges:
                if e.i in mset and e.j in mset:
                    padj[e.i].append(e.j)
                    padj[e.j].append(e.i)
            if self._reached(members, padj, start=members[0]) != len(members):
                raise DataError(f"viewpoint {self.viewpoint}: part {pid} does "
                                "not form a connected subgraph")
        for n in self.nodes:
            w_f = np.asarray(n.w_f, dtype=np.float64)
            if w_f.shape != (HOG_DIM,) or not np.all(np.isfinite(w_f)):
                raise DataError(f"viewpoint {self.viewpoint}: landmark "
                                f"{n.landmark_id}: bad appearance weights")
            n.w_f = w_f
            if not math.isfinite(n.w_e):
                raise DataError(f"viewpoint {self.viewpoint}: non-finite w_e")
            if n.kind not in ("contour", "inner"):
                raise DataError(f"viewpoint {self.viewpoint}: landmark "
                                f"{n.landmark_id}: kind {n.kind!r}")
        for e in self.edges:
            w_d = np.asarray(e.w_d, dtype=np.float64)
            if w_d.shape != (2,) or not np.all(np.isfinite(w_d)):
                raise DataError(f"viewpoint {self.viewpoint}: bad deformation "
                                f"weights on edge ({e.i}, {e.j})")
            e.w_d = w_d
            if e.w_A is not None:
                w_A = np.asarray(e.w_A, dtype=np.float64)
                if w_A.shape != (SAC_DIM,) or not np.all(np.isfinite(w_A)):
                    raise DataError(f"viewpoint {self.viewpoint}: bad appearance "
                                    f"weights on edge ({e.i}, {e.j})")
                e.w_A = w_A
            for a in (e.anchor_x, e.anchor_y):
                if a is not None and not math.isfinite(a):
                    raise DataError(f"viewpoint {self.viewpoint}: non-finite anchor")
        if not math.isfinite(self.bias):
            raise DataError(f"viewpoint {self.viewpoint}: non-finite bias")
        if self.patch_size is not None and self.patch_size < 8:
            raise DataError(f"viewpoint {self.viewpoint}: patch size "
                            f"{self.patch_size} below 8")
        if self.num_levels < 1:
            raise DataError(f"viewpoint {self.viewpoint}: num_levels must be >= 1")

    @staticmethod
    def _reached(members, adj, start) -> int:
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def dim(self) -> int:
        V, E = len(self.nodes), len(self.edges)
        return V * (HOG_DIM + 1) + E * 2 + len(self.within_edges) * SAC_DIM + 1

    # slot offsets inside this mixture's block
    @property
    def we_offset(self) -> int:
        return len(self.nodes) * HOG_DIM

    @property
    def wd_offset(self) -> int:
        return self.we_offset + len(self.nodes)

    @property
    def wa_offset(self) -> int:
        return self.wd_offset + 2 * len(self.edges)

    def pack(self) -> np.ndarray:
        w = np.zeros(self.dim)
        V = len(self.nodes)
        for k, n in enumerate(self.nodes):
            w[k * HOG_DIM:(k + 1) * HOG_DIM] = n.w_f
            w[self.we_offset + k] = n.w_e
        for t, e in enumerate(self.edges):
            w[self.wd_offset + 2 * t: self.wd_offset + 2 * t + 2] = e.w_d
        for t, eidx in enumerate(self.within_edges):
            off = self.wa_offset + SAC_DIM * t
            w[off:off + SAC_DIM] = self.edges[eidx].w_A
        w[-1] = self.bias
        return w

    def with_weights(self, w: np.ndarray) -> "ModelGraph":
        if w.shape != (self.dim,):
            raise DataError(f"viewpoint {self.viewpoint}: weight vector length "
                            f"{w.shape} does not match model dim {self.dim}")
        nodes = [NodeParam(n.landmark_id, n.part_id,
                           w[k * HOG_DIM:(k + 1) * HOG_DIM].copy(),
                           float(w[self.we_offset + k]),
                           n.ring_order, n.kind)
                 for k, n in enumerate(self.nodes)]
        edges = []
        wa_pos = {eidx: t for t, eidx in enumerate(self.within_edges)}
        for t, e in enumerate(self.edges):
            w_d = w[self.wd_offset + 2 * t: self.wd_offset + 2 * t + 2].copy()
            w_A = None
            if t in wa_pos:
                off = self.wa_offset + SAC_DIM * wa_pos[t]
                w_A = w[off:off + SAC_DIM].copy()
            edges.append(EdgeParam(e.i, e.j, e.anchor_x, e.anchor_y, w_d, w_A))
        return ModelGraph(self.viewpoint, self.mirror_viewpoint, nodes, edges,
                          float(w[-1]), self.patch_size, self.num_levels,
                          self.landmark_mirror)


@dataclass
class MixtureModel:
    parts: list[PartDef]
    graphs: dict[int, ModelGraph]

    def viewpoint_ids(self) -> list[int]:
        return sorted(self.graphs)

    @property
    def landmark_mirrors(self) -> dict[int, dict[int, int]]:
        return {v: g.landmark_mirror for v, g in self.graphs.items()}


def slot_offsets(model: MixtureModel) -> dict[int, tuple[int, int]]:
    """Per-viewpoint (start, length) inside the packed weight vector."""
    out = {}
    pos = 0
    for v in model.viewpoint_ids():
        d = model.graphs[v].dim
        out[v] = (pos, d)
        pos += d
    return out


def total_dim(model: MixtureModel) -> int:
    return sum(g.dim for g in model.graphs.values())


def pack_params(model: MixtureModel) -> np.ndarray:
    return np.concatenate([model.graphs[v].pack() for v in model.viewpoint_ids()])


def unpack_params(model: MixtureModel, w: np.ndarray) -> MixtureModel:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (total_dim(model),):
        raise DataError(f"weight vector length {w.shape} does not match model "
                        f"dim {total_dim(model)}")
    graphs = {}
    for v, (start, d) in slot_offsets(model).items():
        graphs[v] = model.graphs[v].with_weights(w[start:start + d])
    return MixtureModel(list(model.parts), graphs)


def _check_config(graph: ModelGraph, image: ImageRaster,
                  hier: SegmentationHierarchy, L, H) -> None:
    if len(L) != len(graph.nodes):
        raise ConfigError(f"{len(L)} positions for {len(graph.nodes)} nodes")
    if set(H) != set(graph.parts_present):
        raise ConfigError(f"level map keys {sorted(H)} do not match parts "
                          f"{sorted(graph.parts_present)}")
    top = min(graph.num_levels, hier.num_levels)
    for pid, h in H.items():
        if not 1 <= h <= top:
            raise ConfigError(f"part {pid}: level {h} outside 1..{top}")
    for k, (x, y) in enumerate(L):
        if not (0 <= x < image.width and 0 <= y < image.height):
            raise ConfigError(f"node {k} at ({x}, {y}) outside "
                              f"{image.width}x{image.height} image")
    if graph.patch_size is None:
        raise ConfigError(f"viewpoint {graph.viewpoint}: patch size not set")
    for e in graph.edges:
        if e.anchor_x is None or e.anchor_y is None:
            raise ConfigError(f"viewpoint {graph.viewpoint}: anchors not set")


def feature_map_mixture(graph: ModelGraph, image: ImageRaster,
                        hier: SegmentationHierarchy, L, H) -> np.ndarray:
    """Feature vector for one mixture's slot block; score there is w_v . phi."""
    _check_config(graph, image, hier, L, H)
    V = len(graph.nodes)
    phi = np.zeros(graph.dim)
    locs = np.asarray([(int(x), int(y)) for x, y in L], dtype=np.int64)
    phi[:V * HOG_DIM] = hog_batch(image, locs, graph.patch_size).reshape(-1)
    sigma = float(graph.patch_size)
    for k, node in enumerate(graph.nodes):
        em = level_proximity(hier, H[node.part_id] - 1, sigma)
        x, y = L[k]
        phi[graph.we_offset + k] = em[y, x]
    for t, e in enumerate(graph.edges):
        xi, yi = L[e.i]
        xj, yj = L[e.j]
        off = graph.wd_offset + 2 * t
        phi[off] = -abs(xi - xj - e.anchor_x)
        phi[off + 1] = -abs(yi - yj - e.anchor_y)
    for t, eidx in enumerate(graph.within_edges):
        e = graph.edges[eidx]
        lv = hier.levels[H[graph.nodes[e.i].part_id] - 1]
        xi, yi = L[e.i]
        xj, yj = L[e.j]
        pid_i = int(lv.pairs.pair_map[yi, xi])
        pid_j = int(lv.pairs.pair_map[yj, xj])
        off = graph.wa_offset + SAC_DIM * t
        phi[off:off + SAC_DIM] = sac_vector(lv, pid_i, pid_j)
    phi[-1] = 1.0
    return phi


def feature_map(model: MixtureModel, image: ImageRaster,
                hier: SegmentationHierarchy, config: Configuration) -> np.ndarray:
    """Full packed feature vector; nonzero only in mixture v's block."""
    if config.v not in model.graphs:
        raise ConfigError(f"unknown mixture {config.v}")
    phi = np.zeros(total_dim(model))
    start, d = slot_offsets(model)[config.v]
    phi[start:start + d] = feature_map_mixture(model.graphs[config.v], image,
                                               hier, config.L, config.H)
    return phi


def score(model: MixtureModel, image: ImageRaster, hier: SegmentationHierarchy,
          config: Configuration) -> float:
    """Direct term-by-term evaluation; equals pack_params(model) . feature_map."""
    if config.v not in model.graphs:
        raise ConfigError(f"unknown mixture {config.v}")
    g = model.graphs[config.v]
    _check_config(g, image, hier, config.L, config.H)
    total = g.bias
    sigma = float(g.patch_size)
    for k, node in enumerate(g.nodes):
        x, y = config.L[k]
        total += float(node.w_f @ hog_at(image, (int(x), int(y)), g.patch_size))
        em = level_proximity(hier, config.H[node.part_id] - 1, sigma)
        total += node.w_e * float(em[y, x])
    for t, e in enumerate(g.edges):
        xi, yi = config.L[e.i]
        xj, yj = config.L[e.j]
        total += float(e.w_d[0]) * -abs(xi - xj - e.anchor_x)
        total += float(e.w_d[1]) * -abs(yi - yj - e.anchor_y)
        if e.w_A is not None:
            lv = hier.levels[config.H[g.nodes[e.i].part_id] - 1]
            pid_i = int(lv.pairs.pair_map[yi, xi])
            pid_j = int(lv.pairs.pair_map[yj, xj])
            total += float(e.w_A @ sac_vector(lv, pid_i, pid_j))
    return float(total)


def with_anchors(graph: ModelGraph, positives: list[AnnotatedImage]) -> ModelGraph:
    """Set each edge's anchor to the mean landmark displacement over positives."""
    subset = [p for p in positives if p.viewpoint == graph.viewpoint]
    if not subset:
        raise DataError(f"viewpoint {graph.viewpoint}: no positives to "
                        "estimate anchors from")
    lid = [n.landmark_id for n in graph.nodes]
    edges = []
    for e in graph.edges:
        dxs, dys = [], []
        for ann in subset:
            by_id = {lm.landmark_id: lm for lm in ann.landmarks}
            try:
                li, lj = by_id[lid[e.i]], by_id[lid[e.j]]
            except KeyError as exc:
                raise DataError(f"image {ann.image.image_id!r}: missing "
                                f"landmark {exc} for viewpoint "
                                f"{graph.viewpoint}") from None
            dxs.append(li.x - lj.x)
            dys.append(li.y - lj.y)
        edges.append(EdgeParam(e.i, e.j, float(np.mean(dxs)), float(np.mean(dys)),
                               e.w_d.copy(),
                               None if e.w_A is None else e.w_A.copy()))
    return ModelGraph(graph.viewpoint, graph.mirror_viewpoint, graph.nodes,
                      edges, graph.bias, graph.patch_size, graph.num_levels,
                      graph.landmark_mirror)


# model files keep floats as decimal strings (repr round-trips exactly)

def _enc(x: float) -> str:
    return repr(float(x))


def _enc_vec(v: np.ndarray) -> list[str]:
    return [_enc(x) for x in np.asarray(v, dtype=np.float64)]


def _dec(x, what: str) -> float:
    try:
        val = float(x)
    except (TypeError, ValueError):
        raise DataError(f"{what}: bad float {x!r}") from None
    if not math.isfinite(val):
        raise DataError(f"{what}: non-finite value {x!r}")
    return val


def _dec_vec(v, n: int, what: str) -> np.ndarray:
    if not isinstance(v, list) or len(v) != n:
        raise DataError(f"{what}: expected {n} values")
    return np.asarray([_dec(x, what) for x in v], dtype=np.float64)


def model_to_dict(model: MixtureModel) -> dict:
    from . import MODEL_FORMAT_VERSION
    mixtures = []
    for v in model.viewpoint_ids():
        g = model.graphs[v]
        mixtures.append({
            "viewpoint": g.viewpoint,
            "mirror_viewpoint": g.mirror_viewpoint,
            "landmark_mirror": {str(k): val for k, val in
                                sorted(g.landmark_mirror.items())},
            "patch_size": g.patch_size,
            "num_levels": g.num_levels,
            "bias": _enc(g.bias),
            "nodes": [{"landmark_id": n.landmark_id, "part": n.part_id,
                       "ring_order": n.ring_order, "kind": n.kind,
                       "w_e": _enc(n.w_e), "w_f": _enc_vec(n.w_f)}
                      for n in g.nodes],
            "edges": [{"i": e.i, "j": e.j,
                       "anchor": (None if e.anchor_x is None else
                                  [_enc(e.anchor_x), _enc(e.anchor_y)]),
                       "w_d": _enc_vec(e.w_d),
                       "w_A": None if e.w_A is None else _enc_vec(e.w_A)}
                      for e in g.edges],
        })
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "parts": [{"id": p.part_id, "name": p.name, "category": p.category,
                   "render_priority": p.render_priority} for p in model.parts],
        "mixtures": mixtures,
    }


def model_from_dict(raw: dict, source: str = "model") -> MixtureModel:
    from . import MODEL_FORMAT_VERSION
    if not isinstance(raw, dict):
        raise DataError(f"{source}: expected a JSON object")
    ver = raw.get("format_version")
    if ver != MODEL_FORMAT_VERSION:
        raise DataError(f"{source}: format version {ver!r}, expected "
                        f"{MODEL_FORMAT_VERSION!r}")
    try:
        parts = [PartDef(p["id"], p["name"], p["category"], p["render_priority"])
                 for p in raw["parts"]]
        raw_mix = raw["mixtures"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{source}: missing field {exc}") from None
    graphs: dict[int, ModelGraph] = {}
    for m in raw_mix:
        try:
            v = m["viewpoint"]
            nodes = []
            for nd in m["nodes"]:
                w_f = (np.zeros(HOG_DIM) if nd.get("w_f") is None else
                       _dec_vec(nd["w_f"], HOG_DIM, f"{source}: w_f"))
                nodes.append(NodeParam(nd["landmark_id"], nd["part"], w_f,
                                       _dec(nd.get("w_e", 0.0), f"{source}: w_e"),
                                       int(nd.get("ring_order", 0)),
                                       str(nd.get("kind", "contour"))))
            edges = []
            for ed in m["edges"]:
                i, j = ed["i"], ed["j"]
                within = (0 <= i < len(nodes) and 0 <= j < len(nodes)
                          and nodes[i].part_id == nodes[j].part_id)
                anchor = ed.get("anchor")
                ax = ay = None
                if anchor is not None:
                    ax = _dec(anchor[0], f"{source}: anchor")
                    ay = _dec(anchor[1], f"{source}: anchor")
                w_d = (np.zeros(2) if ed.get("w_d") is None else
                       _dec_vec(ed["w_d"], 2, f"{source}: w_d"))
                if ed.get("w_A") is None:
                    w_A = np.zeros(SAC_DIM) if within else None
                else:
                    w_A = _dec_vec(ed["w_A"], SAC_DIM, f"{source}: w_A")
                edges.append(EdgeParam(i, j, ax, ay, w_d, w_A))
            mirror = {int(k): int(val)
                      for k, val in (m.get("landmark_mirror") or {}).items()}
            graphs[v] = ModelGraph(v, m["mirror_viewpoint"], nodes, edges,
                                   _dec(m.get("bias", 0.0), f"{source}: bias"),
                                   m.get("patch_size"), m["num_levels"], mirror)
        except (KeyError, TypeError) as exc:
            raise DataError(f"{source}: malformed mixture entry ({exc})") from None
    if not graphs:
        raise DataError(f"{source}: no mixtures")
    for v, g in graphs.items():
        # a bin whose mirror was never trained still parses; only flip
        # augmentation needs the counterpart
        if g.mirror_viewpoint != v and g.mirror_viewpoint not in graphs:
            log.warning("%s: viewpoint %d mirrors absent viewpoint %d",
                        source, v, g.mirror_viewpoint)
    return MixtureModel(parts, graphs)


def save_model(model: MixtureModel, path: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path: str) -> MixtureModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"model file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from None
    return model_from_dict(raw, source=path)
