"""Exact maximization over landmark positions, part levels, and mixtures.

Cross-part edges are resolved with a separable L1 distance transform.
Within-part edges also carry a pairwise appearance-consistency term that
depends on both endpoints' segment pairs, so they take an explicit max over
a bounded deformation window instead.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ._kernels import window_message
from .dataset import LandmarkAnnotation
from .errors import ConfigError, DataError, NumericalError
from .features import hog_batch
from .model import Configuration, MixtureModel, ModelGraph
from .raster import ImageRaster
from .render import polygons_from_landmarks, render_label_map
from .segmentation import SegmentationHierarchy, build_hierarchy, level_proximity

log = logging.getLogger(__name__)

SCALE_STEP = 2.0 ** 0.25
RATIO_LO = 0.4
RATIO_HI = 1.0
MIN_SIDE = 16        # smallest scaled image side worth segmenting
MAX_SCALED_DIM = 2048


@dataclass
class CandidateGrid:
    """Search domain: stride in pixels, optional fixed scales and node masks.

    masks maps node index to a boolean (grid_h, grid_w) array of allowed
    positions; r_w overrides the within-part deformation window radius.
    """

    stride: int = 4
    scales: tuple[float, ...] | None = None
    masks: dict[int, np.ndarray] | None = None
    r_w: float | None = None
    sigma_e: float | None = None  # None: the mixture's patch size

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"grid stride must be >= 1, got {self.stride}")
        if self.r_w is not None and self.r_w <= 0:
            raise ConfigError(f"deformation window must be positive, got {self.r_w}")
        if self.sigma_e is not None and self.sigma_e <= 0:
            raise ConfigError(f"proximity ramp must be positive, got {self.sigma_e}")


@dataclass
class ParseResult:
    image_id: str
    viewpoint: int
    score: float
    scale: float
    config: Configuration                 # positions at the parse scale
    landmarks: list[LandmarkAnnotation]   # mapped back to original pixels
    polygons: list[tuple[int, int, np.ndarray]]
    label_map: np.ndarray
    mixture_scores: dict[int, float]

    def to_json_dict(self) -> dict:
        return {
            "image": self.image_id,
            "viewpoint": self.viewpoint,
            "score": self.score,
            "scale": self.scale,
            "landmarks": [{"id": lm.landmark_id, "x": lm.x, "y": lm.y}
                          for lm in self.landmarks],
            "levels": {str(p): h for p, h in sorted(self.config.H.items())},
            "mixture_scores": {
                str(v): (None if s == float("-inf") else s)
                for v, s in sorted(self.mixture_scores.items())},
        }


# ---------------------------------------------------------------------------
# per-image caches


class ImageContext:
    """Grid-sampled per-image caches shared by all mixtures and DP runs."""

    def __init__(self, image: ImageRaster, hierarchy: SegmentationHierarchy,
                 stride: int):
        if stride < 1:
            raise ConfigError(f"grid stride must be >= 1, got {stride}")
        self.image = image
        self.hierarchy = hierarchy
        self.stride = int(stride)
        self.xs = np.arange(0, image.width, self.stride, dtype=np.int64)
        self.ys = np.arange(0, image.height, self.stride, dtype=np.int64)
        self.shape = (len(self.ys), len(self.xs))
        self._hog: dict[int, np.ndarray] = {}
        self._prox: dict[tuple[int, float], np.ndarray] = {}
        self._pid: dict[int, np.ndarray] = {}

    def hog_grid(self, patch_size: int) -> np.ndarray:
        """(grid_h*grid_w, 324) descriptors, rows in row-major grid order."""
        got = self._hog.get(patch_size)
        if got is None:
            gx, gy = np.meshgrid(self.xs, self.ys)
            locs = np.stack([gx.ravel(), gy.ravel()], axis=1)
            got = hog_batch(self.image, locs, patch_size)
            self._hog[patch_size] = got
        return got

    def proximity_grid(self, level0: int, sigma: float) -> np.ndarray:
        key = (int(level0), float(sigma))
        got = self._prox.get(key)
        if got is None:
            full = level_proximity(self.hierarchy, level0, float(sigma))
            got = np.ascontiguousarray(full[np.ix_(self.ys, self.xs)],
                                       dtype=np.float64)
            self._prox[key] = got
        return got

    def pid_grid(self, level0: int) -> np.ndarray:
        got = self._pid.get(level0)
        if got is None:
            pm = self.hierarchy.levels[level0].pairs.pair_map
            got = np.ascontiguousarray(pm[np.ix_(self.ys, self.xs)],
                                       dtype=np.int32)
            self._pid[level0] = got
        return got


def build_context(image: ImageRaster, stride: int = 4, num_levels: int = 6,
                  seed_cell: int = 8,
                  hierarchy: SegmentationHierarchy | None = None) -> ImageContext:
    if hierarchy is None:
        hierarchy = build_hierarchy(image, num_levels=num_levels,
                                    seed_cell=seed_cell)
    return ImageContext(image, hierarchy, stride)


class ContextStore:
    """LRU cache of ImageContexts keyed by image identity and scale."""

    def __init__(self, stride: int = 4, num_levels: int = 6, seed_cell: int = 8,
                 capacity: int = 64):
        self.stride = int(stride)
        self.num_levels = int(num_levels)
        self.seed_cell = int(seed_cell)
        self.capacity = int(capacity)
        self._cache: OrderedDict = OrderedDict()

    def get(self, image: ImageRaster, scale: float = 1.0) -> ImageContext:
        key = (image.image_id, image.height, image.width,
               round(float(scale), 12))
        got = self._cache.get(key)
        if got is not None:
            self._cache.move_to_end(key)
            return got
        img = image if scale == 1.0 else image.scaled(scale)
        ctx = build_context(img, self.stride, self.num_levels, self.seed_cell)
        self._cache[key] = ctx
        while len(self._cache) > self.capacity:
            self._cache.popitem(last=False)
        return ctx


# ---------------------------------------------------------------------------
# separable L1 distance transform


def _dt_axis(f: np.ndarray, w: float, c: float):
    """1-D max transform along the last axis, with argmax; exact and O(n).

    For x' <= x-c the cost w*(x-c-x') splits into (f+w*x') - w*(x-c); a
    running prefix max of f+w*x' resolves that side, a suffix max of f-w*x'
    the other.  Ties inside a side keep the largest (prefix) or smallest
    (suffix) index; across sides the prefix wins.
    """
    rows, n = f.shape
    idx = np.arange(n, dtype=np.float64)
    pos = np.arange(n)
    up = f + w * idx
    pref = np.maximum.accumulate(up, axis=1)
    parg = np.maximum.accumulate(np.where(up >= pref, pos, 0), axis=1)
    down = (f - w * idx)[:, ::-1]
    sufr = np.maximum.accumulate(down, axis=1)
    sargr = np.maximum.accumulate(np.where(down >= sufr, pos, 0), axis=1)
    suf = sufr[:, ::-1]
    sarg = (n - 1) - sargr[:, ::-1]

    t = idx - c
    lo = np.floor(t).astype(np.int64)
    hi = np.ceil(t).astype(np.int64)
    loc = np.clip(lo, 0, n - 1)
    hic = np.clip(hi, 0, n - 1)
    left = np.where(lo >= 0, pref[:, loc] - w * t, -np.inf)
    right = np.where(hi <= n - 1, suf[:, hic] + w * t, -np.inf)
    out = np.maximum(left, right)
    arg = np.where(left >= right, parg[:, loc], sarg[:, hic])
    return out, arg


def dt_l1(message: np.ndarray, w_d, anchor):
    """Max-convolution with an L1 deformation cost, separable and exact.

    out[y, x] = max over (y', x') of  message[y', x']
                - w_d[0]*|x - x' - anchor[0]| - w_d[1]*|y - y' - anchor[1]|

    Returns (out, arg_y, arg_x) where the arg maps give the maximizing
    source location for every output cell.
    """
    msg = np.asarray(message, dtype=np.float64)
    if msg.ndim != 2:
        raise DataError(f"dt_l1 needs a 2-D map, got shape {msg.shape}")
    wx, wy = float(w_d[0]), float(w_d[1])
    if wx < 0.0 or wy < 0.0:
        raise NumericalError(
            f"deformation weights must be >= 0, got ({wx}, {wy})")
    ax, ay = float(anchor[0]), float(anchor[1])
    m1, argx1 = _dt_axis(msg, wx, ax)
    m2t, argy2 = _dt_axis(np.ascontiguousarray(m1.T), wy, ay)
    out = np.ascontiguousarray(m2t.T)
    argy = np.ascontiguousarray(argy2.T)
    cols = np.broadcast_to(np.arange(msg.shape[1])[None, :], out.shape)
    argx = argx1[argy, cols]
    return out, argy, argx


# ---------------------------------------------------------------------------
# pairwise appearance-consistency weight tables


def _consistency_stack(level) -> np.ndarray:
    """The eight (P, P) chi-square gathers, cached on the level.

    Every within-part edge weights the same gathers, so they are built once
    per level instead of once per edge.
    """
    got = level.consistency_stack
    if got is None:
        s1 = level.pairs.s1.astype(np.int64)
        s2 = level.pairs.s2.astype(np.int64)
        cc, cg = level.chi_color, level.chi_glcm
        a1, a2 = s1[:, None], s2[:, None]
        b1, b2 = s1[None, :], s2[None, :]
        got = np.stack([cc[a1, b1], cg[a1, b1], cc[a1, b2], cg[a1, b2],
                        cc[a2, b1], cg[a2, b1], cc[a2, b2], cg[a2, b2]])
        level.consistency_stack = got
    return got


def sac_weight_table(level, w_A: np.ndarray) -> np.ndarray:
    """W[a, b] = w_A . consistency(pair a, pair b), for all ordered pair ids.

    Row/column 0 are the no-pair sentinel and stay zero.
    """
    g = _consistency_stack(level)
    out = (w_A[0] * g[0] + w_A[1] * g[1] + w_A[2] * g[2] + w_A[3] * g[3]
           + w_A[4] * g[4] + w_A[5] * g[5] + w_A[6] * g[6] + w_A[7] * g[7])
    out[0, :] = 0.0
    out[:, 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# unary responses


def _require_ready(graph: ModelGraph) -> None:
    if graph.patch_size is None:
        raise ConfigError(f"viewpoint {graph.viewpoint}: patch size unset")
    for e in graph.edges:
        if e.anchor_x is None or e.anchor_y is None:
            raise ConfigError(f"viewpoint {graph.viewpoint}: anchors unset "
                              f"on edge ({e.i}, {e.j})")


def unary_response(graph: ModelGraph, image: ImageRaster,
                   grid: CandidateGrid | None = None,
                   hierarchy: SegmentationHierarchy | None = None):
    """Appearance responses on the grid, per node and per (node, level).

    Returns (F, E): F[i] holds w_f.f at every grid point; E[i, h-1] holds
    the level-dependent w_e·e term.
    """
    grid = grid or CandidateGrid()
    _require_ready(graph)
    if hierarchy is None:
        hierarchy = build_hierarchy(image, num_levels=graph.num_levels)
    ctx = ImageContext(image, hierarchy, grid.stride)
    gh, gw = ctx.shape
    hog = ctx.hog_grid(graph.patch_size)
    F = np.stack([(hog @ n.w_f).reshape(gh, gw) for n in graph.nodes])
    lg = min(graph.num_levels, hierarchy.num_levels)
    sigma = float(graph.patch_size)
    eg = np.stack([ctx.proximity_grid(l, sigma) for l in range(lg)])
    E = np.stack([n.w_e * eg for n in graph.nodes])
    return F, E


# ---------------------------------------------------------------------------
# the DP itself


def _tree_order(graph: ModelGraph):
    """Children-first node order plus parent/edge/child adjacency, rooted at 0."""
    V = graph.num_nodes
    adj: list[list[tuple[int, int]]] = [[] for _ in range(V)]
    for t, e in enumerate(graph.edges):
        adj[e.i].append((e.j, t))
        adj[e.j].append((e.i, t))
    parent = [-1] * V
    parent_edge = [-1] * V
    seen = [False] * V
    seen[0] = True
    order = []
    stack = [0]
    while stack:
        u = stack.pop()
        order.append(u)
        for (w, t) in adj[u]:
            if not seen[w]:
                seen[w] = True
                parent[w] = u
                parent_edge[w] = t
                stack.append(w)
    return order[::-1], parent, parent_edge


def _parse_graph(graph: ModelGraph, ctx: ImageContext,
                 masks: dict[int, np.ndarray] | None,
                 r_w_px: float,
                 forced_levels: dict[int, int] | None = None,
                 sigma_e: float | None = None):
    """Exact best (score, L, H) for one mixture on one grid; None if empty."""
    gh, gw = ctx.shape
    if gh < 1 or gw < 1:
        return None
    V = graph.num_nodes
    stride = ctx.stride
    lg = min(graph.num_levels, ctx.hierarchy.num_levels)
    sigma = float(sigma_e) if sigma_e is not None else float(graph.patch_size)
    pids = [n.part_id for n in graph.nodes]

    hog = ctx.hog_grid(graph.patch_size)
    F = np.empty((V, gh, gw), dtype=np.float64)
    for k, n in enumerate(graph.nodes):
        F[k] = (hog @ n.w_f).reshape(gh, gw)
    if masks:
        for k, m in masks.items():
            F[k] = np.where(m, F[k], -np.inf)

    order, parent, parent_edge = _tree_order(graph)
    within_children: list[list[int]] = [[] for _ in range(V)]
    cross_children: list[list[int]] = [[] for _ in range(V)]
    for c in range(V):
        u = parent[c]
        if u < 0:
            continue
        if pids[c] == pids[u]:
            within_children[u].append(c)
        else:
            cross_children[u].append(c)

    prox = [ctx.proximity_grid(l, sigma) for l in range(lg)]
    pid_g = [ctx.pid_grid(l) for l in range(lg)]
    rad_g = float(r_w_px) / stride

    # All within-part edges weight the same consistency stack, so the tables
    # for one level are built in a single broadcast sweep.  The accumulation
    # order matches sac_weight_table term for term.
    within_ts = [t for t, e in enumerate(graph.edges) if pids[e.i] == pids[e.j]]
    wa_mat = (np.stack([graph.edges[t].w_A for t in within_ts])
              if within_ts else None)
    sacw_cache: dict[tuple[int, int], np.ndarray] = {}

    def fill_sacw(level0: int) -> None:
        g = _consistency_stack(ctx.hierarchy.levels[level0])
        tabs = wa_mat[:, 0, None, None] * g[0]
        for k in range(1, 8):
            tabs += wa_mat[:, k, None, None] * g[k]
        tabs[:, 0, :] = 0.0
        tabs[:, :, 0] = 0.0
        for r, t in enumerate(within_ts):
            sacw_cache[(level0, t)] = tabs[r]

    rec_argh: dict[int, np.ndarray] = {}
    rec_win: dict[tuple[int, int], np.ndarray] = {}
    rec_cross: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def part_levels(p: int):
        if forced_levels and p in forced_levels:
            h = forced_levels[p]
            if not 1 <= h <= lg:
                raise ConfigError(f"level {h} for part {p} outside 1..{lg}")
            return [h]
        return range(1, lg + 1)

    def sacw_for(level0: int, t: int, child_is_i: bool) -> np.ndarray:
        tab = sacw_cache.get((level0, t))
        if tab is None:
            fill_sacw(level0)
            tab = sacw_cache[(level0, t)]
        return tab if child_is_i else np.ascontiguousarray(tab.T)

    def do_part(p: int, a: int) -> np.ndarray:
        members = [u for u in order if pids[u] == p]
        cross_msg: dict[int, list[np.ndarray]] = {}
        for u in members:
            for c in cross_children[u]:
                t = parent_edge[c]
                e = graph.edges[t]
                child_table = do_part(pids[c], c)
                # the deformation cost |x_i - x_j - anchor| reads as
                # |delta - anchor| with delta = parent - child only when the
                # parent is node i; otherwise the anchor flips sign
                sgn = 1.0 if c == e.j else -1.0
                m, ay_, ax_ = dt_l1(
                    child_table,
                    (e.w_d[0] * stride, e.w_d[1] * stride),
                    (sgn * e.anchor_x / stride, sgn * e.anchor_y / stride))
                rec_cross[t] = (ay_, ax_)
                cross_msg.setdefault(u, []).append(m)
        base: dict[int, np.ndarray] = {}
        for u in members:
            b = F[u]
            for m in cross_msg.get(u, ()):
                b = b + m
            base[u] = b

        hs = list(part_levels(p))
        tabs = np.empty((len(hs), gh, gw), dtype=np.float64)
        for hi, h in enumerate(hs):
            U = {u: base[u] + graph.nodes[u].w_e * prox[h - 1]
                 for u in members}
            for u in members:
                for c in within_children[u]:
                    t = parent_edge[c]
                    e = graph.edges[t]
                    child_is_i = c == e.i
                    ax = e.anchor_x if child_is_i else -e.anchor_x
                    ay = e.anchor_y if child_is_i else -e.anchor_y
                    out_val = np.empty((gh, gw), dtype=np.float64)
                    out_arg = np.empty((gh, gw), dtype=np.int32)
                    window_message(U[c], pid_g[h - 1],
                                   sacw_for(h - 1, t, child_is_i),
                                   float(e.w_d[0]), float(e.w_d[1]),
                                   float(ax), float(ay), stride,
                                   ax / stride, ay / stride, rad_g,
                                   out_val, out_arg)
                    U[u] = U[u] + out_val
                    rec_win[(h, t)] = out_arg
            tabs[hi] = U[a]

        argh = np.full((gh, gw), hs[0], dtype=np.int32)
        best = tabs[0].copy()
        for hi in range(1, len(hs)):
            better = tabs[hi] > best
            best[better] = tabs[hi][better]
            argh[better] = hs[hi]
        rec_argh[p] = argh
        return best

    root_part = pids[0]
    table = do_part(root_part, 0)
    k = int(np.argmax(table))
    top = float(table.flat[k])
    if top == float("-inf"):
        return None

    flat = np.full(V, -1, dtype=np.int64)
    H: dict[int, int] = {}

    def walk(p: int, a: int, fa: int) -> None:
        flat[a] = fa
        h = int(rec_argh[p].flat[fa])
        H[p] = h
        stack = [a]
        while stack:
            u = stack.pop()
            fu = int(flat[u])
            gy, gx = divmod(fu, gw)
            for c in within_children[u]:
                fc = int(rec_win[(h, parent_edge[c])].flat[fu])
                if fc < 0:
                    raise DataError(
                        "deformation window excludes every allowed position; "
                        "increase r_w or loosen the masks")
                flat[c] = fc
                stack.append(c)
            for c in cross_children[u]:
                ay_, ax_ = rec_cross[parent_edge[c]]
                walk(pids[c], c, int(ay_[gy, gx]) * gw + int(ax_[gy, gx]))

    walk(root_part, 0, k)
    L = [(int(ctx.xs[f % gw]), int(ctx.ys[f // gw])) for f in flat]
    return top + graph.bias, L, H


# ---------------------------------------------------------------------------
# scale handling and the public parse entry points


def nominal_height(graph: ModelGraph) -> float:
    """Model height in pixels: anchor-propagated node spread plus the patch."""
    _require_ready(graph)
    pos = {0: (0.0, 0.0)}
    rev, parent, parent_edge = _tree_order(graph)
    for u in rev[::-1]:  # parents first
        if u == 0:
            continue
        e = graph.edges[parent_edge[u]]
        px, py = pos[parent[u]]
        if u == e.i:
            pos[u] = (px + e.anchor_x, py + e.anchor_y)
        else:
            pos[u] = (px - e.anchor_x, py - e.anchor_y)
    ys = [p[1] for p in pos.values()]
    return (max(ys) - min(ys)) + float(graph.patch_size)


def scale_list(graph: ModelGraph, image_height: int) -> tuple[float, ...]:
    """Scales whose model-height/image-height ratio spans [0.4, 1.0].

    Scales are the in-band points of the fixed lattice SCALE_STEP**k, so
    mixtures with slightly different nominal heights still share scaled
    contexts (the band is wide enough that the lattice always hits it).
    """
    mh = nominal_height(graph)
    if image_height < 1 or mh <= 0:
        return (1.0,)
    lo = mh / (RATIO_HI * image_height)
    hi = mh / (RATIO_LO * image_height)
    step = np.log2(SCALE_STEP)
    k_lo = int(np.ceil(np.log2(lo) / step - 1e-9))
    k_hi = int(np.floor(np.log2(hi) / step + 1e-9))
    out = []
    for k in range(k_lo, k_hi + 1):
        s = float(2.0 ** (k * step))
        if max(s * image_height, 1) <= MAX_SCALED_DIM:
            out.append(s)
    return tuple(out) if out else (1.0,)


def _usable(image: ImageRaster, scale: float) -> bool:
    sh = max(1, round(image.height * scale))
    sw = max(1, round(image.width * scale))
    return min(sh, sw) >= MIN_SIDE and max(sh, sw) <= MAX_SCALED_DIM


def _result_from(model: MixtureModel, image: ImageRaster, score: float,
                 viewpoint: int, scale: float, L, H,
                 mixture_scores: dict[int, float]) -> ParseResult:
    graph = model.graphs[viewpoint]
    landmarks = []
    for k, n in enumerate(graph.nodes):
        x, y = L[k]
        ox = int(round(x / scale)) if scale != 1.0 else int(x)
        oy = int(round(y / scale)) if scale != 1.0 else int(y)
        ox = min(image.width - 1, max(0, ox))
        oy = min(image.height - 1, max(0, oy))
        landmarks.append(LandmarkAnnotation(n.landmark_id, ox, oy,
                                            n.part_id, n.kind, n.ring_order))
    polygons = polygons_from_landmarks(landmarks, model.parts)
    label_map = render_label_map(polygons, image.height, image.width)
    return ParseResult(
        image_id=image.image_id, viewpoint=viewpoint, score=float(score),
        scale=float(scale), config=Configuration(L=L, H=H, v=viewpoint),
        landmarks=landmarks, polygons=polygons, label_map=label_map,
        mixture_scores=mixture_scores)


def parse(model: MixtureModel, image: ImageRaster,
          grid: CandidateGrid | None = None,
          store: ContextStore | None = None) -> ParseResult:
    """Best configuration over every mixture and scale; exact on each grid."""
    grid = grid or CandidateGrid()
    if grid.masks is not None:
        raise ConfigError("parse searches the full grid; "
                          "use constrained_parse for masks")
    vids = model.viewpoint_ids()
    if not vids:
        raise DataError("model has no mixtures")
    max_levels = max(g.num_levels for g in model.graphs.values())
    if store is None:
        store = ContextStore(stride=grid.stride, num_levels=max_levels)
    elif store.stride != grid.stride:
        raise ConfigError(f"context store stride {store.stride} differs from "
                          f"grid stride {grid.stride}")

    best = None
    mixture_scores: dict[int, float] = {}
    for v in vids:
        graph = model.graphs[v]
        _require_ready(graph)
        scales = grid.scales if grid.scales else scale_list(graph, image.height)
        vbest = None
        for s in scales:
            if not _usable(image, s):
                continue
            ctx = store.get(image, s)
            r_w = grid.r_w if grid.r_w is not None else 2.0 * graph.patch_size
            got = _parse_graph(graph, ctx, None, r_w, sigma_e=grid.sigma_e)
            if got is None:
                continue
            sc, L, H = got
            if vbest is None or sc > vbest[0]:
                vbest = (sc, s, L, H)
        if vbest is None:
            mixture_scores[v] = float("-inf")
            continue
        mixture_scores[v] = vbest[0]
        if best is None or vbest[0] > best[0]:
            best = (vbest[0], v, vbest[1], vbest[2], vbest[3])
    if best is None:
        raise DataError(f"no valid configuration for image {image.image_id!r}")
    sc, v, s, L, H = best
    return _result_from(model, image, sc, v, s, L, H, mixture_scores)


def constrained_parse(model: MixtureModel, image: ImageRaster,
                      grid: CandidateGrid, viewpoint: int,
                      ctx: ImageContext | None = None,
                      forced_levels: dict[int, int] | None = None) -> ParseResult:
    """Parse one mixture at scale 1 with per-node position restrictions."""
    if viewpoint not in model.graphs:
        raise ConfigError(f"unknown mixture {viewpoint}")
    graph = model.graphs[viewpoint]
    _require_ready(graph)
    if ctx is None:
        ctx = build_context(image, grid.stride, graph.num_levels)
    elif ctx.stride != grid.stride:
        raise ConfigError(f"context stride {ctx.stride} differs from "
                          f"grid stride {grid.stride}")
    masks = grid.masks
    if masks:
        for k, m in masks.items():
            if not 0 <= k < graph.num_nodes:
                raise ConfigError(f"mask for unknown node {k}")
            if m.shape != ctx.shape or m.dtype != np.bool_:
                raise ConfigError(f"mask for node {k} must be bool "
                                  f"{ctx.shape}, got {m.dtype} {m.shape}")
            if not m.any():
                raise DataError(f"empty mask for node {k}")
    # default to a window covering the whole grid so restriction, not the
    # window bound, decides feasibility
    r_w = grid.r_w if grid.r_w is not None else \
        float(ctx.stride * max(ctx.shape))
    got = _parse_graph(graph, ctx, masks, r_w, forced_levels, grid.sigma_e)
    if got is None:
        raise DataError(f"no valid configuration for image {image.image_id!r}")
    sc, L, H = got
    return _result_from(model, image, sc, viewpoint, 1.0, L, H,
                        {viewpoint: sc})
