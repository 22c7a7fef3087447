"""CCCP training: alternate latent completion on positives with hinge
minimization over mixture weights, mining hard negatives as we go.

The hinge objective treats each example's feature vector as fixed inside one
convex step; positives get theirs from constrained parses over the overlap
masks, negatives from full parses cached when they score above -1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import AnnotatedImage, TrainingSet
from .errors import ConfigError, DataError, NumericalError
from .features import hog_at, percentile_patch_size
from .inference import (CandidateGrid, ContextStore, ImageContext,
                        constrained_parse, parse)
from .model import MixtureModel, feature_map_mixture, with_anchors

log = logging.getLogger(__name__)

W_D_FLOOR = 1e-4
DIVERGENCE_CAP = 1e12


@dataclass
class TrainHyper:
    C: float = 0.002
    tol_outer: float = 1e-4      # relative CCCP improvement to keep going
    tol_inner: float = 1e-3      # relative per-epoch improvement inside a round
    max_iters: int = 10
    mining_rounds: int = 5
    neg_cache_cap: int = 2000
    max_epochs: int = 120        # per mining round
    t0: float = 10.0             # step-size damping offset
    hard_threshold: float = -1.0
    overlap: float = 0.6
    stride: int = 4
    seed_cell: int = 8
    init_negatives: int = 24     # random patches per node for the init classifier

    def __post_init__(self):
        if self.C < 0:
            raise ConfigError(f"C must be >= 0, got {self.C}")
        if not 0 < self.overlap <= 1:
            raise ConfigError(f"overlap must be in (0, 1], got {self.overlap}")
        if self.max_iters < 1 or self.mining_rounds < 1:
            raise ConfigError("iteration counts must be >= 1")


@dataclass
class Example:
    viewpoint: int
    label: float             # +1 or -1
    phi: np.ndarray          # one mixture block's feature vector
    source: str
    score: float = 0.0       # parse score when mined (negatives only)


@dataclass
class TrainState:
    weights: dict[int, np.ndarray]
    iteration: int = 0
    latents: dict[str, tuple[list, dict]] = field(default_factory=dict)
    neg_cache: list[Example] = field(default_factory=list)
    mined_keys: set = field(default_factory=set)
    history: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# latent handling


def latent_masks(positive: AnnotatedImage, graph, ctx: ImageContext,
                 overlap: float = 0.6) -> dict[int, np.ndarray]:
    """Allowed grid positions per node: patch boxes overlapping the annotated
    box by at least the overlap fraction.  An annotation whose neighborhood
    misses the grid entirely snaps to the nearest grid point."""
    a = float(graph.patch_size)
    need = overlap * a * a
    by_id = {lm.landmark_id: lm for lm in positive.landmarks}
    masks = {}
    for k, node in enumerate(graph.nodes):
        lm = by_id.get(node.landmark_id)
        if lm is None:
            raise DataError(f"image {positive.image.image_id!r}: no landmark "
                            f"{node.landmark_id} for viewpoint {graph.viewpoint}")
        dx = np.abs(ctx.xs[None, :] - lm.x)
        dy = np.abs(ctx.ys[:, None] - lm.y)
        m = (dx < a) & (dy < a) & ((a - dx) * (a - dy) >= need)
        if not m.any():
            iy = int(np.argmin(np.abs(ctx.ys - lm.y)))
            ix = int(np.argmin(np.abs(ctx.xs - lm.x)))
            m[iy, ix] = True
            log.warning("image %s: landmark %d at (%d, %d) has no grid box "
                        "with %.0f%% overlap, snapping to (%d, %d)",
                        positive.image.image_id, node.landmark_id, lm.x, lm.y,
                        100 * overlap, int(ctx.xs[ix]), int(ctx.ys[iy]))
        masks[k] = m
    return masks


def _mask_window_radius(graph, masks, ctx: ImageContext) -> float:
    """Smallest within-part window radius (px) that reaches every allowed
    child position from every allowed parent position."""
    boxes = {}
    for k, m in masks.items():
        ys, xs = np.nonzero(m)
        boxes[k] = (ctx.xs[xs.min()], ctx.xs[xs.max()],
                    ctx.ys[ys.min()], ctx.ys[ys.max()])
    rad = float(ctx.stride)
    for e in graph.edges:
        if e.w_A is None:
            continue
        for c, p, sgn in ((e.i, e.j, 1.0), (e.j, e.i, -1.0)):
            cx0, cx1, cy0, cy1 = boxes[c]
            px0, px1, py0, py1 = boxes[p]
            ax, ay = sgn * e.anchor_x, sgn * e.anchor_y
            rad = max(rad,
                      abs(cx1 - px0 - ax), abs(cx0 - px1 - ax),
                      abs(cy1 - py0 - ay), abs(cy0 - py1 - ay))
    return rad + ctx.stride


def latent_completion(model: MixtureModel, positives: list[AnnotatedImage],
                      store: ContextStore, hyper: TrainHyper):
    """Best (L, H) per positive under the current weights, restricted to the
    overlap masks; returns {image_id: (L, H)} plus per-positive features."""
    latents: dict[str, tuple[list, dict]] = {}
    examples: list[Example] = []
    for pos in positives:
        if pos.viewpoint not in model.graphs:
            raise DataError(f"image {pos.image.image_id!r}: viewpoint "
                            f"{pos.viewpoint} has no mixture")
        graph = model.graphs[pos.viewpoint]
        ctx = store.get(pos.image)
        masks = latent_masks(pos, graph, ctx, hyper.overlap)
        grid = CandidateGrid(stride=hyper.stride, masks=masks,
                             r_w=_mask_window_radius(graph, masks, ctx))
        res = constrained_parse(model, pos.image, grid, pos.viewpoint, ctx=ctx)
        latents[pos.image.image_id] = (res.config.L, dict(res.config.H))
        phi = feature_map_mixture(graph, ctx.image, ctx.hierarchy,
                                  res.config.L, res.config.H)
        examples.append(Example(pos.viewpoint, 1.0, phi, pos.image.image_id))
    return latents, examples


# ---------------------------------------------------------------------------
# hinge objective and its subgradient (fixed feature vectors)


def objective(weights: dict[int, np.ndarray], examples: list[Example],
              C: float) -> float:
    J = 0.5 * sum(float(w @ w) for w in weights.values())
    for ex in examples:
        margin = ex.label * float(weights[ex.viewpoint] @ ex.phi)
        J += C * max(0.0, 1.0 - margin)
    return J


def subgradient(weights: dict[int, np.ndarray], examples: list[Example],
                C: float) -> dict[int, np.ndarray]:
    g = {v: w.copy() for v, w in weights.items()}
    for ex in examples:
        margin = ex.label * float(weights[ex.viewpoint] @ ex.phi)
        if margin < 1.0:
            g[ex.viewpoint] -= C * ex.label * ex.phi
    return g


def _project(graph, w: np.ndarray) -> None:
    lo = graph.wd_offset
    hi = lo + 2 * len(graph.edges)
    np.maximum(w[lo:hi], W_D_FLOOR, out=w[lo:hi])


def _sgd_round(model: MixtureModel, weights: dict[int, np.ndarray],
               examples: list[Example], hyper: TrainHyper,
               rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Deterministic Pegasos-style epochs on the cached example set; returns
    the best iterate seen.  Mixtures with no examples are left untouched."""
    if hyper.C == 0.0:
        return {v: np.zeros_like(w) for v, w in weights.items()}
    per_v: dict[int, list[Example]] = {}
    for ex in examples:
        per_v.setdefault(ex.viewpoint, []).append(ex)
    w = {v: x.copy() for v, x in weights.items()}
    lam = {v: 1.0 / (hyper.C * len(exs)) for v, exs in per_v.items()}
    steps = {v: 0 for v in per_v}
    best_J = objective(w, examples, hyper.C)
    best = {v: x.copy() for v, x in w.items()}
    prev_J = best_J
    order = np.arange(len(examples))
    for _ in range(hyper.max_epochs):
        rng.shuffle(order)
        for idx in order:
            ex = examples[idx]
            v = ex.viewpoint
            steps[v] += 1
            eta = 1.0 / (lam[v] * (hyper.t0 + steps[v]))
            wv = w[v]
            margin = ex.label * float(wv @ ex.phi)
            wv *= 1.0 - eta * lam[v]
            if margin < 1.0:
                wv += eta * ex.label * ex.phi
            _project(model.graphs[v], wv)
        J = objective(w, examples, hyper.C)
        if not np.isfinite(J) or J > DIVERGENCE_CAP:
            raise NumericalError(
                f"objective diverged to {J:.3e} "
                f"(examples={len(examples)}, C={hyper.C})")
        if J < best_J:
            best_J = J
            best = {v: x.copy() for v, x in w.items()}
        if abs(prev_J - J) < hyper.tol_inner * max(1.0, abs(prev_J)):
            break
        prev_J = J
    return best


def _mine_negatives(model: MixtureModel, negatives, store: ContextStore,
                    hyper: TrainHyper, cache: list[Example],
                    seen: set) -> int:
    grid = CandidateGrid(stride=hyper.stride, scales=(1.0,))
    added = 0
    for img in negatives:
        try:
            res = parse(model, img, grid, store=store)
        except DataError:
            continue  # window too small for the grid
        if res.score <= hyper.hard_threshold:
            continue
        key = (img.image_id, res.viewpoint, tuple(res.config.L),
               tuple(sorted(res.config.H.items())))
        if key in seen:
            continue
        seen.add(key)
        ctx = store.get(img)
        phi = feature_map_mixture(model.graphs[res.viewpoint], ctx.image,
                                  ctx.hierarchy, res.config.L, res.config.H)
        cache.append(Example(res.viewpoint, -1.0, phi, img.image_id,
                             score=res.score))
        added += 1
    if len(cache) > hyper.neg_cache_cap:
        cache.sort(key=lambda ex: -ex.score)
        del cache[hyper.neg_cache_cap:]
    return added


def convex_step(model: MixtureModel, pos_examples: list[Example],
                negatives, store: ContextStore, hyper: TrainHyper,
                rng: np.random.Generator, state: TrainState) -> None:
    """Minimize the fixed-latent upper bound in place, mining negatives."""
    weights = state.weights
    for rnd in range(hyper.mining_rounds):
        _apply_weights(model, weights)
        added = _mine_negatives(model, negatives, store, hyper,
                                state.neg_cache, state.mined_keys)
        examples = pos_examples + state.neg_cache
        before = objective(weights, examples, hyper.C)
        new_w = _sgd_round(model, weights, examples, hyper, rng)
        after = objective(new_w, examples, hyper.C)
        if after <= before:
            state.weights = new_w
            weights = new_w
        improved = before - after
        if added == 0 and improved < hyper.tol_inner * max(1.0, abs(before)):
            break
    _apply_weights(model, state.weights)


def _apply_weights(model: MixtureModel, weights: dict[int, np.ndarray]) -> None:
    for v, w in weights.items():
        model.graphs[v] = model.graphs[v].with_weights(w)


# ---------------------------------------------------------------------------
# initialization


def init_weights(model: MixtureModel, training: TrainingSet,
                 rng: np.random.Generator,
                 hyper: TrainHyper) -> dict[int, np.ndarray]:
    """Starting point: per-landmark mean-difference appearance classifiers,
    small positive edge weights, SAC and bias at zero."""
    negatives = training.negatives
    weights = {}
    for v, graph in model.graphs.items():
        w = graph.pack()
        w[:] = 0.0
        for k, node in enumerate(graph.nodes):
            pos_feats = []
            for ann in training.positives:
                if ann.viewpoint != v:
                    continue
                lm = {m.landmark_id: m for m in ann.landmarks}[node.landmark_id]
                pos_feats.append(hog_at(ann.image, (lm.x, lm.y),
                                        graph.patch_size))
            neg_feats = []
            for _ in range(hyper.init_negatives):
                img = negatives[int(rng.integers(0, len(negatives)))]
                x = int(rng.integers(0, img.width))
                y = int(rng.integers(0, img.height))
                neg_feats.append(hog_at(img, (x, y), graph.patch_size))
            diff = np.mean(pos_feats, axis=0) - np.mean(neg_feats, axis=0)
            w[k * len(diff):(k + 1) * len(diff)] = diff
        ne = len(graph.nodes)
        w[graph.we_offset:graph.we_offset + ne] = 0.1
        w[graph.wd_offset:graph.wd_offset + 2 * len(graph.edges)] = 0.05
        weights[v] = w
    return weights


# ---------------------------------------------------------------------------
# the outer CCCP loop


def _exact_objective(model: MixtureModel, weights: dict[int, np.ndarray],
                     pos_examples: list[Example], negatives,
                     store: ContextStore, hyper: TrainHyper) -> float:
    """J with positives at their completed latents and negatives at their
    true inner max (full parse under the given weights)."""
    _apply_weights(model, weights)
    J = 0.5 * sum(float(w @ w) for w in weights.values())
    for ex in pos_examples:
        sc = float(weights[ex.viewpoint] @ ex.phi)
        J += hyper.C * max(0.0, 1.0 - sc)
    grid = CandidateGrid(stride=hyper.stride, scales=(1.0,))
    for img in negatives:
        try:
            res = parse(model, img, grid, store=store)
        except DataError:
            continue
        J += hyper.C * max(0.0, 1.0 + res.score)
    return J


def train(training: TrainingSet, model: MixtureModel,
          hyper: TrainHyper | None = None, seed: int = 0):
    """CCCP loop; returns the trained model and its TrainState history."""
    hyper = hyper or TrainHyper(C=training.C)
    if not training.negatives:
        raise DataError("training needs negative images")
    by_v: dict[int, list[AnnotatedImage]] = {}
    for ann in training.positives:
        by_v.setdefault(ann.viewpoint, []).append(ann)
    for v in model.graphs:
        if not by_v.get(v):
            raise DataError(f"empty viewpoint bin {v}: no positives")

    rng = np.random.default_rng(seed)
    for v, graph in list(model.graphs.items()):
        if graph.patch_size is None:
            graph.patch_size = percentile_patch_size(training, v)
        model.graphs[v] = with_anchors(graph, training.positives)

    max_levels = max(g.num_levels for g in model.graphs.values())
    store = ContextStore(stride=hyper.stride, num_levels=max_levels,
                         seed_cell=hyper.seed_cell,
                         capacity=len(training.positives)
                         + len(training.negatives) + 8)

    state = TrainState(weights=init_weights(model, training, rng, hyper))
    _apply_weights(model, state.weights)

    prev_J = None
    positives = training.positives
    for it in range(hyper.max_iters):
        state.iteration = it + 1
        latents, pos_examples = latent_completion(model, positives, store,
                                                  hyper)
        state.latents = latents
        baseline = _exact_objective(model, state.weights, pos_examples,
                                    training.negatives, store, hyper)
        snapshot = {v: w.copy() for v, w in state.weights.items()}
        convex_step(model, pos_examples, training.negatives, store, hyper,
                    rng, state)
        J = _exact_objective(model, state.weights, pos_examples,
                             training.negatives, store, hyper)
        if J > baseline:
            # the mined approximation went uphill on the true bound; keep
            # the previous iterate
            state.weights = snapshot
            _apply_weights(model, state.weights)
            J = baseline
        if not np.isfinite(J) or J > DIVERGENCE_CAP:
            raise NumericalError(f"CCCP objective diverged to {J:.3e} at "
                                 f"iteration {state.iteration}")
        state.history.append(J)
        if prev_J is not None and prev_J - J < hyper.tol_outer * max(1.0, abs(prev_J)):
            break
        prev_J = J
    _apply_weights(model, state.weights)
    return model, state
