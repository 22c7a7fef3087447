"""Brute-force references shared by the inference tests and the acceptance
suite.  Maximization here is exhaustive enumeration over broadcast tensors;
only the raw term values (descriptor responses, proximity maps, chi-square
tables) are taken from the library.
"""

import itertools

import numpy as np

from partgraph.dataset import PartDef
from partgraph.model import HOG_DIM, EdgeParam, ModelGraph, NodeParam
from partgraph.segmentation import sac_vector

TWO_PARTS = [PartDef(0, "front", "front", 0), PartDef(1, "back", "back", 1)]


def random_tiny_graph(rng, num_nodes, zero_sac=False):
    """Random two-part tree on num_nodes nodes, patch 8, three levels."""
    split = max(1, num_nodes // 2)
    nodes, edges = [], []
    for k in range(num_nodes):
        part = 0 if k < split else 1
        nodes.append(NodeParam(k, part, rng.normal(size=HOG_DIM) * 0.05,
                               float(rng.normal()) * 0.5))
    for k in range(1, num_nodes):
        if k < split:
            par = int(rng.integers(0, k))
        elif k == split:
            par = int(rng.integers(0, split))
        else:
            par = int(rng.integers(split, k))
        i, j = (k, par) if rng.random() < 0.5 else (par, k)
        within = nodes[i].part_id == nodes[j].part_id
        w_A = None
        if within:
            w_A = np.zeros(8) if zero_sac else rng.normal(size=8) * 0.3
        edges.append(EdgeParam(i, j, float(rng.integers(-6, 7)),
                               float(rng.integers(-6, 7)),
                               np.abs(rng.normal(size=2)) * 0.2 + 0.01, w_A))
    return ModelGraph(0, 0, nodes, edges, float(rng.normal()),
                      8, 3, {k: k for k in range(num_nodes)})


def sac_position_tables(graph, ctx):
    """Per within-edge, per level: w_A-weighted consistency between every
    ordered pair of grid positions, built one sac_vector call at a time."""
    gh, gw = ctx.shape
    lg = min(graph.num_levels, ctx.hierarchy.num_levels)
    pid_flat = [ctx.pid_grid(l).ravel() for l in range(lg)]
    out = {}
    for t, e in enumerate(graph.edges):
        if e.w_A is None:
            continue
        per_level = []
        for l in range(lg):
            lv = ctx.hierarchy.levels[l]
            npair = len(lv.pairs.s1)
            M = np.empty((npair, npair))
            for a in range(npair):
                for b in range(npair):
                    M[a, b] = float(e.w_A @ sac_vector(lv, a, b))
            per_level.append(M[np.ix_(pid_flat[l], pid_flat[l])])
        out[t] = per_level
    return out


def enumeration_best(graph, ctx, allowed):
    """Exhaustive max of the score over allowed positions and all levels.

    allowed: per node, a 1-D array of permitted flat grid indices.
    """
    gh, gw = ctx.shape
    n_pos = gh * gw
    V = graph.num_nodes
    lg = min(graph.num_levels, ctx.hierarchy.num_levels)
    sigma = float(graph.patch_size)
    fi = np.arange(n_pos)
    X = ctx.xs[fi % gw].astype(np.float64)
    Y = ctx.ys[fi // gw].astype(np.float64)

    hog = ctx.hog_grid(graph.patch_size)
    unary = [hog @ n.w_f for n in graph.nodes]
    e_flat = [ctx.proximity_grid(l, sigma).ravel() for l in range(lg)]
    deform = []
    for e in graph.edges:
        dx = X[:, None] - X[None, :] - e.anchor_x
        dy = Y[:, None] - Y[None, :] - e.anchor_y
        deform.append(-e.w_d[0] * np.abs(dx) - e.w_d[1] * np.abs(dy))
    sac = sac_position_tables(graph, ctx)

    pids = [n.part_id for n in graph.nodes]
    parts = sorted(set(pids))
    shape = [len(a) for a in allowed]
    best = -np.inf
    for combo in itertools.product(range(1, lg + 1), repeat=len(parts)):
        hmap = dict(zip(parts, combo))
        tot = np.zeros(shape)
        for k in range(V):
            u = unary[k] + graph.nodes[k].w_e * e_flat[hmap[pids[k]] - 1]
            sh = [1] * V
            sh[k] = shape[k]
            tot = tot + u[allowed[k]].reshape(sh)
        for t, e in enumerate(graph.edges):
            M = deform[t]
            if t in sac:
                M = M + sac[t][hmap[pids[e.i]] - 1]
            sub = M[np.ix_(allowed[e.i], allowed[e.j])]
            sh = [1] * V
            sh[e.i] = shape[e.i]
            sh[e.j] = shape[e.j]
            tot = tot + (sub if e.i < e.j else sub.T).reshape(sh)
        m = float(tot.max())
        if m > best:
            best = m
    return best + graph.bias


def dt_brute(msg, w_d, anchor):
    """O(n^2) reference for the separable transform."""
    h, w = msg.shape
    ys = np.arange(h)
    xs = np.arange(w)
    val = (msg[None, None, :, :]
           - w_d[0] * np.abs(xs[None, :, None, None] - xs[None, None, None, :]
                             - anchor[0])
           - w_d[1] * np.abs(ys[:, None, None, None] - ys[None, None, :, None]
                             - anchor[1]))
    return val.reshape(h, w, -1).max(axis=2)


def dyadic_map(rng, h, w, denom=64, span=2048):
    """Random map whose values are exact in both evaluation orders."""
    return rng.integers(-span, span, size=(h, w)).astype(np.float64) / denom
