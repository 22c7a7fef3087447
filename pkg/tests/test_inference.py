import numpy as np
import pytest

from partgraph._kernels import window_message, window_message_numpy
from partgraph.errors import ConfigError, DataError, NumericalError
from partgraph.features import hog_at
from partgraph.inference import (CandidateGrid, ContextStore, build_context,
                                 constrained_parse, dt_l1, nominal_height,
                                 parse, sac_weight_table, scale_list,
                                 unary_response)
from partgraph.model import (HOG_DIM, EdgeParam, MixtureModel, ModelGraph,
                             NodeParam, score)
from partgraph.raster import ImageRaster
from partgraph.segmentation import level_proximity, sac_vector

from oracles import (TWO_PARTS, dt_brute, dyadic_map, enumeration_best,
                     random_tiny_graph)

DYADIC_W = [0.0, 0.25, 0.5, 1.0, 1.5, 2.5]
DYADIC_A = [-4.0, -2.5, -1.25, 0.0, 0.75, 3.5]


def noise_image(h, w, seed, name=None):
    rng = np.random.default_rng(seed)
    return ImageRaster(name or f"noise-{h}x{w}-{seed}",
                       rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8))


def tiny_store():
    return ContextStore(stride=2, num_levels=3, seed_cell=4)


def tiny_model(graph):
    return MixtureModel(parts=TWO_PARTS, graphs={graph.viewpoint: graph})


# ---------------------------------------------------------------------------
# distance transform


def test_dt_matches_brute_force_exactly():
    rng = np.random.default_rng(7)
    for trial in range(30):
        msg = dyadic_map(rng, 12, 12)
        w = (float(rng.choice(DYADIC_W)), float(rng.choice(DYADIC_W)))
        anc = (float(rng.choice(DYADIC_A)), float(rng.choice(DYADIC_A)))
        out, _, _ = dt_l1(msg, w, anc)
        np.testing.assert_array_equal(out, dt_brute(msg, w, anc))


def test_dt_argmax_achieves_reported_value():
    rng = np.random.default_rng(8)
    msg = dyadic_map(rng, 10, 14)
    w, anc = (1.5, 0.25), (2.0, -1.5)
    out, ay, ax = dt_l1(msg, w, anc)
    yy, xx = np.meshgrid(np.arange(10), np.arange(14), indexing="ij")
    via_arg = (msg[ay, ax] - w[0] * np.abs(xx - ax - anc[0])
               - w[1] * np.abs(yy - ay - anc[1]))
    np.testing.assert_array_equal(via_arg, out)


def test_dt_zero_weight_gives_global_max():
    rng = np.random.default_rng(9)
    msg = dyadic_map(rng, 9, 9)
    out, ay, ax = dt_l1(msg, (0.0, 0.0), (3.0, -2.0))
    assert np.all(out == msg.max())
    assert np.all(msg[ay, ax] == msg.max())


def test_dt_cone_around_single_peak():
    msg = np.full((12, 12), -1000.0)
    msg[5, 7] = 0.0
    out, _, _ = dt_l1(msg, (1.0, 1.0), (0.0, 0.0))
    yy, xx = np.meshgrid(np.arange(12), np.arange(12), indexing="ij")
    np.testing.assert_array_equal(out, -np.abs(xx - 7.0) - np.abs(yy - 5.0))


def test_dt_rejects_negative_weight_and_bad_shape():
    msg = np.zeros((4, 4))
    with pytest.raises(NumericalError):
        dt_l1(msg, (-0.1, 1.0), (0.0, 0.0))
    with pytest.raises(DataError):
        dt_l1(np.zeros(16), (1.0, 1.0), (0.0, 0.0))


def test_dt_handles_masked_rows():
    msg = np.full((6, 6), -np.inf)
    msg[2, 3] = 4.0
    out, ay, ax = dt_l1(msg, (0.5, 0.5), (0.0, 0.0))
    assert np.isfinite(out).all()
    assert int(ay[0, 0]) == 2 and int(ax[0, 0]) == 3


# ---------------------------------------------------------------------------
# window kernel


def test_window_kernel_matches_numpy_reference():
    rng = np.random.default_rng(11)
    for trial in range(8):
        gh, gw = int(rng.integers(5, 12)), int(rng.integers(5, 12))
        child = rng.normal(size=(gh, gw))
        child[rng.random(size=(gh, gw)) < 0.2] = -np.inf
        n_pairs = int(rng.integers(2, 7))
        pid = rng.integers(0, n_pairs, size=(gh, gw)).astype(np.int32)
        sacw = np.ascontiguousarray(rng.normal(size=(n_pairs, n_pairs)))
        wdx, wdy = rng.random(), rng.random()
        ax, ay = float(rng.integers(-6, 7)), float(rng.integers(-6, 7))
        stride = 2
        rad = float(rng.integers(2, 9))
        va = np.empty((gh, gw))
        aa = np.empty((gh, gw), np.int32)
        vb = np.empty((gh, gw))
        ab = np.empty((gh, gw), np.int32)
        window_message(child, pid, sacw, wdx, wdy, ax, ay, stride,
                       ax / stride, ay / stride, rad, va, aa)
        window_message_numpy(child, pid, sacw, wdx, wdy, ax, ay, stride,
                             ax / stride, ay / stride, rad, vb, ab)
        np.testing.assert_array_equal(va, vb)
        np.testing.assert_array_equal(aa, ab)


def test_sac_weight_table_matches_per_pair_vectors():
    img = noise_image(16, 16, 3)
    ctx = build_context(img, stride=2, num_levels=3, seed_cell=4)
    lv = ctx.hierarchy.levels[0]
    rng = np.random.default_rng(4)
    w_A = rng.normal(size=8)
    table = sac_weight_table(lv, w_A)
    n = len(lv.pairs.s1)
    assert table.shape == (n, n)
    assert np.all(table[0] == 0.0) and np.all(table[:, 0] == 0.0)
    for a in range(n):
        for b in range(n):
            assert abs(table[a, b] - float(w_A @ sac_vector(lv, a, b))) < 1e-12


# ---------------------------------------------------------------------------
# DP vs exhaustive enumeration


def test_parse_equals_enumeration_on_full_grid():
    store = tiny_store()
    grid = CandidateGrid(stride=2, scales=(1.0,), r_w=64.0)
    cases = [(3, 101, False), (3, 102, False), (3, 103, True), (4, 104, False)]
    for num_nodes, seed, zero_sac in cases:
        rng = np.random.default_rng(seed)
        g = random_tiny_graph(rng, num_nodes, zero_sac=zero_sac)
        img = noise_image(16, 16, seed)
        res = parse(tiny_model(g), img, grid, store=store)
        ctx = store.get(img, 1.0)
        n_pos = ctx.shape[0] * ctx.shape[1]
        want = enumeration_best(g, ctx, [np.arange(n_pos)] * num_nodes)
        assert abs(res.score - want) < 1e-9


def test_constrained_equals_masked_enumeration():
    store = tiny_store()
    for num_nodes, seed in [(5, 201), (6, 202), (6, 203)]:
        rng = np.random.default_rng(seed)
        g = random_tiny_graph(rng, num_nodes)
        img = noise_image(16, 16, seed)
        ctx = store.get(img, 1.0)
        n_pos = ctx.shape[0] * ctx.shape[1]
        masks, allowed = {}, []
        for k in range(num_nodes):
            sel = rng.choice(n_pos, size=int(rng.integers(4, 9)), replace=False)
            m = np.zeros(n_pos, bool)
            m[sel] = True
            masks[k] = m.reshape(ctx.shape)
            allowed.append(np.flatnonzero(m))
        res = constrained_parse(tiny_model(g), img,
                                CandidateGrid(stride=2, masks=masks), 0,
                                ctx=ctx)
        want = enumeration_best(g, ctx, allowed)
        assert abs(res.score - want) < 1e-9


def test_singleton_masks_force_configuration():
    rng = np.random.default_rng(31)
    g = random_tiny_graph(rng, 4)
    img = noise_image(16, 16, 31)
    ctx = build_context(img, stride=2, num_levels=3, seed_cell=4)
    n_pos = ctx.shape[0] * ctx.shape[1]
    forced = rng.choice(n_pos, size=4, replace=False)
    masks = {}
    for k, f in enumerate(forced):
        m = np.zeros(n_pos, bool)
        m[f] = True
        masks[k] = m.reshape(ctx.shape)
    res = constrained_parse(tiny_model(g), img,
                            CandidateGrid(stride=2, masks=masks), 0, ctx=ctx)
    gw = ctx.shape[1]
    want_pos = [(int(ctx.xs[f % gw]), int(ctx.ys[f // gw])) for f in forced]
    assert res.config.L == want_pos
    rescored = score(tiny_model(g), img, ctx.hierarchy, res.config)
    assert abs(res.score - rescored) < 1e-9


def test_full_masks_equal_unconstrained_at_fixed_viewpoint():
    rng = np.random.default_rng(32)
    g = random_tiny_graph(rng, 5)
    img = noise_image(16, 16, 32)
    store = tiny_store()
    ctx = store.get(img, 1.0)
    free = parse(tiny_model(g), img,
                 CandidateGrid(stride=2, scales=(1.0,), r_w=64.0), store=store)
    masks = {k: np.ones(ctx.shape, bool) for k in range(5)}
    full = constrained_parse(tiny_model(g), img,
                             CandidateGrid(stride=2, masks=masks), 0, ctx=ctx)
    assert abs(free.score - full.score) < 1e-12
    assert free.config.L == full.config.L
    assert free.config.H == full.config.H


def test_mask_growth_is_monotone():
    rng = np.random.default_rng(33)
    g = random_tiny_graph(rng, 5)
    img = noise_image(16, 16, 33)
    ctx = build_context(img, stride=2, num_levels=3, seed_cell=4)
    n_pos = ctx.shape[0] * ctx.shape[1]
    perm = {k: rng.permutation(n_pos) for k in range(5)}
    last = -np.inf
    for size in (3, 8, 20, n_pos):
        masks = {}
        for k in range(5):
            m = np.zeros(n_pos, bool)
            m[perm[k][:size]] = True
            masks[k] = m.reshape(ctx.shape)
        res = constrained_parse(tiny_model(g), img,
                                CandidateGrid(stride=2, masks=masks), 0,
                                ctx=ctx)
        assert res.score >= last - 1e-12
        last = res.score


def test_refit_at_chosen_levels_reproduces_score():
    rng = np.random.default_rng(34)
    g = random_tiny_graph(rng, 5)
    img = noise_image(16, 16, 34)
    ctx = build_context(img, stride=2, num_levels=3, seed_cell=4)
    masks = {k: np.ones(ctx.shape, bool) for k in range(5)}
    grid = CandidateGrid(stride=2, masks=masks)
    res = constrained_parse(tiny_model(g), img, grid, 0, ctx=ctx)
    refit = constrained_parse(tiny_model(g), img, grid, 0, ctx=ctx,
                              forced_levels=dict(res.config.H))
    assert abs(res.score - refit.score) < 1e-12
    assert refit.config.H == res.config.H


def test_mixture_table_and_max():
    rng = np.random.default_rng(35)
    g0 = random_tiny_graph(rng, 4)
    g1r = random_tiny_graph(rng, 4)
    g1 = ModelGraph(1, 1, g1r.nodes, g1r.edges, g1r.bias, g1r.patch_size,
                    g1r.num_levels, g1r.landmark_mirror)
    model = MixtureModel(parts=TWO_PARTS, graphs={0: g0, 1: g1})
    img = noise_image(16, 16, 35)
    res = parse(model, img, CandidateGrid(stride=2, scales=(1.0,), r_w=64.0),
                store=tiny_store())
    assert set(res.mixture_scores) == {0, 1}
    assert res.score == max(res.mixture_scores.values())
    assert res.mixture_scores[res.viewpoint] == res.score


def test_parse_score_matches_configuration_rescore():
    rng = np.random.default_rng(36)
    g = random_tiny_graph(rng, 4)
    img = noise_image(20, 24, 36)
    store = tiny_store()
    res = parse(tiny_model(g), img,
                CandidateGrid(stride=2, scales=(1.0,), r_w=64.0), store=store)
    ctx = store.get(img, res.scale)
    rescored = score(tiny_model(g), ctx.image, ctx.hierarchy, res.config)
    assert abs(res.score - rescored) < 1e-9


def test_parse_result_is_deterministic():
    rng = np.random.default_rng(37)
    g = random_tiny_graph(rng, 4)
    img = noise_image(16, 16, 37)
    grid = CandidateGrid(stride=2, scales=(1.0,), r_w=64.0)
    a = parse(tiny_model(g), img, grid, store=tiny_store())
    b = parse(tiny_model(g), img, grid, store=tiny_store())
    assert a.to_json_dict() == b.to_json_dict()
    np.testing.assert_array_equal(a.label_map, b.label_map)


# ---------------------------------------------------------------------------
# unary responses and scales


def test_unary_response_matches_direct_scoring():
    rng = np.random.default_rng(38)
    g = random_tiny_graph(rng, 3)
    img = noise_image(16, 16, 38)
    ctx = build_context(img, stride=2, num_levels=3, seed_cell=4)
    F, E = unary_response(g, img, CandidateGrid(stride=2),
                          hierarchy=ctx.hierarchy)
    assert F.shape == (3, 8, 8) and E.shape == (3, 3, 8, 8)
    for k in (0, 2):
        for gy, gx in ((0, 0), (3, 5), (7, 7)):
            x, y = int(ctx.xs[gx]), int(ctx.ys[gy])
            want = float(g.nodes[k].w_f @ hog_at(img, (x, y), g.patch_size))
            assert abs(F[k, gy, gx] - want) < 1e-12
            for h in (1, 3):
                em = level_proximity(ctx.hierarchy, h - 1, float(g.patch_size))
                want_e = g.nodes[k].w_e * float(em[y, x])
                assert abs(E[k, h - 1, gy, gx] - want_e) < 1e-12


def test_unary_response_zero_weights_zero_maps():
    rng = np.random.default_rng(39)
    g = random_tiny_graph(rng, 3)
    for n in g.nodes:
        n.w_f = np.zeros(HOG_DIM)
        n.w_e = 0.0
    img = noise_image(16, 16, 39)
    F, E = unary_response(g, img, CandidateGrid(stride=2))
    assert np.all(F == 0.0) and np.all(E == 0.0)


def test_nominal_height_and_scale_band():
    nodes = [NodeParam(0, 0, np.zeros(HOG_DIM), 0.0),
             NodeParam(1, 0, np.zeros(HOG_DIM), 0.0)]
    edges = [EdgeParam(1, 0, 0.0, 10.0, np.array([0.1, 0.1]),
                       np.zeros(8))]
    g = ModelGraph(0, 0, nodes, edges, 0.0, 8, 2, {0: 0, 1: 1})
    mh = nominal_height(g)
    assert mh == 18.0  # 10 px anchor spread plus the 8 px patch
    scales = scale_list(g, 120)
    assert len(scales) >= 5
    ratios = [mh / (s * 120) for s in scales]
    assert all(0.4 - 1e-6 <= r <= 1.0 + 1e-6 for r in ratios)
    for a, b in zip(scales, scales[1:]):
        assert b == pytest.approx(a * 2 ** 0.25)


# ---------------------------------------------------------------------------
# validation and failure paths


def test_grid_validation():
    with pytest.raises(ConfigError):
        CandidateGrid(stride=0)
    with pytest.raises(ConfigError):
        CandidateGrid(r_w=-1.0)


def test_parse_rejects_masks_and_tiny_images():
    rng = np.random.default_rng(40)
    g = random_tiny_graph(rng, 3)
    img = noise_image(16, 16, 40)
    with pytest.raises(ConfigError):
        parse(tiny_model(g), img,
              CandidateGrid(stride=2, masks={0: np.ones((8, 8), bool)}))
    small = noise_image(8, 8, 40)
    with pytest.raises(DataError):
        parse(tiny_model(g), small, CandidateGrid(stride=2, scales=(1.0,)),
              store=tiny_store())


def test_constrained_mask_validation():
    rng = np.random.default_rng(41)
    g = random_tiny_graph(rng, 3)
    img = noise_image(16, 16, 41)
    ctx = build_context(img, stride=2, num_levels=3, seed_cell=4)
    model = tiny_model(g)
    with pytest.raises(ConfigError, match="unknown mixture"):
        constrained_parse(model, img, CandidateGrid(stride=2), 5, ctx=ctx)
    empty = {0: np.zeros(ctx.shape, bool)}
    with pytest.raises(DataError, match="empty mask"):
        constrained_parse(model, img, CandidateGrid(stride=2, masks=empty), 0,
                          ctx=ctx)
    bad_shape = {0: np.ones((4, 4), bool)}
    with pytest.raises(ConfigError):
        constrained_parse(model, img,
                          CandidateGrid(stride=2, masks=bad_shape), 0, ctx=ctx)


def test_window_too_small_for_masks_is_infeasible():
    nodes = [NodeParam(0, 0, np.zeros(HOG_DIM), 0.0),
             NodeParam(1, 0, np.zeros(HOG_DIM), 0.0)]
    edges = [EdgeParam(0, 1, 0.0, 0.0, np.array([0.1, 0.1]), np.zeros(8))]
    g = ModelGraph(0, 0, nodes, edges, 0.0, 8, 2, {0: 0, 1: 1})
    img = noise_image(16, 16, 42)
    ctx = build_context(img, stride=2, num_levels=2, seed_cell=4)
    m0 = np.zeros(ctx.shape, bool)
    m0[0, 0] = True
    m1 = np.zeros(ctx.shape, bool)
    m1[7, 7] = True
    grid = CandidateGrid(stride=2, masks={0: m0, 1: m1}, r_w=2.0)
    with pytest.raises(DataError):
        constrained_parse(tiny_model(g), img, grid, 0, ctx=ctx)
