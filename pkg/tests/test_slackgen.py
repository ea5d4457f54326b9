"""Slack generation, colorful matching, availability diagnostic,
put-aside construction, sparse/outlier coloring."""

import math

import numpy as np
import pytest

from bccolor.coloring import PartialColoring, verify_coloring
from bccolor.config import Config
from bccolor.decomposition import annotate, compute_acd
from bccolor.engine import Engine
from bccolor.graph import Graph, GraphModel, generate
from bccolor.rounds import RoundOps
from bccolor.sct import checked_bucketing, learn_palette
from bccolor import slackgen as sg


def make_ops(g, seed=5, **cfg_over):
    cfg = Config.desk(**cfg_over) if cfg_over else Config.desk()
    eng = Engine(g, cfg, master_seed=seed, mode="bcongest")
    eng.begin_stage("test")
    return RoundOps(eng, PartialColoring(g))


def test_slackgen_ps_zero_colors_nothing():
    g = generate(GraphModel("gnp", {"n": 50, "p": 0.2}), seed=1)
    ops = make_ops(g, p_s=0.0)
    assert sg.slack_generation(ops, np.zeros(g.n, dtype=np.int64)) == 0


def test_slackgen_ps_one_independent_set_all_colored():
    g = Graph(40, [])
    ops = make_ops(g, p_s=1.0)
    colored = sg.slack_generation(ops, np.zeros(40, dtype=np.int64))
    assert colored == 40
    assert (ops.coloring.colors == 1).all()  # Delta=0: the only color


def test_slackgen_respects_reserved_prefix():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 64}), seed=2)
    ops = make_ops(g, p_s=1.0)
    x_of = np.full(g.n, 20, dtype=np.int64)
    ops.reserve_x = x_of
    ops.reserve_active = True
    sg.slack_generation(ops, x_of)
    cols = ops.coloring.colors
    assert (cols[cols > 0] > 20).all()


def test_slack_yield_measured_on_sparse_nodes():
    """Empirical slack-per-sparsity calibration: one round must grant the
    configured gamma fraction to at least 95% of sparse nodes."""
    cfg = Config.desk()
    g = generate(GraphModel("gnp", {"n": 1500, "p": 0.35}), seed=3)
    ops = make_ops(g, seed=3)
    from bccolor.graph import sparsity_many
    zetas = sparsity_many(g, np.arange(g.n))
    sg.slack_generation(ops, np.zeros(g.n, dtype=np.int64))
    good = 0
    total = 0
    ratios = []
    for v in range(0, g.n, 3):
        if zetas[v] < 50:
            continue
        total += 1
        pal = int(ops.palette_bool(v, 10 ** 9).sum())
        d_hat = ops.coloring.uncolored_degree(v)
        slack = pal - d_hat
        ratios.append(slack / zetas[v])
        if slack >= cfg.gamma * zetas[v]:
            good += 1
    assert total > 300
    assert good / total >= 0.95, (good, total, float(np.mean(ratios)))


# ----- avail diagnostic ---------------------------------------------------------


def test_avail_empty_is_zero():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 10}), seed=0)
    ops = make_ops(g)
    assert sg.avail(ops, range(1, 10), []) == 0


def test_avail_single_anti_edge_full_space():
    s = 12
    edges = [(i, j) for i in range(s) for j in range(i + 1, s)
             if (i, j) != (2, 7)]
    g = Graph(s, edges)
    ops = make_ops(g)
    delta1 = g.max_degree + 1
    assert sg.avail(ops, range(1, delta1 + 1), [(2, 7)]) == delta1


def test_avail_matches_bruteforce():
    g = generate(GraphModel("planted-cliques",
                            {"k": 1, "s": 40, "rewire": 0.0, "thin": 4}),
                 seed=5)
    ops = make_ops(g)
    rng = np.random.default_rng(1)
    for v in rng.choice(40, size=6, replace=False).tolist():
        pal = np.nonzero(ops.palette_bool(v, 10 ** 9))[0] + 1
        c = int(pal[rng.integers(len(pal))])
        if not any(ops.coloring.colors[g.neighbors(v)] == c):
            ops.assign(v, c, round_no=-1)
    anti = sg.uncolored_anti_edges(ops, _fake_clique(np.arange(40)))
    colors = list(range(1, g.max_degree + 2, 2))
    got = sg.avail(ops, colors, anti)
    want = 0
    cset = set(colors)
    for u, w in anti:
        for c in cset:
            u_ok = not any(ops.coloring.colors[g.neighbors(u)] == c)
            w_ok = not any(ops.coloring.colors[g.neighbors(w)] == c)
            if u_ok and w_ok:
                want += 1
    assert got == want


def _fake_clique(members, index=0):
    from bccolor.decomposition import AlmostClique
    return AlmostClique(index=index, members=members)


# ----- colorful matching ---------------------------------------------------------


def _prepared_clique(g, ops, cfg):
    dec = compute_acd(g, cfg.epsilon)
    annotate(g, dec, cfg)
    k = dec.cliques[0]
    b = checked_bucketing(ops, k, "t")
    psi = learn_palette(ops, k, b)
    return k, psi


def test_matching_abar_zero_skipped():
    cfg = Config.desk()
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 80}), seed=1)
    ops = make_ops(g)
    k, psi = _prepared_clique(g, ops, cfg)
    out = sg.colorful_matching(ops, k, psi)
    assert out.size() == 0 and out.target == 0 and not out.shortfall


def test_matching_on_planted_anti_matching():
    cfg = Config.desk()
    g = generate(GraphModel("planted-cliques",
                            {"k": 1, "s": 300, "rewire": 0.0, "thin": 1}),
                 seed=4)
    ops = make_ops(g)
    k, psi = _prepared_clique(g, ops, cfg)
    out = sg.colorful_matching(ops, k, psi)
    target = math.floor(cfg.beta * k.a_bar)
    planted_m = 150
    assert out.size() >= min(target, planted_m)
    _check_matching_invariants(g, ops, k)


def test_matching_reaches_beta_abar_on_thinned_clique():
    cfg = Config.desk()
    g = generate(GraphModel("planted-cliques",
                            {"k": 1, "s": 500, "rewire": 0.0, "thin": 10}),
                 seed=6)
    ops = make_ops(g)
    k, psi = _prepared_clique(g, ops, cfg)
    out = sg.colorful_matching(ops, k, psi)
    assert not out.shortfall
    assert out.size() >= math.floor(cfg.beta * k.a_bar)
    assert out.colored == 2 * out.size()  # pair-only adoptions
    _check_matching_invariants(g, ops, k)
    ok, bad = sg.check_clique_palette_bound(ops, k)
    assert ok, bad[:3]


def _check_matching_invariants(g, ops, k):
    colors_seen = set()
    used = set()
    for u, v, c in k.matching:
        assert not g.has_edge(u, v)              # anti-edge
        assert ops.coloring.colors[u] == c == ops.coloring.colors[v]
        assert c not in colors_seen              # pairwise distinct colors
        colors_seen.add(c)
        assert u not in used and v not in used   # vertex-disjoint
        used.update((u, v))


def test_availability_potential_before_matching():
    cfg = Config.desk()
    g = generate(GraphModel("planted-cliques",
                            {"k": 1, "s": 500, "rewire": 0.0, "thin": 10}),
                 seed=9)
    ops = make_ops(g)
    dec = compute_acd(g, cfg.epsilon)
    annotate(g, dec, cfg)
    k = dec.cliques[0]
    sg.slack_generation(ops, np.full(g.n, k.x, dtype=np.int64))
    anti = sg.uncolored_anti_edges(ops, k)
    d_colors = range(k.x + 1, g.max_degree + 2)
    pot = sg.avail(ops, d_colors, anti)
    delta = g.max_degree
    assert pot >= float(k.a_bar) * delta * delta / 3.0


# ----- put-aside sets -------------------------------------------------------------


def test_putaside_single_clique():
    cfg = Config.desk()
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 200}), seed=2)
    ops = make_ops(g)
    dec = compute_acd(g, cfg.epsilon)
    annotate(g, dec, cfg)
    k = dec.cliques[0]
    out = sg.build_putaside(ops, [k], 40)
    assert len(out[0]) == 40
    assert k.putaside is not None


def test_putaside_bridged_cliques_exclude_cross_edges():
    # two cliques joined by a bipartite bridge; chosen sets must avoid it
    s = 200
    base = generate(GraphModel("disjoint-cliques", {"k": 2, "s": s}), seed=0)
    extra = [(i, s + i) for i in range(0, 80)]
    g = Graph(2 * s, np.concatenate([base.edge_array(),
                                     np.array(extra)]))
    ops = make_ops(g)
    dec = compute_acd(g, 0.02)
    annotate(g, dec, Config.desk())
    assert len(dec.cliques) == 2
    out = sg.build_putaside(ops, dec.cliques, 30)
    assert set(out) == {0, 1}
    from bccolor.graph import count_in_set
    cross = int(count_in_set(g, out[0], g.pack_set(out[1])).sum())
    assert cross == 0
    assert not any(f.kind == "putaside-cross-edge" for f in ops.engine.faults)


def test_putaside_shortfall_faults():
    cfg = Config.desk()
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 100}), seed=2)
    ops = make_ops(g)
    dec = compute_acd(g, cfg.epsilon)
    annotate(g, dec, cfg)
    assert dec.cliques
    sg.build_putaside(ops, dec.cliques, 150)  # impossible target
    assert any(f.kind == "putaside-shortfall" for f in ops.engine.faults)
    assert dec.cliques[0].putaside is None


# ----- sparse/outlier stage ---------------------------------------------------------


def test_sparse_stage_empty_when_everything_dense():
    cfg = Config.desk()
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 65}), seed=1)
    ops = make_ops(g)
    dec = compute_acd(g, cfg.epsilon)
    annotate(g, dec, cfg)
    routed, surv = sg.color_sparse_and_outliers(
        ops, dec, np.zeros(g.n, dtype=np.int64))
    assert routed == [] and surv == []
    assert ops.coloring.colored_count == 0  # inliers stayed inactive


def test_sparse_stage_colors_gnp():
    cfg = Config.desk()
    g = generate(GraphModel("gnp", {"n": 300, "p": 0.15}), seed=8)
    ops = make_ops(g)
    dec = compute_acd(g, cfg.epsilon)
    annotate(g, dec, cfg)
    assert len(dec.v_sparse) == g.n
    routed, surv = sg.color_sparse_and_outliers(
        ops, dec, np.zeros(g.n, dtype=np.int64))
    assert not surv and not routed
    assert ops.coloring.is_total()
    ok, _ = verify_coloring(g, ops.coloring.colors)
    assert ok
