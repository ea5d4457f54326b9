"""Streaming aggregation: prefix sums, palette indexing, memory audit."""

import numpy as np
import pytest

from bccolor.coloring import PartialColoring
from bccolor.config import Config
from bccolor.decomposition import annotate, compute_acd
from bccolor.engine import Engine
from bccolor.graph import GraphModel, generate
from bccolor.rounds import RoundOps
from bccolor.sct import checked_bucketing, learn_palette
from bccolor.streaming import (memory_audit, nth_color_of_palette,
                               prefix_sums)


def make_ops(g, seed=5, mode="bcstream", **cfg_over):
    cfg = Config.desk(**cfg_over) if cfg_over else Config.desk()
    eng = Engine(g, cfg, master_seed=seed, mode=mode)
    eng.begin_stage("test")
    return RoundOps(eng, PartialColoring(g))


def bucketed_clique(s=400, seed=1, **cfg_over):
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": s}), seed=seed)
    ops = make_ops(g, seed=seed, **cfg_over)
    cfg = ops.engine.config
    dec = compute_acd(g, cfg.epsilon)
    annotate(g, dec, cfg)
    k = dec.cliques[0]
    b = checked_bucketing(ops, k, "t")
    return g, ops, k, b


def test_prefix_single_group_zero():
    g, ops, k, b = bucketed_clique()
    res = prefix_sums(ops, [k.members], [42])
    assert res.prefixes == [0]


def test_prefix_three_groups_exact():
    g, ops, k, b = bucketed_clique()
    groups = [k.members[:100], k.members[100:200], k.members[200:300]]
    res = prefix_sums(ops, groups, [3, 1, 4])
    assert res.prefixes == [0, 3, 4]


def test_prefix_matches_oracle_over_seeds():
    g, ops, k, b = bucketed_clique()
    live = [t for t in b.buckets if len(t)]
    rng = np.random.default_rng(7)
    for trial in range(20):
        values = rng.integers(0, 1000, size=len(live)).tolist()
        res = prefix_sums(ops, live, values)
        oracle = np.concatenate([[0], np.cumsum(values)[:-1]]).tolist()
        assert res.prefixes == oracle


def test_prefix_levels_follow_schedule():
    # C=1 shrinks z_0 = C log n so several merge levels engage
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 600}), seed=2)
    ops = make_ops(g, C=1)
    members = np.arange(600)
    live = [members[i * 12:(i + 1) * 12] for i in range(50)]
    values = list(range(50))
    res = prefix_sums(ops, live, values)
    oracle = np.concatenate([[0], np.cumsum(values)[:-1]]).tolist()
    assert res.prefixes == oracle
    assert res.levels >= 1
    assert res.levels <= res.level_bound


def test_prefix_rejects_oversized_values():
    g, ops, k, b = bucketed_clique()
    from bccolor.streaming import StreamingFault
    with pytest.raises(StreamingFault):
        prefix_sums(ops, [k.members], [g.n * g.n + 1])


def test_nth_color_full_palette():
    g, ops, k, b = bucketed_clique()
    psi = learn_palette(ops, k, b)
    assert nth_color_of_palette(ops, k, b, psi, 1) == 1
    assert nth_color_of_palette(ops, k, b, psi, 7) == 7


def test_nth_color_shifts_past_used():
    g, ops, k, b = bucketed_clique()
    ops.assign(int(k.members[0]), 3, round_no=-1)
    psi = learn_palette(ops, k, b)
    assert nth_color_of_palette(ops, k, b, psi, 3) == 4


def test_nth_color_equals_sorted_palette_indexing():
    g, ops, k, b = bucketed_clique(s=300, seed=9)
    rng = np.random.default_rng(2)
    for v in rng.choice(300, size=50, replace=False).tolist():
        pal = np.nonzero(ops.palette_bool(v, 10 ** 9))[0] + 1
        c = int(pal[rng.integers(len(pal))])
        if not any(ops.coloring.colors[g.neighbors(v)] == c):
            ops.assign(v, c, round_no=-1)
    psi = learn_palette(ops, k, b)
    x = 5
    free = np.nonzero(psi)[0] + 1
    free = free[free > x]
    for idx in [1, 2, len(free) // 2, len(free)]:
        got = nth_color_of_palette(ops, k, b, psi, idx, x=x)
        assert got == int(free[idx - 1])


def test_nth_color_out_of_range_faults():
    from bccolor.engine import EngineFault
    g, ops, k, b = bucketed_clique()
    psi = learn_palette(ops, k, b)
    with pytest.raises(EngineFault):
        nth_color_of_palette(ops, k, b, psi, g.max_degree + 5)


def test_memory_audit_reports_top_stages():
    g, ops, k, b = bucketed_clique()
    eng = ops.engine
    eng.charge(3, 40)
    eng.end_stage()
    eng.begin_stage("bigger")
    eng.charge(4, 90)
    eng.end_stage()
    audit = memory_audit(eng)
    assert audit.ok
    assert audit.top[0]["peak_words"] == 90
    assert audit.peak_words == 90
    assert audit.budget == eng.config.mem_budget_words(g.n)


def test_prefix_sums_stay_within_memory_budget():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 600}), seed=2)
    ops = make_ops(g, C=1)
    members = np.arange(600)
    live = [members[i * 12:(i + 1) * 12] for i in range(50)]
    prefix_sums(ops, live, list(range(50)))
    assert ops.engine.meter.peak_words <= ops.engine.meter.budget
