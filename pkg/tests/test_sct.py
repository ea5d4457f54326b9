"""Synchronized color trial: bucketing, clique palette, relabeling,
permutations, the trial itself, and the open-clique cleanup."""

import numpy as np
import pytest

from bccolor.coloring import PartialColoring, verify_coloring
from bccolor.config import Config, ceil_log2
from bccolor.decomposition import AlmostClique, annotate, compute_acd
from bccolor.engine import Engine, EngineFault
from bccolor.graph import Graph, GraphModel, generate
from bccolor.rounds import RoundOps
from bccolor import sct


def make_ops(g, seed=5, mode="bcongest", **cfg_over):
    cfg = Config.desk(**cfg_over) if cfg_over else Config.desk()
    eng = Engine(g, cfg, master_seed=seed, mode=mode)
    eng.begin_stage("test")
    return RoundOps(eng, PartialColoring(g))


def prepared(g, ops, cfg=None, idx=0):
    cfg = cfg or Config.desk()
    dec = compute_acd(g, cfg.epsilon)
    annotate(g, dec, cfg)
    return dec.cliques[idx]


# ----- 2-hop bucketing -----------------------------------------------------------


def brute_two_hop(g, members, bucket, thr):
    t = set(bucket.tolist())
    for u in members.tolist():
        nu = set(g.neighbors(u).tolist()) & t
        for w in members.tolist():
            nw = set(g.neighbors(w).tolist()) & t
            if len(nu & nw) < thr:
                return False
    return True


def test_two_hop_matches_bruteforce():
    g = generate(GraphModel("planted-cliques",
                            {"k": 1, "s": 60, "rewire": 0.0, "thin": 6}),
                 seed=2)
    members = np.arange(60)
    rng = np.random.default_rng(0)
    for trial in range(8):
        bucket = np.sort(rng.choice(60, size=rng.integers(4, 25),
                                    replace=False))
        for thr in (1.0, 2.0, 4.0):
            assert sct.two_hop_ok(g, members, bucket, thr) == \
                brute_two_hop(g, members, bucket, thr), (trial, thr)


def test_checked_bucketing_accepts_clique():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 300}), seed=1)
    ops = make_ops(g)
    k = prepared(g, ops)
    b = sct.checked_bucketing(ops, k, "t")
    assert sum(len(t) for t in b.buckets) == 300
    assert len(b.buckets) == ops.engine.config.bucket_count(g.max_degree, g.n)


def test_ac_preserved_whole_set():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 40}), seed=0)
    members = np.arange(40)
    assert sct.ac_preserved(g, members, members, 1, 0.0)


def test_ac_preserved_empty_bucket_fails():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 40}), seed=0)
    members = np.arange(40)
    assert not sct.ac_preserved(g, members, np.empty(0, dtype=np.int64),
                                4, 1.0 / 12.0)


def test_ac_preserved_statistical_rate():
    # large buckets with a tolerance matched to their fluctuation scale
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 512}), seed=3)
    members = np.arange(512)
    rng = np.random.default_rng(1)
    k = 4
    eps2 = 0.25
    preserved = 0
    trials = 200
    for _ in range(trials):
        assign = rng.integers(0, k, size=512)
        ok = all(sct.ac_preserved(g, members, members[assign == i], k, eps2)
                 for i in range(k))
        preserved += ok
    assert preserved / trials >= 0.99


# ----- clique palette ---------------------------------------------------------------


def test_learn_palette_uncolored_clique():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 200}), seed=4)
    ops = make_ops(g)
    k = prepared(g, ops)
    b = sct.checked_bucketing(ops, k, "t")
    psi = sct.learn_palette(ops, k, b)
    assert psi.all() and len(psi) == g.max_degree + 2 - 1


def test_learn_palette_excludes_used_color():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 200}), seed=4)
    ops = make_ops(g)
    k = prepared(g, ops)
    ops.assign(int(k.members[17]), 7, round_no=-1)
    b = sct.checked_bucketing(ops, k, "t")
    psi = sct.learn_palette(ops, k, b)
    assert not psi[6]
    assert psi.sum() == g.max_degree + 1 - 1


def test_learn_palette_equals_oracle_after_random_coloring():
    g = generate(GraphModel("planted-cliques",
                            {"k": 1, "s": 400, "rewire": 0.0, "thin": 6}),
                 seed=6)
    ops = make_ops(g)
    k = prepared(g, ops)
    rng = np.random.default_rng(2)
    for v in rng.choice(400, size=60, replace=False).tolist():
        pal = np.nonzero(ops.palette_bool(v, 10 ** 9))[0] + 1
        c = int(pal[rng.integers(len(pal))])
        if not any(ops.coloring.colors[g.neighbors(v)] == c):
            ops.assign(v, c, round_no=-1)
    b = sct.checked_bucketing(ops, k, "t")
    psi = sct.learn_palette(ops, k, b)
    used = {int(c) for c in ops.coloring.colors[k.members] if c}
    oracle = np.ones(g.max_degree + 1, dtype=bool)
    for c in used:
        oracle[c - 1] = False
    assert np.array_equal(psi, oracle)


# ----- relabeling ------------------------------------------------------------------


def test_relabel_single_node():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 50}), seed=1)
    ops = make_ops(g)
    rl = sct.relabel(ops, np.arange(50), np.array([7]), "t")
    assert rl.chosen_index == 1
    assert set(rl.labels) == {7}


def test_relabel_injective_and_width():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 120}), seed=1)
    ops = make_ops(g)
    subset = np.arange(0, 120, 3)
    rl = sct.relabel(ops, np.arange(120), subset, "t")
    labels = list(rl.labels.values())
    assert len(set(labels)) == len(subset)
    width = ceil_log2(max(2, len(subset) ** 2 * ceil_log2(g.n)))
    assert max(labels).bit_length() <= width
    assert rl.label_bits == width


def test_relabel_forced_collision_faults():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 60}), seed=1)
    ops = make_ops(g)
    subset = np.array([3, 4])
    x = ops.engine.config.relabel_tries(g.n)
    streams = {3: [11] * x, 4: [11] * x}  # every index collides
    with pytest.raises(EngineFault):
        sct.relabel(ops, np.arange(60), subset, "t", label_streams=streams)
    assert any(f.kind == "relabel-collision" for f in ops.engine.faults)


def test_relabel_statistical_failure_rate():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 80}), seed=1)
    failures = 0
    for trial in range(2000):
        ops = make_ops(g, seed=trial)
        subset = np.arange(40)
        try:
            sct.relabel(ops, np.arange(80), subset, f"t{trial}")
        except EngineFault:
            failures += 1
    assert failures == 0


# ----- permutations ------------------------------------------------------------------


@pytest.mark.parametrize("variant", [sct.permute_loglog, sct.permute_const])
@pytest.mark.parametrize("size", [0, 1, 5, 23])
def test_permute_is_bijection(variant, size):
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 80}), seed=2)
    ops = make_ops(g)
    k = prepared(g, ops)
    subset = k.members[:size]
    pi = variant(ops, k, subset, tag=f"v{size}")
    assert sorted(pi.values()) == list(range(size))
    assert set(pi) == set(subset.tolist())


def test_permute_single_node_maps_to_zero():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 80}), seed=2)
    ops = make_ops(g)
    k = prepared(g, ops)
    pi = sct.permute_loglog(ops, k, k.members[:1])
    assert pi == {int(k.members[0]): 0}


def test_permute_const_all_preserved_no_leftovers():
    # forcing a single fine bucket makes preservation trivially true
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 80}), seed=2)
    ops = make_ops(g)
    k = prepared(g, ops)
    pi = sct.permute_const(ops, k, k.members[:10], force_k_prime=1)
    assert sorted(pi.values()) == list(range(10))
    assert not any(f.kind == "permute-const-overflow"
                   for f in ops.engine.faults)


def test_permute_const_forced_unpreserved_path():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 80}), seed=2)
    ops = make_ops(g)
    k = prepared(g, ops)
    pi = sct.permute_const(ops, k, k.members[:12], force_unpreserved=True)
    assert sorted(pi.values()) == list(range(12))


def test_permute_uniformity_quick():
    """Small chi-square sanity pass; the acceptance suite runs the deep one."""
    from bccolor.stats import chi2_test
    from itertools import permutations
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 12}), seed=2)
    cfg = Config.desk()
    eng = Engine(g, cfg, master_seed=77)
    eng.begin_stage("perm")
    ops = RoundOps(eng, PartialColoring(g))
    k = AlmostClique(index=0, members=np.arange(12))
    subset = np.array([2, 5, 9])
    perms = {p: i for i, p in enumerate(permutations(subset.tolist()))}
    counts = [0] * len(perms)
    for t in range(6000):
        pi = sct.permute_loglog(ops, k, subset, tag=f"u{t}")
        order = tuple(sorted(subset.tolist(), key=lambda v: pi[v]))
        counts[perms[order]] += 1
    ok, p = chi2_test(counts, significance=0.001)
    assert ok, (counts, p)


# ----- the trial ----------------------------------------------------------------------


def run_sct(g, ops, k, drop=(), keep_x=False):
    if not keep_x:
        k.x = 0
    b = sct.checked_bucketing(ops, k, "sct")
    psi = sct.learn_palette(ops, k, b)
    members = k.members
    unc = members[ops.coloring.colors[members] == 0]
    subset = np.array([v for v in unc.tolist() if v not in drop])
    pi = sct.permute_loglog(ops, k, subset, bucketing=b)
    return sct.sct_trial(ops, k, psi, pi, subset)


def test_sct_isolated_clique_colors_everyone():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 260}), seed=8)
    ops = make_ops(g)
    k = prepared(g, ops)
    out = run_sct(g, ops, k)
    assert out.leftover == 0
    assert out.colored == 260
    ok, _ = verify_coloring(g, ops.coloring.colors)
    assert ok


def test_sct_bridged_cliques_leftovers_only_on_bridge():
    s = 260
    base = generate(GraphModel("disjoint-cliques", {"k": 2, "s": s}), seed=0)
    bridge = [(i, s + i) for i in range(40)]
    g = Graph(2 * s, np.concatenate([base.edge_array(), np.array(bridge)]))
    ops = make_ops(g)
    cfg = Config.desk()
    dec = compute_acd(g, cfg.epsilon)
    annotate(g, dec, cfg)
    assert len(dec.cliques) == 2
    bridged = set(range(40)) | set(range(s, s + 40))
    for k in dec.cliques:
        k.x = 0
        b = sct.checked_bucketing(ops, k, f"s{k.index}")
        psi = sct.learn_palette(ops, k, b)
        unc = k.members[ops.coloring.colors[k.members] == 0]
        pi = sct.permute_loglog(ops, k, unc, tag=f"p{k.index}",
                                bucketing=b)
        sct.sct_trial(ops, k, psi, pi, unc)
    uncolored = np.nonzero(ops.coloring.colors == 0)[0]
    assert set(uncolored.tolist()) <= bridged
    ok, _ = verify_coloring(
        g, np.where(ops.coloring.colors == 0, 1, ops.coloring.colors))


def test_sct_size_precondition_recorded():
    g = generate(GraphModel("disjoint-cliques", {"k": 1, "s": 100}), seed=8)
    ops = make_ops(g)
    k = prepared(g, ops)
    # occupy most colors so |Psi(K)| - x < |S|
    for i, c in enumerate(range(60, 100)):
        ops.assign(int(k.members[i]), c, round_no=-1)
    k.x = 50
    out = run_sct(g, ops, k, keep_x=True)
    assert any(f.kind == "sct-precondition" for f in ops.engine.faults)
    _, violations = verify_coloring(g, ops.coloring.colors)
    assert not [v for v in violations if v[0] == "edge"]


# ----- open cleanup ------------------------------------------------------------------


def test_open_cleanup_noop_without_cliques():
    g = generate(GraphModel("gnp", {"n": 30, "p": 0.2}), seed=0)
    ops = make_ops(g)
    decay = sct.open_cleanup(ops, [], np.zeros(30, dtype=np.int64))
    assert decay == {}
    assert ops.engine.round_no == 0


def test_open_cleanup_pt_one_independent_set():
    g = Graph(25, [])
    ops = make_ops(g)
    k = AlmostClique(index=0, members=np.arange(25))
    k.e_bar = k.a_bar = 0
    decay = sct.open_cleanup(ops, [k], np.zeros(25, dtype=np.int64),
                             rounds=1, p_t=1.0)
    assert ops.coloring.colored_count == 25
    assert decay[0] == [25, 0]


def test_open_cleanup_decays_uncolored_degree():
    g = generate(GraphModel("planted-cliques",
                            {"k": 1, "s": 300, "rewire": 0.0, "thin": 4}),
                 seed=5)
    ops = make_ops(g)
    k = prepared(g, ops)
    decay = sct.open_cleanup(ops, [k], np.zeros(g.n, dtype=np.int64),
                             rounds=8, p_t=1.0 / 3.0)
    series = decay[k.index]
    assert series[0] == 300
    assert series[-1] < series[0] / 3
