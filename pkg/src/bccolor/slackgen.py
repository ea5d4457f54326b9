"""Slack generation, colorful matching, put-aside sets, and the coloring
of sparse nodes and outliers.

Reserved prefixes are respected throughout: no node of clique K adopts a
color in [x(K)] during any of these stages (enforced by the assignment
guard installed by the pipeline).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .decomposition import AlmostClique, Decomposition
from .graph import count_in_set
from .multitrial import list_range, multitrial
from .rounds import RoundOps, many_to_all


def try_color(ops: RoundOps, tries: dict[int, int]) -> dict[int, int]:
    """One round of the basic primitive: each active node has sampled one
    candidate; adoption follows the smaller-ID rule.  Returns winners."""
    return ops.try_color_round(tries)


def slack_generation(ops: RoundOps, x_of: np.ndarray) -> int:
    """One round: every node independently tries, with probability p_s, a
    uniform color from {x(v)+1 .. Delta+1}.  Returns the colored count."""
    eng = ops.engine
    cfg = eng.config
    delta1 = ops.g.max_degree + 1
    tries = {}
    for v in range(ops.g.n):
        if ops.coloring.colors[v]:
            continue
        rng = eng.node_rng(v, "slackgen")
        if rng.random() >= cfg.p_s:
            continue
        lo = int(x_of[v])
        if lo >= delta1:
            continue
        tries[v] = lo + 1 + rng.randrange(delta1 - lo)
        eng.charge(v, 2)
    winners = ops.try_color_round(tries, palette_guard=False)
    return len(winners)


def avail(ops: RoundOps, colors: Sequence[int],
          anti_edges: Sequence[tuple[int, int]]) -> int:
    """Sum over anti-edges of the colors in D usable by both endpoints.

    Pure diagnostic against the current coloring."""
    delta1 = ops.g.max_degree + 1
    d_mask = np.zeros(delta1, dtype=bool)
    for c in colors:
        d_mask[c - 1] = True
    total = 0
    r = ops.engine.round_no + 1  # everything adopted so far counts
    cache: dict[int, np.ndarray] = {}
    for u, v in anti_edges:
        if u not in cache:
            cache[u] = ops.palette_bool(u, r)
        if v not in cache:
            cache[v] = ops.palette_bool(v, r)
        total += int((cache[u] & cache[v] & d_mask).sum())
    return total


def uncolored_anti_edges(ops: RoundOps, clique: AlmostClique,
                         limit: Optional[int] = None) -> list[tuple[int, int]]:
    """Anti-edges of K with both endpoints uncolored."""
    g = ops.g
    members = clique.members
    unc = members[ops.coloring.colors[members] == 0]
    unc_set = set(unc.tolist())
    out = []
    packed = g.packed()
    k_mask = g.pack_set(unc)
    for v in unc.tolist():
        row = k_mask & ~packed[v]
        raw = int.from_bytes(row.tobytes(), "little")
        x = raw
        while x:
            b = x & -x
            w = b.bit_length() - 1
            x ^= b
            if w > v and w in unc_set:
                out.append((v, w))
                if limit and len(out) >= limit:
                    return out
    return out


# ----- colorful matching ------------------------------------------------------


@dataclass
class MatchingOutcome:
    pairs: list = field(default_factory=list)   # (u, v, color)
    target: int = 0
    rounds: int = 0
    shortfall: bool = False
    colored: int = 0

    def size(self) -> int:
        return len(self.pairs)


class _MatchingState:
    def __init__(self, ops: RoundOps, clique: AlmostClique,
                 psi_free: np.ndarray, target: int):
        self.clique = clique
        self.out = MatchingOutcome(target=target)
        free = (np.nonzero(psi_free)[0] + 1).astype(np.int64)
        self.free_set = set(free[free > clique.x].tolist())
        self.stale_extras: dict[int, list[int]] = {}
        self.used_in_k = set(
            int(c) for c in ops.coloring.colors[clique.members] if c)

    def done(self) -> bool:
        return len(self.out.pairs) >= self.out.target or not self.free_set


def colorful_matching_all(ops: RoundOps,
                          jobs: Sequence[tuple[AlmostClique, np.ndarray]]
                          ) -> dict[int, MatchingOutcome]:
    """Build colorful matchings of target size beta*a_bar, all cliques in
    the same rounds.

    Per round, each uncolored member of an unfinished clique activates
    and tries a uniform color from its (possibly one-round-stale) view
    of the clique palette above x(K); a depth-2 aggregation admits, per
    color, the classes of exactly two would-be winners - necessarily
    non-adjacent - and only those adopt, so the stage colors exactly
    2|M| nodes per clique.  The round budget is 4*beta with one doubled
    retry, per the harness retry contract.
    """
    eng = ops.engine
    cfg = eng.config
    g = ops.g
    states = {k.index: _MatchingState(ops, k, psi, math.floor(cfg.beta * k.a_bar))
              for k, psi in jobs}
    cliques = {k.index: k for k, _ in jobs}
    for st in states.values():
        st.out.target = max(st.out.target, 0)
    budget = cfg.matching_round_mult * cfg.beta
    total_budget = budget * 3
    rounds = 0
    while rounds < total_budget and any(not st.done() for st in states.values()):
        tries: dict[int, int] = {}
        owner: dict[int, int] = {}
        for idx, st in states.items():
            if st.done():
                continue
            members = cliques[idx].members
            unc = members[ops.coloring.colors[members] == 0]
            n_free = len(st.free_set)
            if len(unc) < 2 or n_free == 0:
                continue
            p_act = (cfg.matching_activation if cfg.matching_activation
                     is not None else min(1.0, 2.0 * n_free / len(unc)))
            free_arr = sorted(st.free_set)
            for v in unc.tolist():
                rng = eng.node_rng(v, "matching")
                if rng.random() >= p_act:
                    continue
                extras = st.stale_extras.get(v, ())
                pick = rng.randrange(n_free + len(extras))
                tries[v] = (free_arr[pick] if pick < n_free
                            else extras[pick - n_free])
                owner[v] = idx
                eng.charge(v, 4)
        if not tries:
            eng.tick(1, 2)
            rounds += 1
            continue
        r = eng.round_no
        ops.exchange({v: ("mtry", c) for v, c in tries.items()},
                     {v: 2 + ops.color_width for v in tries})
        would_win = ops.resolve_tries(tries, r)
        by_key: dict[tuple[int, int], list[int]] = {}
        for v, c in would_win.items():
            by_key.setdefault((owner[v], c), []).append(v)
        # Admission (depth-2 aggregation, pipelined over following rounds):
        # exactly-two classes of a color still free in K adopt.
        for (idx, c) in sorted(by_key):
            st = states[idx]
            pair = sorted(by_key[(idx, c)])
            if len(pair) != 2 or c in st.used_in_k or st.done():
                continue
            u, v = pair
            ops.assign(u, c, round_no=r)
            ops.assign(v, c, round_no=r)
            st.out.pairs.append((u, v, c))
            st.out.colored += 2
            st.used_in_k.add(c)
            st.free_set.discard(c)
            # members adjacent to neither endpoint keep a stale view
            members = cliques[idx].members
            stale_row = g.pack_set(members) & ~g.packed()[u] & ~g.packed()[v]
            xbits = int.from_bytes(stale_row.tobytes(), "little")
            while xbits:
                b = xbits & -xbits
                w = b.bit_length() - 1
                xbits ^= b
                if w != u and w != v and not ops.coloring.colors[w]:
                    st.stale_extras.setdefault(w, []).append(c)
        rounds += 1
        if rounds == budget and all(not st.out.pairs
                                    for st in states.values()):
            break  # nothing ever joins: stop early
    results = {}
    for idx, st in states.items():
        st.out.rounds = rounds
        st.out.shortfall = len(st.out.pairs) < st.out.target
        if st.out.shortfall:
            eng.fault("matching-shortfall", cliques[idx].leader,
                      f"|M|={len(st.out.pairs)} < target {st.out.target} "
                      f"after {rounds} rounds")
        cliques[idx].matching = list(st.out.pairs)
        results[idx] = st.out
    return results


def colorful_matching(ops: RoundOps, clique: AlmostClique,
                      psi_free: np.ndarray) -> MatchingOutcome:
    return colorful_matching_all(ops, [(clique, psi_free)])[clique.index]


def check_clique_palette_bound(ops: RoundOps, clique: AlmostClique
                               ) -> tuple[bool, list]:
    """Clique-palette inequality: |Psi(K)| >= |K^| + 1 + e_v - a_v + |M|
    for every uncolored member v, where a_v counts v's non-neighbors in K
    including v itself (the form the inequality is proved in; the stats
    kept on the clique exclude the self term, hence the -1 below)."""
    members = clique.members
    colors = ops.coloring.colors[members]
    distinct = len(set(int(c) for c in colors if c))
    psi_size = (ops.g.max_degree + 1) - distinct
    k_hat = int((colors == 0).sum())
    m_size = len(clique.matching)
    bad = []
    unc = members[colors == 0]
    pos = {int(v): i for i, v in enumerate(members.tolist())}
    for v in unc.tolist():
        i = pos[v]
        lhs = psi_size
        a_self = int(clique.a_v[i]) + 1
        rhs = k_hat + 1 + int(clique.e_v[i]) - a_self + m_size
        if lhs < rhs:
            bad.append((v, lhs, rhs))
    return len(bad) == 0, bad


# ----- put-aside sets ----------------------------------------------------------


def build_putaside(ops: RoundOps, cliques: Sequence[AlmostClique],
                   size_target: int) -> dict[int, np.ndarray]:
    """Pick size_target uncolored inliers per full clique such that no
    edge joins put-aside sets of different cliques.

    Cliques take turns in leader order.  In a clique's wave, uncolored
    inliers that heard no committed put-aside neighbor of an earlier
    clique sample themselves as candidates, the clique learns the
    candidate list by Many-to-All and keeps the size_target smallest
    IDs, and the chosen members announce themselves (blocking their
    neighbors in later cliques).  One-shot simultaneous sampling cannot
    reach the target here: the set size is a constant fraction of Delta
    at this scale, so cross-clique collision rates would exceed the
    survivor margin.  Cross-edge freedom is asserted by an edge scan.
    """
    eng = ops.engine
    g = ops.g
    result: dict[int, np.ndarray] = {}
    if not cliques:
        return result
    blocked = np.zeros(g.n, dtype=bool)
    cap = eng.config.m2a_sender_cap(g.max_degree, g.n)
    for k in sorted(cliques, key=lambda c: c.leader):
        inl = k.inliers()
        inl = inl[(ops.coloring.colors[inl] == 0) & ~blocked[inl]]
        want = min(math.ceil(1.3 * size_target), int(0.9 * cap))
        rate = min(1.0, want / max(1, len(inl)))
        cands = [int(v) for v in inl.tolist()
                 if eng.node_rng(v, "putaside-cand").random() < rate]
        ops.exchange({v: ("pa-cand", k.index) for v in cands},
                     {v: 2 + ops.width for v in cands})
        many_to_all(ops, k.members, sorted(cands), ops.width,
                    tag=f"pa-{k.index}")
        if len(cands) < size_target:
            eng.fault("putaside-shortfall", k.leader,
                      f"{len(cands)} candidates < target {size_target}")
            k.putaside = None
            continue
        chosen = np.array(sorted(cands)[:size_target], dtype=np.int64)
        k.putaside = chosen
        result[k.index] = chosen
        ops.exchange({int(v): ("pa-member",) for v in chosen.tolist()},
                     {int(v): 2 for v in chosen.tolist()})
        for v in chosen.tolist():
            blocked[g.neighbors(v)] = True
    # Cross-clique isolation: hard assertion by direct edge scan.
    built = [k for k in cliques if k.putaside is not None]
    for i, ka in enumerate(built):
        for kb in built[i + 1:]:
            cross = int(count_in_set(g, ka.putaside,
                                     g.pack_set(kb.putaside)).sum())
            if cross:
                eng.fault("putaside-cross-edge", ka.leader,
                          f"{cross} edges to clique {kb.index}", fatal=True)
    return result


# ----- sparse nodes and outliers ------------------------------------------------


def color_sparse_and_outliers(ops: RoundOps, dec: Decomposition,
                              x_of: np.ndarray) -> tuple[list[int], list[int]]:
    """Color V_sparse (full color space) and outliers (above x(K)).

    Runs single-try rounds (palette-restricted sampling) until every
    still-active node satisfies the multi-trial entry requirements, then
    hands the rest to multitrial; inliers stay inactive throughout.
    Returns (entry_violators, survivors); both flow to the fallback.
    """
    eng = ops.engine
    cfg = eng.config
    g = ops.g
    delta1 = g.max_degree + 1
    ell = cfg.ell(g.n)
    active: list[int] = [int(v) for v in dec.v_sparse.tolist()
                         if not ops.coloring.colors[v]]
    lists: dict[int, tuple] = {v: ("full",) for v in active}
    for k in dec.cliques:
        if k.outliers is None:
            continue
        for v in k.outliers.tolist():
            v = int(v)
            if ops.coloring.colors[v]:
                continue
            active.append(v)
            lists[v] = ("suffix", int(x_of[v])) if x_of[v] else ("full",)
    if not active:
        return [], []
    budget = cfg.sparse_budget(g.n)
    h_set = set(active)

    def entry_ok(v: int) -> bool:
        lo, size = list_range(lists[v], delta1)
        pal = ops.palette_bool(v)
        in_list = int(pal[lo:lo + size].sum())
        d_h = int(sum(1 for u in g.neighbors(v).tolist() if u in h_set))
        return in_list >= 2 * d_h and in_list >= d_h + ell

    used = 0
    while used < budget // 2 and h_set:
        if all(entry_ok(v) for v in h_set):
            break
        tries = {}
        for v in sorted(h_set):
            rng = eng.node_rng(v, "sparse-try")
            lo, size = list_range(lists[v], delta1)
            c = ops.sample_from_palette(v, rng, restrict_above=lo,
                                        round_no=eng.round_no - 1)
            if c is not None and c <= lo + size:
                tries[v] = c
        winners = ops.try_color_round(tries) if tries else {}
        if not tries:
            eng.tick(1, 2)
        h_set -= set(winners)
        used += 1
    remaining = np.array(sorted(h_set), dtype=np.int64)
    routed, survivors = multitrial(ops, remaining, lists, budget - used,
                                   "sparse-mt")
    return routed, survivors
