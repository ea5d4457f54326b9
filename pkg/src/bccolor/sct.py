"""Synchronized color trial machinery.

Every uncolored clique member (outside the put-aside set) receives a
distinct clique-palette color through a random permutation sampled in a
distributed fashion: a rough random bucketing positions each node
coarsely, buckets relabel their members with short labels, and a leader
per bucket samples the in-bucket order.  Conflicts are then possible
only against external neighbors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import ceil_log2
from .decomposition import AlmostClique
from .graph import Graph, count_in_set
from .rounds import RoundOps, chunk_rounds, many_to_all


class SctFault(RuntimeError):
    pass


# ----- bucketing ------------------------------------------------------------


@dataclass
class Bucketing:
    k: int
    assignment: np.ndarray          # bucket index per member position
    buckets: list[np.ndarray]       # node IDs per bucket
    members: np.ndarray


def _sample_many(ops: RoundOps, plans: Sequence[tuple[np.ndarray, int]],
                 tag: str, attempt: int) -> list[Bucketing]:
    """One shared round: members of every planned group broadcast their
    uniform bucket index."""
    msgs = {}
    bits = {}
    out = []
    for members, k in plans:
        assign = np.empty(len(members), dtype=np.int64)
        idx_bits = max(1, ceil_log2(max(2, k)))
        for i, v in enumerate(members.tolist()):
            assign[i] = ops.engine.node_rng(
                v, f"{tag}-bucket-{attempt}").randrange(k)
            msgs[int(v)] = ("bkt", int(assign[i]))
            bits[int(v)] = 2 + idx_bits
        out.append(Bucketing(k=k, assignment=assign,
                             buckets=[members[assign == i] for i in range(k)],
                             members=members))
    if msgs:
        ops.exchange(msgs, bits)
    return out


def sample_bucketing(ops: RoundOps, members: np.ndarray, k: int,
                     tag: str, attempt: int) -> Bucketing:
    """One round: every member broadcasts its uniform bucket index."""
    return _sample_many(ops, [(members, k)], tag, attempt)[0]


def two_hop_threshold(cfg, g: Graph, members_count: int, k: int) -> float:
    """Common-neighbor requirement; Delta/(4k) capped by (C/4) log n."""
    return min(cfg.C / 4.0 * ceil_log2(g.n),
               max(1.0, members_count / (4.0 * max(1, k))))


def two_hop_ok(g: Graph, members: np.ndarray, bucket: np.ndarray,
               threshold: float) -> bool:
    """Exact check of |T & N(u) & N(w)| >= threshold for all u,w in K.

    Fast path: |T & N(u) & N(w)| >= |T| - miss(u) - miss(w) with
    miss(u) = |T| - |N(u) & T|; only pairs where the bound fails are
    checked exactly.
    """
    if len(bucket) < threshold:
        return False
    t_mask = g.pack_set(bucket)
    in_t = count_in_set(g, members, t_mask)
    if (in_t < threshold).any():     # u = w pairs
        return False
    miss = len(bucket) - in_t
    order = np.argsort(miss)[::-1].astype(np.int64)
    sm = miss[order]
    slack = len(bucket) - threshold
    if len(sm) < 2 or sm[0] + sm[1] <= slack:
        return True
    packed = g.packed()
    for a in range(len(order)):
        if a + 1 < len(order) and sm[a] + sm[a + 1] <= slack:
            break
        u = int(members[order[a]])
        row_u = packed[u] & t_mask
        for b in range(a + 1, len(order)):
            if sm[a] + sm[b] <= slack:
                break
            w = int(members[order[b]])
            common = int(np.bitwise_count(row_u & packed[w]).sum())
            if common < threshold:
                return False
    return True


def bucket_count_for(cfg, g: Graph, clique: AlmostClique) -> int:
    k = cfg.bucket_count(g.max_degree, g.n)
    if k <= 1 or len(clique.members) <= 2 * k:
        return 1
    return k


def checked_bucketings(ops: RoundOps, cliques: Sequence[AlmostClique],
                       tag: str) -> dict[int, Bucketing]:
    """2-hop-connecting bucketings for all cliques; shared rounds, one
    resample round for the failures, then fault."""
    cfg = ops.engine.config
    g = ops.g
    pending = list(cliques)
    result: dict[int, Bucketing] = {}
    for attempt in range(cfg.sct_retries + 1):
        if not pending:
            break
        plans = [(k.members, bucket_count_for(cfg, g, k)) for k in pending]
        sampled = _sample_many(ops, plans, tag, attempt)
        still = []
        for clique, b in zip(pending, sampled):
            threshold = two_hop_threshold(cfg, g, len(clique.members), b.k)
            if all(two_hop_ok(g, clique.members, t, threshold)
                   for t in b.buckets):
                result[clique.index] = b
            else:
                still.append(clique)
        pending = still
    if pending:
        ops.engine.fault("bucketing-2hop", pending[0].leader,
                         f"no 2-hop bucketing after {cfg.sct_retries + 1} tries",
                         fatal=True)
    return result


def checked_bucketing(ops: RoundOps, clique: AlmostClique,
                      tag: str) -> Bucketing:
    """Sample a bucketing that 2-hop connects K; one resample, then fault."""
    return checked_bucketings(ops, [clique], tag)[clique.index]


def ac_preserved(g: Graph, ambient: np.ndarray, bucket: np.ndarray,
                 k: int, eps2: float) -> bool:
    """Is `bucket` eps2-AC-preserved inside `ambient` under a k-bucketing?

    Exact predicate: |N(v) & T| within (1 +- eps2) |N(v) & ambient| / k
    for every v in the ambient set."""
    if len(ambient) == 0:
        return True
    in_amb = count_in_set(g, ambient, g.pack_set(ambient))
    if len(bucket):
        in_t = count_in_set(g, ambient, g.pack_set(bucket))
    else:
        in_t = np.zeros(len(ambient), dtype=np.int64)
    lo = (1.0 - eps2) * in_amb / k
    hi = (1.0 + eps2) * in_amb / k
    return bool(((in_t >= lo) & (in_t <= hi)).all())


# ----- clique palette --------------------------------------------------------


def _member_bucket_adjacency(g: Graph, members: np.ndarray,
                             t_nodes: np.ndarray) -> np.ndarray:
    """Bool matrix (|members|, |t_nodes|): adjacency or identity."""
    packed = g.packed()[members]
    cols = []
    for u in t_nodes.tolist():
        word = packed[:, u >> 6]
        cols.append(((word >> np.uint64(u & 63)) & np.uint64(1)).astype(bool))
    mat = np.stack(cols, axis=1)
    pos = {int(v): i for i, v in enumerate(members.tolist())}
    for j, u in enumerate(t_nodes.tolist()):
        if u in pos:
            mat[pos[u], j] = True   # own bitmap counts as received
    return mat


def learn_palette_all(ops: RoundOps,
                      pairs: Sequence[tuple[AlmostClique, Bucketing]]
                      ) -> dict[int, np.ndarray]:
    """One shared round of range bitmaps; per clique, the exact free-color
    bool array.

    Every member broadcasts the colors of its range that it sees on its
    clique neighbors; each member unions the bitmaps of its in-bucket
    neighbors.  Every member's learned view is verified against the
    centralized recount (guaranteed equal when the bucketing 2-hop
    connects K, which checked_bucketing enforces)."""
    g = ops.g
    eng = ops.engine
    delta1 = g.max_degree + 1
    r = eng.round_no
    vis = ops.coloring.visible_colors(r)
    msgs: dict[int, tuple] = {}
    bits: dict[int, int] = {}
    prepared = []
    for clique, bucketing in pairs:
        members = clique.members
        k = bucketing.k
        range_size = math.ceil(delta1 / k)
        idx_bits = max(1, ceil_log2(max(2, k)))
        in_k_flag = np.zeros(g.n, dtype=bool)
        in_k_flag[members] = True
        bitmap_rows: dict[int, np.ndarray] = {}
        for i, v in enumerate(members.tolist()):
            b = int(bucketing.assignment[i])
            lo = b * range_size
            hi = min(delta1, lo + range_size)
            nbrs = g.neighbors(v)
            nbr_colors = vis[nbrs]
            sel = (nbr_colors > lo) & (nbr_colors <= hi) & in_k_flag[nbrs]
            bm = np.zeros(range_size, dtype=bool)
            bm[nbr_colors[sel] - lo - 1] = True
            bitmap_rows[v] = bm
            msgs[v] = ("pal-range", b)
            bits[v] = 2 + idx_bits + range_size
        prepared.append((clique, bucketing, range_size, bitmap_rows))
    if msgs:
        ops.exchange(msgs, bits)
    out: dict[int, np.ndarray] = {}
    for clique, bucketing, range_size, bitmap_rows in prepared:
        members = clique.members
        words = max(1, math.ceil(delta1 / ops.width))
        for v in members.tolist():
            eng.charge(int(v), words + math.ceil(range_size / ops.width))
        used_exact = np.zeros(delta1, dtype=bool)
        mcolors = vis[members]
        used_exact[mcolors[mcolors > 0] - 1] = True
        own_col = mcolors
        for b in range(bucketing.k):
            t_nodes = bucketing.buckets[b]
            lo = b * range_size
            hi = min(delta1, lo + range_size)
            if lo >= delta1:
                continue
            truth = used_exact[lo:hi]
            if len(t_nodes) == 0:
                if truth.any():
                    eng.fault("palette-range-uncovered", clique.leader,
                              f"range {b} used but bucket empty", fatal=True)
                continue
            rows = np.stack([bitmap_rows[int(u)] for u in t_nodes.tolist()])
            adj = _member_bucket_adjacency(g, members, t_nodes)
            views = adj.astype(np.float32) @ \
                rows[:, : hi - lo].astype(np.float32) > 0
            sel = (own_col > lo) & (own_col <= hi)  # own color is self-known
            views[np.nonzero(sel)[0], own_col[sel] - lo - 1] = True
            if not np.array_equal(views, np.broadcast_to(truth, views.shape)):
                bad = int(members[np.nonzero(
                    (views != truth).any(axis=1))[0][0]])
                eng.fault("palette-mismatch", bad,
                          f"range {b} differs from recount", fatal=True)
        out[clique.index] = ~used_exact
    return out


def learn_palette(ops: RoundOps, clique: AlmostClique, bucketing: Bucketing
                  ) -> np.ndarray:
    return learn_palette_all(ops, [(clique, bucketing)])[clique.index]


# ----- relabeling ------------------------------------------------------------


@dataclass
class Relabeling:
    labels: dict[int, int]          # node -> new short label
    chosen_index: int
    label_bits: int


def relabel_parallel(ops: RoundOps, groups: Sequence[tuple[np.ndarray, np.ndarray]],
                     tag: str,
                     label_streams: Optional[dict[int, list[int]]] = None
                     ) -> list[Relabeling]:
    """Relabel each (shot, subset) group; all groups share the same rounds.

    Per group: each subset node samples x candidate labels from
    [|S|^2 log n] and broadcasts them (chunked); every shot node
    broadcasts an x-bit per-index collision map; the minimum
    collision-free index is adopted.  `label_streams` is a test hook
    overriding sampled labels."""
    eng = ops.engine
    cfg = eng.config
    n = ops.g.n
    x = cfg.relabel_tries(n)
    plans = []
    sender_bits: dict[int, int] = {}
    shot_nodes: set[int] = set()
    for shot, subset in groups:
        size = max(1, len(subset))
        space = max(2, size * size * ceil_log2(n))
        label_bits = ceil_log2(space)
        samples: dict[int, list[int]] = {}
        for v in subset.tolist():
            v = int(v)
            if label_streams and v in label_streams:
                samples[v] = list(label_streams[v])[:x]
            else:
                rng = eng.node_rng(v, f"{tag}-labels")
                samples[v] = [rng.randrange(space) for _ in range(x)]
            sender_bits[v] = x * label_bits
        plans.append((subset, samples, label_bits))
        shot_nodes.update(int(v) for v in shot.tolist())
    if sender_bits:
        chunk_rounds(ops, sender_bits, f"{tag}-lbl")
    if shot_nodes:
        ops.exchange({v: ("lblmap", tag) for v in sorted(shot_nodes)},
                     {v: 2 + x for v in sorted(shot_nodes)})
    out = []
    for subset, samples, label_bits in plans:
        for v in subset.tolist():
            eng.charge(int(v), x + 2)
        chosen = -1
        for j in range(x):
            seen: set[int] = set()
            ok = True
            for v in subset.tolist():
                lbl = samples[int(v)][j]
                if lbl in seen:
                    ok = False
                    break
                seen.add(lbl)
            if ok:
                chosen = j
                break
        if chosen < 0:
            eng.fault("relabel-collision",
                      int(subset[0]) if len(subset) else -1,
                      f"all {x} label indices collide", fatal=True)
        out.append(Relabeling(labels={int(v): samples[int(v)][chosen]
                                      for v in subset.tolist()},
                              chosen_index=chosen + 1, label_bits=label_bits))
    return out


def relabel(ops: RoundOps, shot: np.ndarray, subset: np.ndarray, tag: str,
            label_streams: Optional[dict[int, list[int]]] = None) -> Relabeling:
    return relabel_parallel(ops, [(shot, subset)], tag, label_streams)[0]


# ----- permutations ----------------------------------------------------------


def _leader_permute(eng, bucket_nodes: Sequence[int], subset: Sequence[int],
                    tag: str) -> dict[int, int]:
    """Max-ID node of the bucket samples a uniform order of the subset."""
    if not subset:
        return {}
    leader = max(bucket_nodes)
    order = sorted(int(v) for v in subset)
    eng.rng(f"{tag}-perm", leader).shuffle(order)
    return {v: i for i, v in enumerate(order)}


def _base_bucketing(ops: RoundOps, clique: AlmostClique, tag: str) -> Bucketing:
    if bucket_count_for(ops.engine.config, ops.g, clique) <= 1:
        return sample_bucketing(ops, clique.members, 1, tag, 0)
    return checked_bucketing(ops, clique, tag)


def permute_loglog(ops: RoundOps, clique: AlmostClique, subset: np.ndarray,
                   tag: str = "perm",
                   bucketing: Optional[Bucketing] = None) -> dict[int, int]:
    """Near-uniform bijection subset -> [0, |subset|) in O(loglog n) rounds."""
    eng = ops.engine
    if len(subset) == 0:
        return {}
    if bucketing is None:
        bucketing = _base_bucketing(ops, clique, tag)
    sub_set = set(int(v) for v in subset.tolist())
    s_buckets = [np.array([v for v in t.tolist() if v in sub_set],
                          dtype=np.int64) for t in bucketing.buckets]
    # Counting buckets: depth-2 aggregation and dissemination per bucket;
    # in streaming mode the cross-bucket offsets come from prefix sums.
    if eng.mode == "bcstream" and bucketing.k > 1:
        from .streaming import prefix_sums
        live = [i for i, t in enumerate(bucketing.buckets) if len(t)]
        res = prefix_sums(ops, [bucketing.buckets[i] for i in live],
                          [len(s_buckets[i]) for i in live])
        offsets = [0] * bucketing.k
        for pos, i in enumerate(live):
            offsets[i] = res.prefixes[pos]
    else:
        eng.tick(2, ceil_log2(max(2, len(clique.members))) + 2)
        offsets = np.concatenate(
            [[0], np.cumsum([len(s) for s in s_buckets])[:-1]]).tolist()
    groups = [(bucketing.buckets[i], s_buckets[i])
              for i in range(bucketing.k) if len(s_buckets[i])]
    rls = relabel_parallel(ops, groups, tag)
    label_width = max((rl.label_bits for rl in rls), default=1)
    pi: dict[int, int] = {}
    for i, t in enumerate(bucketing.buckets):
        s_i = s_buckets[i]
        if len(s_i) == 0:
            continue
        rho = _leader_permute(eng, t.tolist() if len(t) else s_i.tolist(),
                              s_i.tolist(), f"{tag}-b{i}")
        for v, r in rho.items():
            pi[v] = int(offsets[i]) + r
    # Leader dissemination: |S_i| short labels over a depth-2 tree, chunked;
    # this is the O(loglog n)-round part of the procedure.
    max_s = max((len(s) for s in s_buckets), default=0)
    if max_s:
        per_leader_bits = max_s * max(1, label_width)
        chunks = max(1, math.ceil(per_leader_bits / (eng.budget_bits - 2)))
        eng.tick(2 * chunks, min(eng.budget_bits, per_leader_bits + 2))
    _assert_bijection(pi, subset)
    return pi


def permute_const(ops: RoundOps, clique: AlmostClique, subset: np.ndarray,
                  tag: str = "permc",
                  bucketing: Optional[Bucketing] = None,
                  force_unpreserved: bool = False,
                  force_k_prime: Optional[int] = None) -> dict[int, int]:
    """O(1)-round permutation via a second, finer bucketing.

    Fine buckets that remain AC-preserved inside their rough bucket are
    permuted by their max-ID leader; members of all other fine buckets
    join R and order themselves by broadcast random keys, disseminated
    clique-wide by Many-to-All.  `force_unpreserved`/`force_k_prime` are
    test hooks."""
    eng = ops.engine
    cfg = eng.config
    g = ops.g
    if len(subset) == 0:
        return {}
    if bucketing is None:
        bucketing = _base_bucketing(ops, clique, tag)
    k_prime = force_k_prime if force_k_prime else cfg.fine_bucket_count(g.n)
    sub_set = set(int(v) for v in subset.tolist())
    eps2 = cfg.eps_dblprime

    eng.tick(2, ceil_log2(max(2, len(clique.members))) + 2)  # rough counts
    s_buckets = [np.array([v for v in t.tolist() if v in sub_set],
                          dtype=np.int64) for t in bucketing.buckets]
    groups = [(bucketing.buckets[i], s_buckets[i])
              for i in range(bucketing.k) if len(s_buckets[i])]
    relabel_parallel(ops, groups, tag)
    # Fine bucketing: one index round + fine-count aggregation (parallel).
    eng.tick(1, max(1, ceil_log2(max(2, k_prime))) + 2)
    eng.tick(2, min(eng.budget_bits,
                    k_prime * ceil_log2(max(2, g.max_degree)) + 2))

    pi: dict[int, int] = {}
    offset = 0
    leftovers: list[tuple[int, list[int]]] = []
    for i, t in enumerate(bucketing.buckets):
        s_i = s_buckets[i]
        if len(s_i) == 0:
            continue
        fine_assign = {int(v): eng.node_rng(v, f"{tag}-fine").randrange(k_prime)
                       for v in t.tolist()}
        local_off = 0
        for ip in range(k_prime):
            t_fine = np.array([v for v in t.tolist()
                               if fine_assign[int(v)] == ip], dtype=np.int64)
            s_fine = [int(v) for v in t_fine.tolist() if int(v) in sub_set]
            if not s_fine:
                continue
            preserved = (not force_unpreserved) and \
                ac_preserved(g, t, t_fine, k_prime, eps2)
            if preserved:
                rho = _leader_permute(eng, t_fine.tolist(), s_fine,
                                      f"{tag}-b{i}f{ip}")
                for v, r in rho.items():
                    pi[v] = offset + local_off + r
            else:
                leftovers.append((offset + local_off, sorted(s_fine)))
            local_off += len(s_fine)
        offset += local_off

    if leftovers:
        r_nodes = [v for _, s in leftovers for v in s]
        cap = cfg.m2a_sender_cap(g.max_degree, g.n)
        if len(r_nodes) > cap:
            eng.fault("permute-const-overflow", r_nodes[0],
                      f"|R|={len(r_nodes)} exceeds cap {cap}")
            raise SctFault("leftover set exceeds many-to-all capacity")
        key_bits = cfg.C * ceil_log2(g.n)
        keys = {v: eng.node_rng(v, f"{tag}-rkey").getrandbits(key_bits)
                for v in r_nodes}
        payload = key_bits + ops.width + \
            ceil_log2(max(2, bucketing.k)) + ceil_log2(max(2, k_prime))
        many_to_all(ops, clique.members, sorted(r_nodes), payload,
                    tag=f"{tag}-r")
        for base, s_fine in leftovers:
            order = sorted(s_fine, key=lambda v: (keys[v], v))
            for r, v in enumerate(order):
                pi[v] = base + r
    _assert_bijection(pi, subset)
    return pi


def _assert_bijection(pi: dict[int, int], subset: np.ndarray) -> None:
    if len(pi) != len(subset):
        raise SctFault(f"permutation covers {len(pi)} of {len(subset)} nodes")
    if sorted(pi.values()) != list(range(len(subset))):
        raise SctFault("permutation image is not [0, |S|)")


# ----- the trial itself -------------------------------------------------------


@dataclass
class SctOutcome:
    tried: int = 0
    colored: int = 0
    leftover: int = 0
    leftover_bound: float = 0.0
    within_bound: bool = True


def sct_trial(ops: RoundOps, clique: AlmostClique, psi_free: np.ndarray,
              pi: dict[int, int], subset: np.ndarray) -> SctOutcome:
    """Each v in the subset tries the pi(v)-th free color above x(K).

    Free colors are taken in ascending order.  In-clique conflicts are
    impossible (distinct indices); failures come only from external
    neighbors holding or simultaneously trying the color."""
    eng = ops.engine
    cfg = eng.config
    x = clique.x
    free = np.nonzero(psi_free)[0] + 1
    free = free[free > x]
    if len(free) < len(subset):
        # Size precondition violated; the lowest-indexed nodes still try,
        # the rest wait for the cleanup rounds.
        eng.fault("sct-precondition", clique.leader,
                  f"|Psi(K)|-x={len(free)} < |S|={len(subset)}")
    tries = {int(v): int(free[pi[int(v)]]) for v in subset.tolist()
             if pi[int(v)] < len(free)}
    winners = ops.try_color_round(tries, palette_guard=False)
    out = SctOutcome(tried=len(tries), colored=len(winners),
                     leftover=len(tries) - len(winners))
    out.leftover_bound = 8.0 * max(6.0 * float(clique.e_bar),
                                   cfg.C * ceil_log2(ops.g.n))
    out.within_bound = out.leftover <= out.leftover_bound
    return out


def open_cleanup(ops: RoundOps, cliques: Sequence[AlmostClique],
                 x_of: np.ndarray, rounds: Optional[int] = None,
                 p_t: Optional[float] = None) -> dict[int, list[int]]:
    """Extra try_color rounds for open cliques, colors above x(v) only.

    Returns per-round uncolored counts per clique for decay diagnostics."""
    eng = ops.engine
    cfg = eng.config
    rounds = cfg.r_open if rounds is None else rounds
    p_t = cfg.p_t_open if p_t is None else p_t
    decay: dict[int, list[int]] = {k.index: [] for k in cliques}
    if not cliques:
        return decay
    for _ in range(rounds):
        tries = {}
        for k in cliques:
            unc = k.members[ops.coloring.colors[k.members] == 0]
            decay[k.index].append(len(unc))
            for v in unc.tolist():
                rng = eng.node_rng(v, "open-clean")
                if rng.random() >= p_t:
                    continue
                c = ops.sample_from_palette(v, rng, restrict_above=int(x_of[v]),
                                            round_no=eng.round_no - 1)
                if c is not None:
                    tries[v] = c
        if not tries:
            eng.tick(1, 2)
            continue
        ops.try_color_round(tries)
    for k in cliques:
        unc = k.members[ops.coloring.colors[k.members] == 0]
        decay[k.index].append(len(unc))
    return decay
