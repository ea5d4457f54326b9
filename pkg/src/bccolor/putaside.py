"""Coloring the put-aside sets.

Everything here happens after the rest of the graph is colored, so each
clique works independently (put-aside sets of different cliques share no
edges).  The size of each set is first reduced to O(log n / loglog n) by
CompressTry - a batch of non-adaptive color trials resolved by a locally
simulated sequential pass - and the remainder is finished by a greedy
pass over short broadcast lists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import ceil_log2, ceil_loglog2
from .decomposition import AlmostClique
from .rounds import RoundOps, many_to_all
from .sct import relabel


def _chunked_m2a(ops: RoundOps, members: np.ndarray, senders: list[int],
                 total_bits: int, tag: str,
                 receivers: Optional[np.ndarray] = None) -> int:
    """Many-to-all of payloads larger than one message; returns rounds."""
    budget = ops.engine.budget_bits - 2 - ops.width
    n_chunks = max(1, math.ceil(total_bits / max(1, budget)))
    rounds = 0
    for i in range(n_chunks):
        part = min(budget, total_bits - i * budget)
        res = many_to_all(ops, members, senders, part, tag=f"{tag}-c{i}",
                          receivers=receivers)
        rounds += res.rounds
    return rounds


def _usable(ops: RoundOps, v: int, colors: Sequence[int]) -> list[int]:
    pal = ops.palette_bool(v, ops.engine.round_no + 1)
    return [c for c in colors if pal[c - 1]]


@dataclass
class CompressOutcome:
    colored: dict[int, int] = field(default_factory=dict)
    leftover: list[int] = field(default_factory=list)
    rounds: int = 0
    msg_bits: int = 0
    precondition_ok: bool = True


def compress_try(ops: RoundOps, clique: AlmostClique, subset: np.ndarray,
                 lists: dict[int, list[int]], z: int, k_tries: int,
                 labels: dict[int, int], tag: str,
                 instances: int = 1, dry_run: bool = False) -> CompressOutcome:
    """Batched non-adaptive color trials, resolved by a shared simulation.

    Each node of the subset samples k colors uniformly from L(v) & Psi(v)
    and disseminates them (with its short label) through Many-to-All;
    every node then simulates the same sequential pass in increasing
    label order, adopting the first sampled color not taken by an
    earlier node.  With `instances` > 1, the samples of all instances
    travel together and the lowest-indexed instance with leftover <= z
    is adopted by everyone (indices are public, so the local simulations
    stay in agreement).
    """
    eng = ops.engine
    out = CompressOutcome()
    sub = sorted(int(v) for v in subset.tolist())
    if not sub:
        return out
    # Precondition |L(v) & Psi(v)| >= |S| + z, per member.
    usable: dict[int, list[int]] = {}
    for v in sub:
        usable[v] = _usable(ops, v, lists[v])
        if len(usable[v]) < len(sub) + z:
            out.precondition_ok = False
            eng.fault("compress-precondition", v,
                      f"|L&Psi|={len(usable[v])} < |S|+z={len(sub) + z}")
    order = sorted(sub, key=lambda v: (labels[v], v))
    if len(set(labels[v] for v in sub)) != len(sub):
        eng.fault("compress-labels", sub[0], "labels not injective", fatal=True)

    samples: dict[int, list[list[int]]] = {}
    for v in sub:
        rng = eng.node_rng(v, f"{tag}-samples")
        per_inst = []
        for _ in range(instances):
            pool = usable[v]
            per_inst.append([pool[rng.randrange(len(pool))]
                             for _ in range(k_tries)] if pool else [])
        samples[v] = per_inst
        eng.charge(v, instances * k_tries + 2)

    idx_bits = ceil_log2(max(2, max((len(lists[v]) for v in sub), default=2)))
    label_bits = max(1, max(labels[v] for v in sub).bit_length())
    per_instance_bits = label_bits + k_tries * idx_bits
    out.msg_bits = per_instance_bits
    total_bits = instances * per_instance_bits
    if not dry_run:
        out.rounds = _chunked_m2a(ops, clique.members, sub, total_bits, tag,
                                  receivers=subset)

    def simulate(inst: int) -> tuple[dict[int, int], list[int]]:
        taken: set[int] = set()
        got: dict[int, int] = {}
        left: list[int] = []
        for v in order:
            choice = None
            for c in samples[v][inst]:
                if c not in taken:
                    choice = c
                    break
            if choice is None:
                left.append(v)
            else:
                got[v] = choice
                taken.add(choice)
        return got, left

    best = None
    for inst in range(instances):
        got, left = simulate(inst)
        # agreement check: replay from an independently shuffled view
        replay_order = sorted(order, key=lambda v: (labels[v], v))
        assert replay_order == order
        got2, left2 = simulate(inst)
        if (got2, left2) != (got, left):
            eng.fault("compress-agreement", sub[0],
                      "local simulations disagree", fatal=True)
        if best is None and len(left) <= z:
            best = (inst, got, left)
    if best is None:
        got, left = simulate(0)
        best = (-1, got, left)
    _, got, left = best
    for v in order:
        if v in got:
            ops.assign(v, got[v])
    out.colored = got
    out.leftover = left
    return out


@dataclass
class ReduceOutcome:
    final: list[int] = field(default_factory=list)
    phases: list[dict] = field(default_factory=list)
    ok: bool = True


def _anti_color_lists(ops: RoundOps, clique: AlmostClique,
                      subset: list[int], tag: str) -> dict[int, list[int]]:
    """Colors of in-clique anti-neighbors for each subset node, learned by
    bitmap dissemination over the relabeled subset."""
    g = ops.g
    eng = ops.engine
    members = clique.members
    pos = {v: i for i, v in enumerate(subset)}
    senders = []
    contrib: dict[int, list[int]] = {v: [] for v in subset}
    packed = g.packed()
    sub_mask = g.pack_set(np.array(subset, dtype=np.int64))
    for u in members.tolist():
        cu = int(ops.coloring.colors[u])
        if cu == 0:
            continue
        row = sub_mask & ~packed[u]
        raw = int.from_bytes(row.tobytes(), "little")
        anti = []
        x = raw
        while x:
            b = x & -x
            w = b.bit_length() - 1
            x ^= b
            if w != u and w in pos:
                anti.append(w)
        if anti:
            senders.append(u)
            for w in anti:
                contrib[w].append(cu)
    cap = eng.config.m2a_sender_cap(g.max_degree, g.n)
    if len(senders) > cap:
        eng.fault("anti-bitmap-cap", clique.leader,
                  f"{len(senders)} bitmap senders exceed cap {cap}")
    if senders:
        _chunked_m2a(ops, members, senders, len(subset) + ops.color_width,
                     tag, receivers=np.array(subset, dtype=np.int64))
    return contrib


def reduce_putaside(ops: RoundOps, clique: AlmostClique,
                    psi_free: np.ndarray) -> ReduceOutcome:
    """Shrink the uncolored put-aside set to ~log n / loglog n nodes.

    With a colorful matching (a_bar >= C log n) the clique palette alone
    has enough slack: loglog n parallel CompressTry instances with
    z = C log n / loglog n.  Otherwise two phases: carve a small hold-out
    to create slack z = C log n, compress against the clique palette,
    then augment lists with anti-neighbor colors and compress again down
    to z = C log n / loglog n; phase carve-outs are sized adaptively from
    the observed anti-degrees (the fixed constant presumes far larger
    scale)."""
    eng = ops.engine
    cfg = eng.config
    g = ops.g
    log_n = ceil_log2(g.n)
    z_final = cfg.reduce_z(g.n)
    k_tries = cfg.compress_tries(g.n)
    target = math.ceil(cfg.reduce_target_mult * log_n / ceil_loglog2(g.n))
    out = ReduceOutcome()
    if clique.putaside is None:
        return out
    p_hat = [int(v) for v in clique.putaside.tolist()
             if not ops.coloring.colors[v]]
    if len(p_hat) <= target:
        out.final = p_hat
        return out
    rl = relabel(ops, clique.members, np.array(p_hat, dtype=np.int64),
                 f"rp-{clique.index}")
    labels = rl.labels
    free_colors = (np.nonzero(psi_free)[0] + 1).tolist()

    big_anti = clique.a_bar >= cfg.C * log_n
    if big_anti:
        lists = {v: free_colors for v in p_hat}
        res = compress_try(ops, clique, np.array(p_hat, dtype=np.int64),
                           lists, z_final, k_tries, labels,
                           f"rpA-{clique.index}",
                           instances=ceil_loglog2(g.n))
        out.phases.append({"branch": "matching", "left": len(res.leftover)})
        out.final = res.leftover
        out.ok = len(res.leftover) <= max(target, z_final)
        if not out.ok:
            eng.fault("reduce-shortfall", clique.leader,
                      f"{len(res.leftover)} > {max(target, z_final)}")
        return out

    # Phase 1: clique palette only, hold out enough nodes to cover both z
    # and the worst anti-degree in the set.
    pos = {int(v): i for i, v in enumerate(clique.members.tolist())}
    current = sorted(p_hat, key=lambda v: (labels[v], v))
    for phase, z in enumerate((cfg.C * log_n, z_final)):
        if len(current) <= target:
            break
        if phase == 0:
            lists = {v: free_colors for v in current}
        else:
            anti = _anti_color_lists(ops, clique, current,
                                     f"rpanti-{clique.index}")
            lists = {v: sorted(set(free_colors) | set(anti[v]))
                     for v in current}
        slack = {v: len(_usable(ops, v, lists[v])) for v in current}
        lo_slack = min(slack.values())
        keep = max(0, min(len(current) - 1, lo_slack - z))
        carve = current[keep:]
        body = current[:keep]
        if not body:
            eng.fault("reduce-infeasible", clique.leader,
                      f"phase {phase}: slack {lo_slack} too small")
            out.ok = False
            break
        res = compress_try(ops, clique, np.array(body, dtype=np.int64),
                           {v: lists[v] for v in body}, z, k_tries, labels,
                           f"rp{phase}-{clique.index}")
        current = sorted(res.leftover + carve, key=lambda v: (labels[v], v))
        out.phases.append({"branch": f"phase{phase}", "left": len(current)})
        free_colors = [c for c in free_colors
                       if all(w not in pos for w in ops.holders.get(c, ()))]
    out.final = current
    if len(current) > max(target, 2 * z_final + 2):
        out.ok = False
        eng.fault("reduce-shortfall", clique.leader,
                  f"|P^|={len(current)} above target {target}")
    return out


@dataclass
class FinishOutcome:
    colored: int = 0
    ok: bool = True


def finish_putaside(ops: RoundOps, clique: AlmostClique,
                    psi_free: np.ndarray, residue: list[int]) -> FinishOutcome:
    """Color the reduced put-aside set by a locally simulated greedy pass.

    Working palette D = the c*log^3 n smallest free colors of the clique
    palette; each node broadcasts a list of |P^|+1 usable colors
    (D-relative indices, augmented with anti-neighbor colors when the
    clique has no matching); everyone simulates the same greedy pass in
    short-label order."""
    eng = ops.engine
    cfg = eng.config
    g = ops.g
    out = FinishOutcome()
    p_hat = [v for v in residue if not ops.coloring.colors[v]]
    if not p_hat:
        return out
    log_n = ceil_log2(g.n)
    rl = relabel(ops, clique.members, np.array(p_hat, dtype=np.int64),
                 f"fin-{clique.index}")
    labels = rl.labels
    free = (np.nonzero(psi_free)[0] + 1).tolist()
    free = [c for c in free if not any(
        ops.coloring.colors[w] == c for w in clique.members.tolist()
        if ops.coloring.colors[w])]  # refresh against in-stage adoptions
    d_size = min(len(free), cfg.finish_palette_cubes * log_n ** 3)
    d_colors = free[:d_size]
    need = len(p_hat) + 1
    anti = None
    if clique.a_bar < cfg.C * log_n:
        anti = _anti_color_lists(ops, clique, sorted(p_hat),
                                 f"finanti-{clique.index}")
    lists: dict[int, list[int]] = {}
    for v in p_hat:
        cand = list(d_colors)
        if anti is not None:
            cand = sorted(set(cand) | set(anti[v]))
        usable = _usable(ops, v, cand)
        if len(usable) < need:
            eng.fault("finish-list-short", v,
                      f"{len(usable)} usable < |P^|+1={need}")
            out.ok = False
        lists[v] = usable[:need]
    idx_bits = ceil_log2(max(2, d_size + len(p_hat) + 2))
    total_bits = need * idx_bits
    _chunked_m2a(ops, clique.members, sorted(p_hat), total_bits,
                 f"fin-{clique.index}", receivers=np.array(p_hat, np.int64))
    taken: set[int] = set()
    order = sorted(p_hat, key=lambda v: (labels[v], v))
    for v in order:
        choice = next((c for c in lists[v] if c not in taken), None)
        if choice is None:
            eng.fault("finish-stuck", v, "greedy found no color", fatal=False)
            out.ok = False
            continue
        taken.add(choice)
        ops.assign(v, choice)
        out.colored += 1
    return out
