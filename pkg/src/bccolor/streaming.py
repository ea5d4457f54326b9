"""Streaming-mode aggregation: exact prefix sums over spanning groups,
palette indexing without materializing the palette, and the memory audit.

Nodes in streaming mode cannot buffer their whole inbox, so per-term
aggregation assigns every summand to a unique representative node; a
depth-2 chief/leader tree then adds the terms without double counting.
Group sizes grow by merging z^(1/2) groups per level (z, z^(3/2), ...),
so the number of levels is O(loglog n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ceil_log2
from .decomposition import AlmostClique
from .graph import count_in_set
from .rounds import RoundOps
from .sct import Bucketing


class StreamingFault(RuntimeError):
    pass


@dataclass
class PrefixResult:
    prefixes: list[int]
    levels: int
    level_bound: int
    rounds: int


def _coverage_ok(ops: RoundOps, nodes: np.ndarray, group: np.ndarray) -> bool:
    """Every node must have a neighbor in the group (or be in it)."""
    if len(group) == 0:
        return False
    mask = ops.g.pack_set(group)
    cnt = count_in_set(ops.g, nodes, mask)
    in_group = np.isin(nodes, group)
    return bool(((cnt > 0) | in_group).all())


def _diameter2_ok(ops: RoundOps, group: np.ndarray) -> bool:
    """Any two group members are adjacent or share an in-group neighbor."""
    if len(group) <= 1:
        return True
    rows = ops.g.packed()[group] & ops.g.pack_set(group)[None, :]
    common = np.bitwise_count(rows[:, None, :] & rows[None, :, :]).sum(axis=2)
    if (common > 0).all():
        return True
    for i, j in zip(*np.nonzero(common == 0)):
        if i < j and not ops.g.has_edge(int(group[i]), int(group[j])):
            return False
    return True


def prefix_sums(ops: RoundOps, groups: Sequence[np.ndarray],
                values: Sequence[int]) -> PrefixResult:
    """Each group T_i learns sum_{j<i} y_j, exactly.

    Level 0 merges ranges of z_0 = C log n groups: every node broadcasts
    its group's value and keeps only the values of its own range (each
    node neighbors every group of its clique).  Subsequent levels merge
    z^(1/2) blocks: nodes draw a term to represent, the minimum-ID
    member per term (chief) reports it over a depth-2 tree to the block
    leader, which computes block prefixes without double counting.
    """
    eng = ops.engine
    cfg = eng.config
    g = ops.g
    k = len(groups)
    if k == 0:
        return PrefixResult([], 0, 0, 0)
    values = [int(y) for y in values]
    cap = g.n * g.n
    for y in values:
        if y > cap:
            raise StreamingFault(f"value {y} exceeds the n^2 field cap")
    pref = [0] * k
    z0 = max(2, cfg.C * ceil_log2(g.n))
    value_bits = 2 * ops.width
    rounds = 0
    levels = 0

    # Level 0: ranges of z0 groups; one value-broadcast round.
    all_nodes = np.concatenate([np.asarray(t, dtype=np.int64) for t in groups])
    msgs = {}
    bits = {}
    for j, t in enumerate(groups):
        for v in np.asarray(t).tolist():
            msgs[int(v)] = ("psum-y", values[j])
            bits[int(v)] = 2 + value_bits
    ops.exchange(msgs, bits)
    rounds += 1
    blocks: list[tuple[list[int], int]] = []   # (original indices, total)
    for start in range(0, k, z0):
        idxs = list(range(start, min(k, start + z0)))
        range_nodes = np.concatenate([np.asarray(groups[j], dtype=np.int64)
                                      for j in idxs])
        for j in idxs:
            if not _coverage_ok(ops, range_nodes, np.asarray(groups[j],
                                                             dtype=np.int64)):
                eng.fault("psum-coverage", int(np.asarray(groups[j])[0])
                          if len(groups[j]) else -1,
                          f"group {j} not adjacent to its whole range",
                          fatal=True)
        running = 0
        for j in idxs:
            pref[j] += running
            running += values[j]
        blocks.append((idxs, running))
        for v in range_nodes.tolist():
            eng.charge(int(v), min(z0, len(idxs)) + 2)

    size_bound = z0 * z0  # z_1: level-0 blocks hold >= z0 groups of >= z0 nodes
    while len(blocks) > 1:
        levels += 1
        merge = max(2, int(math.isqrt(size_bound)))
        new_blocks = []
        for start in range(0, len(blocks), merge):
            chunk = blocks[start:start + merge]
            if len(chunk) == 1:
                new_blocks.append(chunk[0])
                continue
            # Representative assignment inside every block of the range.
            for b_idx, (idxs, _total) in enumerate(chunk):
                nodes = np.concatenate([np.asarray(groups[j], dtype=np.int64)
                                        for j in idxs])
                for attempt in range(2):
                    assign = {int(v): eng.node_rng(
                        v, f"psum-rep-{levels}-{attempt}").randrange(len(chunk))
                        for v in nodes.tolist()}
                    reps = [np.array([v for v in nodes.tolist()
                                      if assign[v] == t], dtype=np.int64)
                            for t in range(len(chunk))]
                    if all(len(r) > 0 and _diameter2_ok(ops, r) for r in reps):
                        break
                else:
                    eng.fault("psum-representatives", int(nodes[0]),
                              "empty or scattered representative class",
                              fatal=True)
                leader = int(nodes.min())
                eng.charge(leader, len(chunk) + 2)
                for v in nodes.tolist():
                    eng.charge(int(v), 4)
            # Rounds: value broadcast, chief->relay, relay->leader, leader
            # result, relay re-broadcast.
            ops.engine.tick(1, value_bits + 2)
            ops.engine.tick(2, value_bits + ops.width + 2)
            ops.engine.tick(2, value_bits + 2)
            rounds += 5
            running = 0
            merged_idx: list[int] = []
            for idxs, total in chunk:
                for j in idxs:
                    pref[j] += running
                running += total
                merged_idx.extend(idxs)
            new_blocks.append((merged_idx, running))
        blocks = new_blocks
        size_bound = int(size_bound ** 1.5)

    z1 = z0 * z0
    bound = 2
    if k * z0 > z1:
        bound = math.ceil(math.log(math.log(k * z0, z1), 1.5)) + 2
    if levels > bound:
        raise StreamingFault(f"{levels} merge levels exceed bound {bound}")
    return PrefixResult(pref, levels, bound, rounds)


def nth_color_of_palette(ops: RoundOps, clique: AlmostClique,
                         bucketing: Bucketing, psi_free: np.ndarray,
                         index: int, x: int = 0) -> int:
    """The index-th (1-based) color of Psi(K) above x, located through
    per-range free-color counts and their prefix sums; the querying node
    stores one range bitmap, never the whole palette."""
    eng = ops.engine
    delta1 = ops.g.max_degree + 1
    k = bucketing.k
    range_size = math.ceil(delta1 / k)
    counts = []
    for b in range(k):
        lo, hi = b * range_size, min(delta1, (b + 1) * range_size)
        free = np.nonzero(psi_free[lo:hi])[0] + lo + 1
        counts.append(int((free > x).sum()))
    total = sum(counts)
    if not (1 <= index <= total):
        eng.fault("nth-color-range", clique.leader,
                  f"index {index} outside palette of size {total}",
                  fatal=True)
    res = prefix_sums(ops, bucketing.buckets, counts)
    b = 0
    for j in range(k):
        if res.prefixes[j] < index <= res.prefixes[j] + counts[j]:
            b = j
            break
    ops.engine.tick(1, min(ops.engine.budget_bits, range_size + 2))
    lo, hi = b * range_size, min(delta1, (b + 1) * range_size)
    free = (np.nonzero(psi_free[lo:hi])[0] + lo + 1)
    free = free[free > x]
    color = int(free[index - res.prefixes[b] - 1])
    for v in clique.members.tolist():
        eng.charge(int(v), math.ceil(range_size / ops.width) + 4)
    return color


@dataclass
class MemoryAudit:
    budget: int
    peak_words: int
    per_stage: dict = field(default_factory=dict)
    top: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.peak_words <= self.budget

    def to_dict(self) -> dict:
        return {"budget": self.budget, "peak_words": self.peak_words,
                "ok": self.ok, "top_stages": self.top}


def memory_audit(engine) -> MemoryAudit:
    """Per-stage peak live words; top-10 stages by peak."""
    per_stage = dict(engine.meter.peak_by_stage)
    top = sorted(per_stage.items(), key=lambda kv: (-kv[1], kv[0]))[:10]
    return MemoryAudit(budget=engine.meter.budget,
                       peak_words=engine.meter.peak_words,
                       per_stage=per_stage,
                       top=[{"stage": s, "peak_words": w} for s, w in top])
