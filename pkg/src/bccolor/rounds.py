"""Shared round mechanics for the pipeline stages.

Conventions used by every stage:

* Colors adopted in round r are announced as a piggyback field on the
  node's round-(r+1) broadcast; receivers therefore know neighbor colors
  adopted strictly before the current round (the "visible" coloring).
* A node samples candidates from its palette with respect to the
  coloring it can know at composition time (one round older), and the
  adoption rule is evaluated against the visible coloring plus the
  same-round tries of smaller-ID neighbors.
* Batched resolution here is semantically per-node: every decision for
  v depends only on v's state and messages of N(v).  Tests cross-check
  it against a literal per-node handler evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .coloring import PartialColoring
from .config import ceil_log2
from .engine import Broadcast, Engine
from .graph import Graph, count_in_set


class RoundOps:
    """Stage toolkit bound to one (engine, coloring) run."""

    def __init__(self, engine: Engine, coloring: PartialColoring):
        self.engine = engine
        self.g: Graph = engine.graph
        self.coloring = coloring
        self.width = ceil_log2(self.g.n)
        self.color_width = ceil_log2(self.g.max_degree + 1)
        # color -> list of nodes wearing it (append-only)
        self.holders: dict[int, list[int]] = {}
        # reserved-prefix guard: while active, node v must not adopt a
        # color <= reserve_x[v]; the pipeline lifts it when the final
        # multi-color trial stage begins.
        self.reserve_x: Optional[np.ndarray] = None
        self.reserve_active = False

    # ----- adoption bookkeeping -------------------------------------------

    def assign(self, v: int, color: int,
               round_no: Optional[int] = None) -> None:
        """Adopt a color; `round_no` is the round the decision belongs to
        (the try round), which controls when neighbors see it."""
        if self.reserve_active and self.reserve_x is not None and \
                color <= self.reserve_x[v]:
            self.engine.fault("reserve-violation", v,
                              f"color {color} <= x(v)={self.reserve_x[v]}",
                              fatal=True)
        r = self.engine.round_no if round_no is None else round_no
        self.coloring.assign(v, color, r)
        self.holders.setdefault(color, []).append(v)

    def announce_bits(self, v: int) -> int:
        if self.coloring.colors[v] and \
                self.coloring.adopted_round[v] == self.engine.round_no - 1:
            return self.color_width + 1
        return 0

    def exchange(self, msgs: dict[int, tuple], bits: dict[int, int]) -> None:
        """One round; adds announce piggyback for fresh adopters."""
        out = {}
        fresh = np.nonzero((self.coloring.adopted_round
                            == self.engine.round_no - 1)
                           & (self.coloring.colors != 0))[0]
        for v in fresh.tolist():
            if v not in msgs:
                out[v] = Broadcast(("col", int(self.coloring.colors[v])),
                                   1 + self.color_width + 1)
        for v, payload in msgs.items():
            out[v] = Broadcast(payload, bits[v] + self.announce_bits(v))
        self.engine.exchange(out)

    # ----- palette queries -------------------------------------------------

    def neighbor_holds(self, v: int, color: int, round_no: Optional[int] = None,
                       visible_only: bool = True) -> bool:
        """True iff a neighbor of v wears `color` (visible by round_no)."""
        r = self.engine.round_no if round_no is None else round_no
        for u in self.holders.get(color, ()):  # few holders per color
            if visible_only and self.coloring.adopted_round[u] >= r:
                continue
            if self.g.has_edge(u, v):
                return True
        return False

    def palette_bool(self, v: int, round_no: Optional[int] = None) -> np.ndarray:
        """Free colors of v as bool over colors 1..Delta+1 (index c-1)."""
        r = self.engine.round_no if round_no is None else round_no
        delta1 = self.g.max_degree + 1
        nbrs = self.g.neighbors(v)
        nc = self.coloring.colors[nbrs]
        vis = nc * (self.coloring.adopted_round[nbrs] < r)
        used = np.zeros(delta1 + 1, dtype=bool)
        used[vis] = True
        return ~used[1:]

    def sample_from_palette(self, v: int, rng, restrict_above: int = 0,
                            round_no: Optional[int] = None) -> Optional[int]:
        """Uniform color from {c in palette(v) : c > restrict_above}."""
        free = np.nonzero(self.palette_bool(v, round_no))[0] + 1
        free = free[free > restrict_above]
        if len(free) == 0:
            return None
        return int(free[rng.randrange(len(free))])

    # ----- random color trial ----------------------------------------------

    def resolve_tries(self, tries: dict[int, int],
                      round_no: Optional[int] = None) -> dict[int, int]:
        """Winners of one try round, without assigning.

        v wins iff no neighbor u < v tried the same color this round and
        no neighbor visibly wears the color.
        """
        r = self.engine.round_no if round_no is None else round_no
        by_color: dict[int, list[int]] = {}
        for v, c in tries.items():
            by_color.setdefault(c, []).append(v)
        winners: dict[int, int] = {}
        for c, group in by_color.items():
            group.sort()
            for i, v in enumerate(group):
                if self.neighbor_holds(v, c, r):
                    continue
                if any(self.g.has_edge(u, v) for u in group[:i]):
                    continue
                winners[v] = c
        return winners

    def try_color_round(self, tries: dict[int, int], extra_bits: int = 0,
                        palette_guard: bool = True) -> dict[int, int]:
        """One engine round of trying colors; assigns and returns winners."""
        r = self.engine.round_no
        if palette_guard:
            for v, c in tries.items():
                if self.neighbor_holds(v, c, r - 1):
                    self.engine.fault("palette-contract", v,
                                      f"candidate {c} not in sampling palette",
                                      fatal=True)
        msgs = {v: ("try", c) for v, c in tries.items()}
        bits = {v: 2 + self.color_width + extra_bits for v in tries}
        self.exchange(msgs, bits)
        winners = self.resolve_tries(tries, r)
        for v in sorted(winners):
            self.assign(v, winners[v], round_no=r)
        return winners

    # ----- clique aggregation ----------------------------------------------

    def clique_aggregate(self, cliques: Sequence, values: dict[int, tuple],
                         value_bits: int) -> dict[int, tuple]:
        """Sum integer tuples over each clique via a depth-2 leader tree.

        Leader = minimum-ID member; relays = leader's neighbors inside K.
        Every member must be the leader, a relay, or adjacent to a relay
        (checked; fault otherwise).  Costs 4 rounds; afterwards every
        member knows the sums (leader broadcast, relays re-broadcast,
        and relays cover all members).
        """
        out: dict[int, tuple] = {}
        for k in cliques:
            members = k.members
            leader = k.leader
            in_k = set(members.tolist())
            relay = sorted((set(self.g.neighbors(leader).tolist()) & in_k)
                           | {leader})
            cnt = count_in_set(self.g, members, self.g.pack_set(relay))
            for i, v in enumerate(members.tolist()):
                if v not in relay and cnt[i] == 0:
                    self.engine.fault("aggregation-tree", v,
                                      "member not covered by leader tree",
                                      fatal=True)
            acc: Optional[tuple] = None
            for v in members.tolist():
                val = values.get(v)
                if val is None:
                    continue
                acc = val if acc is None else tuple(a + b for a, b in zip(acc, val))
            out[k.index] = acc if acc is not None else ()
        # Rounds: parent pick + leaf values + relay partials + dissemination.
        self.engine.tick(1, 2)
        self.engine.tick(1, value_bits + self.width)
        self.engine.tick(1, value_bits + 1)
        self.engine.tick(1, value_bits + 1)
        return out


# ----- many-to-all broadcast -------------------------------------------------


@dataclass
class ManyToAllResult:
    delivered: bool
    rounds: int
    missing: list  # (node, message_index) pairs still missing at the end


def many_to_all(ops: RoundOps, members: np.ndarray, senders: list[int],
                payload_bits: int, r_rounds: Optional[int] = None,
                t_relay: Optional[int] = None, tag: str = "m2a",
                receivers: Optional[np.ndarray] = None) -> ManyToAllResult:
    """Gossip `senders`' messages to every member of the almost-clique.

    Round 1: each sender broadcasts its message.  Rounds 2..r: every
    member re-broadcasts t messages sampled uniformly from those it has
    received so far (the origin ID rides along, widening each relayed
    copy by the ID width).  The postcondition is that every node in
    `receivers` (default: all members) holds every message; one retry
    round is attempted before a delivery fault is recorded.
    """
    eng = ops.engine
    cfg = eng.config
    g = ops.g
    r_rounds = cfg.m2a_rounds if r_rounds is None else r_rounds
    t_relay = cfg.m2a_relay if t_relay is None else t_relay
    cap = cfg.m2a_sender_cap(g.max_degree, g.n)
    if len(senders) > cap:
        eng.fault("m2a-cap", int(senders[0]),
                  f"{len(senders)} senders exceed cap {cap}")
    if not senders:
        return ManyToAllResult(True, 0, [])
    member_list = members.tolist()
    n_k = len(member_list)
    member_pos = {v: i for i, v in enumerate(member_list)}
    n_s = len(senders)

    def positions_of(mask: int) -> np.ndarray:
        if mask == 0:
            return np.empty(0, dtype=np.int64)
        raw = mask.to_bytes((n_k + 7) // 8, "little")
        bits_arr = np.unpackbits(np.frombuffer(raw, np.uint8), bitorder="little")
        return np.nonzero(bits_arr[:n_k])[0]

    # Per-member adjacency masks over member positions (python ints).
    local_index = np.full(g.n, -1, dtype=np.int64)
    local_index[members] = np.arange(n_k)
    local_adj = []
    for v in member_list:
        nbrs = local_index[g.neighbors(v)]
        nbrs = nbrs[nbrs >= 0]
        row = np.zeros(n_k, dtype=np.uint8)
        row[nbrs] = 1
        local_adj.append(int.from_bytes(
            np.packbits(row, bitorder="little").tobytes(), "little"))

    # holders[m]: int mask over member positions; held: (n_k, n_s) bools.
    holders = [0] * n_s
    held = np.zeros((n_k, n_s), dtype=bool)

    def deliver(m: int, reach: int) -> None:
        new = reach & ~holders[m]
        if new:
            holders[m] = reach | holders[m]
            held[positions_of(new), m] = True

    # Round 1: senders broadcast.
    msgs = {v: ("m2a", tag, j) for j, v in enumerate(senders)}
    bits = {v: 2 + payload_bits for v in senders}
    ops.exchange(msgs, bits)
    for j, v in enumerate(senders):
        if v in member_pos:
            deliver(j, local_adj[member_pos[v]] | (1 << member_pos[v]))
        else:  # sender outside K (not expected): reach its K-neighbors
            reach = 0
            nbrs = local_index[g.neighbors(v)]
            for i in nbrs[nbrs >= 0].tolist():
                reach |= 1 << i
            deliver(j, reach)
    rounds_used = 1

    relay_width = payload_bits + ops.width
    if relay_width > eng.budget_bits - 2:
        eng.fault("m2a-payload", int(senders[0]),
                  f"relayed copy of {relay_width} bits cannot fit the budget",
                  fatal=True)
    t_relay = max(1, min(t_relay, (eng.budget_bits - 2) // relay_width))
    if receivers is None:
        rec_rows = np.arange(n_k)
    else:
        rec_rows = local_index[receivers]

    max_relay = (r_rounds - 1) + 1  # scheduled relays + one retry round
    for _ in range(max_relay):
        if held[rec_rows].all():
            break
        msgs = {}
        bits = {}
        picks_of: list[list[int]] = [[] for _ in member_list]
        for i, v in enumerate(member_list):
            mine = np.nonzero(held[i])[0]
            if len(mine) == 0:
                continue
            rng = eng.node_rng(v, f"{tag}-relay")
            if len(mine) <= t_relay:
                picks = mine.tolist()
            else:
                picks = [int(mine[j]) for j in
                         sorted(rng.sample(range(len(mine)), t_relay))]
            picks_of[i] = picks
            msgs[v] = ("m2a-relay", tag, tuple(picks))
            bits[v] = 2 + len(picks) * relay_width
        ops.exchange(msgs, bits)
        gathered: dict[int, int] = {}
        for i in range(n_k):
            for m in picks_of[i]:
                gathered[m] = gathered.get(m, 0) | local_adj[i]
        for m, reach in gathered.items():
            deliver(m, reach)
        rounds_used += 1

    missing = []
    bad = np.nonzero(~held[rec_rows])
    for row, m in zip(bad[0].tolist(), bad[1].tolist()):
        v = member_list[int(rec_rows[row])]
        missing.append((v, int(m)))
    if missing:
        eng.fault("m2a-delivery", missing[0][0],
                  f"{len(missing)} (node,message) pairs undelivered")
    return ManyToAllResult(not missing, rounds_used, missing)


def chunk_rounds(ops: RoundOps, sender_bits: dict[int, int], label: str) -> int:
    """Ship per-sender payloads of the given bit lengths in parallel,
    split into budget-sized chunks; returns the rounds used (max chunks)."""
    budget = ops.engine.budget_bits - 2
    max_chunks = 0
    for total in sender_bits.values():
        max_chunks = max(max_chunks, (max(1, total) + budget - 1) // budget)
    for i in range(max_chunks):
        msgs = {}
        bits = {}
        for v, total in sender_bits.items():
            rem = total - i * budget
            if rem > 0:
                msgs[v] = (label, i)
                bits[v] = 2 + min(budget, rem)
        if msgs:
            ops.exchange(msgs, bits)
    return max_chunks
