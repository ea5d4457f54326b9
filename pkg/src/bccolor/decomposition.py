"""Almost-clique decomposition: computation, statistics, classification.

The decomposition partitions V into sparse nodes and almost-cliques
K_1..K_k satisfying, for tolerance eps:

  (a) |K| <= (1+eps)*Delta,
  (b) |N(v) & K| >= (1-eps)*Delta for every member v,
  (c) |N(v) & K| <= (1-eps/2)*Delta for every non-member v,

with every sparse node c_sp*eps^2*Delta sparse.  Two computation modes:

* oracle — centralized: connect adjacent high-degree pairs whose
  common neighborhood is at least (1-2*eps)*Delta ("buddy" edges), take
  connected components, then repair/dissolve against (a)-(c).
* distributed — nodes broadcast sampled neighbor IDs for several
  rounds, estimate pairwise overlap from hit counts, and join the
  candidate clique with plurality support among their buddies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .config import Config
from .engine import Broadcast, Engine
from .graph import Graph, count_in_set, sparsity_many


FULL, OPEN, CLOSED = "full", "open", "closed"


class DecompositionError(RuntimeError):
    pass


@dataclass
class AlmostClique:
    index: int
    members: np.ndarray                  # sorted node IDs
    leader: int = -1
    e_v: Optional[np.ndarray] = None     # external degrees, aligned with members
    a_v: Optional[np.ndarray] = None     # anti-degrees, aligned with members
    e_bar: Fraction = Fraction(0)
    a_bar: Fraction = Fraction(0)
    cls: str = ""
    x: int = 0
    x_clamped: bool = False
    outliers: Optional[np.ndarray] = None
    putaside: Optional[np.ndarray] = None
    matching: list = field(default_factory=list)   # (u, v, color) triples
    degenerate: bool = False             # constants do not fit; reduced path

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.int64)
        self.members.sort()
        self.leader = int(self.members[0]) if len(self.members) else -1

    @property
    def size(self) -> int:
        return len(self.members)

    def member_pos(self, v: int) -> int:
        i = int(np.searchsorted(self.members, v))
        if i >= len(self.members) or self.members[i] != v:
            raise KeyError(f"{v} not in clique {self.index}")
        return i

    def inliers(self) -> np.ndarray:
        out_set = set(self.outliers.tolist()) if self.outliers is not None else set()
        return np.array([v for v in self.members.tolist() if v not in out_set],
                        dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "members": self.members.tolist(),
            "leader": self.leader,
            "e_bar": [self.e_bar.numerator, self.e_bar.denominator],
            "a_bar": [self.a_bar.numerator, self.a_bar.denominator],
            "class": self.cls,
            "x": self.x,
            "outliers": self.outliers.tolist() if self.outliers is not None else [],
            "degenerate": self.degenerate,
        }


@dataclass
class Decomposition:
    v_sparse: np.ndarray
    cliques: list[AlmostClique]
    clique_of: np.ndarray                # node -> clique index, -1 if sparse

    def to_json(self) -> str:
        return json.dumps({
            "v_sparse": self.v_sparse.tolist(),
            "cliques": [k.to_dict() for k in self.cliques],
        }, sort_keys=True)


def _components(n_nodes: list[int], edges: list[tuple[int, int]]) -> list[list[int]]:
    parent = {v: v for v in n_nodes}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    groups: dict[int, list[int]] = {}
    for v in n_nodes:
        groups.setdefault(find(v), []).append(v)
    return list(groups.values())


# ----- oracle mode ---------------------------------------------------------


def _buddy_components(g: Graph, eps: float) -> list[list[int]]:
    delta = g.max_degree
    if delta == 0:
        return []
    deg_thr = (1.0 - eps) * delta
    overlap_thr = (1.0 - 2.0 * eps) * delta
    high = g.degrees >= deg_thr
    if not high.any():
        return []
    packed = g.packed()
    edges = g.edge_array()
    edges = edges[high[edges[:, 0]] & high[edges[:, 1]]]
    if len(edges) == 0:
        return []
    qual_u = []
    qual_v = []
    chunk = 131072
    for start in range(0, len(edges), chunk):
        block = edges[start:start + chunk]
        overlap = np.bitwise_count(packed[block[:, 0]]
                                   & packed[block[:, 1]]).sum(axis=1)
        good = block[overlap >= overlap_thr]
        qual_u.append(good[:, 0])
        qual_v.append(good[:, 1])
    qu = np.concatenate(qual_u)
    qv = np.concatenate(qual_v)
    if len(qu) == 0:
        return []
    # A spanning subset of buddy edges suffices for component finding:
    # keep each node's minimum qualifying partner (the repair pass below
    # re-derives exact membership from Def-style checks anyway).
    partner = np.full(g.n, g.n, dtype=np.int64)
    np.minimum.at(partner, qu, qv)
    np.minimum.at(partner, qv, qu)
    touched = np.nonzero(partner < g.n)[0]
    small_edges = [(int(v), int(partner[v])) for v in touched.tolist()]
    return [c for c in _components(touched.tolist(), small_edges) if len(c) >= 2]


def _repair_component(g: Graph, comp: list[int], eps: float) -> Optional[np.ndarray]:
    """Enforce (a)-(c) on a candidate; None if it dissolves."""
    delta = g.max_degree
    members = np.array(sorted(comp), dtype=np.int64)
    # Expansion: the buddy seed may miss members whose pairwise overlaps
    # sit in the threshold tail; absorb nodes seeing almost all of it.
    for _ in range(4):
        if len(members) == 0 or len(members) > (1.0 + eps) * delta:
            break
        mask = g.pack_set(members)
        member_set = set(members.tolist())
        outside = np.array([v for v in range(g.n) if v not in member_set],
                           dtype=np.int64)
        if len(outside) == 0:
            break
        seen = count_in_set(g, outside, mask)
        absorb = outside[seen >= (1.0 - 4.0 * eps) * len(members)]
        if len(absorb) == 0:
            break
        members = np.sort(np.concatenate([members, absorb]))
    for _ in range(g.n):
        if len(members) == 0:
            return None
        inside = count_in_set(g, members, g.pack_set(members))
        keep = inside >= (1.0 - eps) * delta
        if keep.all():
            break
        members = members[keep]
    if len(members) < 2 or len(members) > (1.0 + eps) * delta:
        return None
    # Part (c): absorb outside nodes seeing more than (1-eps/2)*Delta of K.
    for _ in range(g.n):
        mask = g.pack_set(members)
        member_set = set(members.tolist())
        outside = np.array(sorted(set(range(g.n)) - member_set), dtype=np.int64)
        if len(outside) == 0:
            break
        seen = count_in_set(g, outside, mask)
        violators = outside[seen > (1.0 - eps / 2.0) * delta]
        if len(violators) == 0:
            break
        absorb = violators[count_in_set(g, violators, mask) >= (1.0 - eps) * delta]
        if len(absorb) == 0 or len(members) + len(absorb) > (1.0 + eps) * delta:
            return None
        members = np.sort(np.concatenate([members, absorb]))
    return members


def compute_acd_oracle(g: Graph, eps: float) -> Decomposition:
    comps = _buddy_components(g, eps)
    cliques = []
    for comp in comps:
        members = _repair_component(g, comp, eps)
        if members is not None:
            cliques.append(members)
    cliques.sort(key=lambda m: int(m[0]))
    clique_of = np.full(g.n, -1, dtype=np.int32)
    out = []
    for i, members in enumerate(cliques):
        clique_of[members] = i
        out.append(AlmostClique(index=i, members=members))
    v_sparse = np.nonzero(clique_of == -1)[0]
    return Decomposition(v_sparse=v_sparse, cliques=out, clique_of=clique_of)


# ----- distributed mode ----------------------------------------------------


def compute_acd_distributed(g: Graph, eps: float, engine: Engine) -> Decomposition:
    """Sampling-based mode, run as a stage of `engine` (bcongest only)."""
    if engine.mode != "bcongest":
        raise DecompositionError("distributed decomposition requires bcongest mode")
    delta = g.max_degree
    n = g.n
    width = engine.config.log_n(n)
    engine.begin_stage("acd-distributed")
    if delta == 0:
        engine.end_stage()
        return compute_acd_oracle(g, eps)

    rounds = int(min(math.ceil(1.0 / eps ** 2), math.ceil(1.0 / eps ** 4),
                     delta, 8 * engine.config.C * width))
    # Degree announcement round.
    engine.exchange({v: Broadcast(int(g.degrees[v]), width)
                     for v in range(n)})
    # Sampling rounds: one uniformly chosen neighbor ID per round.
    hits = {}  # (v, u) -> count of u's samples landing in N(v)
    samples_of = np.zeros((n, rounds), dtype=np.int64)
    for v in range(n):
        nbrs = g.neighbors(v)
        if len(nbrs):
            rng = engine.np_rng("acd-sample", v)
            samples_of[v] = nbrs[rng.integers(0, len(nbrs), size=rounds)]
        else:
            samples_of[v] = -1
    packed = g.packed()
    for r in range(rounds):
        engine.exchange({v: Broadcast(int(samples_of[v, r]), width)
                         for v in range(n) if samples_of[v, r] >= 0})
    deg_thr = (1.0 - eps) * delta
    overlap_thr = (1.0 - 2.0 * eps) * delta
    # Each v tallies, per neighbor u, how many of u's samples fall in N(v).
    buddies: dict[int, list[int]] = {}
    for v in range(n):
        if g.degrees[v] < deg_thr:
            buddies[v] = []
            continue
        row = packed[v]
        mine = []
        for u in g.neighbors(v).tolist():
            if g.degrees[u] < deg_thr:
                continue
            s = samples_of[u]
            hit = 0
            for x in s.tolist():
                if x >= 0 and (int(row[x >> 6]) >> (x & 63)) & 1:
                    hit += 1
            est = hit * g.degrees[u] / rounds
            if est >= overlap_thr:
                mine.append(u)
        buddies[v] = mine
    # Leader proposal and plurality join.
    proposal = {v: min([v] + buddies[v]) if buddies[v] else -1 for v in range(n)}
    engine.exchange({v: Broadcast(proposal[v], width) for v in range(n)
                     if proposal[v] >= 0})
    choice = {}
    for v in range(n):
        if proposal[v] < 0:
            choice[v] = -1
            continue
        votes: dict[int, int] = {}
        for u in buddies[v]:
            p = proposal[u]
            if p >= 0:
                votes[p] = votes.get(p, 0) + 1
        votes[proposal[v]] = votes.get(proposal[v], 0) + 1
        best = max(votes.items(), key=lambda kv: (kv[1], -kv[0]))
        choice[v] = best[0]
    engine.exchange({v: Broadcast(choice[v], width) for v in range(n)
                     if choice[v] >= 0})
    groups: dict[int, list[int]] = {}
    for v in range(n):
        if choice[v] >= 0:
            groups.setdefault(choice[v], []).append(v)
    # Membership repair rounds: drop members below the (b) threshold.
    for _ in range(2):
        drops = []
        for leader, members in groups.items():
            arr = np.array(sorted(members), dtype=np.int64)
            inside = count_in_set(g, arr, g.pack_set(arr))
            for v, cnt in zip(arr.tolist(), inside.tolist()):
                if cnt < (1.0 - eps) * delta:
                    drops.append((leader, v))
        if not drops:
            break
        engine.exchange({v: Broadcast(("drop", leader), width + 1)
                         for leader, v in drops})
        for leader, v in drops:
            groups[leader].remove(v)
    engine.end_stage()

    clique_of = np.full(n, -1, dtype=np.int32)
    cliques = []
    for leader in sorted(groups):
        members = np.array(sorted(groups[leader]), dtype=np.int64)
        if len(members) < 2 or len(members) > (1.0 + eps) * delta:
            continue
        idx = len(cliques)
        clique_of[members] = idx
        cliques.append(AlmostClique(index=idx, members=members))
    v_sparse = np.nonzero(clique_of == -1)[0]
    return Decomposition(v_sparse=v_sparse, cliques=cliques, clique_of=clique_of)


def compute_acd(g: Graph, eps: float, mode: str = "oracle",
                engine: Optional[Engine] = None) -> Decomposition:
    if not (0.0 < eps <= 1.0 / 20.0):
        raise DecompositionError(f"eps must lie in (0, 1/20], got {eps}")
    if mode == "oracle":
        return compute_acd_oracle(g, eps)
    if mode == "distributed":
        if engine is None:
            raise DecompositionError("distributed mode requires an engine")
        return compute_acd_distributed(g, eps, engine)
    raise DecompositionError(f"unknown decomposition mode {mode!r}")


# ----- statistics, classification, outliers --------------------------------


def clique_stats(g: Graph, members: np.ndarray
                 ) -> tuple[Fraction, Fraction, np.ndarray, np.ndarray]:
    """(e_bar, a_bar, e_v, a_v) for the node set; exact rationals."""
    members = np.asarray(members, dtype=np.int64)
    if len(members) == 0:
        raise DecompositionError("clique_stats on empty set")
    inside = count_in_set(g, members, g.pack_set(members))
    e_v = g.degrees[members] - inside
    a_v = (len(members) - 1) - inside
    e_bar = Fraction(int(e_v.sum()), len(members))
    a_bar = Fraction(int(a_v.sum()), len(members))
    return e_bar, a_bar, e_v.astype(np.int64), a_v.astype(np.int64)


def classify_and_reserve(e_bar: Fraction, a_bar: Fraction, ell: int,
                         cfg: Config, delta: int) -> tuple[str, int, bool]:
    """(class, x, clamped).  Pure function of the stats and constants."""
    if a_bar + e_bar < ell:
        cls = FULL
        x = cfg.x_full_mult * ell
    elif 2 * a_bar < e_bar:
        cls = OPEN
        x = math.floor(Fraction(cfg.x_open_factor()).limit_denominator(10 ** 9)
                       * e_bar)
    else:
        cls = CLOSED
        x = math.floor((cfg.beta - 1) * a_bar)
    clamped = False
    if x >= delta + 1:
        if cfg.preset == "paper-constants":
            raise DecompositionError(
                f"x={x} >= Delta+1={delta + 1}: constants too large for this graph")
        x = max(0, delta // 4)
        clamped = True
    cap = max(1, delta // 4)
    if cfg.preset != "paper-constants" and x > cap:
        x = cap
        clamped = True
    return cls, x, clamped


def compute_outliers(members: np.ndarray, e_v: np.ndarray, a_v: np.ndarray,
                     e_bar: Fraction, a_bar: Fraction, mult: int) -> np.ndarray:
    """O_K = members whose external or anti-degree is >= mult * the average."""
    flags = np.zeros(len(members), dtype=bool)
    for i in range(len(members)):
        # a zero average admits no deviation (every e_v is then zero too)
        if (e_bar > 0 and Fraction(int(e_v[i])) >= mult * e_bar) or \
           (a_bar > 0 and Fraction(int(a_v[i])) >= mult * a_bar):
            flags[i] = True
    return members[flags]


def annotate(g: Graph, dec: Decomposition, cfg: Config) -> None:
    """Fill stats, class, x and outliers on every clique, in place."""
    ell = cfg.ell(g.n)
    for k in dec.cliques:
        e_bar, a_bar, e_v, a_v = clique_stats(g, k.members)
        k.e_bar, k.a_bar, k.e_v, k.a_v = e_bar, a_bar, e_v, a_v
        k.cls, k.x, k.x_clamped = classify_and_reserve(e_bar, a_bar, ell, cfg,
                                                       g.max_degree)
        k.outliers = compute_outliers(k.members, e_v, a_v, e_bar, a_bar,
                                      cfg.outlier_mult)


# ----- validation -----------------------------------------------------------


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, clause: str, node: int, detail: str) -> None:
        self.violations.append({"clause": clause, "node": int(node),
                                "detail": detail})

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": self.violations}


def validate_acd(g: Graph, dec: Decomposition, eps: float,
                 cfg: Optional[Config] = None) -> ValidationReport:
    """Check the partition property, (a)-(c), sparse sparsity, and the
    external-degree sparsity consequence (every member is eps/2*e_v sparse)."""
    cfg = cfg or Config()
    rep = ValidationReport()
    delta = g.max_degree
    seen = np.zeros(g.n, dtype=np.int32)
    seen[dec.v_sparse] += 1
    for k in dec.cliques:
        seen[k.members] += 1
    for v in np.nonzero(seen != 1)[0].tolist():
        rep.add("partition", v, f"appears {seen[v]} times")
    for k in dec.cliques:
        members = k.members
        if len(members) > (1.0 + eps) * delta:
            rep.add("size", k.leader, f"|K|={len(members)} > (1+eps)Delta")
        mask = g.pack_set(members)
        inside = count_in_set(g, members, mask)
        for v, cnt in zip(members.tolist(), inside.tolist()):
            if cnt < (1.0 - eps) * delta:
                rep.add("member-degree", v, f"|N(v)&K|={cnt} < (1-eps)Delta")
        outside = np.setdiff1d(np.arange(g.n), members, assume_unique=False)
        if len(outside):
            seen_out = count_in_set(g, outside, mask)
            for v, cnt in zip(outside.tolist(), seen_out.tolist()):
                if cnt > (1.0 - eps / 2.0) * delta:
                    rep.add("outside-degree", v,
                            f"|N(v)&K|={cnt} > (1-eps/2)Delta")
    if len(dec.v_sparse) and delta > 0:
        thr = cfg.c_sp * eps * eps * delta
        zetas = sparsity_many(g, dec.v_sparse)
        for v, z in zip(dec.v_sparse.tolist(), zetas.tolist()):
            if z < thr:
                rep.add("sparse-sparsity", v, f"zeta={z:.3f} < {thr:.3f}")
    # External-degree sparsity consequence for members.
    for k in dec.cliques:
        if k.e_v is None:
            continue
        zetas = sparsity_many(g, k.members)
        for v, z, ev in zip(k.members.tolist(), zetas.tolist(), k.e_v.tolist()):
            if z < (eps / 2.0) * ev - 1e-9:
                rep.add("member-ext-sparsity", v,
                        f"zeta={z:.3f} < eps/2*e_v={eps / 2.0 * ev:.3f}")
    return rep
