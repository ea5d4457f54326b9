"""Static simple graphs: representation, generators, structural quantities.

Graphs are stored in CSR form (sorted neighbor arrays) with dense node
IDs in [0, n).  A packed-bit adjacency matrix (uint64 words) backs the
dense set operations used by the decomposition and clique statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .rng import derive_np


class GraphError(ValueError):
    pass


class ParseError(GraphError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _as_edge_array(edges) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    return arr.reshape(-1, 2)


class Graph:
    """Undirected simple graph over dense IDs [0, n)."""

    __slots__ = ("n", "indptr", "indices", "degrees", "max_degree",
                 "_packed", "_adj_masks")

    def __init__(self, n: int, edges):
        self.n = int(n)
        pairs = _as_edge_array(edges)
        if pairs.size:
            if pairs.min() < 0 or pairs.max() >= n:
                raise GraphError("edge endpoint outside [0, n)")
            if (pairs[:, 0] == pairs[:, 1]).any():
                raise GraphError("self-loop")
            lo = np.minimum(pairs[:, 0], pairs[:, 1])
            hi = np.maximum(pairs[:, 0], pairs[:, 1])
            keys = lo * n + hi
            if len(np.unique(keys)) != len(keys):
                raise GraphError("duplicate edge")
        else:
            keys = np.empty(0, dtype=np.int64)
        self._build(np.sort(keys))

    def _build(self, keys: np.ndarray) -> None:
        n = self.n
        if keys.size:
            lo, hi = keys // n, keys % n
            rev = hi * n + lo
            rorder = np.argsort(rev)
            rkeys = rev[rorder]
            # keys and rkeys are each sorted and mutually disjoint; merge.
            pos_f = np.arange(len(keys)) + np.searchsorted(rkeys, keys)
            pos_r = np.arange(len(rkeys)) + np.searchsorted(keys, rkeys)
            m2 = 2 * len(keys)
            src = np.empty(m2, dtype=np.int64)
            dst = np.empty(m2, dtype=np.int64)
            src[pos_f] = lo
            dst[pos_f] = hi
            src[pos_r] = hi[rorder]
            dst[pos_r] = lo[rorder]
        else:
            src = np.empty(0, dtype=np.int64)
            dst = np.empty(0, dtype=np.int64)
        self.degrees = np.bincount(src, minlength=n).astype(np.int64)
        self.indptr = np.concatenate([[0], np.cumsum(self.degrees)]).astype(np.int64)
        self.indices = dst.astype(np.int32)
        self.max_degree = int(self.degrees.max()) if n else 0
        self._packed: Optional[np.ndarray] = None
        self._adj_masks: Optional[list] = None

    @classmethod
    def from_keys(cls, n: int, keys: np.ndarray) -> "Graph":
        """Fast path: keys = lo*n+hi, already unique; skips re-validation."""
        g = cls.__new__(cls)
        g.n = int(n)
        g._build(np.sort(np.asarray(keys, dtype=np.int64)))
        return g

    # ----- basic accessors ----------------------------------------------

    @property
    def m(self) -> int:
        return len(self.indices) // 2

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def degree(self, v: int) -> int:
        return int(self.degrees[v])

    def has_edge(self, u: int, v: int) -> bool:
        nbrs = self.neighbors(u)
        i = int(np.searchsorted(nbrs, v))
        return i < len(nbrs) and nbrs[i] == v

    @property
    def words(self) -> int:
        return max(1, (self.n + 63) // 64)

    def packed(self) -> np.ndarray:
        """(n, words) uint64 adjacency bit matrix."""
        if self._packed is None:
            w = self.words
            mat = np.zeros((self.n, w * 64), dtype=np.uint8)
            rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
            mat[rows, self.indices] = 1
            self._packed = np.packbits(mat, axis=1, bitorder="little").view(np.uint64)
        return self._packed

    def pack_set(self, nodes) -> np.ndarray:
        """Pack a node set into one uint64 bit row."""
        nodes = np.asarray(nodes, dtype=np.int64)
        row = np.zeros(self.words * 64, dtype=np.uint8)
        row[nodes] = 1
        return np.packbits(row, bitorder="little").view(np.uint64)

    def adj_mask(self, v: int) -> int:
        """Neighborhood of v as a python-int bitmask (small-scale ops)."""
        if self._adj_masks is None:
            self._adj_masks = [None] * self.n
        if self._adj_masks[v] is None:
            self._adj_masks[v] = int.from_bytes(self.packed()[v].tobytes(), "little")
        return self._adj_masks[v]

    def edge_array(self) -> np.ndarray:
        """(m, 2) array of edges with u < v, lexicographically sorted."""
        src = np.repeat(np.arange(self.n), np.diff(self.indptr))
        mask = src < self.indices
        return np.column_stack([src[mask], self.indices[mask]])

    def validate(self) -> None:
        """Assert the structural invariants (symmetry, no loops, sorted)."""
        for v in range(self.n):
            nbrs = self.neighbors(v)
            if len(nbrs) and (np.diff(nbrs) <= 0).any():
                raise GraphError(f"unsorted or duplicate neighbors at {v}")
            if (nbrs == v).any():
                raise GraphError(f"self-loop at {v}")
        ea = self.edge_array()
        for u, v in ea[: min(len(ea), 5000)].tolist():
            if not self.has_edge(v, u):
                raise GraphError(f"asymmetry at ({u},{v})")

    def __eq__(self, other) -> bool:
        return (isinstance(other, Graph) and self.n == other.n
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, m={self.m}, max_degree={self.max_degree})"


# ----- structural quantities ---------------------------------------------


def count_in_set(g: Graph, nodes: Sequence[int], packed_set: np.ndarray) -> np.ndarray:
    """|N(v) & S| for each v in nodes, S given as a packed bit row."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        return np.zeros(0, dtype=np.int64)
    rows = g.packed()[nodes]
    return np.bitwise_count(rows & packed_set[None, :]).sum(axis=1).astype(np.int64)


def induced_edges(g: Graph, nodes) -> int:
    """Number of edges of g with both endpoints in `nodes`."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        return 0
    packed = g.pack_set(nodes)
    return int(count_in_set(g, nodes, packed).sum()) // 2


def sparsity(g: Graph, v: int) -> Fraction:
    """Normalized missing-edge count of N(v); exact rational.

    Returns (1/Delta) * (C(Delta, 2) - m(N(v))).  Defined as 0 when the
    graph has no edges at all (no colors are contested).
    """
    if not (0 <= v < g.n):
        raise GraphError(f"node {v} outside graph")
    delta = g.max_degree
    if delta == 0:
        return Fraction(0)
    m_nv = induced_edges(g, g.neighbors(v))
    return (Fraction(delta * (delta - 1), 2) - m_nv) / delta


def sparsity_many(g: Graph, nodes) -> np.ndarray:
    """float64 sparsity for a batch of nodes (validation fast path)."""
    delta = g.max_degree
    nodes = np.asarray(nodes, dtype=np.int64)
    out = np.zeros(len(nodes), dtype=np.float64)
    if delta == 0:
        return out
    packed = g.packed()
    full = delta * (delta - 1) / 2.0
    for i, v in enumerate(nodes.tolist()):
        nbrs = g.neighbors(v)
        if len(nbrs) == 0:
            out[i] = full / delta
            continue
        row = packed[v]
        m_nv = int(np.bitwise_count(packed[nbrs] & row[None, :]).sum()) // 2
        out[i] = (full - m_nv) / delta
    return out


def sparsity_oracle(g: Graph, v: int) -> Fraction:
    """Brute-force O(Delta^2) pair enumeration; independent of sparsity()."""
    delta = g.max_degree
    if delta == 0:
        return Fraction(0)
    nbrs = [int(u) for u in g.neighbors(v)]
    present = 0
    for i in range(len(nbrs)):
        for j in range(i + 1, len(nbrs)):
            if g.has_edge(nbrs[i], nbrs[j]):
                present += 1
    return (Fraction(delta * (delta - 1), 2) - present) / delta


# ----- generators ---------------------------------------------------------

_MODEL_KINDS = ("gnp", "planted-cliques", "disjoint-cliques", "mixed-sparse-dense")


@dataclass
class GraphModel:
    """Generator spec: kind plus model-specific parameters."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _MODEL_KINDS:
            raise GraphError(f"unknown model kind {self.kind!r}")
        p = self.params

        def _check_prob(name):
            if name in p and not (0.0 <= p[name] <= 1.0):
                raise GraphError(f"parameter {name} must lie in [0, 1]")

        def _check_pos(name):
            if name in p and p[name] < 1:
                raise GraphError(f"parameter {name} must be >= 1")

        if self.kind == "gnp":
            if "n" not in p or "p" not in p:
                raise GraphError("gnp requires parameters n and p")
            if p["n"] < 0:
                raise GraphError("parameter n must be >= 0")
            _check_prob("p")
        elif self.kind in ("planted-cliques", "disjoint-cliques"):
            if "k" not in p or "s" not in p:
                raise GraphError(f"{self.kind} requires parameters k and s")
            _check_pos("k")
            _check_pos("s")
            _check_prob("rewire")
            if p.get("thin", 0) < 0:
                raise GraphError("parameter thin must be >= 0")
            if p.get("ext", 0) < 0:
                raise GraphError("parameter ext must be >= 0")
        elif self.kind == "mixed-sparse-dense":
            for name in ("k", "s"):
                if name not in p:
                    raise GraphError("mixed-sparse-dense requires k and s")
            _check_pos("k")
            _check_pos("s")
            _check_prob("rewire")
            _check_prob("p_sparse")
            if p.get("n_sparse", 0) < 0:
                raise GraphError("parameter n_sparse must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "GraphModel":
        data = dict(data)
        kind = data.pop("kind")
        params = data.pop("params", None)
        if params is None:
            params = data
        return cls(kind=kind, params=params)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


def _gnp_keys(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Edge keys lo*n+hi of a G(n,p) sample (blocked to bound memory)."""
    if n < 2 or p <= 0.0:
        return np.empty(0, dtype=np.int64)
    chunks = []
    block = max(1, (2 ** 22) // max(1, n))
    for start in range(0, n - 1, block):
        stop = min(start + block, n - 1)
        for i in range(start, stop):
            row = rng.random(n - i - 1) < p
            hits = np.nonzero(row)[0]
            if len(hits):
                chunks.append(i * n + (i + 1 + hits.astype(np.int64)))
    if not chunks:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(chunks)


def _clique_keys(k: int, s: int, n: int) -> np.ndarray:
    iu, ju = np.triu_indices(s, k=1)
    keys = []
    for c in range(k):
        base = c * s
        keys.append((iu + base).astype(np.int64) * n + (ju + base))
    return np.concatenate(keys) if keys else np.empty(0, dtype=np.int64)


def _from_keys(keys: np.ndarray, n_graph: int, n_key: int) -> Graph:
    keys = np.unique(keys)
    if n_key != n_graph and keys.size:
        keys = (keys // n_key) * n_graph + keys % n_key
    return Graph.from_keys(n_graph, keys)


def _planted_keys(k: int, s: int, rate: float, n: int,
                  rng: np.random.Generator, thin: int = 0,
                  ext: int = 0) -> np.ndarray:
    base = _clique_keys(k, s, n)
    if thin > 0 and s >= 2:
        # Remove `thin` random perfect matchings per clique: every member
        # loses about `thin` internal edges, so anti-degrees are uniform
        # and the maximum degree carries no tail.
        drop = []
        for c in range(k):
            base_id = c * s
            for _ in range(thin):
                perm = rng.permutation(s)
                a = perm[0: 2 * (s // 2): 2] + base_id
                b = perm[1: 2 * (s // 2): 2] + base_id
                lo = np.minimum(a, b).astype(np.int64)
                hi = np.maximum(a, b).astype(np.int64)
                drop.append(lo * n + hi)
        if drop:
            base = base[~np.isin(base, np.concatenate(drop))]
    if ext > 0 and k >= 2:
        # Add `ext` random cross-clique perfect matchings per clique pair
        # in a round-robin: every member gains exactly one external edge
        # per matching, keeping external degrees uniform.
        add = []
        for c in range(k):
            for t in range(ext):
                partner = (c + 1 + t % (k - 1)) % k
                if partner == c:
                    partner = (c + 1) % k
                pi = rng.permutation(s)
                a = np.arange(s, dtype=np.int64) + c * s
                b = pi.astype(np.int64) + partner * s
                lo = np.minimum(a, b)
                hi = np.maximum(a, b)
                add.append(lo * n + hi)
        base = np.unique(np.concatenate([base] + add))
    if rate <= 0.0 or n <= 2:
        return base
    flips = rng.random(len(base)) < rate
    kept = base[~flips]
    removed = base[flips]
    if len(removed) == 0:
        return base
    u = removed // n
    v = removed % n
    keep_u = rng.integers(0, 2, size=len(removed)).astype(bool)
    anchor = np.where(keep_u, u, v)
    target = rng.integers(0, n, size=len(removed))
    ok = anchor != target
    lo = np.minimum(anchor[ok], target[ok])
    hi = np.maximum(anchor[ok], target[ok])
    proposed = lo * n + hi
    fresh = proposed[~np.isin(proposed, kept)]
    return np.unique(np.concatenate([kept, fresh]))


def generate(model: GraphModel, seed: int) -> Graph:
    """Deterministic instance of the model for a fixed (model, seed)."""
    p = model.params
    rng = derive_np(seed, "generate:" + model.kind)

    if model.kind == "gnp":
        n = int(p["n"])
        return _from_keys(_gnp_keys(n, float(p["p"]), rng), n, max(2, n))

    if model.kind == "disjoint-cliques":
        k, s = int(p["k"]), int(p["s"])
        n = k * s
        return _from_keys(_clique_keys(k, s, max(2, n)), n, max(2, n))

    if model.kind == "planted-cliques":
        k, s = int(p["k"]), int(p["s"])
        rate = float(p.get("rewire", 0.02))
        thin = int(p.get("thin", 0))
        ext = int(p.get("ext", 0))
        n = k * s
        keys = _planted_keys(k, s, rate, max(2, n), rng, thin, ext)
        return _from_keys(keys, n, max(2, n))

    if model.kind == "mixed-sparse-dense":
        k, s = int(p["k"]), int(p["s"])
        rate = float(p.get("rewire", 0.02))
        n_dense = k * s
        n_sparse = int(p.get("n_sparse", n_dense))
        n = n_dense + n_sparse
        p_sparse = float(p.get("p_sparse", min(0.9, (s / 3.0) / max(1, n_sparse))))
        p_bridge = float(p.get("p_bridge", 0.2))
        keys = [_planted_keys(k, s, rate, n, rng, int(p.get("thin", 0)),
                              int(p.get("ext", 0)))]
        sparse_keys = _gnp_keys(n_sparse, p_sparse, derive_np(seed, "generate-sparse"))
        if len(sparse_keys):
            su = sparse_keys // n_sparse + n_dense
            sv = sparse_keys % n_sparse + n_dense
            keys.append(su * n + sv)
        if p_bridge > 0 and n_sparse > 0 and n_dense > 0:
            brng = derive_np(seed, "generate-bridge")
            pick = brng.random(n_dense) < p_bridge
            targets = brng.integers(0, n_sparse, size=n_dense) + n_dense
            du = np.nonzero(pick)[0].astype(np.int64)
            if len(du):
                keys.append(du * n + targets[du])
        return _from_keys(np.concatenate(keys), n, n)

    raise GraphError(f"unknown model kind {model.kind!r}")


# ----- edge-list text format ----------------------------------------------


def parse_edge_list_report(text: str) -> tuple[Graph, int]:
    """Parse "u v" lines; returns (graph, duplicate_warning_count).

    IDs are normalized to dense [0, n) by sorted order of the original
    IDs; isolated nodes cannot be represented in this format.
    """
    raw_edges: list[tuple[int, int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise ParseError(f"expected two IDs, got {len(parts)}", lineno)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError("non-integer ID", lineno) from None
        if u == v:
            raise ParseError(f"self-loop on node {u}", lineno)
        raw_edges.append((min(u, v), max(u, v)))
    ids = sorted({x for e in raw_edges for x in e})
    remap = {orig: i for i, orig in enumerate(ids)}
    seen = set()
    dupes = 0
    edges = []
    for u, v in raw_edges:
        e = (remap[u], remap[v])
        if e in seen:
            dupes += 1
            continue
        seen.add(e)
        edges.append(e)
    return Graph(len(ids), edges), dupes


def parse_edge_list(text: str) -> Graph:
    return parse_edge_list_report(text)[0]


def emit_edge_list(g: Graph) -> str:
    lines = [f"{u} {v}" for u, v in g.edge_array().tolist()]
    return "\n".join(lines) + ("\n" if lines else "")
