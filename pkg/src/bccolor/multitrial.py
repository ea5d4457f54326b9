"""Multi-color trials from neighbor-reconstructible lists.

A node that wants to try t colors cannot broadcast them (t*log(Delta)
bits); instead it broadcasts a short seed plus its list descriptor.
Every neighbor expands the seed with the same counter-mode PRF and
recovers the exact same color sequence, so collision decisions need no
individual responses.

Lists are ranges, which is what makes them describable in one field:
``("prefix", x)`` = colors {1..x}, ``("suffix", x)`` = colors
{x+1..Delta+1}, ``("full",)`` = {1..Delta+1}.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .config import ceil_log2
from .rng import prf_uniform
from .rounds import RoundOps


class ListSpecError(ValueError):
    pass


def list_range(spec: tuple, delta1: int) -> tuple[int, int]:
    """(lo, size) of the color range described by a list spec; colors are
    lo+1 .. lo+size."""
    if spec[0] == "prefix":
        return 0, int(spec[1])
    if spec[0] == "suffix":
        x = int(spec[1])
        return x, delta1 - x
    if spec[0] == "full":
        return 0, delta1
    raise ListSpecError(f"unknown list spec {spec!r}")


def spec_bits(delta1: int) -> int:
    return 2 + ceil_log2(delta1)


def expand_seed(seed: int, spec: tuple, t: int, delta1: int) -> list[int]:
    """Deterministic sequence of t colors from the list; identical at the
    sender and every receiver."""
    lo, size = list_range(spec, delta1)
    if size <= 0:
        raise ListSpecError(f"empty color list {spec!r}")
    return [lo + 1 + prf_uniform(seed, i, size) for i in range(t)]


def multitrial(ops: RoundOps, active: Sequence[int], lists: dict[int, tuple],
               budget: int, stage_tag: str,
               enforce_entry: bool = True,
               t_start: int = 1) -> tuple[list[int], list[int]]:
    """Color the active set H by iterated seed-expanded trials.

    Every iteration, each still-active v broadcasts (seed, t, list spec)
    and adopts the first expanded color that is in its palette and
    collides with no expanded color of a smaller-ID active neighbor.
    t follows the doubling schedule t_1=t_start, t_{i+1}=min(2t, t_max).

    Returns (fallback_routed, survivors): nodes that failed the entry
    requirements |L&Psi| >= 2*d_H and |L&Psi| >= d_H + ell, and nodes
    still uncolored when the budget ran out.
    """
    eng = ops.engine
    g = ops.g
    cfg = eng.config
    delta1 = g.max_degree + 1
    ell = cfg.ell(g.n)
    t_max = cfg.t_max(g.n)
    seed_bits = cfg.seed_bits(g.n)
    streaming = eng.mode == "bcstream"

    h_set = set(int(v) for v in active)
    routed: list[int] = []
    if enforce_entry:
        for v in sorted(h_set):
            lo, size = list_range(lists[v], delta1)
            pal = ops.palette_bool(v)
            in_list = int(pal[lo:lo + size].sum())
            d_h = sum(1 for u in g.neighbors(v).tolist() if u in h_set)
            if d_h == 0:
                # no competition: any nonempty usable list colors v in one
                # iteration, so only emptiness disqualifies it
                if in_list == 0:
                    routed.append(v)
            elif in_list < 2 * d_h or in_list < d_h + ell:
                routed.append(v)
        for v in routed:
            h_set.discard(v)

    t = t_start
    for _ in range(budget):
        if not h_set:
            break
        actives = sorted(h_set)
        r = eng.round_no
        seeds = {}
        expansions = {}
        msgs = {}
        bits = {}
        for v in actives:
            seed = eng.node_rng(v, f"{stage_tag}-seed").getrandbits(seed_bits)
            seeds[v] = seed
            expansions[v] = expand_seed(seed, lists[v], t, delta1)
            msgs[v] = ("mt", seed, t, lists[v])
            bits[v] = 2 + seed_bits + 6 + spec_bits(delta1)
        if streaming:
            # Palette-check round: colored nodes re-broadcast their color so
            # actives can vet their t candidates without storing N(v) colors.
            colored = np.nonzero((ops.coloring.colors != 0)
                                 & (ops.coloring.adopted_round < r))[0]
            ops.exchange({int(u): ("pal", int(ops.coloring.colors[u]))
                          for u in colored.tolist()},
                         {int(u): 2 + ops.color_width for u in colored.tolist()})
            for v in actives:
                eng.charge(v, t + 2)
        ops.exchange(msgs, bits)

        tried_by_color: dict[int, list[int]] = {}
        for v in actives:
            for c in set(expansions[v]):
                tried_by_color.setdefault(c, []).append(v)

        winners: dict[int, int] = {}
        for v in actives:
            pal = ops.palette_bool(v, r)
            choice = None
            for c in expansions[v]:
                if not pal[c - 1]:
                    continue
                blocked = False
                for u in tried_by_color.get(c, ()):
                    if u < v and g.has_edge(u, v):
                        blocked = True
                        break
                if not blocked:
                    choice = c
                    break
            if choice is not None:
                winners[v] = choice
        for v in sorted(winners):
            ops.assign(v, winners[v], round_no=r)
            h_set.discard(v)
            if cfg.debug_reconstruct:
                nbrs = g.neighbors(v)
                if len(nbrs):
                    w = int(nbrs[eng.rng("mt-debug", v).randrange(len(nbrs))])
                    again = expand_seed(seeds[v], lists[v], t, delta1)
                    assert winners[v] in again, (v, w, winners[v])
        t = min(2 * t, t_max)
    return routed, sorted(h_set)
