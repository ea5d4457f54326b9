"""Monotone partial coloring over [Delta+1], with properness enforcement.

Colors are 1-based (1..Delta+1); 0 means uncolored.  Assignments never
change once made.  Every assignment is checked against the already
colored neighbors, so properness holds after every round by induction.
The adoption round is recorded: a color adopted in round r becomes
visible to neighbors in round r+1 (announcements ride the next
broadcast).
"""

from __future__ import annotations

import numpy as np

from .graph import Graph


class ColoringError(RuntimeError):
    pass


class PartialColoring:
    def __init__(self, g: Graph):
        self.g = g
        self.colors = np.zeros(g.n, dtype=np.int32)        # 0 = uncolored
        self.adopted_round = np.full(g.n, -1, dtype=np.int64)
        self.colored_count = 0

    def is_colored(self, v: int) -> bool:
        return self.colors[v] != 0

    def assign(self, v: int, color: int, round_no: int) -> None:
        if self.colors[v] != 0:
            raise ColoringError(f"node {v} already colored {self.colors[v]}")
        if not (1 <= color <= self.g.max_degree + 1):
            raise ColoringError(f"color {color} outside [Delta+1]")
        nbr_colors = self.colors[self.g.neighbors(v)]
        if (nbr_colors == color).any():
            raise ColoringError(f"color {color} at {v} conflicts with a neighbor")
        self.colors[v] = color
        self.adopted_round[v] = round_no
        self.colored_count += 1

    def visible_colors(self, round_no: int) -> np.ndarray:
        """Colors adopted strictly before `round_no` (announced by then)."""
        out = self.colors.copy()
        out[self.adopted_round >= round_no] = 0
        return out

    def uncolored(self) -> np.ndarray:
        return np.nonzero(self.colors == 0)[0]

    def is_total(self) -> bool:
        return self.colored_count == self.g.n

    def palette_mask(self, v: int) -> int:
        """Bitmask of free colors of v (bit c-1 set iff c unused by N(v))."""
        delta1 = self.g.max_degree + 1
        used = 0
        for c in self.colors[self.g.neighbors(v)].tolist():
            if c:
                used |= 1 << (c - 1)
        return ((1 << delta1) - 1) & ~used

    def palette_size(self, v: int) -> int:
        return self.palette_mask(v).bit_count()

    def uncolored_degree(self, v: int) -> int:
        return int((self.colors[self.g.neighbors(v)] == 0).sum())


def verify_coloring(g: Graph, colors: np.ndarray) -> tuple[bool, list]:
    """Independent O(m) oracle: every edge bichromatic, colors in [Delta+1].

    Returns (ok, violations); violations are ("edge", u, v) for conflicts,
    ("range", v, c) for out-of-range colors and ("uncolored", v, 0) for
    missing assignments.
    """
    colors = np.asarray(colors)
    violations: list[tuple] = []
    bad_range = np.nonzero((colors < 1) | (colors > g.max_degree + 1))[0]
    for v in bad_range.tolist():
        kind = "uncolored" if colors[v] == 0 else "range"
        violations.append((kind, int(v), int(colors[v])))
    edges = g.edge_array()
    if len(edges):
        conflicts = np.nonzero((colors[edges[:, 0]] == colors[edges[:, 1]])
                               & (colors[edges[:, 0]] != 0))[0]
        for i in conflicts.tolist():
            violations.append(("edge", int(edges[i, 0]), int(edges[i, 1])))
    return len(violations) == 0, violations
