"""Run configuration: model constants, presets, and derived quantities.

All tunable constants of the coloring pipeline live in one ``Config``
record.  Two presets are provided:

* ``paper-constants`` — the asymptotic constants (eps=1e-5, beta=401,
  p_s=1/200).  These only produce observable events on astronomically
  large graphs; the preset exists for faithfulness and for unit tests of
  the formulas themselves.
* ``desk`` — scaled-down constants that keep every structural
  relationship between l, x(K), thresholds and budgets intact while
  making events observable on graphs of a few thousand nodes.  All
  statistical acceptance numbers are quoted on this preset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional


def ceil_log2(n: int) -> int:
    """Bit width of an ID/color field on an n-node instance (>= 1)."""
    return max(1, math.ceil(math.log2(max(2, n))))


def log_star(n: int) -> int:
    """Iterated ceil-log2: number of applications to reach <= 1."""
    count = 0
    x = n
    while x > 1:
        x = math.ceil(math.log2(x))
        count += 1
        if count > 64:  # cannot happen for int inputs; guards bad callers
            break
    return count


def ceil_loglog2(n: int) -> int:
    return max(1, math.ceil(math.log2(max(2, ceil_log2(n)))))


@dataclass
class Config:
    """Constants of the pipeline.  See module docstring for presets."""

    preset: str = "desk"

    # Core constants from the algorithm's parameter block.
    C: int = 4
    epsilon: float = 0.02
    beta: int = 8
    p_s: float = 1.0 / 20.0      # slack-generation activation probability
    gamma: float = 0.001         # measured slack yield per unit sparsity
    ell_exponent: float = 1.1

    # Budgets.
    c_bw: int = 8                # bandwidth budget = c_bw * ceil_log2(n) bits
    c_mem: int = 1               # memory budget = c_mem * ceil_log2(n)^3 words
    c_sp: float = 1.0            # sparse nodes must be c_sp*eps^2*Delta sparse

    # Classification / reservation multipliers.  Paper forms: x_full=200*l,
    # putaside=201*l, x_closed=(beta-1)*abar, x_open=(gamma*eps/8)*ebar.
    x_full_mult: int = 2
    putaside_mult: int = 3       # must stay x_full_mult + 1
    x_open_frac: float = 0.25
    outlier_mult: int = 30
    putaside_max_frac: float = 1.0 / 3.0  # put-aside must fit in this fraction of I_K

    # Colorful matching.
    matching_round_mult: int = 4          # round budget = mult * beta
    matching_activation: Optional[float] = None  # None = auto 2|D|/|K^|

    # Open-clique cleanup.
    r_open: int = 8
    p_t_open: float = 0.5

    # Many-to-all broadcast.
    m2a_rounds: int = 3           # r: 1 send round + (r-1) relay rounds
    m2a_relay: int = 3            # t: messages re-broadcast per relay round
    m2a_cap_mult: float = 4.0     # sender cap = mult * Delta / ceil_log2(n)

    # Multi-color trial.
    seed_words: int = 4           # seed width = seed_words * ceil_log2(n) bits
    multitrial_iters_pad: int = 8  # iteration budget = 2*log_star(n) + pad
    sparse_rounds_pad: int = 10    # sparse/outlier budget = 2*log_star(n) + pad

    # Synchronized color trial.
    eps_dblprime: float = 1.0 / 12.0
    sct_retries: int = 1          # bucketing resamples before faulting

    # Put-aside reduction.
    compress_k: Optional[int] = None   # None = preset formula, see compress_tries()
    reduce_target_mult: float = 4.0    # final |P^| target = mult*log n/loglog n
    finish_palette_cubes: int = 1      # D = smallest c*log^3 n colors of Psi(K)

    # Engine.
    workers: int = 1
    strict_bandwidth: bool = True
    debug_reconstruct: bool = False  # recompute adopted colors at a random neighbor

    def __post_init__(self) -> None:
        if self.putaside_mult != self.x_full_mult + 1:
            raise ValueError("putaside_mult must equal x_full_mult + 1")
        if not (0.0 <= self.p_s <= 1.0):
            raise ValueError("p_s must lie in [0, 1]")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")

    # ----- derived quantities -------------------------------------------

    def ell(self, n: int) -> int:
        """Slack scale l = ceil(C * log2(n)^exponent)."""
        return math.ceil(self.C * ceil_log2(n) ** self.ell_exponent)

    def log_n(self, n: int) -> int:
        return ceil_log2(n)

    def budget_bits(self, n: int) -> int:
        # additive message constants dominate below 8 nodes; floor the
        # width so fixed fields (tags, counters) remain expressible
        return self.c_bw * max(3, ceil_log2(n))

    def mem_budget_words(self, n: int) -> int:
        return self.c_mem * ceil_log2(n) ** 3

    def bucket_count(self, delta: int, n: int) -> int:
        """Bucket count k = floor(Delta / (C log n)), at least 1."""
        return max(1, delta // max(1, self.C * ceil_log2(n)))

    def relabel_tries(self, n: int) -> int:
        """Label-vector length x = ceil(C log n / loglog n)."""
        return max(1, math.ceil(self.C * ceil_log2(n) / ceil_loglog2(n)))

    def eps_prime(self) -> float:
        """AC-preservation tolerance for the rough bucketing (1/24 - eps)."""
        return 1.0 / 24.0 - self.epsilon

    def fine_bucket_count(self, n: int) -> int:
        return max(1, math.ceil(self.C * ceil_loglog2(n)))

    def t_max(self, n: int) -> int:
        return max(1, math.ceil(self.C * ceil_log2(n)))

    def matching_min_abar(self, n: int) -> float:
        """Anti-degree threshold above which a colorful matching is attempted."""
        paper_thr = self.C * ceil_log2(n)
        if self.preset == "paper-constants":
            return float(paper_thr)
        return float(min(paper_thr, self.ell(n) / 3.0))

    def reduce_z(self, n: int) -> int:
        """Residual size z = ceil(C log n / loglog n) for put-aside reduction."""
        return max(1, math.ceil(self.C * ceil_log2(n) / ceil_loglog2(n)))

    def compress_tries(self, n: int) -> int:
        """Colors sampled per CompressTry message.

        Paper formula ceil(C log n / log^2 log n) collapses to ~3 at desk
        scale where it no longer beats the failure rate; the desk preset
        uses ceil(C log n / loglog n) which keeps messages within budget.
        """
        if self.compress_k is not None:
            return self.compress_k
        if self.preset == "paper-constants":
            return max(1, math.ceil(self.C * ceil_log2(n) / ceil_loglog2(n) ** 2))
        return max(1, math.ceil(self.C * ceil_log2(n) / ceil_loglog2(n)))

    def m2a_sender_cap(self, delta: int, n: int) -> int:
        return max(1, int(self.m2a_cap_mult * delta / ceil_log2(n)))

    def x_open_factor(self) -> float:
        if self.preset == "paper-constants":
            return self.gamma * self.epsilon / 8.0
        return self.x_open_frac

    def multitrial_budget(self, n: int) -> int:
        return 2 * log_star(n) + self.multitrial_iters_pad

    def sparse_budget(self, n: int) -> int:
        return 2 * log_star(n) + self.sparse_rounds_pad

    def seed_bits(self, n: int) -> int:
        return self.seed_words * ceil_log2(n)

    # ----- presets ------------------------------------------------------

    @classmethod
    def desk(cls, **overrides: Any) -> "Config":
        return replace(cls(), **overrides) if overrides else cls()

    @classmethod
    def paper(cls, **overrides: Any) -> "Config":
        base = cls(
            preset="paper-constants",
            C=100,
            epsilon=1e-5,
            beta=401,
            p_s=1.0 / 200.0,
            gamma=0.1,
            x_full_mult=200,
            putaside_mult=201,
            r_open=6,
            m2a_cap_mult=1.0,
        )
        return replace(base, **overrides) if overrides else base

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> "Config":
        if name in ("desk",):
            return cls.desk(**overrides)
        if name in ("paper-constants", "paper"):
            return cls.paper(**overrides)
        raise ValueError(f"unknown preset: {name!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class RunConfig:
    """Full harness configuration for one pipeline run."""

    graph: Optional[str] = None          # path to an edge-list file
    model: Optional[dict] = None         # generator spec, see graph.GraphModel
    preset: str = "desk"
    overrides: dict = field(default_factory=dict)
    master_seed: int = 0
    mode: str = "bcongest"               # bcongest | bcstream
    permute: str = "auto"                # loglog | const | auto
    decomposition_mode: str = "oracle"   # oracle | distributed
    out: Optional[str] = None
    workers: int = 1
    strict_bandwidth: bool = True

    def config(self) -> Config:
        cfg = Config.from_preset(self.preset, **self.overrides)
        cfg.workers = self.workers
        cfg.strict_bandwidth = self.strict_bandwidth
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}
