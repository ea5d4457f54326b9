"""Statistical test drivers: chi-square goodness of fit and trial loops.

The chi-square machinery is self-contained (regularized incomplete gamma
via series / continued fraction) so the verdicts do not depend on an
external stats stack.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .rng import derive_seed


def _gamma_p_series(a: float, x: float) -> float:
    """P(a,x) by power series; converges fast for x < a+1."""
    term = 1.0 / a
    total = term
    for n in range(1, 10000):
        term *= x / (a + n)
        total += term
        if abs(term) < abs(total) * 1e-15:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _gamma_q_contfrac(a: float, x: float) -> float:
    """Q(a,x) by Lentz continued fraction; converges fast for x >= a+1."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))

def chi2_sf(x: float, df: int) -> float:
    """Survival function of the chi-square distribution."""
    if x <= 0:
        return 1.0
    a = df / 2.0
    half = x / 2.0
    if half < a + 1.0:
        return max(0.0, min(1.0, 1.0 - _gamma_p_series(a, half)))
    return max(0.0, min(1.0, _gamma_q_contfrac(a, half)))

def chi2_statistic(counts: Sequence[int],
                   expected: Optional[Sequence[float]] = None) -> float:
    total = sum(counts)
    k = len(counts)
    if expected is None:
        expected = [total / k] * k
    stat = 0.0
    for c, e in zip(counts, expected):
        if e <= 0:
            raise ValueError("expected bin count must be positive")
        stat += (c - e) ** 2 / e
    return stat

def chi2_test(counts: Sequence[int], significance: float = 0.001,
              expected: Optional[Sequence[float]] = None) -> tuple[bool, float]:
    """(passes, p_value): passes iff the uniformity hypothesis survives."""
    stat = chi2_statistic(counts, expected)
    p = chi2_sf(stat, len(counts) - 1)
    return p >= significance, p


@dataclass
class StatSpec:
    """One statistical check: run `trial` over derived seeds, aggregate."""

    name: str
    trials: int
    kind: str = "rate"               # rate | chi2
    threshold: float = 0.95          # min success rate (kind=rate)
    significance: float = 0.001      # (kind=chi2)
    bins: Optional[int] = None


@dataclass
class StatResult:
    name: str
    trials: int
    successes: int = 0
    counts: dict = field(default_factory=dict)
    p_value: Optional[float] = None
    passed: bool = False

    def to_dict(self) -> dict:
        return {"name": self.name, "trials": self.trials,
                "successes": self.successes, "p_value": self.p_value,
                "passed": self.passed, "counts": dict(self.counts)}


def stat_driver(spec: StatSpec, trial: Callable[[int], object],
                master_seed: int = 0, workers: int = 1) -> StatResult:
    """Run `trial` over seeds derived from (master_seed, name, index).

    kind="rate": trial returns truthy/falsy; passes iff the success
    fraction reaches the threshold.  kind="chi2": trial returns a bin
    label; passes iff the uniformity chi-square keeps p >= significance.
    """
    res = StatResult(name=spec.name, trials=spec.trials)
    seeds = [derive_seed(master_seed, f"stat-{spec.name}", i) & (2 ** 63 - 1)
             for i in range(spec.trials)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(trial, seeds))
    else:
        outcomes = [trial(s) for s in seeds]
    if spec.kind == "rate":
        res.successes = sum(1 for o in outcomes if o)
        res.passed = res.successes >= spec.threshold * spec.trials
    elif spec.kind == "chi2":
        tally: dict = {}
        for o in outcomes:
            tally[o] = tally.get(o, 0) + 1
        if spec.bins is not None and len(tally) < spec.bins:
            for b in range(spec.bins):
                tally.setdefault(b, 0)
        counts = [tally[k] for k in sorted(tally, key=str)]
        res.counts = {str(k): v for k, v in sorted(tally.items(), key=lambda kv: str(kv[0]))}
        res.passed, res.p_value = chi2_test(counts, spec.significance)
    else:
        raise ValueError(f"unknown stat kind {spec.kind!r}")
    return res
