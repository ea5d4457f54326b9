"""Deterministic stream derivation.

Every random decision in a run is drawn from a stream derived from
(master_seed, tag, *ids) through BLAKE2b.  Streams for distinct key
tuples are computationally independent, which makes whole-run output a
pure function of (graph, config, master_seed) regardless of evaluation
order or thread count.
"""

from __future__ import annotations

import hashlib
import random
from typing import Iterable

import numpy as np


def derive_seed(master_seed: int, tag: str, *ids: int) -> int:
    """128-bit integer seed for the (tag, ids) stream."""
    h = hashlib.blake2b(digest_size=16)
    h.update(master_seed.to_bytes(16, "little", signed=False))
    h.update(tag.encode("utf-8"))
    h.update(b"\x00")
    for part in ids:
        h.update(int(part).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def derive_rng(master_seed: int, tag: str, *ids: int) -> random.Random:
    return random.Random(derive_seed(master_seed, tag, *ids))


def derive_np(master_seed: int, tag: str, *ids: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, tag, *ids)))


def derive_bits(master_seed: int, n_bits: int, tag: str, *ids: int) -> int:
    """Uniform n_bits-bit integer from the derived stream."""
    n_bytes = (n_bits + 7) // 8
    h = hashlib.blake2b(digest_size=max(8, n_bytes))
    h.update(derive_seed(master_seed, tag, *ids).to_bytes(16, "little"))
    value = int.from_bytes(h.digest()[:n_bytes], "little")
    return value & ((1 << n_bits) - 1)


def prf_value(seed: int, counter: int) -> int:
    """64-bit PRF in counter mode, identical at sender and receivers."""
    h = hashlib.blake2b(digest_size=8)
    h.update(seed.to_bytes(16, "little", signed=False))
    h.update(counter.to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest(), "little")


def prf_uniform(seed: int, index: int, bound: int) -> int:
    """Uniform value in [0, bound) with rejection of the biased region."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    limit = (1 << 64) - ((1 << 64) % bound)
    counter = index
    while True:
        r = prf_value(seed, counter)
        if r < limit:
            return r % bound
        counter += 1 << 32  # retry lane; disjoint from base counters


def shuffled(items: Iterable, master_seed: int, tag: str, *ids: int) -> list:
    out = list(items)
    derive_rng(master_seed, tag, *ids).shuffle(out)
    return out
