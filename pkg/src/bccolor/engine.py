"""Synchronous round engine.

Per round every node emits exactly one broadcast; the same message is
delivered to all of its neighbors and only them.  The engine audits
every broadcast against the bandwidth budget c_bw*ceil(log2 n) bits and,
in streaming mode, meters stage-local node state against the memory
budget c_mem*ceil(log2 n)^3 words.

Two layers are provided:

* ``run_round(states, handler)`` — the per-node pure-function interface.
  Handlers may be evaluated concurrently; results are independent of the
  worker count because handlers only see (ctx, inbox, derived rng).
* ``exchange(msgs)`` — the batch interface used by the pipeline stages.
  Stage code posts one Broadcast per sending node and reads them back
  through neighbor-restricted views; the engine does the accounting.

Sender identity is delivery metadata (a node knows which neighbor each
message came from) and does not count against the payload budget.  An
empty broadcast costs 1 bit (a presence flag).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, Optional

import numpy as np

from . import rng as rngmod
from .config import Config
from .graph import Graph


class EngineFault(RuntimeError):
    pass


class BandwidthViolation(EngineFault):
    pass


class MemoryBudgetViolation(EngineFault):
    pass


@dataclass(frozen=True)
class Broadcast:
    """One per node per round; bits is the measured wire length."""

    payload: Any = None
    bits: int = 1

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError("a broadcast costs at least the presence bit")


EMPTY = Broadcast(None, 1)


@dataclass
class Fault:
    kind: str
    stage: str
    node: int
    round: int
    detail: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "stage": self.stage, "node": self.node,
                "round": self.round, "detail": self.detail}


@dataclass
class NodeCtx:
    """Per-node view for the handler interface."""

    id: int
    neighbors: np.ndarray
    color: Optional[int] = None
    state: Any = None
    rng: Any = None

    def charge(self, words: int) -> None:
        if self._meter is not None:
            self._meter(self.id, words)

    _meter: Optional[Callable[[int, int], None]] = None


class StreamInbox:
    """One-pass iterator over (sender, payload); order is a seeded shuffle."""

    def __init__(self, entries: list, n_empty: int):
        self._entries = entries
        self.n_empty = n_empty
        self._consumed = False

    def __iter__(self) -> Iterator:
        if self._consumed:
            raise EngineFault("streaming inbox cannot be re-read")
        self._consumed = True
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class StageRecord:
    stage: str
    rounds: int = 0
    max_bits: int = 0
    colored: int = 0
    faults: int = 0
    peak_words: int = 0

    def to_dict(self) -> dict:
        return {"stage": self.stage, "rounds": self.rounds, "max_bits": self.max_bits,
                "colored": self.colored, "faults": self.faults,
                "peak_words": self.peak_words}


class Metrics:
    """Per-stage counters; stage round counts sum to the total."""

    def __init__(self):
        self.stages: list[StageRecord] = []

    @property
    def total_rounds(self) -> int:
        return sum(s.rounds for s in self.stages)

    @property
    def peak_words(self) -> int:
        return max((s.peak_words for s in self.stages), default=0)

    @property
    def max_bits(self) -> int:
        return max((s.max_bits for s in self.stages), default=0)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(s.to_dict(), sort_keys=True) for s in self.stages)

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.stages]


class MemoryMeter:
    """Words of stage-local state per node; words are ceil(log2 n)-bit."""

    def __init__(self, budget: int, enforce: bool):
        self.budget = budget
        self.enforce = enforce
        self.live: dict[int, int] = {}
        self.peak_words = 0
        self.peak_by_stage: dict[str, int] = {}

    def set_live(self, node: int, words: int, stage: str, round_no: int,
                 on_fault: Callable[[Fault], None]) -> None:
        self.live[node] = words
        if words > self.peak_words:
            self.peak_words = words
        if words > self.peak_by_stage.get(stage, 0):
            self.peak_by_stage[stage] = words
        if self.enforce and words > self.budget:
            fault = Fault("memory-budget", stage, node, round_no,
                          f"{words} words > budget {self.budget}")
            on_fault(fault)

    def reset_stage(self) -> None:
        self.live.clear()


class RoundView:
    """Messages of one round, readable only through neighbor scopes."""

    def __init__(self, engine: "Engine", msgs: dict[int, Broadcast], round_no: int):
        self._engine = engine
        self._msgs = msgs
        self.round_no = round_no

    def inbox(self, v: int) -> list[tuple[int, Any]]:
        """(sender, payload) for v's neighbors that sent a non-empty payload."""
        out = []
        for u in self._engine.graph.neighbors(v).tolist():
            b = self._msgs.get(u)
            if b is not None and b.payload is not None:
                out.append((u, b.payload))
        return out

    def stream_inbox(self, v: int) -> StreamInbox:
        entries = self.inbox(v)
        n_empty = int(self._engine.graph.degree(v)) - len(entries)
        order = rngmod.derive_rng(self._engine.master_seed, "inbox-order",
                                  v, self.round_no)
        order.shuffle(entries)
        return StreamInbox(entries, n_empty)

    def senders(self) -> dict[int, Any]:
        """Raw payloads by sender.

        Stage code may use this to batch per-node decisions, but every
        decision for node v must depend only on messages of N(v); the
        cross-check tests compare stage outputs against literal per-node
        inbox evaluation.
        """
        return {u: b.payload for u, b in self._msgs.items() if b.payload is not None}


Handler = Callable[[NodeCtx, Any], tuple[Broadcast, NodeCtx]]


class Engine:
    """Round executor bound to one (graph, config, master_seed) run."""

    def __init__(self, graph: Graph, config: Config, master_seed: int,
                 mode: str = "bcongest"):
        if mode not in ("bcongest", "bcstream"):
            raise ValueError(f"unknown mode {mode!r}")
        self.graph = graph
        self.config = config
        self.master_seed = master_seed
        self.mode = mode
        self.round_no = 0
        self.metrics = Metrics()
        self.faults: list[Fault] = []
        self.budget_bits = config.budget_bits(graph.n)
        self.meter = MemoryMeter(config.mem_budget_words(graph.n),
                                 enforce=(mode == "bcstream"))
        self._stage: Optional[StageRecord] = None

    # ----- stage bookkeeping ---------------------------------------------

    def begin_stage(self, name: str) -> StageRecord:
        rec = StageRecord(stage=name)
        self.metrics.stages.append(rec)
        self._stage = rec
        self.meter.reset_stage()
        return rec

    def end_stage(self, colored: int = 0) -> StageRecord:
        assert self._stage is not None, "end_stage without begin_stage"
        self._stage.colored += colored
        self._stage.peak_words = max(self._stage.peak_words,
                                     self.meter.peak_by_stage.get(self._stage.stage, 0))
        rec = self._stage
        self._stage = None
        return rec

    @property
    def stage_name(self) -> str:
        return self._stage.stage if self._stage else "(none)"

    def fault(self, kind: str, node: int, detail: str = "",
              fatal: bool = False) -> Fault:
        f = Fault(kind, self.stage_name, node, self.round_no, detail)
        self.faults.append(f)
        if self._stage is not None:
            self._stage.faults += 1
        if fatal:
            raise EngineFault(f"{kind} at node {node} round {self.round_no}: {detail}")
        return f

    # ----- randomness ------------------------------------------------------

    def rng(self, tag: str, *ids: int):
        return rngmod.derive_rng(self.master_seed, tag, *ids)

    def np_rng(self, tag: str, *ids: int):
        return rngmod.derive_np(self.master_seed, tag, *ids)

    def node_rng(self, node: int, tag: str, round_no: Optional[int] = None):
        if round_no is None:
            round_no = self.round_no
        return rngmod.derive_rng(self.master_seed, tag, node, round_no)

    # ----- memory metering --------------------------------------------------

    def charge(self, node: int, words: int) -> None:
        """Record the stage-local live words of `node` right now."""
        self.meter.set_live(node, words, self.stage_name, self.round_no,
                            self._on_memory_fault)

    def charge_many(self, words_by_node: Iterable[tuple[int, int]]) -> None:
        for node, words in words_by_node:
            self.charge(node, words)

    def _on_memory_fault(self, fault: Fault) -> None:
        self.faults.append(fault)
        if self._stage is not None:
            self._stage.faults += 1
        raise MemoryBudgetViolation(
            f"node {fault.node}: {fault.detail} (stage {fault.stage})")

    # ----- round execution ---------------------------------------------------

    def _audit(self, msgs: dict[int, Broadcast]) -> int:
        max_bits = 0
        for node, b in msgs.items():
            if b.bits > max_bits:
                max_bits = b.bits
            if b.bits > self.budget_bits:
                f = self.fault("bandwidth", node,
                               f"{b.bits} bits > budget {self.budget_bits}")
                if self.config.strict_bandwidth:
                    raise BandwidthViolation(
                        f"node {node} round {self.round_no}: {f.detail}")
        return max_bits

    def exchange(self, msgs: dict[int, Broadcast]) -> RoundView:
        """Run one round: audit, deliver, advance the round counter."""
        assert self._stage is not None, "exchange outside a stage"
        max_bits = self._audit(msgs)
        view = RoundView(self, msgs, self.round_no)
        self._stage.rounds += 1
        self._stage.max_bits = max(self._stage.max_bits, max_bits)
        self.round_no += 1
        return view

    def tick(self, n_rounds: int = 1, bits: int = 1) -> None:
        """Account rounds whose payloads are presence-only."""
        assert self._stage is not None
        self._stage.rounds += n_rounds
        self._stage.max_bits = max(self._stage.max_bits, bits)
        self.round_no += n_rounds

    def run_round(self, states: dict[int, NodeCtx], handler: Handler,
                  msgs: Optional[dict[int, Broadcast]] = None
                  ) -> tuple[dict[int, NodeCtx], dict[int, Broadcast]]:
        """Per-node interface: handler(ctx, inbox) -> (Broadcast, ctx').

        `msgs` are the broadcasts produced by the previous round (empty
        on the first call).  Returns new states and this round's
        broadcasts, which the caller feeds to the next call.
        """
        assert self._stage is not None, "run_round outside a stage"
        prev = msgs or {}
        view = RoundView(self, prev, self.round_no - 1)

        def eval_node(v: int) -> tuple[int, tuple[Broadcast, NodeCtx]]:
            ctx = states[v]
            ctx._meter = lambda node, words: self.charge(node, words)
            inbox = (view.stream_inbox(v) if self.mode == "bcstream"
                     else view.inbox(v))
            return v, handler(ctx, inbox)

        order = sorted(states)
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                results = dict(pool.map(eval_node, order))
        else:
            results = dict(eval_node(v) for v in order)

        out_msgs = {v: results[v][0] for v in order}
        new_states = {v: results[v][1] for v in order}
        self.exchange(out_msgs)
        return new_states, out_msgs
