"""Full-pipeline orchestrator, validators, and the fallback completion.

Stage order (recorded in every report):

  decomposition -> stats/classify/outliers -> slack generation ->
  colorful matching -> put-aside construction -> sparse+outlier coloring
  -> clique palette + permutation + synchronized trial -> open-clique
  cleanup -> reserved-prefix multitrial -> put-aside reduction ->
  put-aside completion -> fallback.

The final coloring is always proper and total: anything the in-model
stages leave uncolored is finished by an out-of-model greedy pass,
flagged in the report (runs that needed it do not count toward
statistical acceptance).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import decomposition as dc
from . import putaside as pa
from . import sct as sctmod
from . import slackgen as sg
from . import streaming as st
from .coloring import PartialColoring, verify_coloring
from .config import Config, RunConfig, ceil_log2
from .engine import Engine
from .graph import Graph, GraphModel, generate, parse_edge_list
from .multitrial import multitrial
from .rounds import RoundOps


@dataclass
class CliqueDiag:
    index: int
    size: int
    cls: str
    x: int
    e_bar: float
    a_bar: float
    outliers: int
    degenerate: bool
    matching_size: int = 0
    matching_target: int = 0
    inlier_fraction: float = 0.0
    sct_tried: int = 0
    sct_leftover: int = 0
    sct_bound: float = 0.0
    sct_within_bound: bool = True
    post_sct_deg_ok: Optional[bool] = None
    post_cleanup_list_ok: Optional[bool] = None
    putaside_size: int = 0
    putaside_final: int = 0
    permute_variant: str = ""

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class RunReport:
    n: int = 0
    m: int = 0
    delta: int = 0
    mode: str = "bcongest"
    master_seed: int = 0
    preset: str = "desk"
    stage_order: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    total_rounds: int = 0
    max_bits: int = 0
    bandwidth_budget: int = 0
    peak_words: int = 0
    memory_budget: int = 0
    cliques: list = field(default_factory=list)
    sparse_count: int = 0
    fallback_count: int = 0
    fallback_nodes: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    validators: dict = field(default_factory=dict)
    coloring_sha256: str = ""
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return bool(self.validators.get("proper")
                    and self.validators.get("total")
                    and self.error is None)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["cliques"] = [c.to_dict() if isinstance(c, CliqueDiag) else c
                          for c in self.cliques]
        out["ok"] = self.ok
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def load_graph(rc: RunConfig) -> Graph:
    if rc.graph:
        with open(rc.graph, "r", encoding="utf-8") as fh:
            return parse_edge_list(fh.read())
    if rc.model:
        return generate(GraphModel.from_dict(rc.model), rc.master_seed)
    raise ValueError("run config needs either a graph path or a model")


def run_with_colors(rc: RunConfig, graph: Optional[Graph] = None
                    ) -> tuple[RunReport, np.ndarray]:
    g = graph if graph is not None else load_graph(rc)
    cfg = rc.config()
    report = RunReport(n=g.n, m=g.m, delta=g.max_degree, mode=rc.mode,
                       master_seed=rc.master_seed, preset=rc.preset)
    engine = Engine(g, cfg, rc.master_seed, mode=rc.mode)
    coloring = PartialColoring(g)
    ops = RoundOps(engine, coloring)
    report.bandwidth_budget = engine.budget_bits
    report.memory_budget = engine.meter.budget
    dec = None
    step3_round = -1
    try:
        dec, step3_round = _run_stages(rc, g, cfg, engine, ops, report)
    except RuntimeError as exc:  # engine faults, config errors, stage faults
        report.error = f"{type(exc).__name__}: {exc}"
    finally:
        if engine._stage is not None:
            engine.end_stage()
        _fallback(engine, ops, report)
        _validate(g, cfg, engine, ops, report, dec, step3_round)
    return report, coloring.colors.copy()


def run_pipeline(rc: RunConfig, graph: Optional[Graph] = None) -> RunReport:
    return run_with_colors(rc, graph)[0]


def _run_stages(rc: RunConfig, g: Graph, cfg: Config, engine: Engine,
                ops: RoundOps, report: RunReport):
    ell = cfg.ell(g.n)
    delta1 = g.max_degree + 1

    # --- decomposition ----------------------------------------------------
    if rc.decomposition_mode == "distributed":
        dec = dc.compute_acd(g, cfg.epsilon, "distributed", engine)
        rep = dc.validate_acd(g, dec, cfg.epsilon, cfg)
        if not rep.ok:
            engine.begin_stage("acd-oracle-fallback")
            engine.end_stage()
            dec = dc.compute_acd(g, cfg.epsilon, "oracle")
    else:
        engine.begin_stage("decomposition")
        dec = dc.compute_acd(g, cfg.epsilon, "oracle")
        engine.end_stage()
    report.sparse_count = len(dec.v_sparse)
    report.stage_order.append("decomposition")

    # --- stats / classification / outliers --------------------------------
    engine.begin_stage("classify")
    dc.annotate(g, dec, cfg)
    if rc.decomposition_mode == "distributed" and dec.cliques:
        values = {}
        for k in dec.cliques:
            for i, v in enumerate(k.members.tolist()):
                values[v] = (1, int(k.e_v[i]), int(k.a_v[i]))
        ops.clique_aggregate(dec.cliques, values, 6 * ops.width)
    x_of = np.zeros(g.n, dtype=np.int64)
    matching_thr = cfg.matching_min_abar(g.n)
    for k in dec.cliques:
        if k.cls == dc.FULL:
            fits = (cfg.putaside_mult * ell
                    <= cfg.putaside_max_frac * len(k.inliers()))
            if not fits:
                k.degenerate = True
                k.x = 0
        elif k.cls == dc.CLOSED and k.a_bar < matching_thr:
            k.degenerate = True
            k.x = 0
        x_of[k.members] = k.x
    if dec.cliques:
        senders = {int(v): ("x", int(x_of[v]))
                   for k in dec.cliques for v in k.members.tolist()}
        ops.exchange(senders, {v: 2 + ops.color_width for v in senders})
    engine.end_stage()
    report.stage_order.append("classify")
    ops.reserve_x = x_of
    ops.reserve_active = True

    diags = {k.index: CliqueDiag(
        index=k.index, size=k.size, cls=k.cls, x=k.x,
        e_bar=float(k.e_bar), a_bar=float(k.a_bar),
        outliers=len(k.outliers) if k.outliers is not None else 0,
        degenerate=k.degenerate) for k in dec.cliques}
    report.cliques = list(diags.values())

    # --- slack generation ---------------------------------------------------
    engine.begin_stage("slack-generation")
    colored = sg.slack_generation(ops, x_of)
    engine.end_stage(colored)
    report.stage_order.append("slack-generation")

    # --- colorful matching ---------------------------------------------------
    engine.begin_stage("colorful-matching")
    matching_cliques = [k for k in dec.cliques
                        if k.a_bar >= matching_thr and float(k.a_bar) > 0]
    if matching_cliques:
        bucketings = sctmod.checked_bucketings(ops, matching_cliques, "mpal")
        palettes = sctmod.learn_palette_all(
            ops, [(k, bucketings[k.index]) for k in matching_cliques])
        outcomes = sg.colorful_matching_all(
            ops, [(k, palettes[k.index]) for k in matching_cliques])
        for idx, out in outcomes.items():
            diags[idx].matching_size = out.size()
            diags[idx].matching_target = out.target
    colored = sum(2 * len(k.matching) for k in dec.cliques)
    engine.end_stage(colored)
    report.stage_order.append("colorful-matching")
    pal_ok = True
    for k in dec.cliques:
        ok, _bad = sg.check_clique_palette_bound(ops, k)
        pal_ok = pal_ok and ok
    report.validators["palette_inequality_post_matching"] = pal_ok

    # --- put-aside sets -------------------------------------------------------
    engine.begin_stage("put-aside-build")
    pa_cliques = [k for k in dec.cliques if k.cls == dc.FULL
                  and not k.degenerate]
    sg.build_putaside(ops, pa_cliques, cfg.putaside_mult * ell)
    for k in pa_cliques:
        diags[k.index].putaside_size = (len(k.putaside)
                                        if k.putaside is not None else 0)
        if k.putaside is None:
            k.degenerate = True
            k.x = 0
            x_of[k.members] = 0
            diags[k.index].degenerate = True
    engine.end_stage()
    report.stage_order.append("put-aside-build")

    # --- sparse nodes and outliers ---------------------------------------------
    engine.begin_stage("sparse-outliers")
    before = coloring_count(ops)
    routed, survivors = sg.color_sparse_and_outliers(ops, dec, x_of)
    report.fallback_nodes.extend(routed + survivors)
    engine.end_stage(coloring_count(ops) - before)
    report.stage_order.append("sparse-outliers")

    for k in dec.cliques:
        inl = k.inliers()
        unc = inl[ops.coloring.colors[inl] == 0]
        diags[k.index].inlier_fraction = (len(unc) / g.max_degree
                                          if g.max_degree else 0.0)

    # --- synchronized color trial -----------------------------------------------
    engine.begin_stage("sct")
    before = coloring_count(ops)
    sct_psis: dict[int, np.ndarray] = {}
    if dec.cliques:
        bucketings = sctmod.checked_bucketings(ops, dec.cliques, "sct")
        sct_psis = sctmod.learn_palette_all(
            ops, [(k, bucketings[k.index]) for k in dec.cliques])
        for k in dec.cliques:
            members = k.members
            unc = members[ops.coloring.colors[members] == 0]
            if k.putaside is not None:
                outside = np.isin(unc, k.putaside, invert=True)
                subset = unc[outside]
            else:
                subset = unc
            if len(subset) == 0:
                continue
            variant = rc.permute
            if variant == "auto":
                # const only where its leftover path can fit the gossip cap
                cap = cfg.m2a_sender_cap(g.max_degree, g.n)
                variant = ("const" if g.max_degree >= ceil_log2(g.n) ** 3
                           and len(subset) <= cap else "loglog")
            pi = None
            if variant == "const":
                try:
                    pi = sctmod.permute_const(ops, k, subset,
                                              tag=f"pc{k.index}",
                                              bucketing=bucketings[k.index])
                    diags[k.index].permute_variant = "const"
                except sctmod.SctFault:
                    pi = None
            if pi is None:
                pi = sctmod.permute_loglog(ops, k, subset,
                                           tag=f"pl{k.index}",
                                           bucketing=bucketings[k.index])
                diags[k.index].permute_variant = (
                    "loglog" if variant != "const" else "const->loglog")
            if engine.mode == "bcstream":
                _streaming_color_lookup(ops, k, bucketings[k.index],
                                        sct_psis[k.index], pi)
            out = sctmod.sct_trial(ops, k, sct_psis[k.index], pi, subset)
            diags[k.index].sct_tried = out.tried
            diags[k.index].sct_leftover = out.leftover
            diags[k.index].sct_bound = out.leftover_bound
            diags[k.index].sct_within_bound = out.within_bound
    engine.end_stage(coloring_count(ops) - before)
    report.stage_order.append("sct")
    # Post-trial degree bound: every uncolored inlier of a full/closed
    # clique should satisfy 2*d^(v) + e_v <= x(v), counting only active
    # uncolored neighbors (put-aside sets stay inactive).
    for k in dec.cliques:
        if k.degenerate or k.cls not in (dc.FULL, dc.CLOSED) or k.x == 0:
            continue
        diags[k.index].post_sct_deg_ok = _post_sct_bound_ok(ops, k)

    # --- open-clique cleanup -------------------------------------------------------
    engine.begin_stage("open-cleanup")
    before = coloring_count(ops)
    cleanup_set = [k for k in dec.cliques
                   if k.cls == dc.OPEN or k.degenerate]
    sctmod.open_cleanup(ops, cleanup_set, x_of)
    engine.end_stage(coloring_count(ops) - before)
    report.stage_order.append("open-cleanup")
    for k in dec.cliques:
        if k.cls == dc.OPEN and not k.degenerate and k.x > 0:
            diags[k.index].post_cleanup_list_ok = \
                _post_cleanup_lists_ok(ops, k)

    # --- reserved-prefix multitrial for inliers ---------------------------------------
    engine.begin_stage("inlier-multitrial")
    step3_round = engine.round_no
    ops.reserve_active = False
    before = coloring_count(ops)
    h_nodes = []
    lists = {}
    for k in dec.cliques:
        members = k.members
        unc = members[ops.coloring.colors[members] == 0]
        if k.putaside is not None:
            unc = unc[np.isin(unc, k.putaside, invert=True)]
        for v in unc.tolist():
            if k.x > 0:
                h_nodes.append(int(v))
                lists[int(v)] = ("prefix", int(k.x))
    if h_nodes:
        # one round: nodes announce x(v) so neighbors can reconstruct lists
        ops.exchange({v: ("xlist", lists[v][1]) for v in h_nodes},
                     {v: 2 + ops.color_width for v in h_nodes})
        routed, survivors = multitrial(ops, np.array(sorted(h_nodes)), lists,
                                       cfg.multitrial_budget(g.n), "inlier-mt")
    else:
        routed, survivors = [], []
    engine.end_stage(coloring_count(ops) - before)
    report.stage_order.append("inlier-multitrial")

    # --- mop-up: bounded extra trials for anything still uncolored outside
    # the put-aside sets (degenerate cliques, multitrial stragglers).
    engine.begin_stage("mopup")
    before = coloring_count(ops)
    protected = set()
    for k in dec.cliques:
        if k.putaside is not None:
            protected.update(k.putaside.tolist())
    for _ in range(8):
        unc = [v for v in np.nonzero(ops.coloring.colors == 0)[0].tolist()
               if v not in protected]
        if not unc:
            break
        tries = {}
        for v in unc:
            rng = engine.node_rng(v, "mopup")
            c = ops.sample_from_palette(v, rng,
                                        round_no=engine.round_no - 1)
            if c is not None:
                tries[v] = c
        if not tries:
            break
        ops.try_color_round(tries)
    engine.end_stage(coloring_count(ops) - before)
    report.stage_order.append("mopup")

    # --- put-aside reduction and completion -----------------------------------------
    engine.begin_stage("put-aside-reduce")
    before = coloring_count(ops)
    residues = {}
    for k in pa_cliques:
        if k.putaside is None:
            continue
        psi = _current_psi(ops, k)
        red = pa.reduce_putaside(ops, k, psi)
        residues[k.index] = red.final
        diags[k.index].putaside_final = len(red.final)
    engine.end_stage(coloring_count(ops) - before)
    report.stage_order.append("put-aside-reduce")

    engine.begin_stage("put-aside-finish")
    before = coloring_count(ops)
    for k in pa_cliques:
        if k.putaside is None:
            continue
        psi = _current_psi(ops, k)
        pa.finish_putaside(ops, k, psi, residues.get(k.index, []))
    engine.end_stage(coloring_count(ops) - before)
    report.stage_order.append("put-aside-finish")

    return dec, step3_round


def _post_sct_bound_ok(ops: RoundOps, k) -> bool:
    g = ops.g
    protected = set(k.putaside.tolist()) if k.putaside is not None else set()
    out_set = set(k.outliers.tolist()) if k.outliers is not None else set()
    pos = {int(v): i for i, v in enumerate(k.members.tolist())}
    uncolored = ops.coloring.colors == 0
    for v in k.members.tolist():
        v = int(v)
        if not uncolored[v] or v in out_set or v in protected:
            continue
        nbrs = g.neighbors(v)
        d_hat = int(sum(1 for u in nbrs.tolist()
                        if uncolored[u] and u not in protected))
        if 2 * d_hat + int(k.e_v[pos[v]]) > k.x:
            return False
    return True


def _post_cleanup_lists_ok(ops: RoundOps, k) -> bool:
    g = ops.g
    uncolored = ops.coloring.colors == 0
    for v in k.members.tolist():
        v = int(v)
        if not uncolored[v]:
            continue
        d_hat = int(uncolored[g.neighbors(v)].sum())
        pal = ops.palette_bool(v, ops.engine.round_no + 1)
        if int(pal[:k.x].sum()) < 2 * d_hat:
            return False
    return True


def _current_psi(ops: RoundOps, clique) -> np.ndarray:
    """Exact clique palette right now (oracle recount; the in-stage
    learning rounds were already accounted by learn_palette)."""
    delta1 = ops.g.max_degree + 1
    used = np.zeros(delta1, dtype=bool)
    cols = ops.coloring.colors[clique.members]
    used[cols[cols > 0] - 1] = True
    return ~used


def _streaming_color_lookup(ops: RoundOps, clique, bucketing, psi, pi) -> None:
    """Exercise the prefix-sum color lookup for one member per clique and
    assert it matches the direct palette indexing."""
    free = np.nonzero(psi)[0] + 1
    free = free[free > clique.x]
    if len(free) == 0 or not pi:
        return
    v = min(pi)
    idx = pi[v] + 1
    if idx > len(free):
        return
    color = st.nth_color_of_palette(ops, clique, bucketing, psi, idx,
                                    x=clique.x)
    if color != int(free[idx - 1]):
        ops.engine.fault("nth-color-mismatch", v,
                         f"{color} != {int(free[idx - 1])}", fatal=True)


def coloring_count(ops: RoundOps) -> int:
    return int(ops.coloring.colored_count)


def _fallback(engine: Engine, ops: RoundOps, report: RunReport) -> None:
    """Out-of-model greedy completion of the residue, in ID order."""
    engine.begin_stage("fallback")
    ops.reserve_active = False
    residue = np.nonzero(ops.coloring.colors == 0)[0]
    report.fallback_count = len(residue)
    for v in residue.tolist():
        pal = ops.palette_bool(v, engine.round_no + 1)
        free = np.nonzero(pal)[0]
        if len(free) == 0:
            raise AssertionError(
                f"empty palette at {v} under Delta+1 colors")
        ops.assign(v, int(free[0]) + 1)
    engine.end_stage(len(residue))
    report.stage_order.append("fallback")


def _validate(g: Graph, cfg: Config, engine: Engine, ops: RoundOps,
              report: RunReport, dec, step3_round: int) -> None:
    colors = ops.coloring.colors
    proper, violations = verify_coloring(g, colors)
    report.validators["proper"] = bool(proper)
    report.validators["total"] = bool(ops.coloring.is_total())
    report.validators["colors_in_range"] = bool(
        g.n == 0 or (colors >= 1).all() and (colors <= g.max_degree + 1).all())
    report.validators["violations"] = violations[:20]
    if dec is not None:
        acd_report = dc.validate_acd(g, dec, cfg.epsilon, cfg)
        report.validators["decomposition_ok"] = acd_report.ok
        report.validators["decomposition_violations"] = \
            acd_report.violations[:20]
        palette_ok = True
        for k in dec.cliques:
            ok, bad = sg.check_clique_palette_bound(ops, k)
            palette_ok = palette_ok and ok
        report.validators["palette_inequality_final"] = palette_ok
        # Reserved-prefix timeline: colors <= x(K) first adopted at or
        # after the reserved-prefix multitrial stage.
        timeline_ok = True
        for k in dec.cliques:
            cols = colors[k.members]
            rounds_adopted = ops.coloring.adopted_round[k.members]
            low = (cols > 0) & (cols <= k.x)
            if low.any() and step3_round >= 0:
                if rounds_adopted[low].min() < step3_round:
                    timeline_ok = False
        report.validators["reserved_prefix_timeline"] = timeline_ok
    else:
        report.validators["decomposition_ok"] = False
    report.metrics = engine.metrics.to_list()
    report.total_rounds = engine.metrics.total_rounds
    report.max_bits = engine.metrics.max_bits
    report.peak_words = engine.meter.peak_words
    report.faults = [f.to_dict() for f in engine.faults][:100]
    report.fallback_count = int(report.fallback_count)
    digest = hashlib.sha256(colors.astype("<i4").tobytes()).hexdigest()
    report.coloring_sha256 = digest
    report.validators["metrics_rounds_consistent"] = (
        engine.metrics.total_rounds == engine.round_no)


def emit_coloring(colors: np.ndarray) -> str:
    return "\n".join(f"{v} {int(c)}" for v, c in enumerate(colors.tolist())) \
        + ("\n" if len(colors) else "")
