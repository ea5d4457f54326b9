"""Command-line interface.

Subcommands:
  run       one pipeline run; writes metrics JSON-lines and the coloring
  validate  check a graph + coloring file pair
  stats     run a statistical test spec file
  bench     run a matrix of configs and summarize
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .coloring import verify_coloring
from .graph import parse_edge_list
from .pipeline import emit_coloring, run_with_colors
from .stats import StatSpec, stat_driver


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", help="edge-list file to color")
    p.add_argument("--model", help="generator spec as JSON, e.g. "
                   '\'{"kind":"gnp","params":{"n":256,"p":0.3}}\'')
    p.add_argument("--preset", default="desk",
                   choices=["desk", "paper-constants"])
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--mode", default="bcongest",
                   choices=["bcongest", "bcstream"])
    p.add_argument("--permute", default="auto",
                   choices=["auto", "loglog", "const"])
    p.add_argument("--decomposition", default="oracle",
                   choices=["oracle", "distributed"])
    p.add_argument("--out", help="output prefix (metrics/coloring files)")
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--override", action="append", default=[],
                   metavar="KEY=VALUE", help="constant override, repeatable")
    p.add_argument("--strict-bandwidth", action="store_true", default=True)
    p.add_argument("--audit-bandwidth", dest="strict_bandwidth",
                   action="store_false",
                   help="log bandwidth violations instead of aborting")
    p.add_argument("--workers", type=int, default=1)


def _run_config(args) -> RunConfig:
    if args.config:
        rc = RunConfig.from_json(Path(args.config).read_text())
    else:
        rc = RunConfig()
    if args.graph:
        rc.graph = args.graph
    if args.model:
        rc.model = json.loads(args.model)
    rc.preset = args.preset
    rc.master_seed = args.seed
    rc.mode = args.mode
    rc.permute = args.permute
    rc.decomposition_mode = args.decomposition
    rc.workers = args.workers
    rc.strict_bandwidth = args.strict_bandwidth
    overrides = dict(rc.overrides)
    for item in args.override:
        key, _, value = item.partition("=")
        overrides[key] = json.loads(value)
    rc.overrides = overrides
    if args.out:
        rc.out = args.out
    return rc


def cmd_run(args) -> int:
    rc = _run_config(args)
    report, colors = run_with_colors(rc)
    metrics_lines = "\n".join(json.dumps(s, sort_keys=True)
                              for s in report.metrics)
    if rc.out:
        prefix = Path(rc.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.metrics.jsonl").write_text(metrics_lines + "\n")
        Path(f"{prefix}.report.json").write_text(report.to_json() + "\n")
        Path(f"{prefix}.coloring.txt").write_text(emit_coloring(colors))
    else:
        print(metrics_lines)
        print(report.to_json())
    status = "ok" if report.ok else "FAILED"
    print(f"{status}: n={report.n} delta={report.delta} "
          f"rounds={report.total_rounds} fallback={report.fallback_count} "
          f"max_bits={report.max_bits}/{report.bandwidth_budget}",
          file=sys.stderr)
    return 0 if report.ok else 1


def cmd_validate(args) -> int:
    g = parse_edge_list(Path(args.graph).read_text())
    colors = np.zeros(g.n, dtype=np.int64)
    for line in Path(args.coloring).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        v, c = line.split()
        colors[int(v)] = int(c)
    ok, violations = verify_coloring(g, colors)
    print(json.dumps({"proper": ok, "total": bool((colors > 0).all()),
                      "violations": violations[:50]}, sort_keys=True))
    return 0 if ok else 1


def cmd_stats(args) -> int:
    """Run a stats spec file: {"name", "trials", "kind", ...synthetic}."""
    spec_data = json.loads(Path(args.spec).read_text())
    name = spec_data.get("name", "uniform-check")
    kind = spec_data.get("kind", "chi2")
    trials = int(spec_data.get("trials", 10000))
    bins = spec_data.get("bins", 16)
    spec = StatSpec(name=name, trials=trials, kind=kind,
                    significance=spec_data.get("significance", 0.001),
                    threshold=spec_data.get("threshold", 0.95), bins=bins)
    source = spec_data.get("source", "uniform")

    def trial(seed: int):
        import random
        r = random.Random(seed)
        if source == "uniform":
            return r.randrange(bins)
        if source == "constant":
            return 0
        raise ValueError(f"unknown source {source!r}")

    res = stat_driver(spec, trial, master_seed=spec_data.get("seed", 0))
    print(json.dumps(res.to_dict(), sort_keys=True))
    return 0 if res.passed else 1


def cmd_bench(args) -> int:
    matrix = json.loads(Path(args.matrix).read_text())
    rows = []
    for entry in matrix["runs"]:
        rc = RunConfig(**entry)
        report, _ = run_with_colors(rc)
        rows.append({"model": entry.get("model"), "seed": rc.master_seed,
                     "ok": report.ok, "rounds": report.total_rounds,
                     "fallback": report.fallback_count,
                     "max_bits": report.max_bits})
        print(json.dumps(rows[-1], sort_keys=True))
    ok = all(r["ok"] for r in rows)
    print(json.dumps({"runs": len(rows), "all_ok": ok}, sort_keys=True))
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bccolor",
        description="Broadcast-CONGEST (Delta+1)-coloring simulator")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run one pipeline")
    _add_run_flags(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_val = sub.add_parser("validate", help="validate graph+coloring files")
    p_val.add_argument("--graph", required=True)
    p_val.add_argument("--coloring", required=True)
    p_val.set_defaults(fn=cmd_validate)

    p_stats = sub.add_parser("stats", help="run a statistical test spec")
    p_stats.add_argument("--spec", required=True)
    p_stats.set_defaults(fn=cmd_stats)

    p_bench = sub.add_parser("bench", help="run a matrix of configs")
    p_bench.add_argument("--matrix", required=True)
    p_bench.set_defaults(fn=cmd_bench)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
