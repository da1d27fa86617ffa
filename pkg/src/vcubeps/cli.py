"""Command line entry point: ``run``, ``validate``, ``sweep`` and ``presets``.

Every subcommand exits with status 1 when the oracle reports a violation and 2
on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

from . import experiments as ex
from . import oracle
from .simnet import read_trace, write_trace


def _manifest(control: str) -> dict:
    return ex.assumption_manifest(control)


def _print_manifest(manifest: dict, out) -> None:
    print("assumptions:", file=out)
    for k, v in manifest.items():
        print(f"  {k}: {v}", file=out)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.1f}"
    return str(v)


def _print_rows(rows: list[dict], out) -> None:
    if not rows:
        return
    cols = list(rows[0])
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)), file=out)
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)), file=out)


def _scenario_from_args(a: argparse.Namespace) -> ex.Scenario:
    kw = {}
    for flag, key in (
        ("subscriber_pct", "subscriber_pct"),
        ("publisher_pct", "publisher_pct"),
        ("topics", "n_topics"),
        ("messages", "message_limit"),
        ("dist", "distribution"),
        ("churn_pct", "churn_pct"),
        ("churn_period", "churn_period"),
        ("brokers", "broker_count"),
        ("ratio", "ratio"),
        ("wait_p", "wait_p"),
        ("control", "control"),
    ):
        v = getattr(a, flag)
        if v is not None:
            kw[key] = v
    if a.literal:
        kw["repairs"] = False
    return ex.Scenario(a.scenario, a.nodes, a.system, **kw)


def cmd_run(a: argparse.Namespace, out) -> int:
    try:
        sc = _scenario_from_args(a)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    validate = None
    if a.validate:
        validate = True
    elif a.no_validate:
        validate = False
    records, bad = [], 0
    trace_dir = os.path.join(a.out, "traces") if a.trace else None
    if trace_dir:
        os.makedirs(trace_dir, exist_ok=True)
    for r in range(a.runs):
        seed = a.seed + r
        res = ex.run_scenario(sc, seed, run_index=r, trace=True if a.trace else None,
                              validate=validate)
        records.append(res.metrics)
        if trace_dir and res.records is not None:
            with open(os.path.join(trace_dir, f"run-{seed}.tsv"), "w") as fh:
                write_trace(res.records, fh)
        if res.report is not None and not res.report.ok:
            bad += 1
            for v in res.report.violations[:5]:
                print(f"violation seed={seed} {v.check} node={v.node} msg={v.msg}: {v.detail}",
                      file=out)
    agg = ex.aggregate(records)
    manifest = _manifest(sc.control)
    ex.write_outputs(a.out, records, [agg], manifest)
    _print_rows([ex.summary_row(agg)], out)
    _print_manifest(manifest, out)
    print(f"wrote {a.out}", file=out)
    return 1 if bad else 0


def cmd_validate(a: argparse.Namespace, out) -> int:
    with open(a.trace) as fh:
        records = read_trace(fh)
    checks = oracle.CHECKS if a.checks is None else tuple(a.checks.split(","))
    try:
        rep = oracle.validate(records, a.nodes, checks=checks)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    body = rep.as_dict()
    if a.report:
        with open(a.report, "w") as fh:
            json.dump(body, fh, indent=1)
    counts = body["violations_by_check"]
    print(json.dumps({"ok": rep.ok, "violations_by_check": counts,
                      "stalls": len(rep.stalls)}), file=out)
    for v in rep.violations[:20]:
        print(f"{v.check} run={v.run_id} node={v.node} msg={v.msg}: {v.detail}", file=out)
    return 0 if rep.ok else 1


def cmd_sweep(a: argparse.Namespace, out) -> int:
    if a.preset not in ex.PRESETS:
        print(f"error: unknown preset {a.preset!r}; see `presets`", file=sys.stderr)
        return 2
    preset = ex.PRESETS[a.preset]

    def progress(sc, agg):
        if not a.quiet:
            row = ex.summary_row(agg)
            print(f"  done {row['scenario']} {row['system']} N={row['n_nodes']} "
                  f"param={row['parameter']} latency={row['mean_latency']:.1f}", file=out)

    aggs = ex.run_preset(a.preset, seed=a.seed, runs=a.runs, progress=progress)
    records = [r for agg in aggs for r in agg["records"]]
    controls = {sc.control for sc in preset.scenarios}
    manifest = _manifest(controls.pop() if len(controls) == 1 else "mixed")
    manifest["preset"] = f"{a.preset}: {preset.description}"
    ex.write_outputs(a.out, records, aggs, manifest)
    _print_rows([ex.summary_row(agg) for agg in aggs], out)
    _print_manifest(manifest, out)
    print(f"wrote {a.out}", file=out)
    return 1 if any(r.violations for r in records) else 0


def cmd_presets(a: argparse.Namespace, out) -> int:
    for name, p in ex.PRESETS.items():
        print(f"{name:16s} {len(p.scenarios):3d} scenarios x {p.runs:2d} runs  {p.description}",
              file=out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vcubeps", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario for several seeds")
    run.add_argument("--scenario", required=True, choices=ex.SCENARIOS)
    run.add_argument("--nodes", type=int, required=True, help="N, a power of two")
    run.add_argument("--system", default="vcube", choices=ex.SYSTEMS)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--runs", type=int, default=1)
    run.add_argument("--out", required=True)
    run.add_argument("--subscriber-pct", type=float)
    run.add_argument("--publisher-pct", type=float)
    run.add_argument("--topics", type=int)
    run.add_argument("--messages", type=int, help="message limit (multi_topic, churn, broker_compare)")
    run.add_argument("--dist", choices=("zipf", "uniform"))
    run.add_argument("--churn-pct", type=float)
    run.add_argument("--churn-period", type=float)
    run.add_argument("--brokers", type=int)
    run.add_argument("--ratio", type=int, choices=(100, 1000))
    run.add_argument("--wait-p", type=int)
    run.add_argument("--control", choices=("bypass", "shared"))
    run.add_argument("--literal", action="store_true",
                     help="run VCube-PS nodes without the protocol repairs")
    run.add_argument("--trace", action="store_true", help="write per-run traces under OUT/traces")
    g = run.add_mutually_exclusive_group()
    g.add_argument("--validate", action="store_true", help="force oracle validation")
    g.add_argument("--no-validate", action="store_true")
    run.set_defaults(fn=cmd_run)

    val = sub.add_parser("validate", help="replay a trace file through the oracle")
    val.add_argument("--trace", required=True)
    val.add_argument("--nodes", type=int, help="override N from the trace config")
    val.add_argument("--checks", help=f"comma list out of {','.join(oracle.CHECKS)}")
    val.add_argument("--report", help="write the full JSON report here")
    val.set_defaults(fn=cmd_validate)

    sw = sub.add_parser("sweep", help="run a named preset")
    sw.add_argument("--preset", required=True)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--runs", type=int, help="override the preset's run count")
    sw.add_argument("--out", default="results")
    sw.add_argument("--quiet", action="store_true")
    sw.set_defaults(fn=cmd_sweep)

    ls = sub.add_parser("presets", help="list named presets")
    ls.set_defaults(fn=cmd_presets)
    return ap


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = sys.stdout if out is None else out
    a = build_parser().parse_args(argv)
    return a.fn(a, out)


if __name__ == "__main__":
    sys.exit(main())
