"""Command line interface: run one scenario, sweep a grid, dump traces."""

from __future__ import annotations

import argparse
import json
import sys

from .harness import run_scenario
from .metrics import emit_report
from .scenario import (Scenario, ScenarioError, load_scenario,
                       scenario_from_dict, scenario_to_dict)
from .workload import WorkloadError


def _base_scenario(args) -> Scenario:
    if args.config:
        sc = load_scenario(args.config)
    else:
        sc = scenario_from_dict({})
    d = scenario_to_dict(sc)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        d["mode"] = args.mode
    return scenario_from_dict(d)


def _print_summary(result) -> None:
    rep = result.report
    print(f"{rep.mode} seed={rep.seed} hash={rep.config_hash}: "
          f"{rep.completed}/{rep.submitted} replied "
          f"({rep.success} ok, {rep.failure} failed), "
          f"tput {rep.gross_tput_tps:.1f} tx/s, "
          f"mean latency {rep.mean_latency_ms:.1f} ms, "
          f"aborts {rep.aborts}, deadlocks {rep.deadlocks}")


def cmd_run(args) -> int:
    sc = _base_scenario(args)
    result = run_scenario(sc)
    if args.out:
        emit_report(result.report, args.out)
    _print_summary(result)
    if not result.completed:
        print("run hit its time cap before all work finished", file=sys.stderr)
        return 2
    return 0


def _parse_grid(text: str, cast):
    try:
        return [cast(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ScenarioError(f"bad grid value in {text!r}")


def cmd_sweep(args) -> int:
    base = _base_scenario(args)
    ratios = _parse_grid(args.ratios, float) if args.ratios else [base.workload.cross_instance_ratio]
    factors = _parse_grid(args.factors, float) if args.factors else [1.0]
    ns = _parse_grid(args.ns, int) if args.ns else [base.n]
    rc = 0
    for n in ns:
        for ratio in ratios:
            for factor in factors:
                d = scenario_to_dict(base)
                d["n"] = n
                d["m"] = n
                d["workload"]["cross_instance_ratio"] = ratio
                d["faults"] = [f for f in d["faults"] if f["kind"] != "straggler"]
                if factor > 1.0:
                    d["faults"].append({"kind": "straggler", "target": "r1",
                                        "at_ms": 0.0, "factor": factor})
                d["name"] = f"{base.name}-n{n}-x{ratio}-s{factor}"
                sc = scenario_from_dict(d)
                result = run_scenario(sc)
                if args.out:
                    emit_report(result.report, args.out)
                _print_summary(result)
                if not result.completed:
                    rc = 2
    return rc


def cmd_replay_trace(args) -> int:
    sc = _base_scenario(args)
    d = scenario_to_dict(sc)
    d["trace"] = True
    result = run_scenario(scenario_from_dict(d))
    out = open(args.trace_out, "w") if args.trace_out else sys.stdout
    try:
        for rec in result.sim.trace:
            if rec[1] == "deliver":
                t, event, src, dst, kind, size = rec
                row = {"t_ms": t, "event": event, "src": src, "dst": dst,
                       "kind": kind, "bytes": size}
            else:
                t, event, name = rec
                row = {"t_ms": t, "event": event, "timer": name}
            out.write(json.dumps(row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    _print_summary(result)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multibft",
                                description="simulate parallel-instance BFT runs")
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario")
    run_p.add_argument("--config", help="scenario YAML path (defaults apply without it)")
    run_p.add_argument("--seed", type=int, help="override the scenario seed")
    run_p.add_argument("--mode", choices=("hydra", "iss"), help="override the mode")
    run_p.add_argument("--out", help="directory for summary/timeseries CSVs")
    run_p.set_defaults(fn=cmd_run)

    sweep_p = sub.add_parser("sweep", help="grid over ratio/straggler/n")
    sweep_p.add_argument("--config", help="base scenario YAML path")
    sweep_p.add_argument("--seed", type=int, help="override the scenario seed")
    sweep_p.add_argument("--mode", choices=("hydra", "iss"), help="override the mode")
    sweep_p.add_argument("--out", help="directory for summary/timeseries CSVs")
    sweep_p.add_argument("--ratios", help="comma list of cross-instance ratios")
    sweep_p.add_argument("--factors", help="comma list of straggler factors (1 = none)")
    sweep_p.add_argument("--ns", help="comma list of cluster sizes (m follows n)")
    sweep_p.set_defaults(fn=cmd_sweep)

    tr_p = sub.add_parser("replay-trace", help="run with tracing and dump events")
    tr_p.add_argument("--config", help="scenario YAML path")
    tr_p.add_argument("--seed", type=int, help="override the scenario seed")
    tr_p.add_argument("--mode", choices=("hydra", "iss"), help="override the mode")
    tr_p.add_argument("--trace-out", help="write JSON lines here instead of stdout")
    tr_p.set_defaults(fn=cmd_replay_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ScenarioError, WorkloadError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
