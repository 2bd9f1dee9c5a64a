"""``smrlab`` command line: run, check, compare, explore, replay.

Exit codes: 0 success; 1 an invariant violation, a rejected mapping, an
incomplete exploration or a replay mismatch; 2 unusable input (bad config,
malformed trace).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ScenarioConfig, load_config
from .engines import run_scenario
from .explore import ExploreBounds, explore
from .kernel import ConfigError, MalformedTrace, read_trace, write_trace
from .metrics import compute_metrics
from .refinement import accepted, check_refinement, default_chain, parse_chain, TraceContext

log = logging.getLogger("smrlab")

OK, FAILED, BAD_INPUT = 0, 1, 2


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def _write_json(path, obj) -> None:
    Path(path).write_text(_dump(obj) + "\n", encoding="utf-8")


# -- run ---------------------------------------------------------------------------
def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    result = run_scenario(cfg)
    write_trace(result.trace, args.trace)
    metrics = compute_metrics(result.trace)
    _write_json(args.metrics, metrics)
    print(f"protocol={cfg.protocol} seed={cfg.seed} events={len(result.trace)} decided={result.decided} "
          f"completed={result.completed} end_time={result.end_time}")
    print(f"msgs/cmd={metrics['msgs_per_cmd']} latency={metrics['latency'].get('mean')} "
          f"recoveries={metrics['recoveries']}")
    print(f"trace -> {args.trace}  metrics -> {args.metrics}")
    if result.violations:
        for v in result.violations:
            print(f"VIOLATION {v}")
        return FAILED
    return OK


# -- check -------------------------------------------------------------------------
def cmd_check(args) -> int:
    events = read_trace(args.trace)
    chain = parse_chain(args.chain) if args.chain else default_chain(TraceContext.from_events(events))
    verdicts = check_refinement(events, chain)
    for v in verdicts:
        if v.skipped:
            status = "SKIPPED"
        else:
            status = "ACCEPTED" if v.accepted else "REJECTED"
        line = f"{v.edge:22s} {status:8s} steps={v.steps} stutters={v.stutters}"
        if v.failure is not None:
            line += f" seq={v.failure.seq} reason={v.failure.reason}"
        print(line)
    if args.report:
        _write_json(args.report, [v.to_dict() for v in verdicts])
    return OK if accepted(verdicts) else FAILED


# -- compare -------------------------------------------------------------------------
COLUMNS = ("variant", "protocol", "completed", "decided", "msgs/cmd", "latency", "resp_latency", "recoveries",
           "view_changes", "in_order", "chain_breaks", "safe")


def load_matrix(path) -> tuple[dict, list[str], dict[str, dict], int]:
    """A matrix file has ``base`` (a config), ``axes`` (keys variants may
    change) and ``variants`` (name -> overrides); optional ``seeds``."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict) or set(raw) - {"base", "axes", "variants", "seeds"}:
        raise ConfigError("matrix", "expected keys base, axes, variants, seeds")
    base = dict(raw.get("base") or {})
    axes = list(raw.get("axes") or [])
    variants = dict(raw.get("variants") or {})
    if not variants:
        raise ConfigError("variants", "at least one variant is required")
    for name, over in variants.items():
        extra = set(over or {}) - set(axes)
        if extra:
            raise ConfigError("variants", f"variant {name!r} changes {sorted(extra)} outside the declared axes {axes}")
    return base, axes, variants, int(raw.get("seeds", 1))


def compare_rows(base: dict, variants: dict[str, dict], seeds: int = 1) -> list[dict]:
    rows = []
    for name, over in variants.items():
        raw = dict(base)
        raw.update(over or {})
        cfg = ScenarioConfig.from_dict(raw)
        agg: dict = {"completed": 0, "decided": 0, "msgs": [], "lat": [], "resp": [], "recoveries": 0,
                     "view_changes": 0, "in_order": 0, "chain_breaks": 0, "safe": True}
        for k in range(seeds):
            result = run_scenario(cfg.replace(seed=cfg.seed + k))
            m = compute_metrics(result.trace)
            agg["completed"] += result.completed
            agg["decided"] += result.decided
            agg["recoveries"] += m["recoveries"]
            agg["view_changes"] += m["view_changes"]
            agg["safe"] &= result.safe
            agg["in_order"] += m["decided_in_order"]
            agg["chain_breaks"] += len(m["chain_breaks"])
            if m["msgs_per_cmd"] is not None:
                agg["msgs"].append(m["msgs_per_cmd"])
            if m["latency"]["count"]:
                agg["lat"].append(m["latency"]["mean"])
            if m["response_latency"]["count"]:
                agg["resp"].append(m["response_latency"]["mean"])

        def mean(xs):
            return round(sum(xs) / len(xs), 3) if xs else None

        rows.append({
            "variant": name,
            "protocol": cfg.protocol,
            "completed": f"{agg['completed']}/{seeds}",
            "decided": agg["decided"],
            "msgs/cmd": mean(agg["msgs"]),
            "latency": mean(agg["lat"]),
            "resp_latency": mean(agg["resp"]),
            "recoveries": agg["recoveries"],
            "view_changes": agg["view_changes"],
            "in_order": f"{agg['in_order']}/{seeds}",
            "chain_breaks": agg["chain_breaks"],
            "safe": agg["safe"],
        })
    return rows


def format_table(rows: list[dict]) -> str:
    cells = [list(COLUMNS)] + [[str(r[c]) for c in COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells)


def cmd_compare(args) -> int:
    base, _axes, variants, seeds = load_matrix(args.matrix)
    rows = compare_rows(base, variants, args.seeds or seeds)
    print(format_table(rows))
    if args.output:
        _write_json(args.output, rows)
    return OK if all(r["safe"] for r in rows) else FAILED


# -- explore -------------------------------------------------------------------------
def cmd_explore(args) -> int:
    raw = yaml.safe_load(Path(args.bounds).read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigError("bounds", "top level must be a mapping")
    try:
        bounds = ExploreBounds(**raw)
    except TypeError as exc:
        raise ConfigError("bounds", str(exc)) from None
    except ValueError as exc:
        raise ConfigError("bounds", str(exc)) from None
    report = explore(bounds)
    summary = report.summary()
    print(_dump(summary))
    if args.output:
        _write_json(args.output, summary)
    if report.goal_reached:
        print(f"GOAL {bounds.goal} reached after {report.states} states", file=sys.stderr)
    if not report.complete and not (bounds.stop_at_goal and report.goal_reached):
        print(f"INCOMPLETE: state cap {bounds.max_states} reached", file=sys.stderr)
        return FAILED
    return OK if report.safe else FAILED


# -- replay --------------------------------------------------------------------------
def cmd_replay(args) -> int:
    events = read_trace(args.trace)
    ctx = TraceContext.from_events(events)
    cfg = ScenarioConfig.from_dict(ctx.raw_config)
    fresh = [ev.to_json() for ev in run_scenario(cfg).trace]
    with open(args.trace, encoding="utf-8") as fh:
        old = [line.rstrip("\n") for line in fh if line.strip()]
    if fresh == old:
        print(f"identical: {len(old)} records")
        return OK
    for i, (a, b) in enumerate(zip(old, fresh), 1):
        if a != b:
            print(f"MISMATCH at line {i}\n  recorded: {a}\n  replayed: {b}")
            break
    else:
        print(f"MISMATCH: recorded {len(old)} records, replayed {len(fresh)}")
    return FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smrlab", description="Deterministic replication-protocol lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario, write trace and metrics")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--trace", default="trace.jsonl")
    run.add_argument("--metrics", default="metrics.json")
    run.set_defaults(fn=cmd_run)

    chk = sub.add_parser("check", help="check a trace against a refinement chain")
    chk.add_argument("trace")
    chk.add_argument("--chain", help='e.g. "engine->mcpo->passive->active->linearizable"')
    chk.add_argument("--report")
    chk.set_defaults(fn=cmd_check)

    cmp_ = sub.add_parser("compare", help="run a config matrix and tabulate metrics")
    cmp_.add_argument("matrix")
    cmp_.add_argument("--seeds", type=int)
    cmp_.add_argument("--output")
    cmp_.set_defaults(fn=cmd_compare)

    exp = sub.add_parser("explore", help="exhaustively explore MultiConsensus within bounds")
    exp.add_argument("bounds")
    exp.add_argument("--output")
    exp.set_defaults(fn=cmd_explore)

    rep = sub.add_parser("replay", help="re-run a trace's embedded config and compare bytes")
    rep.add_argument("trace")
    rep.set_defaults(fn=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error in field '{exc.field}': {exc}", file=sys.stderr)
        return BAD_INPUT
    except MalformedTrace as exc:
        print(f"malformed trace: {exc}", file=sys.stderr)
        return BAD_INPUT
    except (ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return BAD_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
