"""Command line: recover-kit run|matrix|verify|cost|report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

log = logging.getLogger("recover_kit")


def _write(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")
        log.info("wrote %s", path)


def cmd_run(args) -> int:
    from recover_kit.orchestrator import make_config, run
    from recover_kit.planner import EndpointConfig
    from recover_kit.worldsim import InfeasibleError

    try:
        cfg = make_config(
            args.task,
            args.failure,
            args.at_step,
            verifier=args.verifier,
            planner=args.planner,
            seed=args.seed,
            nested=args.nested,
            replay_dir=args.replay_dir,
            baseline_mode=args.baseline_mode,
            endpoint=EndpointConfig(base_url=args.endpoint or ""),
        )
    except InfeasibleError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    rec = run(cfg)
    if args.out:
        _write(args.out, rec.to_json())
    print(f"{rec.task} {rec.injection or '-'} {rec.outcome} steps={rec.steps_executed} "
          f"planner_calls={rec.replan_calls} cost={rec.cost:.4f}")
    for f in rec.findings:
        print(f"  finding: {f}")
    if rec.error:
        print(f"  error: {rec.error}")
    return 0


def cmd_matrix(args) -> int:
    from recover_kit.harness import load_suite, run_matrix

    suite = load_suite(args.config)
    if args.workers:
        suite = replace(suite, workers=args.workers)
    report = run_matrix(suite, keep_records=bool(args.records))
    _write(args.out, report.to_csv())
    if args.grid:
        _write(args.grid, report.grid() + "\n".join(report.aggregate_lines()) + "\n")
    if args.records:
        lines = [json.dumps({"task": t, "failure": f, **r.to_dict()}, sort_keys=True) for (t, f), r in sorted(report.records.items(), key=lambda kv: (int(kv[0][0][1:]), kv[0][1]))]
        _write(args.records, "\n".join(lines) + "\n")
    for line in report.aggregate_lines():
        log.info(line)
    return 0


def cmd_verify(args) -> int:
    from recover_kit.kb import load_snapshot
    from recover_kit.reasoner import evaluate, evaluate_bruteforce
    from recover_kit.ruledsl import RuleError, load_rules, validate_corpus
    from recover_kit.worldsim import schema

    try:
        rules = load_rules(args.rules)
    except (RuleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.snapshot is None:
        report = validate_corpus(rules, schema(), strict=False)
        print("\n".join(report.lines()))
        return 0 if report.ok else 1
    if args.event is None:
        print("error: --event is required with --snapshot", file=sys.stderr)
        return 2
    kb = load_snapshot(args.snapshot, schema())
    verdict = (evaluate_bruteforce if args.bruteforce else evaluate)(kb, rules, args.event)
    sys.stdout.write(verdict.format())
    return 0


def cmd_cost(args) -> int:
    from recover_kit.harness import load_suite, run_cost

    report = run_cost(load_suite(args.config))
    _write(args.out, report.to_csv())
    if args.text:
        _write(args.text, "\n".join(report.lines()) + "\n")
    return 0


def cmd_report(args) -> int:
    from recover_kit.harness import aggregate_lines, grid_text, read_matrix_csv

    cells = read_matrix_csv(Path(args.matrix).read_text(encoding="utf-8"))
    _write(args.out, grid_text(cells) + "\n".join(aggregate_lines(cells)) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recover-kit", description="Ontology-rule failure detection and recovery runs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one task, optionally with an injected failure")
    r.add_argument("--task", required=True, help="task id (T1..T12) or task file")
    r.add_argument("--failure", type=int, help="failure type 1..12")
    r.add_argument("--at-step", type=int, help="plan index for the injection (default: first eligible)")
    r.add_argument("--verifier", default="rules", choices=["rules", "synthetic", "replay", "external"])
    r.add_argument("--planner", default="template", choices=["template", "external", "replay"])
    r.add_argument("--baseline-mode", default="oracle", choices=["oracle", "never", "always"])
    r.add_argument("--replay-dir")
    r.add_argument("--endpoint", help="text-completion endpoint URL for the external planner")
    r.add_argument("--nested", action="store_true", help="allow replanning during recovery")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="write the run record as JSON")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("matrix", help="run every task x failure cell")
    m.add_argument("--config", help="suite YAML (default: shipped suite)")
    m.add_argument("--out", help="CSV path (default: stdout)")
    m.add_argument("--grid", help="also write the text grid and aggregates")
    m.add_argument("--records", help="also write run records as JSON lines")
    m.add_argument("--workers", type=int)
    m.set_defaults(func=cmd_matrix)

    v = sub.add_parser("verify", help="lint the rule corpus, or evaluate it on a kb snapshot")
    v.add_argument("--rules", help="rule file (default: shipped corpus)")
    v.add_argument("--snapshot", help="kb snapshot in N-Triples-like form")
    v.add_argument("--event", help="action event to scope evaluation to")
    v.add_argument("--bruteforce", action="store_true", help="use the reference evaluator")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("cost", help="recover vs per-step baseline cost")
    c.add_argument("--config")
    c.add_argument("--out", help="CSV path (default: stdout)")
    c.add_argument("--text", help="also write a text table")
    c.set_defaults(func=cmd_cost)

    rp = sub.add_parser("report", help="text grid and aggregates from a matrix CSV")
    rp.add_argument("--matrix", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
