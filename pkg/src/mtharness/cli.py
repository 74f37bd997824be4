"""Command-line entry point.

Exit statuses are uniform across commands: 0 clean, 1 findings
(violations, flagged drift, diagnostics), 2 setup or usage failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .adapters import DEFAULT_EMBED_PATH, Embedder, ResponseCache, SutError, query
from .config import (
    CliConfig,
    config_hash,
    load_config,
    load_relations,
    load_suite,
    sut_from_dict,
)
from .core import (
    Aggregation,
    Annotation,
    MetamorphicRelation,
    MTError,
    SourceInput,
    TaskKind,
    jsonl_line,
)
from .engine import RunPlan, derive, drift_diff, render_prompt, run_plan
from .mrspec import MrSpecDoc, MrSpecSyntaxError, parse_bytes, validate
from .relations import ComparatorSpec, Equivalence
from .reporting import (
    RunStore,
    StorageError,
    TriageRecord,
    UnknownRunError,
    annotate,
    format_rate,
    persist_run,
    render_drift,
    render_junit,
    render_table,
    tp_rate,
)
from .transforms import TransformStep

log = logging.getLogger("mtharness")

EXIT_OK, EXIT_FINDINGS, EXIT_SETUP = 0, 1, 2


def _color(text: str, code: str) -> str:
    if os.environ.get("NO_COLOR") or not sys.stdout.isatty():
        return text
    return f"\x1b[{code}m{text}\x1b[0m"


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_SETUP


# -- validate -------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        data = Path(args.path).read_bytes()
    except OSError as exc:
        return _fail(f"cannot read {args.path}: {exc.strerror or exc}")
    try:
        diagnostics = validate(parse_bytes(data))
    except MrSpecSyntaxError as exc:
        diagnostics = exc.diagnostics
    for d in diagnostics:
        print(f"{args.path}:{d}")
    return EXIT_FINDINGS if any(d.severity == "error" for d in diagnostics) else EXIT_OK


# -- gen / run ------------------------------------------------------------------


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "suite": getattr(args, "suite", None),
        "mrs": getattr(args, "mrs", None),
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        "offline": True if getattr(args, "offline", False) else None,
        "cache_dir": getattr(args, "cache_dir", None),
        "store_dir": getattr(args, "store", None),
        "formats": getattr(args, "format", None),
    }


def _plan(cfg: CliConfig) -> tuple[RunPlan, list[SourceInput], object]:
    if cfg.suite_path is None:
        raise MTError("no suite configured")
    suite = load_suite(cfg.suite_path)
    doc = load_relations(cfg.mrs_path)
    sut = sut_from_dict(cfg.sut)
    plan = RunPlan(suite, doc.relations, sut, cfg.seed, cfg.workers, cfg.offline)
    return plan, suite, doc


def cmd_gen(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config, _overrides(args))
        plan, _, _ = _plan(cfg)
        generated = derive(plan)
    except MTError as exc:
        return _fail(str(exc))
    for pair in generated.pairs:
        sys.stdout.write(jsonl_line(pair.to_dict()))
    for s in generated.skipped:
        print(f"skipped {s.mr_id} on {s.input_id or '*'}: {s.note}", file=sys.stderr)
    return EXIT_OK


def _preflight(plan: RunPlan, cache: ResponseCache | None) -> None:
    """One real query so an unreachable SUT fails the run up front."""
    generated = derive(plan)
    if not generated.pairs:
        return
    query(plan.sut, render_prompt(generated.pairs[0].source), 0, cache=cache, offline=plan.offline)


def _emit(result_report, verdicts, pairs, formats: Sequence[str], junit_out: str | None) -> None:
    if "table" in formats:
        sys.stdout.write(render_table(result_report))
    if "json" in formats:
        sys.stdout.write(result_report.canonical_json())
    if "junit" in formats or junit_out:
        xml = render_junit(result_report, verdicts, pairs)
        if junit_out:
            Path(junit_out).write_text(xml, encoding="utf-8")
        else:
            sys.stdout.write(xml)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config, _overrides(args))
        plan, suite, doc = _plan(cfg)
        cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir else None
        embedder = None
        if cfg.embedding:
            emb = dict(cfg.embedding)
            path = emb.pop("path", DEFAULT_EMBED_PATH)
            embedder = Embedder(sut_from_dict({"kind": "http-chat", **emb}), cache, cfg.offline, path)
        _preflight(plan, cache)
    except SutError as exc:
        return _fail(f"system under test unavailable: {exc}")
    except MrSpecSyntaxError as exc:
        return _fail(f"invalid relation file:\n{exc}")
    except MTError as exc:
        return _fail(str(exc))
    store = RunStore(cfg.store_dir)
    result = run_plan(plan, cache=cache, embedder=embedder, config_hash=config_hash(cfg, suite, doc))
    try:
        run_id = persist_run(
            store,
            result.report,
            result.verdicts,
            result.pairs,
            config=cfg.resolved(),
            runlog=result.log_jsonl(),
        )
    except StorageError as exc:
        return _fail(str(exc))
    report = store.load(run_id).report
    _emit(report, result.verdicts, result.pairs, cfg.formats, args.junit_out)
    return EXIT_FINDINGS if report.total_violations else EXIT_OK


# -- report / diff / annotate ---------------------------------------------------------


def cmd_report(args: argparse.Namespace) -> int:
    store = RunStore(args.store)
    try:
        run = store.load(args.run_id)
    except UnknownRunError as exc:
        return _fail(str(exc))
    fmt = args.format or "table"
    if fmt == "junit":
        sys.stdout.write(render_junit(run.report, run.verdicts, run.pairs))
    elif fmt == "json":
        sys.stdout.write(run.report.canonical_json())
    else:
        sys.stdout.write(render_table(run.report, triage=True, tp=tp_rate(run.verdicts)))
    return EXIT_OK


def cmd_diff(args: argparse.Namespace) -> int:
    store = RunStore(args.store)
    try:
        before = store.load(args.run_a).report
        after = store.load(args.run_b).report
    except UnknownRunError as exc:
        return _fail(str(exc))
    if before.config_hash != after.config_hash:
        if not args.force:
            return _fail(
                "runs have different configurations "
                f"({before.config_hash[:12]} vs {after.config_hash[:12]}); use --force to compare anyway"
            )
        print("warning: comparing runs with different configurations", file=sys.stderr)
    result = drift_diff(before, after, args.epsilon)
    text = render_drift(result)
    sys.stdout.write(text.replace("FLAGGED", _color("FLAGGED", "31")))
    return EXIT_FINDINGS if result.flagged else EXIT_OK


def cmd_annotate(args: argparse.Namespace) -> int:
    store = RunStore(args.store)
    label = Annotation.TRUE_POSITIVE if args.true_positive else Annotation.FALSE_POSITIVE
    try:
        annotate(store, TriageRecord(args.run_id, args.pair_id, label, args.note, args.annotator))
        rate = tp_rate(store.load(args.run_id).verdicts)
    except (UnknownRunError, StorageError) as exc:
        return _fail(str(exc))
    print(f"recorded {label.value} for {args.pair_id}; true-positive rate {format_rate(rate)}")
    return EXIT_OK


# -- demo -------------------------------------------------------------------------------


def demo_suite() -> list[SourceInput]:
    return [SourceInput(f"n{x:+03d}", TaskKind.NUMERIC_DEMO, str(x)) for x in range(-12, 13)]


def demo_relation() -> MetamorphicRelation:
    return MetamorphicRelation(
        id="negate-square",
        transform_pipeline=(TransformStep("negate-numeric"),),
        output_relation=Equivalence(),
        comparator=ComparatorSpec("exact", 1.0, 0.0),
        applies_to=frozenset({TaskKind.NUMERIC_DEMO}),
        aggregation=Aggregation.ANY_VIOLATION,
    )


def cmd_demo(args: argparse.Namespace) -> int:
    cfg = CliConfig(
        sut={"kind": "builtin-function", "endpoint": "square-mutant" if args.mutant else "square"},
        seed=args.seed,
    )
    suite, doc = demo_suite(), MrSpecDoc((demo_relation(),))
    plan = RunPlan(suite, doc.relations, sut_from_dict(cfg.sut), derivation_seed=cfg.seed)
    result = run_plan(plan, config_hash=config_hash(cfg, suite, doc))
    report = result.report
    if args.store:
        run_id = persist_run(RunStore(args.store), report, result.verdicts, result.pairs)
        report = RunStore(args.store).load(run_id).report
    _emit(report, result.verdicts, result.pairs, args.format or ("table",), None)
    return EXIT_FINDINGS if report.total_violations else EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtharness", description="Metamorphic testing harness.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a .mrs relation file")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)

    def run_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("-c", "--config", help="TOML config file")
        p.add_argument("--suite", help="suite JSONL (overrides config)")
        p.add_argument("--mrs", help=".mrs relation file (overrides config)")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--offline", action="store_true", help="replay from cache only")
        p.add_argument("--cache-dir")

    p = sub.add_parser("gen", help="emit test pairs as JSONL without executing")
    run_options(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="execute a suite and persist the run")
    run_options(p)
    p.add_argument("--store", help="run store directory")
    p.add_argument("--format", type=lambda s: s.split(","), help="table,json,junit")
    p.add_argument("--junit-out", help="write JUnit XML to this file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-render a stored run")
    p.add_argument("run_id")
    p.add_argument("--store", default="runs")
    p.add_argument("--format", choices=("table", "json", "junit"))
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("diff", help="compare failure rates of two stored runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--store", default="runs")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--force", action="store_true", help="compare runs with different configs")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("annotate", help="record triage for a violation")
    p.add_argument("run_id")
    p.add_argument("pair_id")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--true-positive", "--tp", action="store_true")
    group.add_argument("--false-positive", "--fp", action="store_true")
    p.add_argument("--note", default="")
    p.add_argument("--annotator", default=os.environ.get("USER", ""))
    p.add_argument("--store", default="runs")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("demo", help="squaring relation on the builtin square function")
    p.add_argument("--mutant", action="store_true", help="use x*|x| instead of x*x")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--store", help="also persist the run here")
    p.add_argument("--format", type=lambda s: s.split(","))
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_SETUP if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
