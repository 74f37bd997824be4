"""Run orchestration: derive follow-ups, execute both sides, decide verdicts, diff runs."""

from __future__ import annotations

import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from typing import Any, Callable, Sequence

from .adapters import Embedder, Execution, ResponseCache, SutError, SutSpec, query
from .core import (
    Aggregation,
    ConfigurationError,
    InconclusiveReason,
    MetamorphicRelation,
    Outcome,
    RunReport,
    SourceInput,
    TaskKind,
    TestPair,
    Verdict,
    aggregate_report,
    check_unique_ids,
    jsonl_line,
)
from .relations import evaluate, relation_problems
from .transforms import apply_pipeline, provenance_for

log = logging.getLogger(__name__)

# tasks whose default prompt is not the bare text
DEFAULT_TEMPLATES = {TaskKind.RELATION_EXTRACTION: "relation"}


@dataclass(frozen=True)
class RunPlan:
    suite: Sequence[SourceInput]
    mrs: Sequence[MetamorphicRelation]
    sut: SutSpec
    derivation_seed: int = 0
    worker_budget: int = 1
    offline: bool = False

    def __post_init__(self) -> None:
        if self.worker_budget < 1:
            raise ConfigurationError("worker budget must be at least 1")
        if not 0 <= self.derivation_seed < 2**64:
            raise ConfigurationError("derivation seed must be a 64-bit unsigned integer")
        check_unique_ids(self.suite)
        ids = [mr.id for mr in self.mrs]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate relation id in plan")
        for mr in self.mrs:
            problems = mr.problems() + relation_problems(mr.output_relation)
            problems += mr.comparator.problems()
            for step in mr.transform_pipeline:
                problems += step.problems()
            if problems:
                raise ConfigurationError(f"relation {mr.id!r}: {'; '.join(problems)}")


@dataclass(frozen=True)
class Skipped:
    """A (input, relation) combination that produced no test pair."""

    input_id: str | None
    mr_id: str
    note: str

    def to_dict(self) -> dict[str, Any]:
        return {"input_id": self.input_id, "mr_id": self.mr_id, "note": self.note}


@dataclass(frozen=True)
class PairSet:
    pairs: list[TestPair]
    skipped: list[Skipped] = field(default_factory=list)

    def skipped_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.skipped:
            counts[s.mr_id] = counts.get(s.mr_id, 0) + 1
        return counts


def pair_seed(derivation_seed: int, input_id: str, mr_id: str) -> int:
    """Keyed hash of (input id, MR id); unaffected by suite order or growth."""
    h = hashlib.blake2b(key=derivation_seed.to_bytes(8, "big"), digest_size=8)
    h.update(input_id.encode("utf-8") + b"\x00" + mr_id.encode("utf-8"))
    return int.from_bytes(h.digest(), "big")


def derive(plan: RunPlan) -> PairSet:
    """Build follow-ups for every applicable (input, MR) combination.

    Output order is input order, then MR order. Inapplicable transforms and
    MRs matching no task in the suite become :class:`Skipped` records.
    """
    pairs: list[TestPair] = []
    skipped: list[Skipped] = []
    tasks = {item.task for item in plan.suite}
    for mr in plan.mrs:
        if not any(mr.applies(t) for t in tasks):
            skipped.append(Skipped(None, mr.id, "relation applies to no task in the suite"))
    for item in plan.suite:
        for mr in plan.mrs:
            if not mr.applies(item.task):
                continue
            seed = pair_seed(plan.derivation_seed, item.id, mr.id)
            try:
                out = apply_pipeline(mr.transform_pipeline, item, seed)
            except ConfigurationError as exc:
                raise ConfigurationError(f"input {item.id!r}, relation {mr.id!r}: {exc}") from None
            if not out.applied:
                skipped.append(Skipped(item.id, mr.id, out.note))
                continue
            followup = SourceInput(
                id=f"{item.id}~{mr.id}",
                task=item.task,
                text=out.text,
                metadata=out.metadata if out.metadata is not None else dict(item.metadata),
                prompt_template_id=item.prompt_template_id,
            )
            pairs.append(
                TestPair(item, followup, mr.id, provenance_for(mr.transform_pipeline, seed), seed)
            )
    return PairSet(pairs, skipped)


def generate_pairs(plan: RunPlan) -> list[TestPair]:
    return derive(plan).pairs


# -- prompts ------------------------------------------------------------------------


class _Blank(dict):
    def __missing__(self, key: str) -> str:
        return ""


def load_template(template_id: str) -> str:
    if not re.fullmatch(r"[A-Za-z0-9_\-]+", template_id):
        raise ConfigurationError(f"invalid prompt template id {template_id!r}")
    path = resources.files("mtharness.data").joinpath("templates").joinpath(f"{template_id}.txt")
    try:
        return path.read_text("utf-8")
    except FileNotFoundError:
        raise ConfigurationError(f"unknown prompt template {template_id!r}") from None


def render_prompt(item: SourceInput) -> str:
    """Fill the input's template; placeholders: text, entity_a, entity_b."""
    template_id = item.prompt_template_id or DEFAULT_TEMPLATES.get(item.task, "plain")
    template = load_template(template_id)
    values = _Blank(text=item.text)
    data = item.text.encode("utf-8")
    for name, span in zip(("entity_a", "entity_b"), item.metadata.get("entities", ())):
        values[name] = data[span[0] : span[1]].decode("utf-8")
    return template.format_map(values).rstrip("\n")


# -- execution ----------------------------------------------------------------------


@dataclass(frozen=True)
class ExecRecord:
    """One SUT call, as written to the run log."""

    pair_id: str
    side: str
    repetition: int
    cache_hit: bool
    latency_ms: float
    output_digest: str | None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "side": self.side,
            "repetition": self.repetition,
            "cache_hit": self.cache_hit,
            "latency_ms": self.latency_ms,
            "output_digest": self.output_digest,
            "error": self.error,
        }


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def combine(repetition_verdicts: Sequence[Verdict], aggregation: Aggregation, pid: str) -> Verdict:
    """Fold per-repetition verdicts into one; inconclusive repetitions abstain."""
    if len(repetition_verdicts) == 1:
        v = repetition_verdicts[0]
        return Verdict(pid, v.outcome, v.score, v.detail, v.inconclusive_reason)
    decided = [v for v in repetition_verdicts if v.outcome is not Outcome.INCONCLUSIVE]
    scores = [v.score for v in repetition_verdicts if v.score is not None]
    score = sum(scores) / len(scores) if scores else None
    detail = "; ".join(f"rep {i}: {v.outcome.value} ({v.detail})" for i, v in enumerate(repetition_verdicts))
    if not decided:
        reason = repetition_verdicts[0].inconclusive_reason
        return Verdict(pid, Outcome.INCONCLUSIVE, score, detail, reason)
    violations = sum(v.outcome is Outcome.VIOLATION for v in decided)
    passes = len(decided) - violations
    if aggregation is Aggregation.ANY_VIOLATION:
        outcome = Outcome.VIOLATION if violations else Outcome.PASS
    elif aggregation is Aggregation.ALL:
        outcome = Outcome.VIOLATION if passes == 0 else Outcome.PASS
    elif violations == passes:
        # only reachable when abstentions leave an even number of decided reps
        return Verdict(pid, Outcome.INCONCLUSIVE, score, detail, InconclusiveReason.UNCERTAINTY_BAND)
    else:
        outcome = Outcome.VIOLATION if violations > passes else Outcome.PASS
    return Verdict(pid, outcome, score, detail)


QueryFn = Callable[..., Execution]


def execute(
    plan: RunPlan,
    pairs: Sequence[TestPair],
    *,
    cache: ResponseCache | None = None,
    embedder: Embedder | None = None,
    log_records: list[ExecRecord] | None = None,
    query_fn: QueryFn = query,
) -> list[Verdict]:
    """Run every pair ``repetitions`` times on both sides and decide verdicts.

    SUT calls run on up to ``plan.worker_budget`` threads. Results land in
    a slot table indexed by (pair, repetition), so the returned list and the
    run log follow pair order whatever the completion order.
    """
    mrs = {mr.id: mr for mr in plan.mrs}
    jobs = [(i, rep) for i, p in enumerate(pairs) for rep in range(mrs[p.mr_id].repetitions)]
    slots: dict[tuple[int, int], tuple[Verdict, list[ExecRecord]]] = {}

    def run_job(job: tuple[int, int]) -> None:
        i, rep = job
        pair = pairs[i]
        mr = mrs[pair.mr_id]
        records: list[ExecRecord] = []
        outputs: list[str] = []
        error: str | None = None
        for side, item in (("source", pair.source), ("followup", pair.followup)):
            try:
                ex = query_fn(
                    plan.sut,
                    render_prompt(item),
                    rep,
                    cache=cache,
                    offline=plan.offline,
                    perturbed=side == "followup",
                )
            except SutError as exc:
                records.append(ExecRecord(pair.id, side, rep, False, 0.0, None, str(exc)))
                error = f"{side}: {exc}"
                break
            records.append(ExecRecord(pair.id, side, rep, ex.cache_hit, ex.latency_ms, _digest(ex.output)))
            outputs.append(ex.output)
        if error is not None:
            verdict = Verdict(pair.id, Outcome.INCONCLUSIVE, detail=error, inconclusive_reason=InconclusiveReason.SUT_ERROR)
        else:
            verdict = evaluate(mr.output_relation, mr.comparator, outputs[0], outputs[1], pair_id=pair.id, embedder=embedder)
        slots[job] = (verdict, records)

    if plan.worker_budget == 1:
        for job in jobs:
            run_job(job)
    else:
        with ThreadPoolExecutor(max_workers=plan.worker_budget) as pool:
            list(pool.map(run_job, jobs))

    verdicts = []
    for i, pair in enumerate(pairs):
        mr = mrs[pair.mr_id]
        reps = [slots[(i, rep)] for rep in range(mr.repetitions)]
        if log_records is not None:
            for _, records in reps:
                log_records.extend(records)
        verdicts.append(combine([v for v, _ in reps], mr.aggregation, pair.id))
    return verdicts


@dataclass
class RunResult:
    pairs: list[TestPair]
    skipped: list[Skipped]
    verdicts: list[Verdict]
    report: RunReport
    log: list[ExecRecord]

    def log_jsonl(self) -> str:
        return "".join(jsonl_line(r.to_dict()) for r in self.log)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_plan(
    plan: RunPlan,
    *,
    cache: ResponseCache | None = None,
    embedder: Embedder | None = None,
    config_hash: str = "",
    run_id: str = "",
    clock: Callable[[], str] = utc_now,
) -> RunResult:
    started = clock()
    generated = derive(plan)
    records: list[ExecRecord] = []
    verdicts = execute(plan, generated.pairs, cache=cache, embedder=embedder, log_records=records)
    report = aggregate_report(
        verdicts,
        generated.pairs,
        plan.sut.model_id,
        run_id=run_id,
        config_hash=config_hash,
        started=started,
        finished=clock(),
        skipped=generated.skipped_counts(),
    )
    return RunResult(generated.pairs, generated.skipped, verdicts, report, records)


# -- drift --------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftDelta:
    mr_id: str
    rate_before: float
    rate_after: float
    delta: float
    flagged: bool


@dataclass(frozen=True)
class DriftResult:
    deltas: list[DriftDelta]
    added: list[str]
    removed: list[str]

    @property
    def flagged(self) -> list[DriftDelta]:
        return [d for d in self.deltas if d.flagged]


def drift_diff(before: RunReport, after: RunReport, epsilon: float) -> DriftResult:
    """Per-MR failure-rate change between two reports.

    Rates and deltas are compared at the report's 4-decimal precision, so
    a move of exactly ``epsilon`` is flagged.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    rb, ra = before.rates(), after.rates()
    deltas = []
    for mr_id in sorted(rb.keys() & ra.keys()):
        delta = round(ra[mr_id] - rb[mr_id], 4)
        deltas.append(DriftDelta(mr_id, rb[mr_id], ra[mr_id], delta, abs(delta) >= round(epsilon, 4)))
    return DriftResult(
        deltas,
        added=sorted(ra.keys() - rb.keys()),
        removed=sorted(rb.keys() - ra.keys()),
    )

