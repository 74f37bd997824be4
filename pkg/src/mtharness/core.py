"""Shared domain vocabulary: inputs, relations, pairs, verdicts and run reports.

Everything here is an immutable value. The accounting helpers
(:func:`failure_rate`, :func:`aggregate_report`) are pure: timestamps and
identifiers are injected by the caller, never read from a clock.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

if TYPE_CHECKING:
    from .relations import ComparatorSpec, RelationKind
    from .transforms import TransformStep


class MTError(Exception):
    """Base class for harness errors."""


class ConfigurationError(MTError):
    """Malformed configuration (bad parameters, bad spans, bad relation)."""


class ReportError(MTError):
    """A report could not be assembled from the given verdicts and pairs."""


class TaskKind(str, enum.Enum):
    SENTIMENT_ANALYSIS = "sentiment-analysis"
    QUESTION_ANSWERING = "question-answering"
    RELATION_EXTRACTION = "relation-extraction"
    SUMMARIZATION = "summarization"
    NUMERIC_DEMO = "numeric-demo"
    GENERIC = "generic"

    @classmethod
    def parse(cls, tag: str) -> "TaskKind":
        try:
            return cls(tag.replace("_", "-"))
        except ValueError:
            raise ConfigurationError(f"unknown task tag {tag!r}") from None


class Outcome(str, enum.Enum):
    PASS = "pass"
    VIOLATION = "violation"
    INCONCLUSIVE = "inconclusive"


class InconclusiveReason(str, enum.Enum):
    TRANSFORM_INAPPLICABLE = "transform-inapplicable"
    SUT_ERROR = "sut-error"
    UNCERTAINTY_BAND = "uncertainty-band"


class Annotation(str, enum.Enum):
    UNREVIEWED = "unreviewed"
    TRUE_POSITIVE = "true-positive"
    FALSE_POSITIVE = "false-positive"


class Aggregation(str, enum.Enum):
    ANY_VIOLATION = "any-violation"
    MAJORITY = "majority"
    ALL = "all"


Span = tuple[int, int]


def entity_spans(metadata: Mapping[str, Any]) -> list[Span]:
    """Return the ``entities`` byte spans stored in input metadata."""
    return [(int(s), int(e)) for s, e in metadata.get("entities", ())]


def check_spans(text: str, spans: Sequence[Span]) -> None:
    """Raise ConfigurationError unless spans are in-bounds, disjoint, on char boundaries."""
    data = text.encode("utf-8")
    for start, end in spans:
        if not 0 <= start < end <= len(data):
            raise ConfigurationError(f"entity span ({start}, {end}) out of bounds")
        for offset in (start, end):
            # UTF-8 continuation bytes are 0b10xxxxxx
            if offset < len(data) and data[offset] & 0xC0 == 0x80:
                raise ConfigurationError(
                    f"entity span ({start}, {end}) splits a UTF-8 character"
                )
    ordered = sorted(spans)
    for (_, end_a), (start_b, end_b) in zip(ordered, ordered[1:]):
        if start_b < end_a:
            raise ConfigurationError(f"entity spans overlap at ({start_b}, {end_b})")


@dataclass(frozen=True)
class SourceInput:
    id: str
    task: TaskKind
    text: str
    metadata: Mapping[str, Any] = field(default_factory=dict)
    prompt_template_id: str | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ConfigurationError(f"input {self.id!r}: text must be non-empty")
        if not isinstance(self.task, TaskKind):
            object.__setattr__(self, "task", TaskKind.parse(self.task))
        check_spans(self.text, entity_spans(self.metadata))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "task": self.task.value,
            "text": self.text,
            "metadata": _plain(self.metadata),
        }
        if self.prompt_template_id is not None:
            out["prompt_template_id"] = self.prompt_template_id
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SourceInput":
        return cls(
            id=str(d["id"]),
            task=TaskKind.parse(d["task"]),
            text=d["text"],
            metadata=d.get("metadata") or {},
            prompt_template_id=d.get("prompt_template_id"),
        )


def check_unique_ids(suite: Iterable[SourceInput]) -> None:
    seen: set[str] = set()
    for item in suite:
        if item.id in seen:
            raise ConfigurationError(f"duplicate input id {item.id!r} in suite")
        seen.add(item.id)


@dataclass(frozen=True)
class MetamorphicRelation:
    """An input transformation paired with the output relation it implies.

    ``transform_pipeline`` produces the follow-up input (the input side);
    ``output_relation`` and ``comparator`` decide whether the two outputs
    agree (the output side). ``applies_to`` is ``"any"`` or a frozenset of
    :class:`TaskKind`.
    """

    id: str
    transform_pipeline: tuple["TransformStep", ...]
    output_relation: "RelationKind"
    comparator: "ComparatorSpec"
    name: str = ""
    applies_to: frozenset[TaskKind] | str = "any"
    repetitions: int = 1
    aggregation: Aggregation = Aggregation.ANY_VIOLATION

    def __post_init__(self) -> None:
        if not self.name:
            object.__setattr__(self, "name", self.id)
        object.__setattr__(self, "transform_pipeline", tuple(self.transform_pipeline))

    def problems(self) -> list[str]:
        """Invariant violations, as human-readable messages (empty when valid)."""
        out = []
        if not self.transform_pipeline:
            out.append("transform pipeline must be non-empty")
        if not isinstance(self.repetitions, int) or self.repetitions < 1:
            out.append("repetitions must be a positive integer")
        elif self.aggregation is Aggregation.MAJORITY and self.repetitions % 2 == 0:
            out.append("aggregate majority requires an odd number of repetitions")
        return out

    def applies(self, task: TaskKind) -> bool:
        return self.applies_to == "any" or task in self.applies_to


@dataclass(frozen=True)
class ProvenanceStep:
    name: str
    params: Mapping[str, Any]
    seed: int

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "params": _plain(self.params), "seed": self.seed}


@dataclass(frozen=True)
class TestPair:
    __test__ = False  # not a pytest class

    source: SourceInput
    followup: SourceInput
    mr_id: str
    provenance: tuple[ProvenanceStep, ...]
    derivation_seed: int

    @property
    def id(self) -> str:
        return pair_id(self.source.id, self.mr_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pair_id": self.id,
            "mr_id": self.mr_id,
            "source": self.source.to_dict(),
            "followup": self.followup.to_dict(),
            "provenance": [p.to_dict() for p in self.provenance],
            "derivation_seed": self.derivation_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TestPair":
        return cls(
            source=SourceInput.from_dict(d["source"]),
            followup=SourceInput.from_dict(d["followup"]),
            mr_id=d["mr_id"],
            provenance=tuple(
                ProvenanceStep(p["name"], p["params"], p["seed"]) for p in d["provenance"]
            ),
            derivation_seed=d["derivation_seed"],
        )


def pair_id(input_id: str, mr_id: str) -> str:
    return f"{mr_id}::{input_id}"


@dataclass(frozen=True)
class Verdict:
    pair_id: str
    outcome: Outcome
    score: float | None = None
    detail: str = ""
    inconclusive_reason: InconclusiveReason | None = None
    annotation: Annotation = Annotation.UNREVIEWED

    def __post_init__(self) -> None:
        if (self.outcome is Outcome.INCONCLUSIVE) != (self.inconclusive_reason is not None):
            raise ValueError("inconclusive_reason must be set exactly when outcome is inconclusive")
        if self.annotation is not Annotation.UNREVIEWED and self.outcome is not Outcome.VIOLATION:
            raise ValueError("only violations can be annotated")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "outcome": self.outcome.value,
            "score": self.score,
            "detail": self.detail,
            "inconclusive_reason": self.inconclusive_reason.value
            if self.inconclusive_reason
            else None,
            "annotation": self.annotation.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Verdict":
        reason = d.get("inconclusive_reason")
        return cls(
            pair_id=d["pair_id"],
            outcome=Outcome(d["outcome"]),
            score=d.get("score"),
            detail=d.get("detail", ""),
            inconclusive_reason=InconclusiveReason(reason) if reason else None,
            annotation=Annotation(d.get("annotation", "unreviewed")),
        )


def failure_rate(violations: int, passes: int) -> float:
    """Violations over decided outcomes; 0.0 when nothing was decided."""
    if violations < 0 or passes < 0:
        raise ValueError("counts must be non-negative")
    decided = violations + passes
    return violations / decided if decided else 0.0


@dataclass(frozen=True)
class Tally:
    pairs: int = 0
    passes: int = 0
    violations: int = 0
    inconclusive: int = 0

    @property
    def failure_rate(self) -> float:
        return failure_rate(self.violations, self.passes)

    def add(self, outcome: Outcome) -> "Tally":
        return Tally(
            pairs=self.pairs + 1,
            passes=self.passes + (outcome is Outcome.PASS),
            violations=self.violations + (outcome is Outcome.VIOLATION),
            inconclusive=self.inconclusive + (outcome is Outcome.INCONCLUSIVE),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "pairs": self.pairs,
            "passes": self.passes,
            "violations": self.violations,
            "inconclusive": self.inconclusive,
            "failure_rate": round(self.failure_rate, 4),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Tally":
        t = cls(d["pairs"], d["passes"], d["violations"], d["inconclusive"])
        if t.pairs != t.passes + t.violations + t.inconclusive:
            raise ReportError(f"inconsistent tally {dict(d)}")
        return t


@dataclass(frozen=True)
class RunReport:
    run_id: str
    model_id: str
    config_hash: str
    per_mr: Mapping[str, Tally]
    per_task: Mapping[str, Tally]
    started: str = ""
    finished: str = ""
    skipped: Mapping[str, int] = field(default_factory=dict)

    def rates(self) -> dict[str, float]:
        return {k: round(t.failure_rate, 4) for k, t in self.per_mr.items()}

    @property
    def total_violations(self) -> int:
        return sum(t.violations for t in self.per_mr.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "model_id": self.model_id,
            "config_hash": self.config_hash,
            "per_mr": {k: t.to_dict() for k, t in self.per_mr.items()},
            "per_task": {k: t.to_dict() for k, t in self.per_task.items()},
            "skipped": dict(self.skipped),
            "started": self.started,
            "finished": self.finished,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunReport":
        return cls(
            run_id=d["run_id"],
            model_id=d["model_id"],
            config_hash=d["config_hash"],
            per_mr={k: Tally.from_dict(v) for k, v in d["per_mr"].items()},
            per_task={k: Tally.from_dict(v) for k, v in d["per_task"].items()},
            started=d.get("started", ""),
            finished=d.get("finished", ""),
            skipped=d.get("skipped", {}),
        )

    def canonical_json(self) -> str:
        return canonical_json(self.to_dict())


def aggregate_report(
    verdicts: Sequence[Verdict],
    pairs: Sequence[TestPair],
    model_id: str,
    *,
    run_id: str = "",
    config_hash: str = "",
    started: str = "",
    finished: str = "",
    skipped: Mapping[str, int] | None = None,
) -> RunReport:
    """Tally verdicts per MR and per task.

    The result does not depend on the order of ``verdicts``: tallies are
    commutative and the maps are emitted with sorted keys.
    """
    by_id = {p.id: p for p in pairs}
    per_mr: dict[str, Tally] = {}
    per_task: dict[str, Tally] = {}
    for v in verdicts:
        pair = by_id.get(v.pair_id)
        if pair is None:
            raise ReportError(f"verdict references unknown pair id {v.pair_id!r}")
        task = pair.source.task.value
        per_mr[pair.mr_id] = per_mr.get(pair.mr_id, Tally()).add(v.outcome)
        per_task[task] = per_task.get(task, Tally()).add(v.outcome)
    return RunReport(
        run_id=run_id,
        model_id=model_id,
        config_hash=config_hash,
        per_mr=dict(sorted(per_mr.items())),
        per_task=dict(sorted(per_task.items())),
        started=started,
        finished=finished,
        skipped=dict(sorted((skipped or {}).items())),
    )


def canonical_json(obj: Any) -> str:
    """Sorted-key, indented JSON terminated by a single LF."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def jsonl_line(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n"


def _plain(value: Any) -> Any:
    """Convert mappings/tuples to JSON-friendly dicts/lists recursively."""
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value
