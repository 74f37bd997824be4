from __future__ import annotations

import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtharness.core import (
    Annotation,
    ConfigurationError,
    InconclusiveReason,
    Outcome,
    ReportError,
    RunReport,
    SourceInput,
    Tally,
    TaskKind,
    TestPair,
    Verdict,
    aggregate_report,
    check_unique_ids,
    failure_rate,
)


def make_pair(input_id: str, mr_id: str, task: TaskKind = TaskKind.GENERIC) -> TestPair:
    src = SourceInput(input_id, task, f"text {input_id}")
    fol = SourceInput(f"{input_id}~{mr_id}", task, f"TEXT {input_id}")
    return TestPair(src, fol, mr_id, (), 0)


def verdict(pid: str, outcome: Outcome) -> Verdict:
    reason = InconclusiveReason.SUT_ERROR if outcome is Outcome.INCONCLUSIVE else None
    return Verdict(pid, outcome, inconclusive_reason=reason)


# -- inputs -------------------------------------------------------------------------


def test_source_input_rejects_empty_text():
    with pytest.raises(ConfigurationError):
        SourceInput("a", TaskKind.GENERIC, "")


def test_source_input_parses_task_tags():
    item = SourceInput("a", "sentiment_analysis", "nice")
    assert item.task is TaskKind.SENTIMENT_ANALYSIS
    with pytest.raises(ConfigurationError):
        SourceInput("a", "astrology", "nice")


def test_entity_spans_are_byte_offsets():
    # "é" is two bytes, so "Bob" starts at byte 7 though it is character 6
    text = "Zoé and Bob"
    SourceInput("a", TaskKind.RELATION_EXTRACTION, text, {"entities": [[0, 4], [9, 12]]})
    with pytest.raises(ConfigurationError, match="UTF-8"):
        SourceInput("a", TaskKind.RELATION_EXTRACTION, text, {"entities": [[0, 3]]})


@pytest.mark.parametrize(
    "spans",
    [[[0, 99]], [[3, 2]], [[0, 3], [2, 5]], [[-1, 2]]],
)
def test_bad_spans_rejected(spans):
    with pytest.raises(ConfigurationError):
        SourceInput("a", TaskKind.RELATION_EXTRACTION, "Alice and Bob", {"entities": spans})


def test_duplicate_input_ids():
    a = SourceInput("x", TaskKind.GENERIC, "one")
    with pytest.raises(ConfigurationError, match="duplicate"):
        check_unique_ids([a, a])


@given(st.text(min_size=1), st.sampled_from(list(TaskKind)))
def test_source_input_dict_round_trip(text, task):
    item = SourceInput("id-1", task, text, {"k": [1, "v"]}, "plain")
    again = SourceInput.from_dict(json.loads(json.dumps(item.to_dict())))
    assert again.to_dict() == item.to_dict()


def test_pair_round_trip_and_id():
    pair = make_pair("g01", "mr-a")
    assert pair.id == "mr-a::g01"
    assert TestPair.from_dict(pair.to_dict()) == pair


# -- verdicts -----------------------------------------------------------------


def test_inconclusive_needs_a_reason():
    with pytest.raises(ValueError):
        Verdict("p", Outcome.INCONCLUSIVE)
    with pytest.raises(ValueError):
        Verdict("p", Outcome.PASS, inconclusive_reason=InconclusiveReason.SUT_ERROR)


def test_only_violations_are_annotated():
    with pytest.raises(ValueError):
        Verdict("p", Outcome.PASS, annotation=Annotation.TRUE_POSITIVE)
    Verdict("p", Outcome.VIOLATION, annotation=Annotation.FALSE_POSITIVE)


def test_score_range():
    with pytest.raises(ValueError):
        Verdict("p", Outcome.PASS, score=1.5)


@given(st.sampled_from(list(Outcome)), st.one_of(st.none(), st.floats(0, 1)))
def test_verdict_round_trip(outcome, score):
    v = verdict("p", outcome)
    v = Verdict(v.pair_id, v.outcome, score, "d", v.inconclusive_reason)
    assert Verdict.from_dict(v.to_dict()) == v


# -- rates and reports ----------------------------------------------------------------


def test_failure_rate_excludes_inconclusive():
    t = Tally()
    for o in [Outcome.PASS, Outcome.VIOLATION, Outcome.INCONCLUSIVE, Outcome.INCONCLUSIVE]:
        t = t.add(o)
    assert t.pairs == 4
    assert t.failure_rate == 0.5


def test_failure_rate_of_nothing_is_zero():
    assert failure_rate(0, 0) == 0.0
    with pytest.raises(ValueError):
        failure_rate(-1, 3)


@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_failure_rate_bounded(v, p):
    assert 0.0 <= failure_rate(v, p) <= 1.0


def _ten_verdicts():
    pairs = [make_pair(f"i{k}", mr) for mr in ("mr-a", "mr-b") for k in range(5)]
    outcomes = [Outcome.PASS, Outcome.VIOLATION, Outcome.INCONCLUSIVE, Outcome.PASS, Outcome.VIOLATION]
    verdicts = [verdict(p.id, outcomes[k % 5]) for k, p in enumerate(pairs)]
    return pairs, verdicts


def test_report_independent_of_verdict_order():
    pairs, verdicts = _ten_verdicts()
    shuffled = verdicts[:]
    random.Random(3).shuffle(shuffled)
    a = aggregate_report(verdicts, pairs, "m", run_id="r", config_hash="h")
    b = aggregate_report(shuffled, pairs, "m", run_id="r", config_hash="h")
    assert a.canonical_json() == b.canonical_json()


def test_report_values():
    pairs, verdicts = _ten_verdicts()
    report = aggregate_report(verdicts, pairs, "m")
    assert report.per_mr["mr-a"] == Tally(5, 2, 2, 1)
    assert report.per_task["generic"] == Tally(10, 4, 4, 2)
    assert report.rates() == {"mr-a": 0.5, "mr-b": 0.5}
    assert report.total_violations == 4


def test_report_rejects_unknown_pair():
    with pytest.raises(ReportError):
        aggregate_report([verdict("nope::x", Outcome.PASS)], [], "m")


def test_report_json_round_trip():
    pairs, verdicts = _ten_verdicts()
    report = aggregate_report(verdicts, pairs, "m", run_id="r", skipped={"mr-c": 2})
    again = RunReport.from_dict(json.loads(report.canonical_json()))
    assert again == report
    assert report.canonical_json().endswith("}\n")


def test_rate_rounded_to_four_places():
    t = Tally(3, 2, 1, 0)
    assert t.to_dict()["failure_rate"] == 0.3333


def test_inconsistent_tally_rejected():
    with pytest.raises(ReportError):
        Tally.from_dict({"pairs": 3, "passes": 1, "violations": 1, "inconclusive": 0})


@given(st.lists(st.sampled_from(list(Outcome)), max_size=40))
def test_tally_counts_partition(outcomes):
    t = Tally()
    for o in outcomes:
        t = t.add(o)
    assert t.pairs == t.passes + t.violations + t.inconclusive == len(outcomes)
