from __future__ import annotations

import subprocess
import sys

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from mtharness.core import ConfigurationError, SourceInput, TaskKind
from mtharness.transforms import (
    TransformStep,
    append_distractor,
    apply_pipeline,
    case_perturb,
    default_lexicon,
    misspell,
    negate_numeric,
    parse_lexicon,
    protected_words,
    provenance_for,
    punctuation_strip,
    replay_provenance,
    swap_entities,
    synonym_paraphrase,
)

KIN = "Alice is the mother of Bob"


def generic(text: str, **metadata) -> SourceInput:
    return SourceInput("x", TaskKind.GENERIC, text, metadata)


# -- worked examples --------------------------------------------------------------


def test_paraphrase_leftmost_first():
    lex = {"movie": "film", "great": "excellent"}
    out = synonym_paraphrase("the movie was great", lex, max_words=2)
    assert out.applied and out.text == "the film was excellent"
    assert synonym_paraphrase("the movie was great", lex, max_words=1).text == "the film was great"


def test_paraphrase_pipeline_with_inline_lexicon():
    step = TransformStep("synonym-paraphrase", {"max-words": 2, "lexicon": {"movie": "film", "great": "excellent"}})
    out = apply_pipeline([step], generic("the movie was great"), 0)
    assert out.text == "the film was excellent"


def test_paraphrase_skips_protected_and_capitalized():
    assert not synonym_paraphrase("not Movie", {"not": "never", "movie": "film"}, 2).applied


def test_misspell_examples():
    assert misspell("the movie was great").text == "the moive was great"
    assert misspell("negotiation starts now").text == "negotaition starts now"
    out = misspell("a an to it")
    assert not out.applied and "length" in out.note


def test_misspell_skips_noop_swaps():
    # "look" would swap o/o; "seat" is the first eligible word
    assert misspell("look seat").text == "look saet"


def test_swap_entities_example():
    out = swap_entities(KIN, (0, 5), (23, 26))
    assert out.text == "Bob is the mother of Alice"
    # entity 0 still names "Alice"
    (a0, a1), (b0, b1) = out.metadata["entities"]
    raw = out.text.encode()
    assert raw[a0:a1] == b"Alice" and raw[b0:b1] == b"Bob"


def test_swap_identical_entities_inapplicable():
    out = swap_entities("Kim met Kim", (0, 3), (8, 11))
    assert not out.applied and out.note == "entities identical"


def test_swap_overlap_is_configuration_error():
    with pytest.raises(ConfigurationError):
        swap_entities(KIN, (0, 5), (3, 8))


def test_swap_without_spans_inapplicable():
    out = apply_pipeline([TransformStep("swap-entities")], generic(KIN), 0)
    assert not out.applied and out.note == "requires 2 entity spans"


def test_append_distractor_examples():
    assert append_distractor("Is the sky blue?", "The café opens at nine.").text == (
        "Is the sky blue? The café opens at nine."
    )
    assert append_distractor("x", "y z").text == "x y z"
    with pytest.raises(ConfigurationError):
        append_distractor("a", "")


@pytest.mark.parametrize("src, expected", [("5", "-5"), ("-3", "3"), ("0", "0"), ("+2.50", "-2.50"), ("-0", "0")])
def test_negate_numeric(src, expected):
    out = negate_numeric(src)
    assert out.applied and out.text == expected


@pytest.mark.parametrize("src", ["five", "1e3", "", "٣"])
def test_negate_numeric_inapplicable(src):
    assert not negate_numeric(src).applied


def test_case_and_punctuation():
    assert case_perturb("Hello", "swap").text == "hELLO"
    assert not case_perturb("123", "upper").applied
    assert punctuation_strip("Hi, you!").text == "Hi you"
    assert not punctuation_strip("plain").applied
    assert not punctuation_strip("?!").applied


def test_pipeline_stops_at_first_inapplicable():
    pipeline = [TransformStep("case-perturb", {"mode": "upper"}), TransformStep("negate-numeric")]
    assert not apply_pipeline(pipeline, generic("abc"), 0).applied


def test_pipeline_rejects_identity_result():
    pipeline = [TransformStep("case-perturb", {"mode": "upper"}), TransformStep("case-perturb", {"mode": "lower"})]
    out = apply_pipeline(pipeline, generic("abc"), 0)
    assert not out.applied


def test_bad_parameters_are_errors_not_inapplicable():
    with pytest.raises(ConfigurationError):
        apply_pipeline([TransformStep("case-perturb", {"mode": "sideways"})], generic("abc"), 0)
    with pytest.raises(ConfigurationError):
        apply_pipeline([TransformStep("misspell", {"rate": 0.5})], generic("abc"), 0)
    with pytest.raises(ConfigurationError):
        apply_pipeline([TransformStep("shout")], generic("abc"), 0)
    with pytest.raises(ConfigurationError):
        apply_pipeline([], generic("abc"), 0)


def test_swap_carries_extra_spans():
    text = "Ann saw the big dog near Christopher today"
    spans = [[0, 3], [25, 36], [16, 19]]
    item = SourceInput("k", TaskKind.RELATION_EXTRACTION, text, {"entities": spans})
    out = apply_pipeline([TransformStep("swap-entities")], item, 0)
    raw = out.text.encode()
    assert out.text == "Christopher saw the big dog near Ann today"
    assert [raw[s:e] for s, e in out.metadata["entities"]] == [b"Ann", b"Christopher", b"dog"]


def test_spans_dropped_when_lengths_change():
    item = SourceInput("k", TaskKind.RELATION_EXTRACTION, "Ann's movie, Bob", {"entities": [[0, 3], [13, 16]]})
    out = apply_pipeline([TransformStep("punctuation-strip")], item, 0)
    assert "entities" not in out.metadata


def test_lexicon_file_first_entry_wins():
    lex = parse_lexicon("# c\nmovie\tfilm\nmovie\tpicture\n")
    assert lex == {"movie": "film"}
    with pytest.raises(ConfigurationError):
        parse_lexicon("movie film\n")


def test_bundled_data_files():
    assert default_lexicon()["movie"] == "film"
    assert {"not", "never", "all"} <= protected_words()


def test_provenance_replays():
    pipeline = [TransformStep("synonym-paraphrase", {"max-words": 2}), TransformStep("misspell")]
    item = generic("The story had a great ending, honestly.")
    out = apply_pipeline(pipeline, item, 42)
    assert replay_provenance(item, provenance_for(pipeline, 42)) == out.text


def test_deterministic_across_processes():
    code = (
        "from mtharness.transforms import *;from mtharness.core import *;"
        "print(apply_pipeline([TransformStep('synonym-paraphrase',{'max-words':3}),TransformStep('misspell')],"
        "SourceInput('x',TaskKind.GENERIC,'the big movie had a sad ending'),7).text)"
    )
    runs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True).stdout for _ in range(2)}
    local = apply_pipeline(
        [TransformStep("synonym-paraphrase", {"max-words": 3}), TransformStep("misspell")],
        generic("the big movie had a sad ending"),
        7,
    ).text
    assert runs == {local + "\n"}


# -- properties ---------------------------------------------------------------------------

words = st.text(alphabet="abcdefghijklmnopqrstuvwxyzÉéß", min_size=1, max_size=9)
sentences = st.lists(words, min_size=1, max_size=8).map(" ".join)
any_text = st.text(min_size=1, max_size=60)
steps = st.sampled_from(
    [
        TransformStep("synonym-paraphrase", {"max-words": 2}),
        TransformStep("misspell"),
        TransformStep("case-perturb", {"mode": "swap"}),
        TransformStep("case-perturb", {"mode": "title"}),
        TransformStep("punctuation-strip"),
        TransformStep("append-distractor", {"distractor-text": "Noise."}),
    ]
)


@given(st.lists(steps, min_size=1, max_size=4), any_text, st.integers(0, 2**64 - 1))
def test_applied_output_never_equals_input(pipeline, text, seed):
    out = apply_pipeline(pipeline, generic(text), seed)
    if out.applied:
        assert out.text != text
    assert apply_pipeline(pipeline, generic(text), seed) == out


@given(sentences)
def test_misspell_preserves_word_structure(text):
    out = misspell(text)
    if out.applied:
        assert [len(w) for w in out.text.split(" ")] == [len(w) for w in text.split(" ")]
        assert sorted(out.text) == sorted(text)


@given(st.decimals(allow_nan=False, allow_infinity=False, places=3).map(str))
def test_negate_numeric_involution(numeral):
    assume("E" not in numeral and "e" not in numeral)
    once = negate_numeric(numeral)
    assume(once.applied)
    twice = negate_numeric(once.text)
    assert twice.applied
    assert negate_numeric(twice.text).text == once.text


@given(words, words, st.sampled_from([" and ", " is the mother of ", " ≠ "]))
def test_swap_twice_restores(a, b, middle):
    assume(a != b)
    text = a + middle + b
    sa = (0, len(a.encode()))
    sb = (len((a + middle).encode()), len(text.encode()))
    once = swap_entities(text, sa, sb)
    e1, e2 = once.metadata["entities"]
    # spans keep identity, so swapping entity 1 and entity 0 again restores
    back = swap_entities(once.text, tuple(e2), tuple(e1))
    assert back.text == text
