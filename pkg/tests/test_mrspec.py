from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import CORPUS
from mtharness.core import Aggregation, MetamorphicRelation, TaskKind
from mtharness.mrspec import (
    MrSpecDoc,
    MrSpecSyntaxError,
    parse,
    parse_bytes,
    serialize,
    tokenize,
    validate,
)
from mtharness.relations import ComparatorSpec, Equivalence, ExternalCheck, Flip
from mtharness.transforms import TransformStep

GOOD = """\
# comment
relation "p" {
  applies_to: sentiment_analysis, generic;
  transform: synonym_paraphrase(max_words = 2) |> misspell();
  expect: equivalent(comparator = token_jaccard, threshold = 0.6, band = 0.1);
  repetitions: 3;
  aggregate: majority;
}
"""


def errors(source: str) -> list[str]:
    try:
        return [str(d) for d in validate(parse(source))]
    except MrSpecSyntaxError as exc:
        return [str(d) for d in exc.diagnostics]


def test_parse_example():
    (mr,) = parse(GOOD).relations
    assert mr.id == "p"
    assert mr.applies_to == frozenset({TaskKind.SENTIMENT_ANALYSIS, TaskKind.GENERIC})
    assert mr.transform_pipeline == (TransformStep("synonym-paraphrase", {"max-words": 2}), TransformStep("misspell"))
    assert mr.comparator == ComparatorSpec("token-jaccard", 0.6, 0.1)
    assert (mr.repetitions, mr.aggregation) == (3, Aggregation.MAJORITY)
    assert validate(parse(GOOD)) == []


def test_defaults():
    (mr,) = parse('relation "d" { transform: misspell(); expect: equivalent(); }').relations
    assert mr.applies_to == "any" and mr.repetitions == 1
    assert mr.aggregation is Aggregation.ANY_VIOLATION
    assert mr.comparator == ComparatorSpec("normalized-exact", 1.0, 0.0)


def test_missing_semicolon_position():
    src = 'relation "p" { transform: misspell() expect: equivalent(); }'
    assert errors(src) == ["1:38: error: expected ';', found 'expect'"]


def test_duplicate_relation_reported_at_second():
    src = 'relation "p" { transform: misspell(); expect: equivalent(); }\n\nrelation "p" { transform: misspell(); expect: equivalent(); }'
    assert errors(src) == ["3:1: error: duplicate relation id 'p'"]


def test_threshold_out_of_range_has_position():
    src = 'relation "p" {\n  transform: misspell();\n  expect: equivalent(comparator = tf_cosine, threshold = 1.5);\n}'
    assert errors(src) == ["3:3: error: relation 'p': threshold out of range [0,1]"]


@pytest.mark.parametrize(
    "src, fragment",
    [
        ('relation "p" { transform: misspell(); }', "missing field 'expect'"),
        ('relation "p" { colour: red; }', "unknown field 'colour'"),
        ('relation "p" { applies_to: poetry; transform: misspell(); expect: equivalent(); }', "unknown task tag"),
        ('relation "p" { transform: misspell(); expect: similar(); }', "unknown relation kind"),
        ('relation "p" { transform: misspell(); expect: equivalent(comparator = bleu); }', "unknown comparator"),
        ('relation "p" { transform: misspell(); expect: flip(map = {a: b}); }', "flip requires 'lexicon'"),
        ('relation "p" { transform: misspell(); expect: external(); }', "external requires a 'command'"),
        ('relation "p" { transform: misspell(); expect: equivalent(); repetitions: 1.5; }', "integer"),
        ('relation "p" { transform: misspell(); expect: equivalent(); aggregate: vote; }', "unknown aggregation"),
        ('relation "p" { transform: misspell(); expect: equivalent(band = "x"); }', "must be a number"),
        ('relation "" { transform: misspell(); expect: equivalent(); }', "non-empty"),
        ('relation "p', "unterminated string"),
        ('relation "\\q"', "invalid escape"),
        ("relation @", "unexpected character"),
        ("", "expected 'relation'"),
        ("relation \"p\" { transform: misspell(); expect: equivalent(x = 1e999); }", "out of range"),
        ('relation "p" { transform: shout(); expect: equivalent(); }', "unknown transform 'shout'"),
        ('relation "p" { transform: misspell(); expect: equivalent(); repetitions: 2; aggregate: majority; }', "odd"),
        (
            'relation "p" { transform: misspell(); expect: flip(map = {A: B, B: C, C: A}, lexicon = {a: A}); }',
            "flip map must be an involution",
        ),
    ],
)
def test_diagnostics(src, fragment):
    found = errors(src)
    assert found and fragment in found[0]


def test_diagnostics_carry_line_and_column():
    src = 'relation "p" {\n  transform: misspell();\n  expect: equivalent();\n  aggregate: vote;\n}'
    (d,) = errors(src)
    assert d.startswith("4:14:")


def test_invalid_utf8():
    with pytest.raises(MrSpecSyntaxError, match="2:3: error: invalid UTF-8"):
        parse_bytes(b'# ok\nab\xff')


def test_string_escapes_and_comments():
    toks = tokenize('"a\\"b\\u00e9\\n" # trailing\n|> -2.5e1')
    assert [t.value for t in toks] == ['a"bé\n', "|>", -25.0, None]


def test_deep_nesting_is_an_error_not_a_crash():
    src = 'relation "p" { transform: misspell(x = ' + "{a:" * 5000 + "1" + "}" * 5000 + "); expect: equivalent(); }"
    with pytest.raises(MrSpecSyntaxError, match="nested too deeply"):
        parse(src)


def test_hyphen_and_underscore_equivalent():
    a = parse('relation "p" { applies_to: question-answering; transform: case-perturb(mode = lower); expect: equivalent(comparator = tf-cosine); }')
    b = parse('relation "p" { applies_to: question_answering; transform: case_perturb(mode = lower); expect: equivalent(comparator = tf_cosine); }')
    assert a == b


# -- round trip -------------------------------------------------------------------------------


def test_corpus_is_large_enough_and_covers_every_kind():
    assert len(CORPUS) >= 10
    kinds = {type(mr.output_relation) for path in CORPUS for mr in parse(path.read_text("utf-8")).relations}
    assert kinds == {Equivalence, Flip, ExternalCheck}


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.name)
def test_corpus_round_trip(path):
    doc = parse(path.read_text("utf-8"))
    assert validate(doc) == []
    text = serialize(doc)
    assert parse(text) == doc
    assert serialize(parse(text)) == text


idents = st.from_regex(r"[a-z][a-z0-9_]{0,6}", fullmatch=True)
values = st.recursive(
    st.one_of(st.integers(-1000, 1000), st.floats(allow_nan=False, allow_infinity=False), st.text(max_size=8)),
    lambda inner: st.dictionaries(st.one_of(idents, st.text(max_size=5)), inner, max_size=3),
    max_leaves=6,
)
# parsed parameter names are canonical: hyphens, never underscores
param_names = st.from_regex(r"[a-z][a-z0-9\-]{0,6}", fullmatch=True)
steps = st.builds(TransformStep, st.sampled_from(["misspell", "case-perturb", "append-distractor"]), st.dictionaries(param_names, values, max_size=2))
labels = st.sampled_from(["POS", "NEG", "neutral label"])
relations = st.one_of(
    st.tuples(st.just(Equivalence()), st.builds(ComparatorSpec, st.sampled_from(["exact", "token-jaccard", "tf-cosine"]), st.floats(0, 1), st.floats(0, 1))),
    st.tuples(st.builds(Flip, st.just({"POS": "NEG", "NEG": "POS"}), st.dictionaries(st.text(min_size=1, max_size=6), labels, min_size=1, max_size=3)), st.just(ComparatorSpec())),
    st.tuples(st.builds(ExternalCheck, st.text(max_size=20), st.floats(0.1, 100)), st.just(ComparatorSpec())),
)


@st.composite
def documents(draw):
    ids = draw(st.lists(st.text(min_size=1, max_size=10), min_size=1, max_size=4, unique=True))
    out = []
    for mr_id in ids:
        rel, comp = draw(relations)
        applies = draw(st.one_of(st.just("any"), st.frozensets(st.sampled_from(list(TaskKind)), min_size=1)))
        out.append(
            MetamorphicRelation(
                mr_id,
                tuple(draw(st.lists(steps, min_size=1, max_size=3))),
                rel,
                comp,
                applies_to=applies,
                repetitions=draw(st.integers(1, 9)),
                aggregation=draw(st.sampled_from(list(Aggregation))),
            )
        )
    return MrSpecDoc(tuple(out))


@given(documents())
def test_serialize_parse_round_trip(doc):
    text = serialize(doc)
    again = parse(text)
    assert again == doc
    assert serialize(again) == text


# -- fuzz ------------------------------------------------------------------------------------


def _survives(data: bytes) -> None:
    try:
        validate(parse_bytes(data))
    except MrSpecSyntaxError as exc:
        assert exc.diagnostics and all(d.line >= 1 and d.column >= 1 for d in exc.diagnostics)


def test_random_bytes_fuzz():
    rng = random.Random(20240601)
    seeds = [p.read_bytes() for p in CORPUS]
    for i in range(10_000):
        if i % 2:
            data = bytes(rng.randrange(256) for _ in range(rng.randrange(64)))
        else:
            # mutate a corpus file so the parser gets deep, not just the lexer
            data = bytearray(rng.choice(seeds))
            for _ in range(rng.randrange(1, 6)):
                data[rng.randrange(len(data))] = rng.randrange(256)
            data = bytes(data)
        _survives(data)


@given(st.binary(max_size=200))
def test_parser_never_crashes(data):
    _survives(data)


@given(st.text(alphabet=st.sampled_from('relation"{}():;,=[]|>#\n -1.5abc_'), max_size=120))
def test_parser_never_crashes_on_near_miss_text(text):
    _survives(text.encode())
