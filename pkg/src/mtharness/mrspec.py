"""The ``.mrs`` relation-spec language: lexer, LL(1) parser, validator, serializer.

Example::

    # paraphrase invariance
    relation "paraphrase" {
      applies_to: sentiment_analysis, question_answering;
      transform: synonym_paraphrase(max_words = 2) |> misspell();
      expect: equivalent(comparator = token_jaccard, threshold = 0.6, band = 0.1);
      repetitions: 3;
      aggregate: majority;
    }

Grammar::

    document = relation+ ;
    relation = "relation" STRING "{" field+ "}" ;
    field    = key ":" value ";" ;
    key      = "applies_to" | "transform" | "expect" | "repetitions" | "aggregate" ;
    call     = IDENT "(" [ arg { "," arg } ] ")" ;
    arg      = IDENT "=" literal ;
    literal  = STRING | NUMBER | IDENT | "{" [ entry { "," entry } ] "}" ;
    entry    = (STRING | IDENT) ":" literal ;

``transform`` takes calls joined by ``|>``; ``expect`` takes one of
``equivalent(...)``, ``flip(...)``, ``external(...)``. Underscores and
hyphens are interchangeable in identifiers. ``#`` starts a line comment.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, NoReturn

from .core import Aggregation, ConfigurationError, MetamorphicRelation, MTError, TaskKind
from .relations import (
    COMPARATOR_KINDS,
    ComparatorSpec,
    Equivalence,
    ExternalCheck,
    Flip,
    RelationKind,
    default_comparator,
)
from .transforms import TransformStep

FIELD_KEYS = ("applies_to", "transform", "expect", "repetitions", "aggregate")
MAX_NESTING = 32

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*")
_NUMBER_RE = re.compile(r"-?[0-9]+(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?")
_PUNCT = "{}():;,=[]"


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str
    line: int
    column: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.severity}: {self.message}"


class MrSpecSyntaxError(MTError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(str(d) for d in diagnostics))


@dataclass(frozen=True)
class MrSpecDoc:
    relations: tuple[MetamorphicRelation, ...]
    # positions do not take part in structural equality
    source_span: Mapping[str, tuple[int, int]] = field(default_factory=dict, compare=False)
    field_spans: Mapping[tuple[str, str], tuple[int, int]] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "relations", tuple(self.relations))

    def get(self, mr_id: str) -> MetamorphicRelation:
        for mr in self.relations:
            if mr.id == mr_id:
                return mr
        raise KeyError(mr_id)


# -- lexer --------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    kind: str  # STRING NUMBER IDENT PUNCT PIPE EOF
    value: Any
    line: int
    column: int

    def describe(self) -> str:
        if self.kind == "EOF":
            return "end of input"
        if self.kind == "STRING":
            return "string"
        return repr(str(self.value)) if self.kind != "NUMBER" else f"number {self.value}"


class _Fail(Exception):
    def __init__(self, message: str, line: int, column: int):
        self.diagnostic = Diagnostic("error", message, line, column)


_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t", "r": "\r", "/": "/"}


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            i, line, col = i + 1, line + 1, 1
            continue
        if ch in " \t\r\ufeff":
            i, col = i + 1, col + 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i, col = i + 1, col + 1
            continue
        start_line, start_col = line, col
        if ch == '"':
            i, col = i + 1, col + 1
            buf = []
            while True:
                if i >= n or text[i] == "\n":
                    raise _Fail("unterminated string", start_line, start_col)
                c = text[i]
                if c == '"':
                    i, col = i + 1, col + 1
                    break
                if c == "\\":
                    nxt = text[i + 1] if i + 1 < n else ""
                    if nxt in _ESCAPES and nxt:
                        buf.append(_ESCAPES[nxt])
                        i, col = i + 2, col + 2
                        continue
                    if nxt == "u" and re.fullmatch(r"[0-9a-fA-F]{4}", text[i + 2 : i + 6]):
                        buf.append(chr(int(text[i + 2 : i + 6], 16)))
                        i, col = i + 6, col + 6
                        continue
                    raise _Fail("invalid escape sequence", line, col)
                buf.append(c)
                i, col = i + 1, col + 1
            tokens.append(Token("STRING", "".join(buf), start_line, start_col))
            continue
        if ch == "|" and text.startswith("|>", i):
            tokens.append(Token("PIPE", "|>", line, col))
            i, col = i + 2, col + 2
            continue
        if ch in _PUNCT:
            tokens.append(Token("PUNCT", ch, line, col))
            i, col = i + 1, col + 1
            continue
        m = _NUMBER_RE.match(text, i)
        if m and (ch.isdigit() or ch == "-"):
            lexeme = m.group()
            try:
                value: Any = float(lexeme) if any(c in lexeme for c in ".eE") else int(lexeme)
            except ValueError:
                raise _Fail("number too long", line, col) from None
            if isinstance(value, float) and not math.isfinite(value):
                raise _Fail("number out of range", line, col)
            tokens.append(Token("NUMBER", value, line, col))
            i, col = m.end(), col + len(lexeme)
            continue
        m = _IDENT_RE.match(text, i)
        if m:
            tokens.append(Token("IDENT", m.group(), line, col))
            i, col = m.end(), col + len(m.group())
            continue
        raise _Fail(f"unexpected character {ch!r}", line, col)
    tokens.append(Token("EOF", None, line, col))
    return tokens


# -- parser -------------------------------------------------------------------


def _canon(name: str) -> str:
    return name.replace("_", "-")


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0
        self.relations: list[MetamorphicRelation] = []
        self.spans: dict[str, tuple[int, int]] = {}
        self.field_spans: dict[tuple[str, str], tuple[int, int]] = {}

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        t = self.tokens[self.pos]
        if t.kind != "EOF":
            self.pos += 1
        return t

    def fail(self, message: str, tok: Token | None = None) -> NoReturn:
        tok = tok or self.tok
        raise _Fail(message, tok.line, tok.column)

    def expect_punct(self, ch: str) -> Token:
        if self.tok.kind == "PUNCT" and self.tok.value == ch:
            return self.advance()
        self.fail(f"expected '{ch}', found {self.tok.describe()}")

    def expect_kind(self, kind: str, what: str) -> Token:
        if self.tok.kind == kind:
            return self.advance()
        self.fail(f"expected {what}, found {self.tok.describe()}")

    def at_punct(self, ch: str) -> bool:
        return self.tok.kind == "PUNCT" and self.tok.value == ch

    # document = relation+
    def document(self) -> None:
        if self.tok.kind == "EOF":
            self.fail("expected 'relation', found end of input")
        while self.tok.kind != "EOF":
            self.relation()

    def relation(self) -> None:
        kw = self.tok
        if kw.kind != "IDENT" or kw.value != "relation":
            self.fail(f"expected 'relation', found {kw.describe()}")
        self.advance()
        name_tok = self.expect_kind("STRING", "relation id string")
        mr_id = name_tok.value
        if not mr_id:
            self.fail("relation id must be non-empty", name_tok)
        if mr_id in self.spans:
            self.fail(f"duplicate relation id {mr_id!r}", kw)
        self.expect_punct("{")
        fields: dict[str, Any] = {}
        while True:
            key_tok = self.expect_kind("IDENT", "field name")
            key = key_tok.value.replace("-", "_")
            if key not in FIELD_KEYS:
                self.fail(f"unknown field {key_tok.value!r}", key_tok)
            if key in fields:
                self.fail(f"duplicate field {key!r}", key_tok)
            self.expect_punct(":")
            fields[key] = getattr(self, "field_" + key)()
            self.field_spans[(mr_id, key)] = (key_tok.line, key_tok.column)
            self.expect_punct(";")
            if self.at_punct("}"):
                self.advance()
                break
        for required in ("transform", "expect"):
            if required not in fields:
                self.fail(f"relation {mr_id!r} is missing field {required!r}", kw)
        relation, comparator = fields["expect"]
        self.relations.append(
            MetamorphicRelation(
                id=mr_id,
                transform_pipeline=tuple(fields["transform"]),
                output_relation=relation,
                comparator=comparator,
                applies_to=fields.get("applies_to", "any"),
                repetitions=fields.get("repetitions", 1),
                aggregation=fields.get("aggregate", Aggregation.ANY_VIOLATION),
            )
        )
        self.spans[mr_id] = (kw.line, kw.column)

    def field_applies_to(self) -> frozenset[TaskKind] | str:
        first = self.expect_kind("IDENT", "task tag or 'any'")
        if first.value == "any":
            return "any"
        tags = [first]
        while self.at_punct(","):
            self.advance()
            tags.append(self.expect_kind("IDENT", "task tag"))
        out = set()
        for t in tags:
            try:
                out.add(TaskKind.parse(t.value))
            except ConfigurationError:
                self.fail(f"unknown task tag {t.value!r}", t)
        return frozenset(out)

    def field_transform(self) -> list[TransformStep]:
        steps = [self.transform_call()]
        while self.tok.kind == "PIPE":
            self.advance()
            steps.append(self.transform_call())
        return steps

    def transform_call(self) -> TransformStep:
        name, args, _ = self.call()
        return TransformStep(_canon(name), {_canon(k): v for k, (v, _) in args.items()})

    def field_expect(self) -> tuple[RelationKind, ComparatorSpec]:
        name, args, name_tok = self.call()
        kind = _canon(name)
        values = {k: v for k, (v, _) in args.items()}
        if kind == "equivalent":
            self.check_args(args, {"comparator", "threshold", "band"})
            comp_kind = values.get("comparator", "normalized-exact")
            if not isinstance(comp_kind, str) or _canon(comp_kind) not in COMPARATOR_KINDS:
                self.fail(f"unknown comparator {comp_kind!r}", args.get("comparator", (None, name_tok))[1])
            comp_kind = _canon(comp_kind)
            base = default_comparator(comp_kind)
            threshold = self.number(args, "threshold", base.threshold)
            band = self.number(args, "band", base.band)
            return Equivalence(), ComparatorSpec(comp_kind, threshold, band)
        if kind == "flip":
            self.check_args(args, {"map", "lexicon"})
            maps = []
            for key in ("map", "lexicon"):
                if key not in values:
                    self.fail(f"flip requires '{key}'", name_tok)
                value, tok = args[key]
                if not isinstance(value, dict) or not all(isinstance(v, str) for v in value.values()):
                    self.fail(f"flip '{key}' must be a map of labels", tok)
                maps.append(value)
            return Flip(maps[0], maps[1]), ComparatorSpec()
        if kind == "external":
            self.check_args(args, {"command", "timeout"})
            command, tok = args.get("command", (None, name_tok))
            if not isinstance(command, str):
                self.fail("external requires a 'command' string", tok)
            return ExternalCheck(command, self.number(args, "timeout", 30.0)), ComparatorSpec()
        self.fail(f"unknown relation kind {name!r}; expected equivalent, flip or external", name_tok)

    def check_args(self, args: Mapping[str, tuple[Any, Token]], allowed: set[str]) -> None:
        for key, (_, tok) in args.items():
            if key not in allowed:
                self.fail(f"unexpected argument {key!r}", tok)

    def number(self, args: Mapping[str, tuple[Any, Token]], key: str, default: float) -> float:
        if key not in args:
            return float(default)
        value, tok = args[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"'{key}' must be a number", tok)
        return float(value)

    def field_repetitions(self) -> int:
        tok = self.expect_kind("NUMBER", "repetition count")
        if not isinstance(tok.value, int):
            self.fail("repetitions must be an integer", tok)
        return tok.value

    def field_aggregate(self) -> Aggregation:
        tok = self.expect_kind("IDENT", "aggregation mode")
        try:
            return Aggregation(_canon(tok.value))
        except ValueError:
            self.fail(f"unknown aggregation {tok.value!r}; expected any_violation, majority or all", tok)

    def call(self) -> tuple[str, dict[str, tuple[Any, Token]], Token]:
        name_tok = self.expect_kind("IDENT", "name")
        self.expect_punct("(")
        args: dict[str, tuple[Any, Token]] = {}
        if not self.at_punct(")"):
            while True:
                key_tok = self.expect_kind("IDENT", "argument name")
                key = key_tok.value.replace("-", "_")
                if key in args:
                    self.fail(f"duplicate argument {key!r}", key_tok)
                self.expect_punct("=")
                value_tok = self.tok
                args[key] = (self.literal(0), value_tok)
                if not self.at_punct(","):
                    break
                self.advance()
        self.expect_punct(")")
        return name_tok.value, args, name_tok

    def literal(self, depth: int) -> Any:
        tok = self.tok
        if tok.kind in ("STRING", "NUMBER", "IDENT"):
            self.advance()
            return tok.value
        if self.at_punct("{"):
            if depth >= MAX_NESTING:
                self.fail("maps nested too deeply")
            self.advance()
            out: dict[str, Any] = {}
            if not self.at_punct("}"):
                while True:
                    key_tok = self.tok
                    if key_tok.kind not in ("STRING", "IDENT"):
                        self.fail(f"expected map key, found {key_tok.describe()}")
                    self.advance()
                    if key_tok.value in out:
                        self.fail(f"duplicate map key {key_tok.value!r}", key_tok)
                    self.expect_punct(":")
                    out[key_tok.value] = self.literal(depth + 1)
                    if not self.at_punct(","):
                        break
                    self.advance()
            self.expect_punct("}")
            return out
        self.fail(f"expected a value, found {tok.describe()}")


def parse(source: str) -> MrSpecDoc:
    """Parse ``.mrs`` text. Raises :class:`MrSpecSyntaxError` on any error."""
    try:
        parser = _Parser(tokenize(source))
        parser.document()
    except _Fail as fail:
        raise MrSpecSyntaxError([fail.diagnostic]) from None
    return MrSpecDoc(tuple(parser.relations), parser.spans, parser.field_spans)


def parse_bytes(data: bytes) -> MrSpecDoc:
    """Decode UTF-8 and parse; undecodable bytes become a diagnostic."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        prefix = data[: exc.start].decode("utf-8")
        line = prefix.count("\n") + 1
        column = len(prefix) - (prefix.rfind("\n") + 1) + 1
        raise MrSpecSyntaxError([Diagnostic("error", "invalid UTF-8", line, column)]) from None
    return parse(text)


# -- validation ---------------------------------------------------------------


def validate(doc: MrSpecDoc) -> list[Diagnostic]:
    """Semantic checks. An empty list means every relation can run."""
    out: list[Diagnostic] = []

    def report(mr_id: str, key: str | None, message: str) -> None:
        line, col = doc.source_span.get(mr_id, (1, 1))
        if key is not None:
            line, col = doc.field_spans.get((mr_id, key), (line, col))
        out.append(Diagnostic("error", f"relation {mr_id!r}: {message}", line, col))

    seen: set[str] = set()
    for mr in doc.relations:
        if mr.id in seen:
            report(mr.id, None, "duplicate relation id")
        seen.add(mr.id)
        if mr.applies_to != "any" and not all(isinstance(t, TaskKind) for t in mr.applies_to):
            report(mr.id, "applies_to", "unknown task tag")
        if not mr.transform_pipeline:
            report(mr.id, "transform", "transform pipeline must be non-empty")
        for step in mr.transform_pipeline:
            for problem in step.problems():
                report(mr.id, "transform", problem)
        rel = mr.output_relation
        if isinstance(rel, Equivalence):
            for problem in mr.comparator.problems():
                report(mr.id, "expect", problem)
        else:
            for problem in rel.problems():
                report(mr.id, "expect", problem)
        for problem in mr.problems():
            if problem.startswith("transform"):
                continue
            key = "aggregate" if "majority" in problem else "repetitions"
            report(mr.id, key, problem)
    return out


# -- serialization ------------------------------------------------------------


def _quote(s: str) -> str:
    out = ['"']
    for ch in s:
        if ch in '"\\':
            out.append("\\" + ch)
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif ch == "\r":
            out.append("\\r")
        elif ord(ch) < 0x20 or ch in "\u2028\u2029\x7f":
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def _ident(name: str) -> str:
    return name.replace("-", "_")


def _literal(value: Any) -> str:
    if isinstance(value, bool):
        return _quote(str(value).lower())
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Mapping):
        items = ", ".join(
            f"{_bare(str(k))}: {_literal(v)}" for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))
        )
        return "{" + items + "}"
    return _bare(str(value))


def _bare(s: str) -> str:
    """Identifier-shaped strings are written unquoted; both forms parse to str."""
    return s if _IDENT_RE.fullmatch(s) else _quote(s)


def _call(name: str, args: Mapping[str, str]) -> str:
    inner = ", ".join(f"{_ident(k)} = {v}" for k, v in sorted(args.items(), key=lambda kv: _ident(kv[0])))
    return f"{_ident(name)}({inner})"


def _expect(mr: MetamorphicRelation) -> str:
    rel = mr.output_relation
    if isinstance(rel, Equivalence):
        c = mr.comparator
        return _call(
            "equivalent",
            {"comparator": _ident(c.kind), "threshold": repr(float(c.threshold)), "band": repr(float(c.band))},
        )
    if isinstance(rel, Flip):
        return _call("flip", {"map": _literal(dict(rel.label_map)), "lexicon": _literal(dict(rel.label_lexicon))})
    if isinstance(rel, ExternalCheck):
        return _call("external", {"command": _quote(rel.command), "timeout": repr(float(rel.timeout))})
    raise TypeError(f"cannot serialize relation {rel!r}")


def serialize(doc: MrSpecDoc) -> str:
    """Canonical text: two-space indent, one field per line, sorted arguments."""
    blocks = []
    for mr in doc.relations:
        if mr.applies_to == "any":
            applies = "any"
        else:
            applies = ", ".join(sorted(_ident(t.value) for t in mr.applies_to))
        pipeline = " |> ".join(
            _call(step.name, {k: _literal(v) for k, v in step.params.items()}) for step in mr.transform_pipeline
        )
        lines = [
            f"relation {_quote(mr.id)} {{",
            f"  applies_to: {applies};",
            f"  transform: {pipeline};",
            f"  expect: {_expect(mr)};",
            f"  repetitions: {mr.repetitions};",
            f"  aggregate: {_ident(mr.aggregation.value)};",
            "}",
        ]
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def config_hash(doc: MrSpecDoc) -> str:
    return hashlib.sha256(serialize(doc).encode("utf-8")).hexdigest()


def load(path: str) -> MrSpecDoc:
    """Parse and validate a file; raises MrSpecSyntaxError on any error."""
    with open(path, "rb") as fh:
        doc = parse_bytes(fh.read())
    problems = validate(doc)
    if problems:
        raise MrSpecSyntaxError(problems)
    return doc
