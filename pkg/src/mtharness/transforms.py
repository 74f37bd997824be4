"""Rule-based input transformations (the input side of a relation).

Every transform is a pure function of its text and parameters. A transform
that cannot produce a meaningful follow-up reports ``inapplicable`` rather
than returning the input unchanged; malformed parameters raise
:class:`~mtharness.core.ConfigurationError` instead.

Entity spans are UTF-8 byte offsets into the text.
"""

from __future__ import annotations

import hashlib
import re
import unicodedata
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .core import (
    ConfigurationError,
    ProvenanceStep,
    SourceInput,
    Span,
    check_spans,
    entity_spans,
)

# letters, optionally joined by apostrophes ("wasn't")
WORD_RE = re.compile(r"[^\W\d_]+(?:['’][^\W\d_]+)*")
NUMERAL_RE = re.compile(r"([+-]?)([0-9]+(?:\.[0-9]+)?)")

TRANSFORM_NAMES = (
    "synonym-paraphrase",
    "misspell",
    "case-perturb",
    "punctuation-strip",
    "append-distractor",
    "swap-entities",
    "negate-numeric",
)
# may legitimately return the input unchanged (0 negates to 0)
POSSIBLY_IDENTITY = frozenset({"negate-numeric"})
CASE_MODES = ("upper", "lower", "swap", "title")


@dataclass(frozen=True)
class TransformOutcome:
    status: str  # "applied" | "inapplicable"
    text: str = ""
    note: str = ""
    metadata: Mapping[str, Any] | None = None

    @property
    def applied(self) -> bool:
        return self.status == "applied"

    @classmethod
    def ok(cls, text: str, metadata: Mapping[str, Any] | None = None) -> "TransformOutcome":
        return cls("applied", text=text, metadata=metadata)

    @classmethod
    def skip(cls, note: str) -> "TransformOutcome":
        return cls("inapplicable", note=note)


@dataclass(frozen=True)
class TransformStep:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def problems(self) -> list[str]:
        """Parameter problems for this step; empty when the step is runnable."""
        if self.name not in TRANSFORM_NAMES:
            return [f"unknown transform {self.name!r}"]
        allowed = _PARAMS[self.name]
        out = [
            f"{self.name}: unknown parameter {k!r}" for k in self.params if k not in allowed
        ]
        p = self.params
        if self.name == "synonym-paraphrase":
            mw = p.get("max-words", 1)
            if not isinstance(mw, int) or isinstance(mw, bool) or mw < 1:
                out.append("synonym-paraphrase: max-words must be a positive integer")
            lex = p.get("lexicon")
            if lex is not None and not isinstance(lex, (str, Mapping)):
                out.append("synonym-paraphrase: lexicon must be a path or a map")
        elif self.name == "case-perturb":
            if p.get("mode", "upper") not in CASE_MODES:
                out.append(f"case-perturb: mode must be one of {', '.join(CASE_MODES)}")
        elif self.name == "append-distractor":
            d = p.get("distractor-text")
            if not isinstance(d, str) or not d:
                out.append("append-distractor: distractor-text must be a non-empty string")
        elif self.name == "swap-entities":
            for key in ("first", "second"):
                v = p.get(key, 0)
                if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                    out.append(f"swap-entities: {key} must be a non-negative integer")
            if p.get("first", 0) == p.get("second", 1):
                out.append("swap-entities: first and second must differ")
        return out

    def check(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigurationError("; ".join(problems))


_PARAMS: dict[str, frozenset[str]] = {
    "synonym-paraphrase": frozenset({"max-words", "lexicon"}),
    "misspell": frozenset(),
    "case-perturb": frozenset({"mode"}),
    "punctuation-strip": frozenset(),
    "append-distractor": frozenset({"distractor-text"}),
    "swap-entities": frozenset({"first", "second"}),
    "negate-numeric": frozenset(),
}


# -- data files ---------------------------------------------------------------


def _data_lines(text: str) -> list[str]:
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def parse_lexicon(text: str) -> dict[str, str]:
    """Parse ``word<TAB>synonym`` lines; the first entry for a word wins."""
    lexicon: dict[str, str] = {}
    for n, line in enumerate(_data_lines(text), 1):
        parts = line.split("\t")
        if len(parts) != 2 or not all(parts):
            raise ConfigurationError(f"lexicon line {n}: expected word<TAB>synonym")
        lexicon.setdefault(parts[0].casefold(), parts[1])
    return lexicon


@lru_cache(maxsize=None)
def default_lexicon() -> dict[str, str]:
    return parse_lexicon(resources.files("mtharness.data").joinpath("lexicon.tsv").read_text("utf-8"))


@lru_cache(maxsize=None)
def protected_words() -> frozenset[str]:
    text = resources.files("mtharness.data").joinpath("protected_words.txt").read_text("utf-8")
    return frozenset(w.casefold() for w in _data_lines(text))


@lru_cache(maxsize=32)
def _lexicon_file(path: str) -> dict[str, str]:
    try:
        return parse_lexicon(Path(path).read_text("utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read lexicon {path}: {exc}") from None


def is_protected(word: str, protected: frozenset[str] | None = None) -> bool:
    protected = protected_words() if protected is None else protected
    return word[:1].isupper() or word.casefold() in protected


# -- individual transforms ----------------------------------------------------


def synonym_paraphrase(
    text: str,
    lexicon: Mapping[str, str] | None = None,
    max_words: int = 1,
    protected: frozenset[str] | None = None,
) -> TransformOutcome:
    """Replace up to ``max_words`` lexicon words, scanning left to right."""
    lexicon = default_lexicon() if lexicon is None else lexicon
    pieces: list[str] = []
    last = 0
    replaced = 0
    for m in WORD_RE.finditer(text):
        if replaced >= max_words:
            break
        word = m.group()
        synonym = lexicon.get(word.casefold())
        if synonym is None or synonym == word or is_protected(word, protected):
            continue
        pieces.append(text[last : m.start()])
        pieces.append(synonym)
        last = m.end()
        replaced += 1
    if not replaced:
        return TransformOutcome.skip("no substitutable word")
    pieces.append(text[last:])
    return TransformOutcome.ok("".join(pieces))


def misspell(text: str, protected: frozenset[str] | None = None) -> TransformOutcome:
    """Swap the two middle characters of the longest unprotected word.

    Eligible words have at least four characters; ties go to the first
    occurrence. For a word of length n the characters at
    ``(n - 1) // 2`` and the next index are exchanged. Words where that
    swap would be a no-op ("look") are not eligible.
    """
    best: re.Match[str] | None = None
    for m in WORD_RE.finditer(text):
        word = m.group()
        n = len(word)
        if n < 4 or is_protected(word, protected):
            continue
        i = (n - 1) // 2
        if word[i] == word[i + 1]:
            continue
        if best is None or n > len(best.group()):
            best = m
    if best is None:
        return TransformOutcome.skip("no eligible word of length >= 4")
    word = best.group()
    i = (len(word) - 1) // 2
    swapped = word[:i] + word[i + 1] + word[i] + word[i + 2 :]
    return TransformOutcome.ok(text[: best.start()] + swapped + text[best.end() :])


def case_perturb(text: str, mode: str = "upper") -> TransformOutcome:
    funcs: dict[str, Callable[[str], str]] = {
        "upper": str.upper,
        "lower": str.lower,
        "swap": str.swapcase,
        "title": str.title,
    }
    if mode not in funcs:
        raise ConfigurationError(f"case-perturb: unknown mode {mode!r}")
    out = funcs[mode](text)
    if out == text:
        return TransformOutcome.skip(f"case mode {mode!r} leaves text unchanged")
    return TransformOutcome.ok(out)


def punctuation_strip(text: str) -> TransformOutcome:
    out = "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))
    if out == text:
        return TransformOutcome.skip("no punctuation to strip")
    if not out.strip():
        return TransformOutcome.skip("text is only punctuation")
    return TransformOutcome.ok(out)


def append_distractor(text: str, distractor: str) -> TransformOutcome:
    if not distractor:
        raise ConfigurationError("append-distractor: distractor must be non-empty")
    return TransformOutcome.ok(f"{text} {distractor}")


def swap_entities(text: str, span_a: Span, span_b: Span) -> TransformOutcome:
    """Exchange the substrings at two byte spans.

    The returned metadata carries the new spans in the same entity order,
    so entity 0 still names the same surface string after the swap.
    """
    if span_a[0] > span_b[0]:
        raise ConfigurationError("swap-entities: span-a must start before span-b")
    check_spans(text, [span_a, span_b])
    data = text.encode("utf-8")
    a = data[span_a[0] : span_a[1]]
    b = data[span_b[0] : span_b[1]]
    if a == b:
        return TransformOutcome.skip("entities identical")
    out = data[: span_a[0]] + b + data[span_a[1] : span_b[0]] + a + data[span_b[1] :]
    shift = len(b) - len(a)
    new_b = (span_a[0], span_a[0] + len(b))
    new_a = (span_b[0] + shift, span_b[0] + shift + len(a))
    return TransformOutcome.ok(out.decode("utf-8"), {"entities": [list(new_a), list(new_b)]})


def negate_numeric(text: str) -> TransformOutcome:
    """Numeral of the additive inverse, without "+" and never "-0"."""
    m = NUMERAL_RE.fullmatch(text)
    if m is None:
        return TransformOutcome.skip("not a decimal numeral")
    sign, magnitude = m.groups()
    try:
        is_zero = Decimal(magnitude) == 0
    except InvalidOperation:  # pragma: no cover - regex already guarantees digits
        return TransformOutcome.skip("not a decimal numeral")
    if is_zero or sign == "-":
        return TransformOutcome.ok(magnitude)
    return TransformOutcome.ok("-" + magnitude)


# -- pipeline -----------------------------------------------------------------


def step_seed(seed: int, index: int) -> int:
    """Per-step 64-bit seed derived from the pipeline seed."""
    digest = hashlib.blake2b(
        index.to_bytes(8, "big"), key=seed.to_bytes(8, "big"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


def apply_step(step: TransformStep, text: str, metadata: Mapping[str, Any], seed: int) -> TransformOutcome:
    """Run one step. ``seed`` is accepted for every step; current rules ignore it."""
    step.check()
    p = step.params
    name = step.name
    if name == "synonym-paraphrase":
        lex = p.get("lexicon")
        lexicon = _lexicon_file(lex) if isinstance(lex, str) else lex
        return synonym_paraphrase(text, lexicon, p.get("max-words", 1))
    if name == "misspell":
        return misspell(text)
    if name == "case-perturb":
        return case_perturb(text, p.get("mode", "upper"))
    if name == "punctuation-strip":
        return punctuation_strip(text)
    if name == "append-distractor":
        return append_distractor(text, p["distractor-text"])
    if name == "swap-entities":
        spans = entity_spans(metadata)
        i, j = p.get("first", 0), p.get("second", 1)
        if len(spans) < 2 or max(i, j) >= len(spans):
            return TransformOutcome.skip("requires 2 entity spans")
        sa, sb = spans[i], spans[j]
        flipped = sa[0] > sb[0]
        if flipped:
            sa, sb = sb, sa
        out = swap_entities(text, sa, sb)
        if not out.applied:
            return out
        new_a, new_b = out.metadata["entities"]  # type: ignore[index]
        if flipped:
            new_a, new_b = new_b, new_a
        # total length is unchanged; only spans between the two entities move
        shift = (sb[1] - sb[0]) - (sa[1] - sa[0])
        new_spans = []
        for k, (s, e) in enumerate(spans):
            if k == i:
                new_spans.append(list(new_a))
            elif k == j:
                new_spans.append(list(new_b))
            elif sa[1] <= s and e <= sb[0]:
                new_spans.append([s + shift, e + shift])
            else:
                new_spans.append([s, e])
        return TransformOutcome.ok(out.text, {"entities": new_spans})
    if name == "negate-numeric":
        return negate_numeric(text)
    raise ConfigurationError(f"unknown transform {name!r}")  # pragma: no cover


def apply_pipeline(
    pipeline: Sequence[TransformStep], source: SourceInput, seed: int
) -> TransformOutcome:
    """Apply ``pipeline`` in order to ``source``.

    The whole pipeline is inapplicable as soon as one step is. The returned
    ``metadata`` is the follow-up's metadata: entity spans are carried
    through steps that provably keep them valid and dropped otherwise.
    """
    if not pipeline:
        raise ConfigurationError("transform pipeline must be non-empty")
    for step in pipeline:
        step.check()
    text = source.text
    metadata = dict(source.metadata)
    for index, step in enumerate(pipeline):
        out = apply_step(step, text, metadata, step_seed(seed, index))
        if not out.applied:
            return out
        if not out.text:
            return TransformOutcome.skip(f"{step.name} produced empty text")
        if out.metadata is not None:
            metadata.update(out.metadata)
        elif "entities" in metadata:
            metadata = _carry_spans(step.name, text, out.text, metadata)
        text = out.text
    if text == source.text and not any(s.name in POSSIBLY_IDENTITY for s in pipeline):
        return TransformOutcome.skip("pipeline reproduced the input")
    return TransformOutcome.ok(text, metadata)


def _carry_spans(name: str, old: str, new: str, metadata: dict[str, Any]) -> dict[str, Any]:
    keep = name == "append-distractor" or len(old.encode("utf-8")) == len(new.encode("utf-8"))
    if keep:
        spans = entity_spans(metadata)
        try:
            check_spans(new, spans)
        except ConfigurationError:
            keep = False
    if not keep:
        metadata = {k: v for k, v in metadata.items() if k != "entities"}
    return metadata


def provenance_for(pipeline: Sequence[TransformStep], seed: int) -> tuple[ProvenanceStep, ...]:
    return tuple(
        ProvenanceStep(step.name, dict(step.params), step_seed(seed, i))
        for i, step in enumerate(pipeline)
    )


def replay_provenance(source: SourceInput, provenance: Sequence[ProvenanceStep]) -> str | None:
    """Re-run recorded steps on ``source``; returns the follow-up text or None."""
    text = source.text
    metadata: dict[str, Any] = dict(source.metadata)
    for prov in provenance:
        out = apply_step(TransformStep(prov.name, prov.params), text, metadata, prov.seed)
        if not out.applied:
            return None
        if out.metadata is not None:
            metadata.update(out.metadata)
        elif "entities" in metadata:
            metadata = _carry_spans(prov.name, text, out.text, metadata)
        text = out.text
    return text
