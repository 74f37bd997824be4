"""Output relations and comparators: the half of a relation that decides a verdict."""

from __future__ import annotations

import math
import os
import re
import shlex
import subprocess
import tempfile
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

from .core import InconclusiveReason, Outcome, Verdict

COMPARATOR_KINDS = ("exact", "normalized-exact", "token-jaccard", "tf-cosine", "embedding-endpoint")
LEXICAL_KINDS = COMPARATOR_KINDS[:4]

Embedder = Callable[[str], Sequence[float]]


@dataclass(frozen=True)
class ComparatorSpec:
    """Similarity kind plus decision threshold.

    Scores in ``[threshold - band, threshold)`` are inconclusive rather
    than violations.
    """

    kind: str = "normalized-exact"
    threshold: float = 1.0
    band: float = 0.0

    def problems(self) -> list[str]:
        out = []
        if self.kind not in COMPARATOR_KINDS:
            out.append(f"unknown comparator {self.kind!r}")
        if not 0.0 <= self.threshold <= 1.0:
            out.append("threshold out of range [0,1]")
        if not 0.0 <= self.band:
            out.append("band must be non-negative")
        elif self.band > self.threshold:
            out.append("band must not exceed threshold")
        return out


def default_comparator(kind: str) -> ComparatorSpec:
    """Defaults when a relation names only the comparator kind."""
    if kind in ("exact", "normalized-exact"):
        return ComparatorSpec(kind, 1.0, 0.0)
    return ComparatorSpec(kind, 0.6, 0.1)


@dataclass(frozen=True)
class Equivalence:
    """Outputs should stay the same."""


@dataclass(frozen=True)
class Flip:
    """Extracted labels should map through ``label_map``.

    ``label_lexicon`` maps lowercase surface forms found in outputs to labels.
    """

    label_map: Mapping[str, str]
    label_lexicon: Mapping[str, str]

    def problems(self) -> list[str]:
        out = []
        m = self.label_map
        if not m:
            out.append("flip map must be non-empty")
        if any(m.get(v) is None for v in m.values()):
            out.append("flip map must be total over its labels")
        elif any(m[m[k]] != k for k in m):
            out.append("flip map must be an involution")
        if not self.label_lexicon:
            out.append("flip lexicon must be non-empty")
        for form, label in self.label_lexicon.items():
            if form != form.casefold():
                out.append(f"flip lexicon surface form {form!r} must be lowercase")
            if label not in m:
                out.append(f"flip lexicon label {label!r} missing from map")
        return out


@dataclass(frozen=True)
class ExternalCheck:
    """Run a command on each output; pass iff both exit statuses agree.

    ``command`` is a template where ``{output_file}`` is replaced by a path
    holding the output text.
    """

    command: str
    timeout: float = 30.0

    def problems(self) -> list[str]:
        out = []
        if "{output_file}" not in self.command:
            out.append("external command must contain {output_file}")
        if self.timeout <= 0:
            out.append("external timeout must be positive")
        return out


RelationKind = Union[Equivalence, Flip, ExternalCheck]


# -- similarity ---------------------------------------------------------------

_WS = re.compile(r"\s+")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def normalize(text: str) -> str:
    """NFC, case-fold, collapse whitespace runs, strip edge punctuation."""
    text = _WS.sub(" ", unicodedata.normalize("NFC", text).casefold())
    start, end = 0, len(text)
    while start < end and (text[start].isspace() or _is_punct(text[start])):
        start += 1
    while end > start and (text[end - 1].isspace() or _is_punct(text[end - 1])):
        end -= 1
    return text[start:end]


def tokens(text: str) -> list[str]:
    return text.casefold().split()


def token_jaccard(a: str, b: str) -> float:
    sa, sb = set(tokens(a)), set(tokens(b))
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def tf_cosine(a: str, b: str) -> float:
    ca, cb = Counter(tokens(a)), Counter(tokens(b))
    if not ca and not cb:
        return 1.0
    if not ca or not cb:
        return 0.0
    dot = sum(n * cb[t] for t, n in ca.items())
    na = sum(n * n for n in ca.values())
    nb = sum(n * n for n in cb.values())
    # integer products keep self-similarity exactly 1.0
    return min(1.0, dot / math.sqrt(na * nb))


def vector_cosine(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine clamped into [0, 1]; zero vectors compare as 0."""
    if len(u) != len(v):
        raise ValueError("vector dimension mismatch")
    dot = math.fsum(x * y for x, y in zip(u, v))
    nu = math.sqrt(math.fsum(x * x for x in u))
    nv = math.sqrt(math.fsum(y * y for y in v))
    if nu == 0 or nv == 0:
        return 0.0
    return max(0.0, min(1.0, dot / (nu * nv)))


def similarity(a: str, b: str, kind: str) -> float:
    """Similarity in [0, 1] for the lexical comparator kinds."""
    if kind == "exact":
        return 1.0 if a == b else 0.0
    if kind == "normalized-exact":
        return 1.0 if normalize(a) == normalize(b) else 0.0
    if kind == "token-jaccard":
        return token_jaccard(a, b)
    if kind == "tf-cosine":
        return tf_cosine(a, b)
    if kind == "embedding-endpoint":
        raise ValueError("embedding-endpoint similarity needs an embedder; use evaluate()")
    raise ValueError(f"unknown comparator kind {kind!r}")


# -- labels -------------------------------------------------------------------


def _strip_punct(text: str) -> str:
    return "".join(" " if _is_punct(ch) else ch for ch in text)


def extract_label(output: str, label_lexicon: Mapping[str, str]) -> str | None:
    """Label whose surface form occurs earliest in ``output``.

    Returns None (undecidable) when no surface form occurs, or when forms
    for different labels start at the same earliest position.
    """
    clean = _WS.sub(" ", _strip_punct(output.casefold()))
    earliest: int | None = None
    labels: set[str] = set()
    for form, label in label_lexicon.items():
        form = _WS.sub(" ", _strip_punct(form.casefold())).strip()
        if not form:
            continue
        m = re.search(rf"(?<!\w){re.escape(form)}(?!\w)", clean)
        if m is None:
            continue
        if earliest is None or m.start() < earliest:
            earliest, labels = m.start(), {label}
        elif m.start() == earliest:
            labels.add(label)
    if len(labels) != 1:
        return None
    return labels.pop()


# -- verdicts -----------------------------------------------------------------


def evaluate(
    relation: RelationKind,
    comparator: ComparatorSpec,
    source_output: str,
    followup_output: str,
    *,
    pair_id: str = "",
    embedder: Embedder | None = None,
) -> Verdict:
    if isinstance(relation, Equivalence):
        return _evaluate_equivalence(comparator, source_output, followup_output, pair_id, embedder)
    if isinstance(relation, Flip):
        return _evaluate_flip(relation, source_output, followup_output, pair_id)
    if isinstance(relation, ExternalCheck):
        return _evaluate_external(relation, source_output, followup_output, pair_id)
    raise TypeError(f"unsupported relation {relation!r}")


def _evaluate_equivalence(
    comparator: ComparatorSpec, a: str, b: str, pair_id: str, embedder: Embedder | None
) -> Verdict:
    if comparator.kind == "embedding-endpoint":
        if a == b:
            score = 1.0
        elif embedder is None:
            return Verdict(
                pair_id,
                Outcome.INCONCLUSIVE,
                detail="embedding comparator has no endpoint configured",
                inconclusive_reason=InconclusiveReason.SUT_ERROR,
            )
        else:
            try:
                score = vector_cosine(embedder(a), embedder(b))
            except Exception as exc:  # endpoint trouble is never a crash
                return Verdict(
                    pair_id,
                    Outcome.INCONCLUSIVE,
                    detail=f"embedding failed: {exc}",
                    inconclusive_reason=InconclusiveReason.SUT_ERROR,
                )
    else:
        score = similarity(a, b, comparator.kind)
    detail = f"{comparator.kind} similarity {score:.4f} vs threshold {comparator.threshold:g}"
    if score >= comparator.threshold:
        return Verdict(pair_id, Outcome.PASS, score=score, detail=detail)
    if score < comparator.threshold - comparator.band:
        return Verdict(pair_id, Outcome.VIOLATION, score=score, detail=detail)
    return Verdict(
        pair_id,
        Outcome.INCONCLUSIVE,
        score=score,
        detail=detail + f" (within band {comparator.band:g})",
        inconclusive_reason=InconclusiveReason.UNCERTAINTY_BAND,
    )


def _evaluate_flip(relation: Flip, a: str, b: str, pair_id: str) -> Verdict:
    src = extract_label(a, relation.label_lexicon)
    fol = extract_label(b, relation.label_lexicon)
    if src is None or fol is None or src not in relation.label_map:
        return Verdict(
            pair_id,
            Outcome.INCONCLUSIVE,
            detail=f"undecidable label (source={src}, follow-up={fol})",
            inconclusive_reason=InconclusiveReason.UNCERTAINTY_BAND,
        )
    expected = relation.label_map[src]
    detail = f"source {src} -> expected {expected}, got {fol}"
    outcome = Outcome.PASS if fol == expected else Outcome.VIOLATION
    return Verdict(pair_id, outcome, detail=detail)


def run_check(command: str, output: str, timeout: float) -> subprocess.CompletedProcess[str]:
    """Write ``output`` to a temp file and run ``command`` on it."""
    fd, path = tempfile.mkstemp(prefix="mt-output-", suffix=".txt")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(output)
        argv = shlex.split(command.replace("{output_file}", shlex.quote(path)))
        return subprocess.run(argv, capture_output=True, text=True, timeout=timeout, check=False)
    finally:
        os.unlink(path)


def _evaluate_external(relation: ExternalCheck, a: str, b: str, pair_id: str) -> Verdict:
    results = []
    for output in (a, b):
        try:
            results.append(run_check(relation.command, output, relation.timeout))
        except (OSError, ValueError, subprocess.TimeoutExpired) as exc:
            return Verdict(
                pair_id,
                Outcome.INCONCLUSIVE,
                detail=f"external check failed to run: {exc}",
                inconclusive_reason=InconclusiveReason.SUT_ERROR,
            )
    ra, rb = results
    detail = (
        f"exit {ra.returncode} vs {rb.returncode}; "
        f"source stdout={ra.stdout.strip()!r} stderr={ra.stderr.strip()!r}; "
        f"follow-up stdout={rb.stdout.strip()!r} stderr={rb.stderr.strip()!r}"
    )
    outcome = Outcome.PASS if ra.returncode == rb.returncode else Outcome.VIOLATION
    return Verdict(pair_id, outcome, detail=detail)


def relation_problems(relation: RelationKind) -> list[str]:
    if isinstance(relation, Equivalence):
        return []
    return relation.problems()
