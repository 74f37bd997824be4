"""Run persistence, triage annotations, and human/CI renderings.

Store layout::

    <root>/<run-id>/report.json     canonical report
                    verdicts.jsonl  one verdict per line, pair order
                    pairs.jsonl     one test pair per line
                    triage.jsonl    append-only annotations (created on demand)
                    config.json     resolved configuration, when given
                    runlog.jsonl    one record per SUT call, when given

Run directories are written under a ``.tmp-*`` name and renamed into place;
scans ignore anything starting with a dot.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import uuid
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import (
    Annotation,
    MTError,
    Outcome,
    RunReport,
    TestPair,
    Verdict,
    jsonl_line,
)
from .engine import DriftResult


class StorageError(MTError):
    """The run store could not be read or written."""


class UnknownRunError(MTError):
    """Unknown run or pair id."""


# characters XML 1.0 cannot carry, even escaped
_XML_INVALID = re.compile("[\x00-\x08\x0b\x0c\x0e-\x1f\ufffe\uffff\ud800-\udfff]")
_RUN_ID_RE = re.compile(r"^(\d{8}T\d{6}Z)-(\d{3,})$")


@dataclass(frozen=True)
class TriageRecord:
    run_id: str
    pair_id: str
    annotation: Annotation
    note: str = ""
    annotator: str = ""

    def __post_init__(self) -> None:
        if self.annotation is Annotation.UNREVIEWED:
            raise ValueError("triage must mark a true or false positive")

    def to_dict(self) -> dict[str, str]:
        return {
            "run_id": self.run_id,
            "pair_id": self.pair_id,
            "annotation": self.annotation.value,
            "note": self.note,
            "annotator": self.annotator,
        }


@dataclass
class StoredRun:
    report: RunReport
    verdicts: list[Verdict]
    pairs: list[TestPair]


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


class RunStore:
    def __init__(self, root: str | os.PathLike[str]):
        self.root = Path(root)

    @property
    def index(self) -> dict[str, Path]:
        """run-id -> report path, rebuilt from a directory scan."""
        if not self.root.is_dir():
            return {}
        out = {}
        for entry in sorted(self.root.iterdir()):
            if entry.name.startswith(".") or not (entry / "report.json").is_file():
                continue
            out[entry.name] = entry / "report.json"
        return out

    def run_dir(self, run_id: str) -> Path:
        return self.root / run_id

    def new_run_id(self, now: datetime | None = None) -> str:
        """Timestamp-prefixed id; a numeric suffix keeps same-second ids distinct."""
        now = now or datetime.now(timezone.utc)
        prefix = now.strftime("%Y%m%dT%H%M%SZ")
        suffixes = [
            int(m.group(2))
            for name in (self.index if self.root.is_dir() else {})
            if (m := _RUN_ID_RE.match(name)) and m.group(1) == prefix
        ]
        return f"{prefix}-{max(suffixes, default=0) + 1:03d}"

    def exists(self, run_id: str) -> bool:
        return run_id in self.index

    def load(self, run_id: str) -> StoredRun:
        """Load a run; verdicts carry any triage annotations."""
        if not self.exists(run_id):
            raise UnknownRunError(f"unknown run id {run_id!r}")
        d = self.run_dir(run_id)
        report = RunReport.from_dict(json.loads((d / "report.json").read_text("utf-8")))
        verdicts = [Verdict.from_dict(v) for v in _read_jsonl(d / "verdicts.jsonl")]
        pairs = [TestPair.from_dict(p) for p in _read_jsonl(d / "pairs.jsonl")]
        notes = {t["pair_id"]: Annotation(t["annotation"]) for t in _read_jsonl(d / "triage.jsonl")}
        verdicts = [replace(v, annotation=notes[v.pair_id]) if v.pair_id in notes else v for v in verdicts]
        return StoredRun(report, verdicts, pairs)

    def triage(self, run_id: str) -> list[TriageRecord]:
        rows = _read_jsonl(self.run_dir(run_id) / "triage.jsonl")
        return [
            TriageRecord(r["run_id"], r["pair_id"], Annotation(r["annotation"]), r["note"], r["annotator"])
            for r in rows
        ]


def persist_run(
    store: RunStore,
    report: RunReport,
    verdicts: Sequence[Verdict],
    pairs: Sequence[TestPair],
    *,
    config: Mapping | None = None,
    runlog: str | None = None,
    now: datetime | None = None,
) -> str:
    """Write a run atomically and return its id.

    ``report.run_id`` is used when set; otherwise a fresh id is allocated
    and written into the stored report.
    """
    try:
        store.root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create store {store.root}: {exc}") from None
    run_id = report.run_id or store.new_run_id(now)
    if not re.fullmatch(r"[A-Za-z0-9][A-Za-z0-9._\-]*", run_id):
        raise StorageError(f"invalid run id {run_id!r}")
    if store.run_dir(run_id).exists():
        raise StorageError(f"run {run_id!r} already exists")
    report = replace(report, run_id=run_id)
    tmp = store.root / f".tmp-{uuid.uuid4().hex}"
    try:
        tmp.mkdir()
        _write(tmp / "report.json", report.canonical_json())
        _write(tmp / "verdicts.jsonl", "".join(jsonl_line(v.to_dict()) for v in verdicts))
        _write(tmp / "pairs.jsonl", "".join(jsonl_line(p.to_dict()) for p in pairs))
        if config is not None:
            _write(tmp / "config.json", json.dumps(config, sort_keys=True, indent=2, ensure_ascii=False) + "\n")
        if runlog is not None:
            _write(tmp / "runlog.jsonl", runlog)
        os.rename(tmp, store.run_dir(run_id))
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise StorageError(f"cannot write run {run_id!r}: {exc}") from None
    return run_id


def _write(path: Path, text: str) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def annotate(store: RunStore, record: TriageRecord) -> None:
    """Append a triage record. Each violation can be annotated once."""
    run = store.load(record.run_id)
    verdict = next((v for v in run.verdicts if v.pair_id == record.pair_id), None)
    if verdict is None:
        raise UnknownRunError(f"run {record.run_id!r} has no pair {record.pair_id!r}")
    if verdict.outcome is not Outcome.VIOLATION:
        raise StorageError(f"pair {record.pair_id!r} is a {verdict.outcome.value}, not a violation")
    if verdict.annotation is not Annotation.UNREVIEWED:
        raise StorageError(f"pair {record.pair_id!r} is already annotated")
    path = store.run_dir(record.run_id) / "triage.jsonl"
    # one write() per line; O_APPEND keeps concurrent appends whole
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    try:
        os.write(fd, jsonl_line(record.to_dict()).encode("utf-8"))
    finally:
        os.close(fd)


def tp_rate(verdicts: Iterable[Verdict]) -> float | None:
    """True positives over annotated violations; None when nothing is annotated."""
    tp = fp = 0
    for v in verdicts:
        tp += v.annotation is Annotation.TRUE_POSITIVE
        fp += v.annotation is Annotation.FALSE_POSITIVE
    return tp / (tp + fp) if tp + fp else None


def true_positive_rate(store: RunStore, run_id: str) -> float | None:
    return tp_rate(store.load(run_id).verdicts)


def format_rate(rate: float | None, digits: int = 2) -> str:
    return "n/a" if rate is None else f"{rate:.{digits}f}"


# -- renderings ---------------------------------------------------------------


def render_table(report: RunReport, *, triage: bool = False, tp: float | None = None) -> str:
    """Fixed-width per-MR table, sorted by MR id."""
    width = max([len("relation")] + [len(k) for k in report.per_mr])
    head = f"{'relation':<{width}}  {'pairs':>6}  {'pass':>6}  {'viol':>6}  {'incon':>6}  {'skip':>6}  {'rate':>7}"
    lines = [head, "-" * len(head)]
    for mr_id in sorted(set(report.per_mr) | set(report.skipped)):
        t = report.per_mr.get(mr_id)
        skip = report.skipped.get(mr_id, 0)
        if t is None:
            lines.append(f"{mr_id:<{width}}  {0:>6}  {0:>6}  {0:>6}  {0:>6}  {skip:>6}  {'n/a':>7}")
            continue
        lines.append(
            f"{mr_id:<{width}}  {t.pairs:>6}  {t.passes:>6}  {t.violations:>6}  "
            f"{t.inconclusive:>6}  {skip:>6}  {t.failure_rate:>7.4f}"
        )
    lines.append(f"run {report.run_id or '-'}  model {report.model_id}  config {report.config_hash[:12] or '-'}")
    if triage:
        lines.append(f"true-positive rate {format_rate(tp)}")
    return "\n".join(lines) + "\n"


def render_drift(result: DriftResult) -> str:
    width = max([len("relation")] + [len(d.mr_id) for d in result.deltas])
    lines = [f"{'relation':<{width}}  {'before':>7}  {'after':>7}  {'delta':>8}  flag"]
    for d in result.deltas:
        flag = "FLAGGED" if d.flagged else ""
        lines.append(f"{d.mr_id:<{width}}  {d.rate_before:>7.4f}  {d.rate_after:>7.4f}  {d.delta:>+8.4f}  {flag}".rstrip())
    for mr_id in result.added:
        lines.append(f"added:   {mr_id}")
    for mr_id in result.removed:
        lines.append(f"removed: {mr_id}")
    return "\n".join(lines) + "\n"


def _xml_safe(text: str) -> str:
    return _XML_INVALID.sub("\ufffd", text)


def render_junit(
    report: RunReport, verdicts: Sequence[Verdict], pairs: Sequence[TestPair] | None = None
) -> str:
    """JUnit XML: one testsuite per MR, one testcase per pair.

    Violations become ``<failure>``, inconclusive verdicts ``<skipped>``.
    Without ``pairs`` the MR id is taken from the pair id prefix.
    """
    mr_of = {p.id: p.mr_id for p in pairs} if pairs is not None else {}
    grouped: dict[str, list[Verdict]] = {}
    for v in verdicts:
        mr_id = mr_of.get(v.pair_id) or v.pair_id.split("::", 1)[0]
        grouped.setdefault(mr_id, []).append(v)
    root = ET.Element("testsuites", name=f"metamorphic run {report.run_id}".strip())
    totals = {"tests": 0, "failures": 0, "skipped": 0}
    for mr_id in sorted(grouped):
        cases = grouped[mr_id]
        failures = sum(v.outcome is Outcome.VIOLATION for v in cases)
        skipped = sum(v.outcome is Outcome.INCONCLUSIVE for v in cases)
        suite = ET.SubElement(
            root,
            "testsuite",
            name=mr_id,
            tests=str(len(cases)),
            failures=str(failures),
            errors="0",
            skipped=str(skipped),
        )
        for v in cases:
            case = ET.SubElement(suite, "testcase", name=v.pair_id, classname=mr_id)
            if v.outcome is Outcome.VIOLATION:
                fail = ET.SubElement(case, "failure", message="metamorphic relation violated", type="violation")
                fail.text = _xml_safe(v.detail)
            elif v.outcome is Outcome.INCONCLUSIVE:
                reason = v.inconclusive_reason.value if v.inconclusive_reason else "inconclusive"
                ET.SubElement(case, "skipped", message=_xml_safe(f"{reason}: {v.detail}"))
        totals["tests"] += len(cases)
        totals["failures"] += failures
        totals["skipped"] += skipped
    for k, n in totals.items():
        root.set(k, str(n))
    root.set("errors", "0")
    ET.indent(root)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"
