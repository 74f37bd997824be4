"""Metamorphic testing harness for language-model systems."""

from __future__ import annotations

from .core import (
    Aggregation,
    MetamorphicRelation,
    Outcome,
    RunReport,
    SourceInput,
    TaskKind,
    TestPair,
    Verdict,
)

__version__ = "0.1.0"

__all__ = [
    "Aggregation",
    "MetamorphicRelation",
    "Outcome",
    "RunReport",
    "SourceInput",
    "TaskKind",
    "TestPair",
    "Verdict",
]
