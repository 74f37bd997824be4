"""Run configuration: TOML file + command-line overrides -> resolved plan.

A config file looks like::

    suite = "suite.jsonl"
    mrs = "relations.mrs"
    seed = 0
    workers = 4
    cache_dir = ".mtcache"
    store_dir = "runs"
    epsilon = 0.05

    [sut]
    kind = "http-chat"
    endpoint = "http://127.0.0.1:8000"
    model = "llama3"
    auth_env = "OPENAI_API_KEY"

    [embedding]            # optional, for the embedding-endpoint comparator
    endpoint = "http://127.0.0.1:8000"
    model = "bge-small"

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adapters import MockFaultModel, SutParams, SutSpec
from .core import ConfigurationError, SourceInput, canonical_json, check_unique_ids
from .mrspec import MrSpecDoc, load as load_mrs, serialize

_SUT_KEYS = {
    "kind", "endpoint", "model", "temperature", "max_tokens", "seed", "timeout_ms",
    "retries", "backoff_ms", "auth_env", "path", "table", "fault",
}


@dataclass
class CliConfig:
    suite_path: Path | None = None
    mrs_path: Path | None = None
    sut: dict[str, Any] = field(default_factory=dict)
    embedding: dict[str, Any] | None = None
    cache_dir: Path | None = None
    store_dir: Path = Path("runs")
    seed: int = 0
    workers: int = 1
    offline: bool = False
    epsilon: float = 0.05
    formats: tuple[str, ...] = ("table",)

    def resolved(self) -> dict[str, Any]:
        """Every setting, JSON-ready; echoed into each run directory."""
        return {
            "suite": str(self.suite_path) if self.suite_path else None,
            "mrs": str(self.mrs_path) if self.mrs_path else None,
            "sut": self.sut,
            "embedding": self.embedding,
            "cache_dir": str(self.cache_dir) if self.cache_dir else None,
            "store_dir": str(self.store_dir),
            "seed": self.seed,
            "workers": self.workers,
            "offline": self.offline,
            "epsilon": self.epsilon,
            "formats": list(self.formats),
        }


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> CliConfig:
    """Read a TOML config (if any) and apply non-None ``overrides``; flags win."""
    raw: dict[str, Any] = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text("utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        base = path.parent
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    known = {"suite", "mrs", "sut", "embedding", "cache_dir", "store_dir", "seed", "workers", "offline", "epsilon", "formats"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")

    def p(key: str) -> Path | None:
        value = raw.get(key)
        if value is None:
            return None
        value = Path(value)
        return value if value.is_absolute() else base / value

    sut = dict(raw.get("sut", {}))
    bad = sorted(set(sut) - _SUT_KEYS)
    if bad:
        raise ConfigurationError(f"unknown [sut] keys: {', '.join(bad)}")
    formats = raw.get("formats", ["table"])
    if isinstance(formats, str):
        formats = [f.strip() for f in formats.split(",") if f.strip()]
    cfg = CliConfig(
        suite_path=p("suite"),
        mrs_path=p("mrs"),
        sut=sut,
        embedding=raw.get("embedding"),
        cache_dir=p("cache_dir"),
        store_dir=p("store_dir") or Path("runs"),
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 1)),
        offline=bool(raw.get("offline", False)),
        epsilon=float(raw.get("epsilon", 0.05)),
        formats=tuple(formats),
    )
    if cfg.workers < 1:
        raise ConfigurationError("workers must be at least 1")
    if cfg.epsilon < 0:
        raise ConfigurationError("epsilon must be non-negative")
    return cfg


def sut_from_dict(d: Mapping[str, Any]) -> SutSpec:
    if "kind" not in d:
        raise ConfigurationError("[sut] needs a kind")
    fault = d.get("fault", {})
    try:
        return SutSpec(
            kind=d["kind"],
            endpoint=str(d.get("endpoint", "")),
            model_id=str(d.get("model", "")),
            params=SutParams(
                temperature=float(d.get("temperature", 0.0)),
                max_tokens=int(d.get("max_tokens", 256)),
                request_seed=d.get("seed", 0),
            ),
            timeout_ms=int(d.get("timeout_ms", 30_000)),
            retries=int(d.get("retries", 2)),
            backoff_base_ms=int(d.get("backoff_ms", 200)),
            path=str(d.get("path", "/v1/chat/completions")),
            auth_env=d.get("auth_env"),
            table=dict(d.get("table", {})),
            fault=MockFaultModel(
                phrasing_sensitivity=float(fault.get("phrasing_sensitivity", 0.0)),
                nondeterminism=float(fault.get("nondeterminism", 0.0)),
                rng_seed=int(fault.get("seed", 0)),
                strip_phrases=tuple(fault.get("strip_phrases", ())),
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[sut]: {exc}") from None


def load_suite(path: str | Path) -> list[SourceInput]:
    """Read a JSONL suite: one SourceInput object per line."""
    items = []
    try:
        lines = Path(path).read_text("utf-8").splitlines()
    except FileNotFoundError:
        raise ConfigurationError(f"suite file not found: {path}") from None
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            items.append(SourceInput.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"{path}:{n}: {exc}") from None
    check_unique_ids(items)
    return items


def suite_digest(suite: list[SourceInput]) -> str:
    blob = "".join(canonical_json(item.to_dict()) for item in suite)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def config_hash(cfg: CliConfig, suite: list[SourceInput], doc: MrSpecDoc) -> str:
    """Hash of what determines results: suite, relations, SUT and seed.

    Worker count, offline mode, paths and output formats are excluded:
    they change how a run executes, not what it computes.
    """
    sut = {k: v for k, v in cfg.sut.items() if k != "auth_env"}
    payload = {
        "suite": suite_digest(suite),
        "relations": hashlib.sha256(serialize(doc).encode("utf-8")).hexdigest(),
        "sut": sut,
        "embedding": cfg.embedding,
        "seed": cfg.seed,
    }
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def load_relations(path: Path | None) -> MrSpecDoc:
    if path is None:
        raise ConfigurationError("no relation file (mrs) configured")
    try:
        return load_mrs(str(path))
    except FileNotFoundError:
        raise ConfigurationError(f"relation file not found: {path}") from None
