"""System-under-test access.

Supported SUT kinds:

``http-chat``
    OpenAI-compatible ``/v1/chat/completions`` endpoint.
``subprocess``
    Command that reads the prompt on stdin and writes the answer on stdout.
``mock-scripted``
    Fixed prompt -> answer table.
``mock-faulty``
    Answers by normalized-input lookup, with seeded phrasing sensitivity
    and nondeterminism. With both probabilities at 0 it is a perfect
    invariance oracle for the bundled transforms.
``builtin-function``
    Small deterministic programs (``square``, ``sentiment``, ...) and
    their deliberately broken mutants.

All kinds share the content-addressed response cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shlex
import subprocess
import tempfile
import time
import unicodedata
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from decimal import Decimal
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import requests

from .core import ConfigurationError, MTError
from .transforms import NUMERAL_RE, WORD_RE, default_lexicon

log = logging.getLogger(__name__)

SUT_KINDS = ("http-chat", "subprocess", "mock-scripted", "mock-faulty", "builtin-function")
DEFAULT_CHAT_PATH = "/v1/chat/completions"
DEFAULT_EMBED_PATH = "/v1/embeddings"


class SutError(MTError):
    """The system under test failed to produce an answer."""


@dataclass(frozen=True)
class SutParams:
    temperature: float = 0.0
    max_tokens: int = 256
    request_seed: int | None = 0


@dataclass(frozen=True)
class MockFaultModel:
    """Seeded fault injection for ``mock-faulty``.

    ``phrasing_sensitivity`` is the probability that a follow-up (perturbed)
    query gets a divergent answer; ``nondeterminism`` the probability that
    any query diverges. Decisions come from a keyed hash of
    (seed, text, repetition), never from shared generator state.
    ``strip_phrases`` are removed before lookup, e.g. known distractors.
    """

    phrasing_sensitivity: float = 0.0
    nondeterminism: float = 0.0
    rng_seed: int = 0
    strip_phrases: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for p in (self.phrasing_sensitivity, self.nondeterminism):
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError("fault probabilities must lie in [0, 1]")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigurationError("rng_seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class SutSpec:
    kind: str
    endpoint: str = ""  # URL, command line, or builtin function name
    model_id: str = ""
    params: SutParams = field(default_factory=SutParams)
    timeout_ms: int = 30_000
    retries: int = 2
    backoff_base_ms: int = 200
    path: str = DEFAULT_CHAT_PATH
    auth_env: str | None = None
    table: Mapping[str, str] = field(default_factory=dict)
    fault: MockFaultModel = field(default_factory=MockFaultModel)

    def __post_init__(self) -> None:
        if self.kind not in SUT_KINDS:
            raise ConfigurationError(f"unknown SUT kind {self.kind!r}")
        if self.timeout_ms <= 0:
            raise ConfigurationError("timeout must be positive")
        if not 0 <= self.retries <= 10:
            raise ConfigurationError("retries must be between 0 and 10")
        if self.kind == "builtin-function" and self.endpoint not in BUILTINS:
            raise ConfigurationError(
                f"unknown builtin {self.endpoint!r}; choose from {', '.join(sorted(BUILTINS))}"
            )
        if not self.model_id:
            object.__setattr__(self, "model_id", self.endpoint or self.kind)

    def key_params(self) -> dict[str, Any]:
        """Parameters that influence the answer, as hashed into cache keys."""
        out: dict[str, Any] = {"kind": self.kind, **asdict(self.params)}
        if self.kind == "mock-faulty":
            out["fault"] = asdict(self.fault)
        if self.kind == "mock-scripted":
            out["table"] = dict(sorted(self.table.items()))
        if self.kind in ("subprocess", "builtin-function"):
            out["endpoint"] = self.endpoint
        return out

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["table"] = dict(self.table)
        d["fault"]["strip_phrases"] = list(self.fault.strip_phrases)
        return d


@dataclass(frozen=True)
class Execution:
    prompt: str
    output: str
    model_id: str
    repetition: int
    latency_ms: float
    cache_hit: bool


# -- cache --------------------------------------------------------------------


def cache_key(model_id: str, prompt: str, params: Mapping[str, Any], repetition: int) -> str:
    blob = json.dumps(
        {"model": model_id, "prompt": prompt, "params": params, "repetition": repetition},
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only, content-addressed store: ``<root>/<key[:2]>/<key>.json``.

    Writes go to a temp file and are renamed into place, so concurrent
    writers never expose partial entries. Existing entries are never
    rewritten.
    """

    def __init__(self, root: str | os.PathLike[str]):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        try:
            entry = json.loads(self.path(key).read_text("utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError) as exc:
            log.warning("ignoring unreadable cache entry %s: %s", key, exc)
            return None
        return entry.get("response")

    def put(self, key: str, request: Mapping[str, Any], response: Mapping[str, Any]) -> None:
        target = self.path(key)
        if target.exists():
            return
        target.parent.mkdir(parents=True, exist_ok=True)
        entry = {
            "key": key,
            "request": request,
            "response": response,
            "created-at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(entry, fh, sort_keys=True, ensure_ascii=False)
            fh.write("\n")
        os.replace(tmp, target)


# -- builtin programs -----------------------------------------------------------


def _numeral(text: str) -> int | Decimal:
    text = text.strip()
    if NUMERAL_RE.fullmatch(text) is None:
        raise SutError(f"not a decimal numeral: {text[:40]!r}")
    # exact integer arithmetic for integer inputs
    return Decimal(text) if "." in text else int(text)


def square(text: str) -> str:
    x = _numeral(text)
    return str(x * x) if isinstance(x, int) else format(x * x, "f")


def square_mutant(text: str) -> str:
    """x * |x|: agrees with square on non-negative inputs only."""
    x = _numeral(text)
    return str(x * abs(x)) if isinstance(x, int) else format(x * abs(x), "f")


POSITIVE_WORDS = frozenset(
    "good great excellent wonderful amazing love loved enjoyable fantastic brilliant "
    "superb delightful fun best perfect nice pleasant beautiful outstanding charming "
    "moving gripping impressive".split()
)
NEGATIVE_WORDS = frozenset(
    "bad terrible awful horrible boring hate hated poor worst dull disappointing "
    "mediocre ugly annoying weak waste tedious bland clumsy messy".split()
)
NEGATORS = frozenset("not no never hardly without nothing none".split())
NEGATION_WINDOW = 3


def _is_negator(tok: str) -> bool:
    return tok in NEGATORS or tok.endswith("n't") or tok.endswith("n’t")


def sentiment_score(text: str, negation: bool = True) -> int:
    """Lexicon polarity sum.

    A negator flips the next polar word within three tokens. A negated
    "true" ("that is not true") reverses everything said before it.
    With ``negation=False`` negators are ignored entirely.
    """
    score = 0
    window = 0
    for m in WORD_RE.finditer(text.casefold()):
        tok = m.group()
        if negation and _is_negator(tok):
            window = NEGATION_WINDOW
            continue
        polarity = (tok in POSITIVE_WORDS) - (tok in NEGATIVE_WORDS)
        if tok == "true" and window:
            score, window = -score, 0
        elif polarity:
            score += -polarity if window else polarity
            window = 0
        elif window:
            window -= 1
    return score


def _label(score: int) -> str:
    return "positive" if score > 0 else "negative" if score < 0 else "neutral"


def sentiment(text: str) -> str:
    return _label(sentiment_score(text))


def sentiment_ignore_negation(text: str) -> str:
    return _label(sentiment_score(text, negation=False))


_KIN_RE = re.compile(r"(\w+) is the (?:mother|father|parent) of (\w+)")
_QUESTION_RE = re.compile(r"Relation of (.+) to (.+?):?\s*$")


def kinship(prompt: str) -> str:
    """Answer "parent"/"child" for the relation of entity A to entity B.

    Expects the ``relation`` prompt template: the text, then a line
    ``Relation of A to B:``.
    """
    lines = prompt.rstrip("\n").split("\n")
    q = _QUESTION_RE.match(lines[-1]) if len(lines) > 1 else None
    fact = _KIN_RE.search("\n".join(lines[:-1]))
    if q is None or fact is None:
        return "unknown"
    a, b = q.group(1).strip(), q.group(2).strip()
    parent, child = fact.groups()
    if (a, b) == (parent, child):
        return "parent"
    if (a, b) == (child, parent):
        return "child"
    return "unknown"


BUILTINS: dict[str, Callable[[str], str]] = {
    "square": square,
    "square-mutant": square_mutant,
    "sentiment": sentiment,
    "sentiment-ignore-negation": sentiment_ignore_negation,
    "kinship": kinship,
}


def builtin_function_eval(name: str, input_text: str, repetition: int = 0) -> Execution:
    func = BUILTINS.get(name)
    if func is None:
        raise ConfigurationError(f"unknown builtin {name!r}")
    start = time.perf_counter()
    output = func(input_text)
    return Execution(input_text, output, name, repetition, _ms(start), False)


# -- mock models -----------------------------------------------------------------


@lru_cache(maxsize=1)
def _synonym_classes() -> dict[str, str]:
    """Sorted-letters key of each lexicon word -> representative of its class."""
    parent: dict[str, str] = {}

    def find(w: str) -> str:
        while parent.setdefault(w, w) != w:
            w = parent[w]
        return w

    for word, syn in default_lexicon().items():
        ra, rb = find(word), find(syn.casefold())
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return {"".join(sorted(w)): find(w) for w in parent}


def normalized_key(text: str, strip_phrases: Sequence[str] = ()) -> str:
    """Lookup key invariant under the bundled invariance transforms.

    Case, punctuation, listed distractor phrases, lexicon synonyms and
    within-word letter order are all erased.
    """
    text = unicodedata.normalize("NFC", text).casefold()
    for phrase in strip_phrases:
        text = text.replace(phrase.casefold(), " ")
    text = "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in text)
    classes = _synonym_classes()
    words = []
    for word in text.split():
        letters = "".join(sorted(word))
        words.append(classes.get(letters, letters))
    return " ".join(words)


def _unit(seed: int, *parts: str) -> float:
    """Keyed hash of ``parts`` mapped to [0, 1)."""
    h = hashlib.blake2b(key=seed.to_bytes(8, "big"), digest_size=8)
    h.update("\x00".join(parts).encode("utf-8"))
    return int.from_bytes(h.digest(), "big") / 2**64


def mock_faulty_answer(
    fault: MockFaultModel, text: str, repetition: int, perturbed: bool
) -> str:
    key = normalized_key(text, fault.strip_phrases)
    answer = "answer-" + hashlib.sha256(key.encode("utf-8")).hexdigest()[:12]
    rep = str(repetition)
    if perturbed and _unit(fault.rng_seed, "phrasing", text, rep) < fault.phrasing_sensitivity:
        return answer + "-divergent"
    if _unit(fault.rng_seed, "nondeterminism", text, rep) < fault.nondeterminism:
        return answer + "-noise-" + rep
    return answer


# -- query ------------------------------------------------------------------------


def _ms(start: float) -> float:
    return round((time.perf_counter() - start) * 1000.0, 3)


class _Transient(SutError):
    pass


def _http_chat(sut: SutSpec, prompt: str) -> dict[str, Any]:
    payload: dict[str, Any] = {
        "model": sut.model_id,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": sut.params.temperature,
        "max_tokens": sut.params.max_tokens,
    }
    if sut.params.request_seed is not None:
        payload["seed"] = sut.params.request_seed
    body = _post(sut, sut.path, payload)
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise SutError(f"malformed chat response: {json.dumps(body)[:200]}") from None
    if not isinstance(content, str):
        raise SutError(f"malformed chat response: {json.dumps(body)[:200]}")
    response: dict[str, Any] = {"output": content}
    if isinstance(body, dict) and "usage" in body:
        response["usage"] = body["usage"]
    return response


def _post(sut: SutSpec, path: str, payload: Mapping[str, Any]) -> Any:
    headers = {"Content-Type": "application/json"}
    if sut.auth_env:
        token = os.environ.get(sut.auth_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
    url = sut.endpoint.rstrip("/") + path
    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=sut.timeout_ms / 1000)
    except (requests.ConnectionError, requests.Timeout) as exc:
        raise _Transient(f"request to {url} failed: {exc}") from None
    except requests.RequestException as exc:
        raise SutError(f"request to {url} failed: {exc}") from None
    if resp.status_code == 429 or resp.status_code >= 500:
        raise _Transient(f"HTTP {resp.status_code} from {url}")
    if resp.status_code >= 400:
        raise SutError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
    try:
        return resp.json()
    except ValueError:
        raise SutError(f"malformed response (not JSON): {resp.text[:200]!r}") from None


def _subprocess(sut: SutSpec, prompt: str) -> dict[str, Any]:
    try:
        proc = subprocess.run(
            shlex.split(sut.endpoint),
            input=prompt,
            capture_output=True,
            text=True,
            timeout=sut.timeout_ms / 1000,
            check=False,
        )
    except subprocess.TimeoutExpired:
        raise _Transient(f"subprocess timed out after {sut.timeout_ms} ms") from None
    except OSError as exc:
        raise SutError(f"cannot run {sut.endpoint!r}: {exc}") from None
    if proc.returncode != 0:
        raise SutError(f"subprocess exited {proc.returncode}: {proc.stderr.strip()[:200]}")
    return {"output": proc.stdout.rstrip("\n")}


def _answer(sut: SutSpec, prompt: str, repetition: int, perturbed: bool) -> dict[str, Any]:
    if sut.kind == "http-chat":
        return _http_chat(sut, prompt)
    if sut.kind == "subprocess":
        return _subprocess(sut, prompt)
    if sut.kind == "mock-scripted":
        if prompt not in sut.table:
            raise SutError(f"no scripted response for prompt {prompt[:40]!r}")
        return {"output": sut.table[prompt]}
    if sut.kind == "mock-faulty":
        return {"output": mock_faulty_answer(sut.fault, prompt, repetition, perturbed)}
    return {"output": BUILTINS[sut.endpoint](prompt)}


def query(
    sut: SutSpec,
    prompt: str,
    repetition: int = 0,
    *,
    cache: ResponseCache | None = None,
    offline: bool = False,
    perturbed: bool = False,
    sleep: Callable[[float], None] = time.sleep,
) -> Execution:
    """Ask the SUT once, consulting the cache first.

    ``perturbed`` marks follow-up inputs; only the fault-injection mock
    looks at it. Transient failures are retried ``sut.retries`` times with
    exponential backoff. Raises :class:`SutError` when no answer is had.
    """
    if not prompt:
        raise SutError("empty prompt")
    start = time.perf_counter()
    params = sut.key_params()
    if sut.kind == "mock-faulty":
        params["perturbed"] = perturbed  # the mock answers differently for follow-ups
    key = cache_key(sut.model_id, prompt, params, repetition)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None and isinstance(hit.get("output"), str):
            return Execution(prompt, hit["output"], sut.model_id, repetition, _ms(start), True)
    if offline and sut.kind == "http-chat":
        raise SutError("offline: no cached response")
    attempt = 0
    while True:
        try:
            response = _answer(sut, prompt, repetition, perturbed)
            break
        except _Transient as exc:
            if attempt >= sut.retries:
                raise SutError(f"{exc} (after {attempt + 1} attempts)") from None
            sleep(sut.backoff_base_ms * 2**attempt / 1000)
            attempt += 1
        except SutError:
            raise
        except Exception as exc:
            raise SutError(f"{type(exc).__name__}: {exc}") from None
    if cache is not None:
        request = {"model": sut.model_id, "prompt": prompt, "params": params, "repetition": repetition}
        cache.put(key, request, response)
    return Execution(prompt, response["output"], sut.model_id, repetition, _ms(start), False)


# -- embeddings ---------------------------------------------------------------------


class Embedder:
    """Embedding client for the ``embedding-endpoint`` comparator.

    Vectors are cached under the same key scheme as chat answers, so a warm
    cache returns bitwise-identical vectors. The first vector fixes the
    dimension for the lifetime of the embedder.
    """

    def __init__(
        self,
        sut: SutSpec,
        cache: ResponseCache | None = None,
        offline: bool = False,
        path: str = DEFAULT_EMBED_PATH,
    ):
        if sut.kind != "http-chat":
            raise ConfigurationError(f"SUT kind {sut.kind!r} does not serve embeddings")
        self.sut = sut
        self.cache = cache
        self.offline = offline
        self.path = path
        self.dimension: int | None = None

    def __call__(self, text: str) -> list[float]:
        return self.embed(text)

    def embed(self, text: str) -> list[float]:
        params = {"op": "embeddings", "path": self.path}
        key = cache_key(self.sut.model_id, text, params, 0)
        vector = None
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                vector = hit.get("embedding")
        if vector is None:
            if self.offline:
                raise SutError("embedding unavailable offline")
            vector = self._fetch(text)
            if self.cache is not None:
                self.cache.put(key, {"model": self.sut.model_id, "input": text, "params": params}, {"embedding": vector})
        if self.dimension is None:
            self.dimension = len(vector)
        elif len(vector) != self.dimension:
            raise ConfigurationError(
                f"embedding dimension changed from {self.dimension} to {len(vector)}"
            )
        return vector

    def _fetch(self, text: str) -> list[float]:
        attempt = 0
        while True:
            try:
                body = _post(self.sut, self.path, {"model": self.sut.model_id, "input": text})
                break
            except _Transient as exc:
                if attempt >= self.sut.retries:
                    raise SutError(str(exc)) from None
                time.sleep(self.sut.backoff_base_ms * 2**attempt / 1000)
                attempt += 1
        try:
            vector = [float(x) for x in body["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError, ValueError):
            raise SutError(f"malformed embedding response: {json.dumps(body)[:200]}") from None
        if not vector:
            raise SutError("empty embedding vector")
        return vector


def embed(sut: SutSpec, text: str, cache: ResponseCache | None = None, offline: bool = False) -> list[float]:
    return Embedder(sut, cache, offline).embed(text)
