"""Pluggable text-generation backends.

Two implementations of the same surface: an HTTP client speaking the
OpenAI-compatible chat-completions protocol, and a scripted mock whose
outputs are a pure function of (script digest, seed, request sequence).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import requests

from .errors import (
    BadResponseError,
    EmptyCompletionError,
    LanceError,
    PartialFailureError,
    RateLimitedError,
    SchemaError,
    TransportError,
)

log = logging.getLogger(__name__)

TEMPLATE_IDS = ("review", "better_instruction", "worse_response", "response")
MAX_TOKENS_CEILING = 8192
API_KEY_ENV = "LANCE_API_KEY"


@dataclass(frozen=True)
class PromptSpec:
    """One fully rendered request: template identity plus decoding knobs."""

    template_id: str
    system_text: str
    user_text: str
    temperature: float
    max_tokens: int
    stop: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.template_id not in TEMPLATE_IDS:
            raise ValueError(f"unknown template id {self.template_id!r}")
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if not 0 < self.max_tokens <= MAX_TOKENS_CEILING:
            raise ValueError(f"max_tokens must be in 1..{MAX_TOKENS_CEILING}")


@dataclass(frozen=True)
class BackendFingerprint:
    kind: str
    identity: str

    def __post_init__(self):
        if not self.identity:
            raise ValueError("fingerprint identity must be non-empty")

    def __str__(self) -> str:
        return f"{self.kind}:{self.identity}"


class Backend:
    """Shared surface; concrete backends override completion primitives."""

    @property
    def fingerprint(self) -> BackendFingerprint:
        raise NotImplementedError

    def complete(self, spec: PromptSpec) -> str:
        raise NotImplementedError

    def sample_k(self, spec: PromptSpec, k: int) -> list[str]:
        """Exactly k completions, in deterministic submission order.

        One failed sample aborts the whole call; the error names its index.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        results: list[str] = []
        for index in range(k):
            try:
                results.append(self.complete(spec))
            except LanceError as exc:
                raise PartialFailureError(index, exc) from exc
        return results


def _finalize(raw: str) -> str:
    # Zero-length payloads are an error; whitespace-only payloads survive
    # trailing-trim and are left for the callers' own empty handling.
    if raw == "":
        raise EmptyCompletionError("backend returned an empty completion")
    return raw.rstrip()


# ---------------------------------------------------------------------------
# scripted mock


class MockBackend(Backend):
    """Deterministic lookup backend driven by a JSON script.

    Each script entry provides a response pool for a (template, selector)
    key.  A request is served by the matching entry with the longest
    selector contained in the prompt's user text; the pool is consumed as
    an endless stream of seeded shuffles, so for a fixed (script, seed)
    the mapping from request sequence to responses is total and pure.
    """

    def __init__(self, script: dict, seed: int, script_digest: str):
        self._seed = seed
        self._digest = script_digest
        self._entries: list[tuple[str, str, list[str]]] = []
        entries = script.get("entries")
        if not isinstance(entries, list) or not entries:
            raise SchemaError("mock script must contain a non-empty 'entries' list")
        for pos, entry in enumerate(entries):
            if not isinstance(entry, dict):
                raise SchemaError("entry is not an object", line=pos)
            template = entry.get("template")
            if template not in TEMPLATE_IDS:
                raise SchemaError(f"unknown template {template!r}", line=pos, field="template")
            match = entry.get("match", "")
            if not isinstance(match, str):
                raise SchemaError("selector must be a string", line=pos, field="match")
            responses = entry.get("responses")
            if not isinstance(responses, list) or not responses or not all(isinstance(r, str) for r in responses):
                raise SchemaError("responses must be a non-empty list of strings", line=pos, field="responses")
            extra = set(entry) - {"template", "match", "responses"}
            if extra:
                raise SchemaError(f"unknown fields {sorted(extra)}", line=pos)
            self._entries.append((template, match, responses))
        self._counters = [0] * len(self._entries)
        self._lock = threading.Lock()

    @property
    def fingerprint(self) -> BackendFingerprint:
        return BackendFingerprint("mock", f"{self._digest[:16]}:{self._seed}")

    def _match(self, spec: PromptSpec) -> int:
        best = -1
        best_len = -1
        for pos, (template, selector, _) in enumerate(self._entries):
            if template != spec.template_id:
                continue
            if selector in ("", "*") :
                if best_len < 0:
                    best, best_len = pos, 0
            elif selector in spec.user_text and len(selector) > best_len:
                best, best_len = pos, len(selector)
        if best < 0:
            raise BadResponseError(
                f"mock script has no entry for template {spec.template_id!r} matching this prompt"
            )
        return best

    def _draw(self, entry_pos: int) -> str:
        with self._lock:
            counter = self._counters[entry_pos]
            self._counters[entry_pos] += 1
        pool = self._entries[entry_pos][2]
        epoch, offset = divmod(counter, len(pool))
        order = list(range(len(pool)))
        random.Random(f"{self._digest}:{self._seed}:{entry_pos}:{epoch}").shuffle(order)
        return pool[order[offset]]

    def complete(self, spec: PromptSpec) -> str:
        return _finalize(self._draw(self._match(spec)))


def load_mock(script_path: str | os.PathLike, seed: int) -> MockBackend:
    """Load a mock script; the fingerprint covers both digest and seed."""
    with open(script_path, "rb") as fh:
        blob = fh.read()
    digest = hashlib.sha256(blob).hexdigest()
    try:
        script = json.loads(blob.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"mock script is not valid JSON: {exc}") from exc
    if not isinstance(script, dict):
        raise SchemaError("mock script must be a JSON object")
    return MockBackend(script, seed, digest)


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP client


class HttpBackend(Backend):
    """Chat-completions client with retry, backoff, and bounded fan-out.

    sample_k dispatches k single-completion requests under the in-flight
    bound and reassembles results into submission order, so callers see
    sequential semantics regardless of arrival order.  429 and transport
    failures retry with exponential backoff; malformed payloads do not.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key: str | None = None,
        max_attempts: int = 3,
        base_delay: float = 0.5,
        in_flight: int = 4,
        timeout: float = 30.0,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if in_flight < 1:
            raise ValueError("in_flight must be >= 1")
        self._url = base_url.rstrip("/") + "/v1/chat/completions"
        self._base_url = base_url
        self._model = model
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._max_attempts = max_attempts
        self._base_delay = base_delay
        self._in_flight = in_flight
        self._timeout = timeout
        self._local = threading.local()
        self._lock = threading.Lock()
        self._seq = 0
        self.stats = {"requests": 0, "retries": 0}

    @property
    def fingerprint(self) -> BackendFingerprint:
        return BackendFingerprint("http", f"{self._base_url} {self._model}")

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            self._local.session = session
        return session

    def _next_seq(self) -> int:
        with self._lock:
            seq = self._seq
            self._seq += 1
            self.stats["requests"] += 1
            return seq

    def _payload(self, spec: PromptSpec) -> dict:
        payload = {
            "model": self._model,
            "messages": [
                {"role": "system", "content": spec.system_text},
                {"role": "user", "content": spec.user_text},
            ],
            "temperature": spec.temperature,
            "max_tokens": spec.max_tokens,
            "n": 1,
        }
        if spec.stop:
            payload["stop"] = list(spec.stop)
        return payload

    def _request(self, spec: PromptSpec) -> str:
        seq = self._next_seq()
        headers = {"X-Lance-Request": str(seq)}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        attempts: list[str] = []
        last_error: Exception | None = None
        for attempt in range(self._max_attempts):
            if attempt > 0:
                with self._lock:
                    self.stats["retries"] += 1
                time.sleep(self._base_delay * (2 ** (attempt - 1)))
            try:
                response = self._session().post(
                    self._url, json=self._payload(spec), headers=headers, timeout=self._timeout
                )
            except requests.exceptions.RequestException as exc:
                attempts.append(f"#{attempt + 1} {type(exc).__name__}")
                last_error = TransportError(str(exc))
                continue
            if response.status_code == 429:
                attempts.append(f"#{attempt + 1} 429")
                last_error = RateLimitedError("rate limited")
                continue
            if response.status_code >= 500:
                attempts.append(f"#{attempt + 1} {response.status_code}")
                last_error = TransportError(f"server error {response.status_code}")
                continue
            if response.status_code != 200:
                raise BadResponseError(f"unexpected status {response.status_code}: {response.text[:200]}")
            try:
                content = response.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BadResponseError(f"malformed completion payload: {exc}") from exc
            if not isinstance(content, str):
                raise BadResponseError("completion content is not a string")
            return _finalize(content)
        if isinstance(last_error, RateLimitedError):
            raise RateLimitedError("rate limited after all attempts", attempts=attempts)
        raise TransportError("request failed after all attempts", attempts=attempts)

    def complete(self, spec: PromptSpec) -> str:
        return self._request(spec)

    def sample_k(self, spec: PromptSpec, k: int) -> list[str]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if k == 1:
            return [self._request(spec)]
        with ThreadPoolExecutor(max_workers=self._in_flight) as pool:
            futures = [pool.submit(self._request, spec) for _ in range(k)]
            results: list[str] = []
            for index, future in enumerate(futures):
                try:
                    results.append(future.result())
                except Exception as exc:
                    for other in futures:
                        other.cancel()
                    raise PartialFailureError(index, exc) from exc
        return results
