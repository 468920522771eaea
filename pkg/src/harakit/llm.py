"""Chat-completion access: a real OpenAI-compatible HTTP backend and a
deterministic fixture-replay mock, behind one client with retries, transcript
logging, and usage accounting.

Every pipeline step talks to the model exclusively through this module; no
step ever sees another step's response except via the persisted artifacts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable

import requests

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class BackendError(Exception):
    """Base class for gateway failures."""


class CredentialError(BackendError):
    """The backend rejected the credential (HTTP 401)."""


class TransientBackendError(BackendError):
    """Timeout / 429 / 5xx; eligible for retry."""


class BackendUnavailable(BackendError):
    """Retries exhausted."""


class TruncatedOutput(BackendError):
    """The model stopped on the token limit; callers may repair."""

    def __init__(self, response: "LlmResponse") -> None:
        super().__init__("completion truncated (finish_reason=length)")
        self.response = response


class FixtureMissing(BackendError):
    """Mock replay found no fixture for the request."""

    def __init__(self, step_id: str, row_key: str | None) -> None:
        super().__init__(f"no fixture for step_id={step_id!r} row_key={row_key!r}")
        self.step_id = step_id
        self.row_key = row_key


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class Message:
    role: Role
    content: str


@dataclass(frozen=True)
class LlmRequest:
    step_id: str
    messages: tuple[Message, ...]
    temperature: float
    max_tokens: int
    row_key: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role is not Role.SYSTEM:
            raise ValueError("first message must have role=system")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class LlmResponse:
    content: str
    finish_reason: FinishReason
    usage: Usage = field(default_factory=Usage)

    def __post_init__(self) -> None:
        if self.finish_reason is FinishReason.STOP and not self.content:
            raise ValueError("content must be present when finish_reason=stop")


@dataclass(frozen=True)
class TranscriptEntry:
    request: LlmRequest
    response: LlmResponse
    wall_time_ms: int
    attempt: int


def transcript_entry_to_dict(entry: TranscriptEntry) -> dict[str, Any]:
    return {
        "request": {
            "step_id": entry.request.step_id,
            "row_key": entry.request.row_key,
            "messages": [
                {"role": m.role.value, "content": m.content} for m in entry.request.messages
            ],
            "temperature": entry.request.temperature,
            "max_tokens": entry.request.max_tokens,
        },
        "response": {
            "content": entry.response.content,
            "finish_reason": entry.response.finish_reason.value,
            "usage": {
                "prompt_tokens": entry.response.usage.prompt_tokens,
                "completion_tokens": entry.response.usage.completion_tokens,
            },
        },
        "wall_time_ms": entry.wall_time_ms,
        "attempt": entry.attempt,
    }


def prompt_fingerprint(messages: Iterable[Message]) -> str:
    """16-hex-char SHA-256 of the whitespace-collapsed rendered prompt."""
    joined = "\n".join(f"{m.role.value}:{m.content}" for m in messages)
    collapsed = " ".join(joined.split())
    return hashlib.sha256(collapsed.encode("utf-8")).hexdigest()[:16]


def _count_tokens(text: str) -> int:
    # Whitespace token count: deterministic and model-free, good enough for
    # replay accounting.
    return len(text.split())


class MockBackend:
    """Deterministic fixture replay.

    Lookup order: `<step_id>.<row_key>.json` (row_key defaults to "default"),
    then `<step_id>.<sha256-prefix-16>.json` keyed by the normalized prompt,
    then FixtureMissing. Fixture files contain {content, finish_reason}.
    """

    name = "mock"

    def __init__(self, fixture_dir: Path | str) -> None:
        self.fixture_dir = Path(fixture_dir)
        if not self.fixture_dir.is_dir():
            raise BackendError(f"fixture directory does not exist: {self.fixture_dir}")
        self.calls = 0

    def send(self, request: LlmRequest) -> LlmResponse:
        self.calls += 1
        key = request.row_key or "default"
        candidates = [
            self.fixture_dir / f"{request.step_id}.{key}.json",
            self.fixture_dir / f"{request.step_id}.{prompt_fingerprint(request.messages)}.json",
        ]
        for path in candidates:
            if path.is_file():
                return self._load(path, request)
        raise FixtureMissing(request.step_id, request.row_key)

    def _load(self, path: Path, request: LlmRequest) -> LlmResponse:
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise BackendError(f"unreadable fixture file {path}: {exc}") from exc
        content = data.get("content", "")
        prompt_tokens = sum(_count_tokens(m.content) for m in request.messages)
        return LlmResponse(
            content=content,
            finish_reason=FinishReason(data.get("finish_reason", "stop")),
            usage=Usage(prompt_tokens=prompt_tokens, completion_tokens=_count_tokens(content)),
        )


class RealBackend:
    """OpenAI-compatible chat-completion endpoint over HTTP."""

    def __init__(
        self,
        base_url: str,
        model: str,
        credential: str,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self._credential = credential
        self.timeout = timeout
        self._session = session or requests.Session()

    @property
    def name(self) -> str:
        return self.model

    def send(self, request: LlmRequest) -> LlmResponse:
        body = {
            "model": self.model,
            "messages": [
                {"role": m.role.value, "content": m.content} for m in request.messages
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        try:
            http = self._session.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers={"Authorization": f"Bearer {self._credential}"},
                timeout=self.timeout,
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientBackendError(str(exc)) from exc
        if http.status_code == 401:
            raise CredentialError("backend rejected the credential (HTTP 401)")
        if http.status_code in RETRYABLE_STATUS:
            raise TransientBackendError(f"HTTP {http.status_code}")
        if http.status_code >= 400:
            raise BackendError(f"HTTP {http.status_code}: {http.text[:200]}")
        try:
            payload = http.json()
            choice = payload["choices"][0]
            content = choice["message"]["content"] or ""
            finish = choice.get("finish_reason", "stop")
            usage = payload.get("usage", {})
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc
        try:
            finish_reason = FinishReason(finish)
        except ValueError:
            finish_reason = FinishReason.ERROR
        return LlmResponse(
            content=content,
            finish_reason=finish_reason,
            usage=Usage(
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            ),
        )


class LlmClient:
    """Retry, transcript, and concurrency policy around a backend.

    Retries only transient failures (timeout / 429 / 5xx), with the attempt
    budget and backoff schedule fixed at construction. Every attempt,
    successful or not, is logged as one TranscriptEntry.
    """

    def __init__(
        self,
        backend: MockBackend | RealBackend,
        *,
        retries: int = 3,
        backoff: tuple[float, ...] = (1.0, 4.0),
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if retries < 1:
            raise ValueError("retries must be >= 1")
        self.backend = backend
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._transcript: list[TranscriptEntry] = []
        self.prompt_tokens_total = 0
        self.completion_tokens_total = 0

    def _log(self, request: LlmRequest, response: LlmResponse, started: float, attempt: int) -> None:
        entry = TranscriptEntry(
            request=request,
            response=response,
            wall_time_ms=int((time.monotonic() - started) * 1000),
            attempt=attempt,
        )
        with self._lock:
            self._transcript.append(entry)
            self.prompt_tokens_total += response.usage.prompt_tokens
            self.completion_tokens_total += response.usage.completion_tokens

    def complete(self, request: LlmRequest) -> LlmResponse:
        with self._gate:
            return self._complete_locked(request)

    def _complete_locked(self, request: LlmRequest) -> LlmResponse:
        error_response = LlmResponse(content="", finish_reason=FinishReason.ERROR)
        for attempt in range(1, self.retries + 1):
            started = time.monotonic()
            try:
                response = self.backend.send(request)
            except TransientBackendError as exc:
                self._log(request, error_response, started, attempt)
                if attempt == self.retries:
                    raise BackendUnavailable(
                        f"{request.step_id}: retries exhausted ({exc})"
                    ) from exc
                self._sleep(self.backoff[min(attempt - 1, len(self.backoff) - 1)])
                continue
            except BackendError:
                self._log(request, error_response, started, attempt)
                raise
            self._log(request, response, started, attempt)
            if response.finish_reason is FinishReason.LENGTH:
                raise TruncatedOutput(response)
            return response
        raise AssertionError("unreachable")

    def drain_transcript(self) -> list[TranscriptEntry]:
        """Return and clear the accumulated transcript entries."""
        with self._lock:
            entries, self._transcript = self._transcript, []
        return entries

    @property
    def transcript_len(self) -> int:
        with self._lock:
            return len(self._transcript)


def sort_transcript(entries: Iterable[TranscriptEntry]) -> list[TranscriptEntry]:
    """Deterministic persistence order regardless of completion interleaving."""
    return sorted(
        entries, key=lambda e: (e.request.step_id, e.request.row_key or "", e.attempt)
    )
