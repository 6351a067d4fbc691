"""Text-generation backends: a scripted offline mock and an OpenAI-compatible HTTP client."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class BackendUnavailable(BackendError):
    """Raised once the HTTP client has exhausted its retries."""


class FixtureMiss(BackendError):
    """Raised by the mock backend when a request has no scripted response."""


@dataclass(frozen=True)
class GenRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.7
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be nonempty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class GenResponse:
    text: str
    backend_id: str
    latency_ms: int = 0
    token_counts: tuple[int, int] = (0, 0)


def fingerprint(req: GenRequest) -> str:
    """Content hash of (system prompt, user prompt, seed). Temperature is deliberately excluded."""
    payload = json.dumps([req.system_prompt, req.user_prompt, req.seed], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Backend(Protocol):
    backend_id: str

    def generate(self, req: GenRequest) -> GenResponse: ...


class FallbackPolicy(str, enum.Enum):
    ERROR = "error"
    ECHO = "echo"


@dataclass
class ScriptedFixture:
    responses: dict[str, str] = field(default_factory=dict)
    fallback: FallbackPolicy = FallbackPolicy.ERROR

    def add(self, req: GenRequest, text: str) -> None:
        self.responses[fingerprint(req)] = text

    def merge(self, other: "ScriptedFixture") -> None:
        self.responses.update(other.responses)

    @classmethod
    def load(cls, path: str | Path, fallback: FallbackPolicy = FallbackPolicy.ERROR) -> "ScriptedFixture":
        responses: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                responses[row["fingerprint"]] = row["response"]
        return cls(responses, FallbackPolicy(fallback))

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for fp in sorted(self.responses):
                fh.write(json.dumps({"fingerprint": fp, "response": self.responses[fp]}, ensure_ascii=False))
                fh.write("\n")


class MockBackend:
    """Deterministic fixture lookup. A pure function of (request, fixture)."""

    backend_id = "mock"

    def __init__(self, fixture: ScriptedFixture | None = None) -> None:
        self.fixture = fixture or ScriptedFixture()
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return self._calls

    def generate(self, req: GenRequest) -> GenResponse:
        with self._lock:
            self._calls += 1
        fp = fingerprint(req)
        text = self.fixture.responses.get(fp)
        if text is None:
            if self.fixture.fallback is FallbackPolicy.ECHO:
                text = req.user_prompt
            else:
                raise FixtureMiss(f"no fixture for request {fp[:12]}")
        return GenResponse(text=text, backend_id=self.backend_id, latency_ms=0, token_counts=(0, 0))


_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class HttpBackend:
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint.

    Base URL and key come from ``SAVER_API_BASE`` / ``SAVER_API_KEY`` unless
    passed explicitly. 429, 5xx and timeouts are retried with exponential
    backoff; anything else fails immediately.
    """

    def __init__(
        self,
        model: str,
        api_base: str | None = None,
        api_key: str | None = None,
        retries: int = 3,
        backoff: Sequence[float] = (0.5, 1.0, 2.0),
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        base = api_base or os.environ.get("SAVER_API_BASE", "")
        if not base:
            raise BackendError("SAVER_API_BASE is not set")
        self.model = model
        self.url = base.rstrip("/") + "/chat/completions"
        self.api_key = api_key if api_key is not None else os.environ.get("SAVER_API_KEY", "")
        self.retries = retries
        self.backoff = tuple(backoff)
        self.backend_id = f"http:{model}"
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _payload(self, req: GenRequest) -> dict:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            body["seed"] = req.seed
        return body

    def generate(self, req: GenRequest) -> GenResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                delay = self.backoff[min(attempt - 1, len(self.backoff) - 1)]
                log.warning("retrying %s in %.1fs (attempt %d): %s", self.url, delay, attempt, last)
                self._sleep(delay)
            t0 = time.monotonic()
            try:
                resp = self._client.post(self.url, json=self._payload(req), headers=headers)
            except httpx.TimeoutException as exc:
                last = exc
                continue
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code in _RETRYABLE_STATUS:
                last = BackendError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            data = resp.json()
            try:
                text = data["choices"][0]["message"]["content"] or ""
            except (KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed completion payload: {exc}") from exc
            usage = data.get("usage") or {}
            return GenResponse(
                text=text,
                backend_id=self.backend_id,
                latency_ms=int((time.monotonic() - t0) * 1000),
                token_counts=(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
            )
        raise BackendUnavailable(f"{self.url} failed after {self.retries} retries: {last}")


def generate_batch(
    backend: Backend, reqs: Iterable[GenRequest], parallelism: int = 1
) -> list[GenResponse | BackendError]:
    """Run requests with at most ``parallelism`` in flight.

    Results come back in input order. A failing request leaves its exception
    in the corresponding slot instead of aborting the batch.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    reqs = list(reqs)
    if not reqs:
        return []

    def one(req: GenRequest) -> GenResponse | BackendError:
        try:
            return backend.generate(req)
        except BackendError as exc:
            return exc

    if parallelism == 1 or len(reqs) == 1:
        return [one(r) for r in reqs]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, reqs))
