"""Uniform interface to text and vision model providers.

The gateway wraps a backend (a real HTTP provider or the deterministic
mock) and owns the retry policy: at most 3 attempts per request, with
exponential backoff (0.5s, 1s, 2s) on transport errors and rate-limit
statuses only. Every request carries a stable content fingerprint; the
mock resolves responses purely from request content, so every module
above this one is testable offline.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .errors import AulaError

KIND_CHAT = "chat"
KIND_VISION = "vision"

MAX_ATTEMPTS = 3
BACKOFF_SECONDS = (0.5, 1.0, 2.0)


class ProviderTimeout(AulaError):
    pass


class ProviderRejected(AulaError):
    pass


class BudgetExceeded(AulaError):
    pass


class MissingImage(AulaError):
    pass


class NotMockProvider(AulaError):
    pass


class UnknownFixture(AulaError):
    pass


class TransportError(AulaError):
    """Retryable failure raised by backends (network trouble, rate limits)."""


@dataclass(frozen=True)
class ProviderRequest:
    kind: str
    system_prompt: str = ""
    messages: tuple[tuple[str, str], ...] = ()
    image: bytes | None = None
    temperature: float = 0.2
    max_tokens: int = 1024
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in (KIND_CHAT, KIND_VISION):
            raise ValueError(f"unknown request kind: {self.kind!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        object.__setattr__(
            self, "messages", tuple((str(r), str(t)) for r, t in self.messages)
        )
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def task(self) -> str:
        return self.metadata.get("task", "")

    @property
    def fingerprint(self) -> str:
        """Stable content hash; insensitive to metadata insertion order."""
        image_hash = hashlib.sha256(self.image).hexdigest() if self.image is not None else None
        canonical = json.dumps(
            {
                "kind": self.kind,
                "system_prompt": self.system_prompt,
                "messages": [list(m) for m in self.messages],
                "image": image_hash,
                "temperature": repr(self.temperature),
                "max_tokens": self.max_tokens,
                "metadata": dict(sorted(self.metadata.items())),
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ProviderResponse:
    text: str
    latency_ms: float = 0.0
    provider_id: str = ""
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")


class MockProvider:
    """Deterministic fixture-backed provider.

    Resolution order per request: exact fingerprint fixture, then a task
    handler (by the request's ``task`` metadata), then a default echo.
    Strict mode raises UnknownFixture instead of falling through.
    ``fail(n)`` makes the next n sends raise a retryable TransportError
    (n=None: every send), for exercising the gateway's retry policy.
    """

    provider_id = "mock"

    def __init__(self, strict: bool = False) -> None:
        self.strict = strict
        self.fixtures: dict[str, str] = {}
        self.handlers: dict[str, Callable[[ProviderRequest], str]] = {}
        self.attempt_count = 0
        self._fail_remaining: int | None = 0

    def register_fixture(self, fingerprint: str, response: str) -> None:
        self.fixtures[fingerprint] = response

    def register_handler(self, task: str, handler: Callable[[ProviderRequest], str]) -> None:
        self.handlers[task] = handler

    def fail(self, times: int | None) -> None:
        """Fail the next `times` sends (None = fail forever)."""
        self._fail_remaining = times

    def send(self, req: ProviderRequest) -> ProviderResponse:
        self.attempt_count += 1
        if self._fail_remaining is None:
            raise TransportError("mock failure (permanent)")
        if self._fail_remaining > 0:
            self._fail_remaining -= 1
            raise TransportError("mock failure (transient)")
        fp = req.fingerprint
        if fp in self.fixtures:
            return ProviderResponse(self.fixtures[fp], 0.0, self.provider_id)
        handler = self.handlers.get(req.task)
        if handler is not None:
            return ProviderResponse(handler(req), 0.0, self.provider_id)
        if self.strict:
            raise UnknownFixture(f"no fixture for fingerprint {fp}")
        return ProviderResponse(f"[mock:{req.task or req.kind}:{fp[:12]}]", 0.0, self.provider_id)


class OpenAIChatProvider:
    """Outbound HTTPS provider speaking the OpenAI-compatible chat shape."""

    def __init__(self, base_url: str, model: str, api_key: str = "",
                 timeout: float = 60.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.provider_id = f"openai:{model}"

    def _payload(self, req: ProviderRequest) -> dict:
        messages: list[dict] = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        for role, text in req.messages:
            messages.append({"role": role, "content": text})
        if req.kind == KIND_VISION and req.image is not None:
            encoded = base64.b64encode(req.image).decode("ascii")
            messages.append(
                {
                    "role": "user",
                    "content": [
                        {"type": "image_url",
                         "image_url": {"url": f"data:image/png;base64,{encoded}"}},
                    ],
                }
            )
        return {
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }

    def send(self, req: ProviderRequest) -> ProviderResponse:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        started = time.monotonic()
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json=self._payload(req),
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc))
        latency_ms = (time.monotonic() - started) * 1000.0
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"provider status {resp.status_code}")
        if resp.status_code != 200:
            raise ProviderRejected(f"provider status {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            choice = body["choices"][0]
            text = choice["message"]["content"]
            truncated = choice.get("finish_reason") == "length"
        except (ValueError, KeyError, IndexError) as exc:
            raise ProviderRejected(f"malformed provider response: {exc}")
        return ProviderResponse(text, latency_ms, self.provider_id, truncated)


class ProviderGateway:
    """Retrying front door shared by every caller in the system.

    Shareable across concurrent sessions: calls are independent, and the
    only cross-request state (mock fixtures, the budget counter) is
    guarded by the GIL-safe operations used here.
    """

    def __init__(self, backend, sleep: Callable[[float], None] = time.sleep,
                 token_budget: int | None = None,
                 max_in_flight: int | None = None) -> None:
        self.backend = backend
        self.sleep = sleep
        self.token_budget = token_budget
        self.tokens_used = 0
        self._gate = threading.BoundedSemaphore(max_in_flight) if max_in_flight else None

    def _estimate_tokens(self, req: ProviderRequest) -> int:
        prompt_chars = len(req.system_prompt) + sum(len(t) for _, t in req.messages)
        return req.max_tokens + prompt_chars // 4

    def _attempt(self, req: ProviderRequest) -> ProviderResponse:
        if self.token_budget is not None:
            cost = self._estimate_tokens(req)
            if self.tokens_used + cost > self.token_budget:
                raise BudgetExceeded(
                    f"token budget {self.token_budget} exhausted ({self.tokens_used} used)")
            self.tokens_used += cost
        last_error: TransportError | None = None
        for attempt in range(MAX_ATTEMPTS):
            try:
                if self._gate is not None:
                    with self._gate:
                        return self.backend.send(req)
                return self.backend.send(req)
            except TransportError as exc:
                last_error = exc
                if attempt < MAX_ATTEMPTS - 1:
                    self.sleep(BACKOFF_SECONDS[attempt])
        raise ProviderTimeout(f"no response after {MAX_ATTEMPTS} attempts: {last_error}")

    def complete_chat(self, req: ProviderRequest) -> ProviderResponse:
        if req.kind != KIND_CHAT:
            raise ValueError("complete_chat requires a chat request")
        return self._attempt(req)

    def describe_image(self, req: ProviderRequest) -> ProviderResponse:
        if req.kind != KIND_VISION:
            raise ValueError("describe_image requires a vision request")
        if req.image is None:
            raise MissingImage("vision request carries no image")
        return self._attempt(req)

    def register_fixture(self, fingerprint: str, response: str) -> None:
        if not isinstance(self.backend, MockProvider):
            raise NotMockProvider("fixtures require the mock provider backend")
        self.backend.register_fixture(fingerprint, response)


def chat_request(system_prompt: str, context: Mapping | Sequence | str,
                 task: str, temperature: float = 0.0, max_tokens: int = 1024,
                 extra_messages: Sequence[tuple[str, str]] = ()) -> ProviderRequest:
    """Build the standard one-shot chat request used across the pipeline.

    The context object is serialized as a canonical JSON user message so
    both real providers and offline task handlers see the same machine-
    readable payload.
    """
    context_text = context if isinstance(context, str) else json.dumps(
        context, sort_keys=True, ensure_ascii=False)
    messages = tuple(extra_messages) + (("user", context_text),)
    return ProviderRequest(
        kind=KIND_CHAT,
        system_prompt=system_prompt,
        messages=messages,
        temperature=temperature,
        max_tokens=max_tokens,
        metadata={"task": task},
    )


def vision_request(system_prompt: str, context: Mapping | str, image: bytes,
                   task: str, temperature: float = 0.0,
                   max_tokens: int = 1024) -> ProviderRequest:
    context_text = context if isinstance(context, str) else json.dumps(
        context, sort_keys=True, ensure_ascii=False)
    return ProviderRequest(
        kind=KIND_VISION,
        system_prompt=system_prompt,
        messages=(("user", context_text),),
        image=image,
        temperature=temperature,
        max_tokens=max_tokens,
        metadata={"task": task},
    )
