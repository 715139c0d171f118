"""Chat-completion gateway: live OpenAI-compatible transport and scripted mocks."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Protocol

import httpx
import yaml
from tenacity import (
    Retrying,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from .config import ProviderSettings
from .errors import ConfigError, MockScriptError, ProtocolError, TransportError
from .ledger import UsageLedger
from .logging_config import get_logger
from .models import CallTag, CompletionRequest, CompletionResult, RunLedger

logger = get_logger(__name__)


def canonicalize(text: str) -> str:
    """Normalize newlines and strip trailing spaces on every line."""
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    return "\n".join(line.rstrip() for line in lines)


def prompt_fingerprint(tag: str, system_prompt: str, user_prompt: str) -> str:
    digest = hashlib.sha256()
    for part in (tag, canonicalize(system_prompt), canonicalize(user_prompt)):
        digest.update(part.encode("utf-8"))
        digest.update(b"\x1f")
    return digest.hexdigest()[:24]


def fingerprint(request: CompletionRequest) -> str:
    return prompt_fingerprint(request.tag.value, request.system_prompt, request.user_prompt)


def estimate_tokens(text: str) -> int:
    """Rough token count (4 characters per token) for providers without usage data."""
    return max(1, (len(text) + 3) // 4)


class Provider(Protocol):
    provider_id: str

    def complete(self, request: CompletionRequest) -> CompletionResult: ...


class _RetryableStatus(TransportError):
    """429 or 5xx from the provider."""


class LiveProvider:
    """OpenAI-compatible ``POST {base_url}/chat/completions`` over httpx."""

    def __init__(
        self,
        settings: ProviderSettings,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> None:
        if not settings.api_key:
            raise ConfigError("live provider needs RUBRICLOOP_API_KEY or OPENAI_API_KEY")
        self.settings = settings
        self.provider_id = f"live:{settings.model}"
        self.url = str(settings.base_url).rstrip("/") + "/chat/completions"
        self.client = httpx.Client(
            headers={
                "authorization": f"Bearer {settings.api_key}",
                "content-type": "application/json",
                "user-agent": settings.user_agent,
            },
            timeout=settings.request_timeout,
            transport=transport,
        )

    def payload(self, request: CompletionRequest) -> Dict[str, Any]:
        return {
            "model": self.settings.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def _post(self, payload: Dict[str, Any], tag: str, fp: str) -> httpx.Response:
        response = self.client.post(self.url, json=payload)
        if response.status_code == 429 or response.status_code >= 500:
            raise _RetryableStatus(f"HTTP {response.status_code}", tag=tag, fingerprint=fp)
        if response.status_code >= 400:
            raise TransportError(
                f"HTTP {response.status_code}: {response.text[:200]}", tag=tag, fingerprint=fp
            )
        return response

    def complete(self, request: CompletionRequest) -> CompletionResult:
        fp = fingerprint(request)
        tag = request.tag.value
        retrying = Retrying(
            reraise=True,
            stop=stop_after_attempt(self.settings.max_retries),
            wait=wait_exponential(
                multiplier=self.settings.backoff_multiplier,
                min=self.settings.backoff_multiplier,
                max=10,
            ),
            retry=retry_if_exception_type((httpx.TransportError, _RetryableStatus)),
        )
        started = time.perf_counter()
        try:
            response = retrying(self._post, self.payload(request), tag, fp)
        except _RetryableStatus as exc:
            raise TransportError(
                f"{tag} request failed after {self.settings.max_retries} attempts: {exc}",
                tag=tag,
                fingerprint=fp,
            ) from exc
        except httpx.HTTPError as exc:
            raise TransportError(
                f"{tag} request failed: {exc}", tag=tag, fingerprint=fp
            ) from exc
        latency = int((time.perf_counter() - started) * 1000)
        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"]
            if not isinstance(text, str):
                raise TypeError("content is not a string")
            usage = data.get("usage") or {}
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(
                f"Unexpected response shape for {tag} request", tag=tag, fingerprint=fp
            ) from exc
        return CompletionResult(
            text=text,
            input_tokens=int(
                usage.get("prompt_tokens")
                or estimate_tokens(request.system_prompt + request.user_prompt)
            ),
            output_tokens=int(usage.get("completion_tokens") or estimate_tokens(text)),
            latency_ms=latency,
            provider_id=self.provider_id,
        )

    def close(self) -> None:
        self.client.close()


class MockProvider:
    """Pure lookup table from request fingerprint to scripted reply."""

    def __init__(self, script: Optional[Mapping[str, str]] = None, provider_id: str = "mock") -> None:
        self.script: Dict[str, str] = dict(script or {})
        self.provider_id = provider_id

    def add(self, tag: CallTag, system_prompt: str, user_prompt: str, reply: str) -> str:
        fp = prompt_fingerprint(tag.value, system_prompt, user_prompt)
        self.script[fp] = reply
        return fp

    @classmethod
    def from_entries(cls, entries: Iterable[Mapping[str, Any]]) -> "MockProvider":
        """Build from ``{fingerprint, reply}`` or ``{tag, system, user, reply}`` entries."""
        provider = cls()
        for entry in entries:
            if "fingerprint" in entry:
                provider.script[str(entry["fingerprint"])] = str(entry["reply"])
            else:
                provider.add(
                    CallTag(entry["tag"]),
                    str(entry.get("system", "")),
                    str(entry.get("user", "")),
                    str(entry["reply"]),
                )
        return provider

    @classmethod
    def from_file(cls, path: Path) -> "MockProvider":
        if not path.exists():
            raise ConfigError(f"Mock script not found: {path}")
        with path.open("r", encoding="utf-8") as f:
            loaded = json.load(f) if path.suffix == ".json" else yaml.safe_load(f)
        entries = loaded.get("entries", []) if isinstance(loaded, dict) else loaded
        if not isinstance(entries, list):
            raise ConfigError(f"Mock script {path} must hold a list of entries")
        logger.debug("Loaded %d scripted replies from %s", len(entries), path)
        return cls.from_entries(entries)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        fp = fingerprint(request)
        try:
            text = self.script[fp]
        except KeyError:
            raise MockScriptError(request.tag.value, fp) from None
        return CompletionResult(
            text=text,
            input_tokens=estimate_tokens(request.system_prompt) + estimate_tokens(request.user_prompt),
            output_tokens=estimate_tokens(text),
            latency_ms=0,
            provider_id=self.provider_id,
        )


class Gateway:
    """Shared entry point for every model call.

    Bounds in-flight requests and books usage of successful calls in the
    ledger. Safe to share across worker threads.
    """

    def __init__(
        self,
        provider: Provider,
        ledger: Optional[UsageLedger] = None,
        concurrency: int = 8,
        agent_temperature: float = 0.3,
        agent_max_tokens: int = 1024,
        grade_max_tokens: int = 512,
    ) -> None:
        self.provider = provider
        self.ledger = ledger or UsageLedger()
        self.concurrency = max(1, concurrency)
        self.agent_temperature = agent_temperature
        self.agent_max_tokens = agent_max_tokens
        self.grade_max_tokens = grade_max_tokens
        self._slots = threading.BoundedSemaphore(self.concurrency)

    @classmethod
    def from_settings(
        cls, settings: ProviderSettings, provider: Optional[Provider] = None
    ) -> "Gateway":
        if provider is None:
            if settings.kind == "live":
                provider = LiveProvider(settings)
            elif settings.kind == "mock":
                if settings.script_path is None:
                    raise ConfigError("mock provider needs provider.script_path")
                provider = MockProvider.from_file(settings.script_path)
            else:
                raise ConfigError("scenario providers are built by rubricloop.testbed")
        return cls(
            provider,
            UsageLedger(settings.price_in_per_million, settings.price_out_per_million),
            concurrency=settings.concurrency,
            agent_temperature=settings.agent_temperature,
            agent_max_tokens=settings.agent_max_tokens,
            grade_max_tokens=settings.grade_max_tokens,
        )

    def agent_request(
        self, tag: CallTag, system_prompt: str, user_prompt: str, attempt: int = 0
    ) -> CompletionRequest:
        return CompletionRequest(
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            temperature=self.agent_temperature,
            max_tokens=self.agent_max_tokens,
            tag=tag,
            attempt=attempt,
        )

    def grade_request(self, system_prompt: str, user_prompt: str, attempt: int = 0) -> CompletionRequest:
        return CompletionRequest(
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            temperature=0.0,
            max_tokens=self.grade_max_tokens,
            tag=CallTag.GRADE,
            attempt=attempt,
        )

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._slots:
            result = self.provider.complete(request)
        self.ledger.record(
            request.tag, result.input_tokens, result.output_tokens, attempt=request.attempt
        )
        return result

    def ledger_snapshot(self) -> RunLedger:
        return self.ledger.snapshot()
