"""Chat-completion gateway with live, record, replay and scripted backends."""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol

import httpx

from ..model import ConfigError, LlmExchange, ProofForgeError, request_digest
from .cassette import Cassette, CassetteEntry, CassetteMissError
from .templates import PromptTemplate, RenderedPrompt, render_prompt

Listener = Callable[..., None]  # listener(kind: str, **data)


class ProviderError(ProofForgeError):
    pass


class ScriptExhaustedError(ProofForgeError):
    pass


@dataclass(frozen=True)
class Completion:
    text: str
    truncated: bool = False


class CompletionBackend(Protocol):
    def send(self, prompt: RenderedPrompt, temperature: float, max_tokens: int, listener: Listener | None) -> Completion: ...


@dataclass
class LiveChatBackend:
    """OpenAI-style ``/chat/completions`` endpoint."""

    endpoint: str
    model: str
    api_key: str = ""
    timeout_seconds: float = 20.0
    max_retries: int = 3
    backoff_seconds: float = 1.0
    sleep: Callable[[float], None] = time.sleep
    transport: httpx.BaseTransport | None = None

    @classmethod
    def from_env(cls, timeout_seconds: float = 20.0) -> "LiveChatBackend":
        endpoint = os.environ.get("PF_LLM_ENDPOINT", "").strip()
        model = os.environ.get("PF_LLM_MODEL", "").strip()
        if not endpoint or not model:
            raise ConfigError("live mode needs PF_LLM_ENDPOINT and PF_LLM_MODEL")
        return cls(endpoint, model, os.environ.get("PF_LLM_API_KEY", ""), timeout_seconds)

    def _url(self) -> str:
        url = self.endpoint.rstrip("/")
        return url if url.endswith("/chat/completions") else url + "/chat/completions"

    def payload(self, prompt: RenderedPrompt, temperature: float, max_tokens: int) -> dict[str, Any]:
        messages = []
        if prompt.system:
            messages.append({"role": "system", "content": prompt.system})
        messages.append({"role": "user", "content": prompt.user})
        return {"model": self.model, "messages": messages, "temperature": temperature, "max_tokens": max_tokens}

    def send(self, prompt: RenderedPrompt, temperature: float, max_tokens: int, listener: Listener | None = None) -> Completion:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self.payload(prompt, temperature, max_tokens)
        last: Exception | None = None
        with httpx.Client(timeout=self.timeout_seconds, transport=self.transport) as client:
            for attempt in range(self.max_retries + 1):
                if attempt:
                    delay = self.backoff_seconds * 2 ** (attempt - 1)
                    if listener:
                        listener("LlmRetry", attempt=attempt, delay_seconds=delay, error=str(last))
                    self.sleep(delay)
                try:
                    resp = client.post(self._url(), json=body, headers=headers)
                except httpx.TransportError as exc:
                    last = exc
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                    continue
                if resp.status_code >= 400:
                    raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    choice = resp.json()["choices"][0]
                    text = choice["message"]["content"] or ""
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise ProviderError(f"malformed completion payload: {exc}") from exc
                return Completion(text, truncated=choice.get("finish_reason") == "length")
        raise ProviderError(f"provider unreachable after {self.max_retries} retries: {last}")


Responder = Callable[[str, Mapping[str, str], float], str]


@dataclass
class ScriptedLlm:
    """Test double: either a responder function or per-template response queues."""

    responder: Responder | None = None
    queues: dict[str, list[str]] = field(default_factory=dict)
    calls: list[tuple[str, dict[str, str], float]] = field(default_factory=list)

    def respond(self, template_id: str, substitutions: Mapping[str, str], temperature: float) -> str:
        self.calls.append((template_id, dict(substitutions), temperature))
        if self.responder is not None:
            return self.responder(template_id, substitutions, temperature)
        queue = self.queues.get(template_id)
        if not queue:
            raise ScriptExhaustedError(f"no scripted response left for {template_id}")
        return queue.pop(0)


class LlmGateway:
    """Single entry point used by the pipeline.

    ``mode`` is one of live, record, replay or scripted.  Record mode calls the
    live backend and stores every answer in the cassette; replay never touches
    the network.
    """

    MODES = ("live", "record", "replay", "scripted")

    def __init__(
        self,
        mode: str,
        backend: CompletionBackend | None = None,
        cassette: Cassette | None = None,
        scripted: ScriptedLlm | None = None,
        max_tokens: int = 4028,
    ):
        if mode not in self.MODES:
            raise ConfigError(f"unknown LLM mode {mode!r}")
        if mode in ("live", "record") and backend is None:
            raise ConfigError(f"{mode} mode needs a live backend")
        if mode in ("record", "replay") and cassette is None:
            raise ConfigError(f"{mode} mode needs a cassette")
        if mode == "scripted" and scripted is None:
            raise ConfigError("scripted mode needs a ScriptedLlm")
        if mode == "record" and cassette is not None and cassette.mode != "record":
            raise ConfigError("record mode needs a cassette opened for recording")
        self.mode = mode
        self.backend = backend
        self.cassette = cassette
        self.scripted = scripted
        self.max_tokens = max_tokens
        self.exchanges: list[LlmExchange] = []
        self._lock = threading.Lock()

    @classmethod
    def replay(cls, cassette: Cassette) -> "LlmGateway":
        return cls("replay", cassette=cassette)

    @classmethod
    def scripted_with(cls, responder: Responder | None = None, **queues: list[str]) -> "LlmGateway":
        return cls("scripted", scripted=ScriptedLlm(responder=responder, queues=dict(queues)))

    def complete(
        self,
        template: PromptTemplate,
        substitutions: Mapping[str, str],
        temperature: float,
        max_tokens: int | None = None,
        listener: Listener | None = None,
    ) -> LlmExchange:
        if not 0.0 <= temperature <= 1.0:
            raise ValueError(f"temperature must lie in [0, 1], got {temperature}")
        cap = max_tokens or self.max_tokens
        subs = tuple((k, str(substitutions[k])) for k in template.placeholders)
        prompt = render_prompt(template, dict(subs))
        digest = request_digest(template.template_id, subs, temperature)
        truncated = False
        if self.mode == "replay":
            assert self.cassette is not None
            entry = self.cassette.lookup(digest, template.template_id)
            text, truncated, source = entry.response, entry.truncated, "cassette"
        elif self.mode == "scripted":
            assert self.scripted is not None
            text, source = self.scripted.respond(template.template_id, dict(subs), temperature), "scripted"
        else:
            assert self.backend is not None
            completion = self.backend.send(prompt, temperature, cap, listener)
            text, truncated, source = completion.text, completion.truncated, "live"
            if self.mode == "record":
                assert self.cassette is not None
                with self._lock:
                    replaced = self.cassette.record(
                        CassetteEntry(digest, template.template_id, temperature, text, truncated=truncated)
                    )
                if replaced and listener:
                    listener("CassetteOverwrite", digest=digest, template_id=template.template_id)
        exchange = LlmExchange(template.template_id, subs, temperature, cap, text, source, truncated)
        with self._lock:
            self.exchanges.append(exchange)
        return exchange

    def to_cassette(self, recorded_at: str = "") -> Cassette:
        """Every exchange seen so far as a replayable cassette (later duplicates win)."""
        cassette = Cassette(mode="record")
        for ex in self.exchanges:
            cassette.record(CassetteEntry(ex.request_digest, ex.template_id, ex.temperature, ex.response_text,
                                          recorded_at, ex.truncated))
        return cassette


__all__ = [
    "CassetteMissError",
    "Completion",
    "LiveChatBackend",
    "LlmGateway",
    "ProviderError",
    "ScriptExhaustedError",
    "ScriptedLlm",
]
