"""LLM gateway: prompt templates, chat backends, structured output, token ledger.

Every chat or embedding network call in the package goes through the classes
defined here.  Backends are pluggable; the scripted mock backend makes the
whole pipeline a pure function of (corpus, config, script).
"""

from __future__ import annotations

import json
import logging
import math
import string
import threading
import time
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path
from typing import Any, Callable, Protocol

import requests

from .errors import (
    ConfigError,
    GatewayError,
    MockScriptError,
    PromptError,
    StructuredOutputError,
    TransportError,
)

logger = logging.getLogger(__name__)

ENV_LLM_BASE_URL = "SF_LLM_BASE_URL"
ENV_LLM_API_KEY = "SF_LLM_API_KEY"
ENV_LLM_MODEL = "SF_LLM_MODEL"
ENV_EMBED_BASE_URL = "SF_EMBED_BASE_URL"
ENV_EMBED_API_KEY = "SF_EMBED_API_KEY"


def estimate_tokens(text: str) -> int:
    """ceil(chars / 4) fallback for backends that report no usage."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.7
    max_tokens: int = 2048


# Stage defaults: structure wants determinism, prose wants variety, judging
# wants stability.
OUTLINE_PARAMS = GenerationParams(temperature=0.2)
PROSE_PARAMS = GenerationParams(temperature=0.7)
JUDGE_PARAMS = GenerationParams(temperature=0.0)


@dataclass(frozen=True)
class PromptTemplate:
    """A named prompt body with {placeholder} slots and an optional preamble."""

    name: str
    body: str
    preamble: str | None = None

    def placeholders(self) -> set[str]:
        return {f for _, f, _, _ in string.Formatter().parse(self.body) if f}

    def render(self, bindings: dict[str, str]) -> str:
        slots = self.placeholders()
        missing = slots - set(bindings)
        if missing:
            raise PromptError(f"template '{self.name}': unbound placeholders {sorted(missing)}")
        extra = set(bindings) - slots
        if extra:
            raise PromptError(f"template '{self.name}': unknown bindings {sorted(extra)}")
        return self.body.format(**bindings)

    def digest(self) -> str:
        payload = f"{self.name}\x00{self.preamble or ''}\x00{self.body}"
        return sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BackendReply:
    text: str
    input_tokens: int | None = None
    output_tokens: int | None = None


@dataclass(frozen=True)
class ChatExchange:
    """One request/response round trip, as recorded in the ledger."""

    stage: str
    prompt: str
    preamble: str | None
    params: GenerationParams
    response: str
    input_tokens: int
    output_tokens: int
    estimated: bool
    latency: float


class ChatBackend(Protocol):
    def send(self, preamble: str | None, prompt: str, params: GenerationParams) -> BackendReply: ...


class MockBackend:
    """Scripted replies for offline runs and tests.

    The script is an ordered list of {match, reply} entries.  Each call
    consumes the first remaining entry whose match is "*" or a substring of
    the rendered prompt, so concurrent callers stay deterministic as long as
    their matches are disjoint.
    """

    def __init__(self, entries: list[dict]):
        self._entries: list[tuple[str, str]] = []
        for i, entry in enumerate(entries):
            if not isinstance(entry, dict) or "match" not in entry or "reply" not in entry:
                raise ConfigError(f"mock script entry {i} must have 'match' and 'reply'")
            self._entries.append((str(entry["match"]), str(entry["reply"])))
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        try:
            entries = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load mock script {path}: {exc}") from exc
        if not isinstance(entries, list):
            raise ConfigError(f"mock script {path} must be a JSON array")
        return cls(entries)

    def remaining(self) -> int:
        with self._lock:
            return len(self._entries)

    def send(self, preamble: str | None, prompt: str, params: GenerationParams) -> BackendReply:
        full = f"{preamble}\n{prompt}" if preamble else prompt
        with self._lock:
            for i, (match, reply) in enumerate(self._entries):
                if match == "*" or match in full:
                    del self._entries[i]
                    return BackendReply(text=reply)
        raise MockScriptError(f"no scripted reply matches prompt starting {prompt[:80]!r}")


class HttpChatBackend:
    """Chat-completion style HTTP endpoint with role-tagged JSON messages."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        session: Any | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    @classmethod
    def from_env(cls, env: dict[str, str], model: str | None = None) -> "HttpChatBackend":
        base_url = env.get(ENV_LLM_BASE_URL)
        if not base_url:
            raise ConfigError(f"{ENV_LLM_BASE_URL} is not set")
        return cls(
            base_url,
            model=model or env.get(ENV_LLM_MODEL, ""),
            api_key=env.get(ENV_LLM_API_KEY),
        )

    def send(self, preamble: str | None, prompt: str, params: GenerationParams) -> BackendReply:
        messages = []
        if preamble:
            messages.append({"role": "system", "content": preamble})
        messages.append({"role": "user", "content": prompt})
        body = {
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.session.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat request failed: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(
                f"chat endpoint returned {resp.status_code}", status=resp.status_code
            )
        if resp.status_code >= 400:
            raise GatewayError(f"chat endpoint returned {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed chat response: {json.dumps(data)[:200]}") from exc
        usage = data.get("usage") or {}
        return BackendReply(
            text=text,
            input_tokens=usage.get("prompt_tokens"),
            output_tokens=usage.get("completion_tokens"),
        )


class RemoteEmbeddingProvider:
    """Embedding API client (POST /embeddings); usable wherever a provider is."""

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int,
        api_key: str | None = None,
        timeout: float = 60.0,
        retries: int = 3,
        session: Any | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.session = session or requests.Session()

    def embed(self, text: str) -> list[float]:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = self.session.post(
                    f"{self.base_url}/embeddings",
                    json={"model": self.model, "input": [text]},
                    headers=headers,
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last = exc
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = TransportError(f"embedding endpoint returned {resp.status_code}")
                elif resp.status_code >= 400:
                    raise GatewayError(f"embedding endpoint returned {resp.status_code}")
                else:
                    data = resp.json()
                    return list(data["data"][0]["embedding"])
            if attempt < self.retries - 1:
                time.sleep(0.5 * 2**attempt)
        raise GatewayError(f"embedding request failed after {self.retries} attempts: {last}")

    def embed_record(self, record: Any) -> list[float]:
        return self.embed(f"{record.title}\n{record.abstract}")


@dataclass
class StageUsage:
    input_tokens: int = 0
    output_tokens: int = 0
    calls: int = 0
    estimated: bool = False

    def to_dict(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "calls": self.calls,
            "estimated": self.estimated,
        }


class UsageLedger:
    """Thread-safe per-stage token accounting with an optional price table.

    Prices are (cost per million input tokens, cost per million output
    tokens), keyed by model name.
    """

    def __init__(self, prices: dict[str, tuple[float, float]] | None = None):
        self.prices = dict(prices or {})
        self._lock = threading.Lock()
        self._exchanges: list[ChatExchange] = []
        self._stages: dict[str, StageUsage] = {}

    def record(self, exchange: ChatExchange) -> None:
        with self._lock:
            self._exchanges.append(exchange)
            stage = self._stages.setdefault(exchange.stage, StageUsage())
            stage.input_tokens += exchange.input_tokens
            stage.output_tokens += exchange.output_tokens
            stage.calls += 1
            stage.estimated = stage.estimated or exchange.estimated

    def exchanges(self) -> list[ChatExchange]:
        with self._lock:
            return list(self._exchanges)

    def stage_totals(self) -> dict[str, StageUsage]:
        with self._lock:
            return {name: StageUsage(**vars(u)) for name, u in sorted(self._stages.items())}

    def totals(self) -> tuple[int, int]:
        with self._lock:
            tin = sum(u.input_tokens for u in self._stages.values())
            tout = sum(u.output_tokens for u in self._stages.values())
            return tin, tout

    def add_tokens(self, stage: str, input_tokens: int, output_tokens: int, estimated: bool = False) -> None:
        """Account for non-chat usage (e.g. embedding calls) under a stage."""
        exchange = ChatExchange(
            stage=stage,
            prompt="",
            preamble=None,
            params=GenerationParams(),
            response="",
            input_tokens=input_tokens,
            output_tokens=output_tokens,
            estimated=estimated,
            latency=0.0,
        )
        self.record(exchange)


def report_cost(ledger: UsageLedger, model: str) -> float:
    """Dollar cost of everything in the ledger at the model's configured rates."""
    if model not in ledger.prices:
        raise ConfigError(f"no price entry for model '{model}'")
    input_price, output_price = ledger.prices[model]
    tin, tout = ledger.totals()
    return tin / 1e6 * input_price + tout / 1e6 * output_price


class TokenBucket:
    """Simple blocking rate limiter; a rate of None disables it."""

    def __init__(self, rate_per_sec: float | None, capacity: float | None = None):
        self.rate = rate_per_sec
        self.capacity = capacity if capacity is not None else (rate_per_sec or 1.0)
        self._tokens = self.capacity
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate is None:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class OutputParseError(ValueError):
    """Raised by ResponseFormat parsers; triggers a repair re-prompt."""


@dataclass(frozen=True)
class ResponseFormat:
    """Expected reply shape: a parser plus the format description used to repair.

    ``parse(text, final)`` returns the parsed value or raises OutputParseError;
    ``final`` is True on the last allowed attempt, letting parsers apply
    invariant-forced salvage (e.g. deduplication) instead of failing.
    """

    name: str
    instructions: str
    parse: Callable[[str, bool], Any]


REPAIR_TEMPLATE = PromptTemplate(
    name="repair",
    body=(
        "Your previous reply could not be used.\n"
        "Problem: {problem}\n"
        "\n"
        "Required format:\n"
        "{instructions}\n"
        "\n"
        "Original request:\n"
        "{original}\n"
        "\n"
        "Previous reply:\n"
        "{previous}\n"
        "\n"
        "Reply again following the required format exactly."
    ),
)


class Gateway:
    """Single entry point for chat calls: retries, concurrency limits, ledger."""

    def __init__(
        self,
        backend: ChatBackend,
        ledger: UsageLedger | None = None,
        max_concurrency: int = 8,
        rate_per_sec: float | None = None,
        transport_retries: int = 3,
        retry_backoff: float = 1.0,
    ):
        if max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        if transport_retries < 1:
            raise ConfigError("transport_retries must be >= 1")
        self.backend = backend
        self.ledger = ledger or UsageLedger()
        self.transport_retries = transport_retries
        self.retry_backoff = retry_backoff
        self._semaphore = threading.BoundedSemaphore(max_concurrency)
        self._bucket = TokenBucket(rate_per_sec)

    def complete(
        self,
        template: PromptTemplate,
        bindings: dict[str, str],
        params: GenerationParams = PROSE_PARAMS,
        stage: str = "default",
    ) -> ChatExchange:
        """Render and send one prompt; retries transient transport failures."""
        prompt = template.render(bindings)  # pre-flight: fails before any network call
        reply: BackendReply | None = None
        last: TransportError | None = None
        start = time.perf_counter()
        for attempt in range(self.transport_retries):
            self._bucket.acquire()
            with self._semaphore:
                try:
                    reply = self.backend.send(template.preamble, prompt, params)
                    break
                except TransportError as exc:
                    last = exc
                    logger.warning(
                        "transient failure on '%s' (attempt %d/%d): %s",
                        template.name, attempt + 1, self.transport_retries, exc,
                    )
            if attempt < self.transport_retries - 1 and self.retry_backoff > 0:
                time.sleep(self.retry_backoff * 2**attempt)
        if reply is None:
            raise GatewayError(
                f"transport failed after {self.transport_retries} attempts: {last}"
            )
        latency = time.perf_counter() - start
        estimated = reply.input_tokens is None or reply.output_tokens is None
        sent = f"{template.preamble}\n{prompt}" if template.preamble else prompt
        input_tokens = reply.input_tokens if reply.input_tokens is not None else estimate_tokens(sent)
        output_tokens = (
            reply.output_tokens if reply.output_tokens is not None else estimate_tokens(reply.text)
        )
        exchange = ChatExchange(
            stage=stage,
            prompt=prompt,
            preamble=template.preamble,
            params=params,
            response=reply.text,
            input_tokens=input_tokens,
            output_tokens=output_tokens,
            estimated=estimated,
            latency=latency,
        )
        self.ledger.record(exchange)
        return exchange

    def complete_structured(
        self,
        template: PromptTemplate,
        bindings: dict[str, str],
        response_format: ResponseFormat,
        params: GenerationParams = OUTLINE_PARAMS,
        stage: str = "default",
        max_repairs: int = 2,
    ) -> Any:
        """complete() plus parsing; re-prompts with a repair instruction on failure."""
        original = template.render(bindings)
        exchange = self.complete(template, bindings, params, stage=stage)
        attempts: list[str] = []
        for attempt in range(max_repairs + 1):
            text = exchange.response
            attempts.append(text)
            final = attempt == max_repairs
            try:
                value = response_format.parse(text, final)
            except OutputParseError as exc:
                if final:
                    raise StructuredOutputError(
                        f"could not parse {response_format.name} after "
                        f"{max_repairs} repair attempt(s): {exc}",
                        attempts=attempts,
                    ) from exc
                logger.warning(
                    "unparsable %s (%s); issuing repair prompt %d/%d",
                    response_format.name, exc, attempt + 1, max_repairs,
                )
                exchange = self.complete(
                    REPAIR_TEMPLATE,
                    {
                        "problem": str(exc),
                        "instructions": response_format.instructions,
                        "original": original,
                        "previous": text,
                    },
                    params,
                    stage=stage,
                )
                continue
            if attempt:
                logger.info("%s parsed after %d repair(s)", response_format.name, attempt)
            return value
        raise AssertionError("unreachable")
