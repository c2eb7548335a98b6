"""Chat/embedding access over an OpenAI-compatible protocol, plus cost accounting.

Two providers are shipped:

* :class:`OpenAICompatibleProvider` talks HTTP to ``{base_url}/chat/completions``
  and ``{base_url}/embeddings`` with retry and exponential backoff.
* :class:`ScriptedProvider` replays canned replies (FIFO queue, substring
  matchers, or a responder callable) and serves deterministic embeddings.
  It never touches the network.

Everything else in the package reaches models through :class:`Gateway`,
which stamps the configured model ids on requests and records usage in a
:class:`CostLedger`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx
import numpy as np

from .errors import (
    AuthRejected,
    DimensionMismatch,
    InvalidRequest,
    MalformedResponse,
    ProviderError,
    RateLimited,
    ScriptExhausted,
    TransportError,
    UnknownModel,
)
from .index import as_vector

log = logging.getLogger(__name__)

ROLES = frozenset({"system", "user", "assistant"})


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be >= 0")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


def estimate_tokens(text: str) -> int:
    """Rough chars/4 estimate used when an endpoint omits usage."""
    return (len(text) + 3) // 4


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[dict, ...]
    temperature: float = 0.0
    max_output_tokens: int | None = None

    def validate(self) -> None:
        if not self.messages:
            raise InvalidRequest("chat request needs at least one message")
        for m in self.messages:
            if m.get("role") not in ROLES:
                raise InvalidRequest(f"bad message role {m.get('role')!r}")
            if not isinstance(m.get("content"), str):
                raise InvalidRequest("message content must be text")
        if self.temperature < 0:
            raise InvalidRequest("temperature must be >= 0")

    @property
    def prompt_text(self) -> str:
        return "\n".join(m["content"] for m in self.messages)


@dataclass(frozen=True)
class ChatResult:
    text: str
    usage: Usage


class Provider(Protocol):
    def chat(self, request: ChatRequest) -> ChatResult: ...

    def embed(self, texts: Sequence[str], model: str) -> list[np.ndarray]: ...


def chat(provider: Provider, request: ChatRequest) -> ChatResult:
    request.validate()
    return provider.chat(request)


def embed(provider: Provider, texts: Sequence[str], model: str) -> list[np.ndarray]:
    texts = list(texts)
    if not texts:
        raise InvalidRequest("embed needs at least one text")
    if any(not isinstance(t, str) or not t.strip() for t in texts):
        raise InvalidRequest("embed texts must be non-empty")
    vectors = provider.embed(texts, model)
    if len(vectors) != len(texts):
        raise MalformedResponse(f"got {len(vectors)} embeddings for {len(texts)} texts")
    if len({v.shape[0] for v in vectors}) > 1:
        raise DimensionMismatch("embedding batch has mixed dimensions")
    return vectors


# --------------------------------------------------------------------------
# live provider


class OpenAICompatibleProvider:
    def __init__(
        self,
        base_url: str,
        api_key: str | None,
        *,
        timeout: float = 120.0,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        backoff_factor: float = 2.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._sleep = sleep
        self._rng = rng or random.Random()

    @classmethod
    def from_env(cls, base_url: str, credential_env: str = "MEMAPO_API_KEY", **kw):
        return cls(base_url, os.environ.get(credential_env), **kw)

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, body: dict) -> dict:
        attempt = 0
        while True:
            try:
                resp = self._client.post(path, json=body)
            except httpx.TransportError as exc:
                err: ProviderError = TransportError(str(exc))
            else:
                if resp.status_code in (401, 403):
                    raise AuthRejected(f"{resp.status_code}: {resp.text[:200]}")
                if resp.status_code == 429:
                    err = RateLimited(resp.text[:200])
                elif resp.status_code >= 500:
                    err = TransportError(f"server error {resp.status_code}")
                elif resp.status_code >= 400:
                    raise ProviderError(f"{resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise MalformedResponse(f"response is not JSON: {exc}") from exc
            if attempt >= self.max_retries:
                raise err
            # full jitter
            delay = self._rng.uniform(0, self.backoff_base * self.backoff_factor**attempt)
            log.info("retrying %s after %s (%.2fs)", path, type(err).__name__, delay)
            self._sleep(delay)
            attempt += 1

    def chat(self, request: ChatRequest) -> ChatResult:
        body = {
            "model": request.model,
            "messages": [dict(m) for m in request.messages],
            "temperature": request.temperature,
        }
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens
        data = self._post("/chat/completions", body)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"no choices[0].message.content: {exc}") from exc
        if text is None:
            text = ""
        if not isinstance(text, str):
            raise MalformedResponse("message content is not text")
        usage = data.get("usage") or {}
        try:
            u = Usage(int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        except (KeyError, TypeError, ValueError):
            u = Usage(estimate_tokens(request.prompt_text), estimate_tokens(text))
        return ChatResult(text, u)

    def embed(self, texts: Sequence[str], model: str) -> list[np.ndarray]:
        data = self._post("/embeddings", {"model": model, "input": list(texts)})
        try:
            rows = data["data"]
            if "index" in rows[0]:
                rows = sorted(rows, key=lambda r: r["index"])
            return [as_vector(r["embedding"]) for r in rows]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad embeddings payload: {exc}") from exc


# --------------------------------------------------------------------------
# scripted provider


def hash_embedding(text: str, dim: int = 64) -> np.ndarray:
    """Deterministic pseudo-random unit vector keyed on the exact text."""
    seed = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")
    vec = np.random.default_rng(seed).standard_normal(dim)
    return vec / np.sqrt((vec * vec).sum())


def _as_result(reply, request: ChatRequest) -> ChatResult:
    if isinstance(reply, ChatResult):
        return reply
    if isinstance(reply, dict):
        text = reply["text"]
        usage = reply.get("usage")
        if usage is not None:
            return ChatResult(text, Usage(int(usage["prompt_tokens"]), int(usage["completion_tokens"])))
        reply = text
    if not isinstance(reply, str):
        raise TypeError(f"scripted reply must be text, dict or ChatResult, got {type(reply)}")
    return ChatResult(reply, Usage(estimate_tokens(request.prompt_text), estimate_tokens(reply)))


class ScriptedProvider:
    """Offline stand-in for a model endpoint.

    Chat replies are resolved in order: the first matcher whose substrings all
    occur in the prompt, then ``responder(request)`` if given (returning None
    falls through), then the FIFO queue. Embeddings come from ``embeddings``
    when the text is mapped there, otherwise from :func:`hash_embedding`.
    """

    def __init__(
        self,
        replies: Iterable = (),
        *,
        matchers: Iterable[tuple] = (),
        responder: Callable[[ChatRequest], object] | None = None,
        embeddings: dict[str, Sequence[float]] | None = None,
        embedding_dim: int = 64,
    ):
        self._queue = deque(replies)
        self.matchers = [
            ((needle,) if isinstance(needle, str) else tuple(needle), reply)
            for needle, reply in matchers
        ]
        self.responder = responder
        self.embeddings = {k: as_vector(v) for k, v in (embeddings or {}).items()}
        self.embedding_dim = embedding_dim
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()
        # replies are consumed in call order, so callers must not fan out
        self.supports_concurrency = False

    def queue(self, *replies) -> None:
        self._queue.extend(replies)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def chat(self, request: ChatRequest) -> ChatResult:
        with self._lock:
            self.requests.append(request)
            prompt = request.prompt_text
            for needles, reply in self.matchers:
                if all(n in prompt for n in needles):
                    return _as_result(reply, request)
            if self.responder is not None:
                reply = self.responder(request)
                if reply is not None:
                    return _as_result(reply, request)
            if not self._queue:
                raise ScriptExhausted("scripted provider has no replies left")
            reply = self._queue.popleft()
        if isinstance(reply, BaseException):
            raise reply
        return _as_result(reply, request)

    def embed(self, texts: Sequence[str], model: str) -> list[np.ndarray]:
        out = []
        for t in texts:
            vec = self.embeddings.get(t)
            out.append(vec.copy() if vec is not None else hash_embedding(t, self.embedding_dim))
        return out

    @classmethod
    def from_dir(cls, path: str | os.PathLike) -> "ScriptedProvider":
        """Load a fixture directory holding ``script.json``.

        Schema: ``{"replies": [...], "matchers": [{"contains": str|[str], "reply": ...}],
        "embeddings": {text: [floats]}, "embedding_dim": int}``. A reply is a
        string or ``{"text": ..., "usage": {"prompt_tokens", "completion_tokens"}}``.
        """
        path = Path(path)
        doc = json.loads((path / "script.json").read_text(encoding="utf-8"))
        return cls(
            doc.get("replies", []),
            matchers=[(m["contains"], m["reply"]) for m in doc.get("matchers", [])],
            embeddings=doc.get("embeddings"),
            embedding_dim=int(doc.get("embedding_dim", 64)),
        )


# --------------------------------------------------------------------------
# cost ledger


@dataclass
class ModelTotals:
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    dollars: float = 0.0


@dataclass
class CostLedger:
    """Per-model call/token/dollar accumulators.

    ``prices`` maps model id to ``(input $/1M tokens, output $/1M tokens)``.
    Dollars are recomputed from the token totals on every record, so they
    never drift from the price-table arithmetic.
    """

    prices: dict[str, tuple[float, float]] = field(default_factory=dict)
    strict: bool = False
    totals: dict[str, ModelTotals] = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.Lock()
        self._unpriced: set[str] = set()

    def record(self, model: str, usage: Usage) -> "CostLedger":
        if usage.prompt_tokens < 0 or usage.completion_tokens < 0:
            raise ValueError("usage counts must be >= 0")
        price = self.prices.get(model)
        if price is None:
            if self.strict:
                raise UnknownModel(model)
            if model not in self._unpriced:
                self._unpriced.add(model)
                log.warning("no price for model %r; costing at $0", model)
            price = (0.0, 0.0)
        with self._lock:
            t = self.totals.setdefault(model, ModelTotals())
            t.calls += 1
            t.prompt_tokens += usage.prompt_tokens
            t.completion_tokens += usage.completion_tokens
            t.dollars = (t.prompt_tokens * price[0] + t.completion_tokens * price[1]) / 1e6
        return self

    @property
    def calls(self) -> int:
        return sum(t.calls for t in self.totals.values())

    @property
    def prompt_tokens(self) -> int:
        return sum(t.prompt_tokens for t in self.totals.values())

    @property
    def completion_tokens(self) -> int:
        return sum(t.completion_tokens for t in self.totals.values())

    @property
    def dollars(self) -> float:
        return sum(t.dollars for t in self.totals.values())

    def as_dict(self) -> dict:
        return {
            "models": {
                m: {
                    "calls": t.calls,
                    "prompt_tokens": t.prompt_tokens,
                    "completion_tokens": t.completion_tokens,
                    "dollars": t.dollars,
                }
                for m, t in sorted(self.totals.items())
            },
            "calls": self.calls,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "dollars": self.dollars,
        }


# --------------------------------------------------------------------------


class Gateway:
    """The single path from the engine to a model endpoint."""

    def __init__(
        self,
        provider: Provider,
        *,
        chat_model: str,
        embedding_model: str,
        ledger: CostLedger | None = None,
        max_inflight: int = 4,
        max_output_tokens: int | None = None,
    ):
        self.provider = provider
        self.chat_model = chat_model
        self.embedding_model = embedding_model
        self.ledger = ledger if ledger is not None else CostLedger()
        self.max_inflight = max(1, max_inflight)
        self.max_output_tokens = max_output_tokens
        self._slots = threading.BoundedSemaphore(self.max_inflight)
        self._count_lock = threading.Lock()
        self.chat_calls = 0
        self.embed_calls = 0

    @property
    def concurrent(self) -> bool:
        return self.max_inflight > 1 and getattr(self.provider, "supports_concurrency", True)

    def complete(self, prompt: str, *, temperature: float = 0.0) -> ChatResult:
        request = ChatRequest(
            model=self.chat_model,
            messages=({"role": "user", "content": prompt},),
            temperature=temperature,
            max_output_tokens=self.max_output_tokens,
        )
        with self._slots:
            result = chat(self.provider, request)
        with self._count_lock:
            self.chat_calls += 1
        self.ledger.record(self.chat_model, result.usage)
        return result

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        with self._slots:
            vectors = embed(self.provider, texts, self.embedding_model)
        with self._count_lock:
            self.embed_calls += 1
        self.ledger.record(
            self.embedding_model, Usage(sum(estimate_tokens(t) for t in texts), 0)
        )
        return vectors

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]
