"""Backends that turn a prompt bundle into a classification decision.

Two kinds: ``remote-chat`` speaks the OpenAI-compatible chat-completions
wire format with base64 image parts (the common denominator across hosted
and self-served VLM deployments), and ``mock-nearest-support`` is an
offline oracle that labels the query with its cosine-nearest support
example, emitting a well-formed DECISION line so the parsing path is
exercised end to end.

Remote responses are cached by (prompt digest, model) in append-only record
files: reruns are free, and a forced refresh appends rather than rewrites
so earlier generations stay auditable. Requests are rate-limited over a
sliding 60 s window and retried with exponential backoff on transient
failures. The clock and sleep functions are injectable for tests.

Mock responses bypass the cache entirely; they cost nothing to recompute
and keeping them out preserves byte-identical reports across repeat runs.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingStore, MissingEmbeddingError, cosine_distance
from .prompts import ImagePart, ParseFailure, PromptBundle, TextPart, parse_decision


class GatewayError(RuntimeError):
    """Base class for backend failures."""


class AuthenticationError(GatewayError):
    """API key missing or rejected."""


class ExhaustedRetriesError(GatewayError):
    """All retry attempts failed."""


class MalformedReplyError(GatewayError):
    """Backend reply did not contain a chat completion."""


class BackendKind(str, enum.Enum):
    REMOTE_CHAT = "remote-chat"
    MOCK_NEAREST_SUPPORT = "mock-nearest-support"


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind = BackendKind.MOCK_NEAREST_SUPPORT
    endpoint: str = ""
    model: str = ""
    api_key_env: str = ""            # name of the env var, never the key itself
    temperature: float = 0.0
    allow_nonzero_temperature: bool = False
    max_retries: int = 3
    requests_per_minute: int = 60
    timeout_s: float = 120.0
    embedding_store: str = ""        # used by the mock backend

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if self.temperature != 0.0 and not self.allow_nonzero_temperature:
            raise GatewayError(
                "temperature != 0 requires allow_nonzero_temperature=True (audit flag); "
                "deterministic decoding is the default contract")
        if self.requests_per_minute < 1:
            raise GatewayError("requests_per_minute must be >= 1")

    def api_key(self) -> str:
        if not self.api_key_env:
            return ""
        key = os.environ.get(self.api_key_env)
        if not key:
            raise AuthenticationError(
                f"backend {self.model or self.endpoint!r} needs an API key in "
                f"${self.api_key_env}, which is unset or empty")
        return key

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "endpoint": self.endpoint,
            "model": self.model,
            "api_key_env": self.api_key_env,
            "temperature": self.temperature,
            "allow_nonzero_temperature": self.allow_nonzero_temperature,
            "max_retries": self.max_retries,
            "requests_per_minute": self.requests_per_minute,
            "timeout_s": self.timeout_s,
            "embedding_store": self.embedding_store,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BackendConfig":
        return cls(**doc)


@dataclass(frozen=True)
class VlmResponse:
    raw_text: str
    label: int | ParseFailure
    latency_ms: float
    backend_id: str
    from_cache: bool
    prompt_digest: str
    retries: int = 0

    @property
    def parsed(self) -> bool:
        return not isinstance(self.label, ParseFailure)


class ResponseCache:
    """Append-only response records keyed by (prompt digest, model)."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, prompt_digest: str, model: str) -> Path:
        key = hashlib.sha256(f"{prompt_digest}\x00{model}".encode("utf-8")).hexdigest()
        return self.root / f"{key}.jsonl"

    def get(self, prompt_digest: str, model: str) -> str | None:
        path = self._path(prompt_digest, model)
        with self._lock:
            if not path.exists():
                self.misses += 1
                return None
            lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
            if not lines:
                self.misses += 1
                return None
            self.hits += 1
            record = json.loads(lines[-1])
            return record["raw_text"]

    def put(self, prompt_digest: str, model: str, raw_text: str, *,
            audit_note: str = "") -> None:
        record = {
            "prompt_digest": prompt_digest,
            "model": model,
            "created_unix": time.time(),
            "raw_text": raw_text,
        }
        if audit_note:
            record["audit_note"] = audit_note
        path = self._path(prompt_digest, model)
        with self._lock:
            with path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def record_count(self, prompt_digest: str, model: str) -> int:
        path = self._path(prompt_digest, model)
        if not path.exists():
            return 0
        return sum(1 for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip())


class RateLimiter:
    """At most ``cap`` issues in any sliding 60 s window."""

    WINDOW_S = 60.0

    def __init__(self, cap: int, clock=time.monotonic, sleep=time.sleep):
        self.cap = cap
        self.clock = clock
        self.sleep = sleep
        self._issued: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                while self._issued and now - self._issued[0] >= self.WINDOW_S:
                    self._issued.popleft()
                if len(self._issued) < self.cap:
                    self._issued.append(now)
                    return
                wait = self.WINDOW_S - (now - self._issued[0])
            self.sleep(max(wait, 1e-3))


def _bundle_to_chat_payload(bundle: PromptBundle, config: BackendConfig) -> dict:
    content = []
    for part in bundle.parts:
        if isinstance(part, TextPart):
            content.append({"type": "text", "text": part.text})
        else:
            b64 = base64.b64encode(part.png_bytes).decode("ascii")
            content.append({
                "type": "image_url",
                "image_url": {"url": f"data:image/png;base64,{b64}"},
            })
    return {
        "model": config.model,
        "temperature": config.temperature,
        "messages": [{"role": "user", "content": content}],
    }


class VlmGateway:
    """Executes bundles against one configured backend with shared cache,
    rate limiter, and bounded retries. Safe for concurrent classify calls."""

    BACKOFF_BASE_S = 0.5
    RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})

    def __init__(self, backend: BackendConfig, cache: ResponseCache | None = None, *,
                 store: EmbeddingStore | None = None, transport=None,
                 clock=time.monotonic, sleep=time.sleep):
        self.backend = backend
        self.cache = cache
        self.clock = clock
        self.sleep = sleep
        self.remote_calls = 0
        self._limiter = RateLimiter(backend.requests_per_minute, clock=clock, sleep=sleep)
        self._client = None
        self._transport = transport
        self._store = store
        if backend.kind is BackendKind.MOCK_NEAREST_SUPPORT:
            if store is None and backend.embedding_store:
                self._store = EmbeddingStore(Path(backend.embedding_store))
            if self._store is None:
                raise GatewayError("mock backend needs an embedding store")

    @property
    def backend_id(self) -> str:
        if self.backend.kind is BackendKind.MOCK_NEAREST_SUPPORT:
            return "mock-nearest-support"
        return f"remote:{self.backend.model}"

    def _http_client(self):
        if self._client is None:
            import httpx

            kwargs = {"timeout": self.backend.timeout_s}
            if self._transport is not None:
                kwargs["transport"] = self._transport
            self._client = httpx.Client(**kwargs)
        return self._client

    def classify(self, bundle: PromptBundle, *, no_cache: bool = False) -> VlmResponse:
        if self.backend.kind is BackendKind.MOCK_NEAREST_SUPPORT:
            return self.mock_classify(bundle)
        if self.cache is not None and not no_cache:
            cached = self.cache.get(bundle.digest, self.backend.model)
            if cached is not None:
                return VlmResponse(
                    raw_text=cached,
                    label=parse_decision(cached, bundle.class_names),
                    latency_ms=0.0,
                    backend_id=self.backend_id,
                    from_cache=True,
                    prompt_digest=bundle.digest,
                )
        raw_text, retries, latency_ms = self._remote_call(bundle)
        if self.cache is not None:
            note = "forced refresh (--no-cache)" if no_cache else ""
            self.cache.put(bundle.digest, self.backend.model, raw_text, audit_note=note)
        return VlmResponse(
            raw_text=raw_text,
            label=parse_decision(raw_text, bundle.class_names),
            latency_ms=latency_ms,
            backend_id=self.backend_id,
            from_cache=False,
            prompt_digest=bundle.digest,
            retries=retries,
        )

    def _remote_call(self, bundle: PromptBundle) -> tuple[str, int, float]:
        import httpx

        api_key = self.backend.api_key()
        headers = {"content-type": "application/json"}
        if api_key:
            headers["authorization"] = f"Bearer {api_key}"
        payload = _bundle_to_chat_payload(bundle, self.backend)
        url = self.backend.endpoint.rstrip("/") + "/chat/completions"
        client = self._http_client()
        started = self.clock()
        last_error: Exception | None = None
        for attempt in range(self.backend.max_retries + 1):
            if attempt > 0:
                self.sleep(self.BACKOFF_BASE_S * (2 ** (attempt - 1)))
            self._limiter.acquire()
            self.remote_calls += 1
            try:
                resp = client.post(url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if resp.status_code in (401, 403):
                raise AuthenticationError(
                    f"backend rejected credentials (HTTP {resp.status_code})")
            if resp.status_code in self.RETRYABLE_STATUS:
                last_error = GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                continue
            if resp.status_code != 200:
                raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                doc = resp.json()
                raw_text = doc["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise MalformedReplyError(f"unexpected backend reply shape: {exc}") from exc
            if not isinstance(raw_text, str):
                raise MalformedReplyError("completion content is not text")
            latency_ms = (self.clock() - started) * 1000.0
            return raw_text, attempt, latency_ms
        raise ExhaustedRetriesError(
            f"gave up after {self.backend.max_retries + 1} attempts: {last_error}")

    def mock_classify(self, bundle: PromptBundle) -> VlmResponse:
        """Label the query with its cosine-nearest support example.

        Ties break toward the earlier support position. Requires stored
        embeddings for the query and every example image in the bundle.
        """
        images = [p for p in bundle.parts if isinstance(p, ImagePart)]
        query = [p for p in images if p.role == "query"]
        examples = [p for p in images if p.role.startswith("example:")]
        if len(query) != 1:
            raise GatewayError(f"bundle has {len(query)} query images, expected 1")
        if not examples:
            raise GatewayError("mock backend needs at least one example image in the bundle")

        def vector_of(part: ImagePart) -> np.ndarray:
            digest = hashlib.sha256(part.png_bytes).hexdigest()
            vec = self._store.get(digest)
            if vec is None:
                raise MissingEmbeddingError(
                    [f"{part.subject_id}/{part.trial_index} ({digest[:12]}...)"])
            return vec

        query_vec = vector_of(query[0])
        best_label = None
        best_dist = None
        for part in examples:
            dist = cosine_distance(vector_of(part), query_vec)
            if best_dist is None or dist < best_dist:
                best_dist = dist
                best_label = int(part.role.split(":", 1)[1])
        name = bundle.class_names[best_label]
        raw_text = (
            f"Nearest support example is class {name} at cosine distance "
            f"{best_dist:.6f}.\nDECISION: {name}")
        return VlmResponse(
            raw_text=raw_text,
            label=parse_decision(raw_text, bundle.class_names),
            latency_ms=0.0,
            backend_id=self.backend_id,
            from_cache=False,
            prompt_digest=bundle.digest,
        )


def classify(bundle: PromptBundle, backend: BackendConfig,
             cache: ResponseCache | None = None, **gateway_kwargs) -> VlmResponse:
    """One-shot convenience wrapper around :class:`VlmGateway`."""
    return VlmGateway(backend, cache, **gateway_kwargs).classify(bundle)
