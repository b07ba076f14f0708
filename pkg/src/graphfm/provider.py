"""
Text-generation and text-embedding gateway.

Two backends share one interface:
  - MockProvider: deterministic, offline, hash-driven children and clustered embeddings
  - HttpProvider: chat-completion / embedding endpoints over httpx, with retries,
    a sliding-window rate limiter and a content-addressed response cache

Wire format (kept behind the gateway):
  POST {base_url}/chat/completions  {"model", "messages": [{"role": "user", "content"}]}
      -> {"choices": [{"message": {"content": "..."}}]}
  POST {base_url}/embeddings        {"model", "input": [...]}
      -> {"data": [{"index": i, "embedding": [...]}]}
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

DEFAULT_KEY_ENV = "GRAPHFM_API_KEY"
PROMPT_TEMPLATE = (
    "List sub-categories of {node} on {scenario}.\n"
    "Answer with a JSON array of short names and nothing else."
)


class ProviderError(RuntimeError):
    pass


class ProviderConfigError(ProviderError):
    pass


class ProviderFormatError(ProviderError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass
class MockSpec:
    children_per_node: int = 3
    embedding_dim: int = 32
    cluster_count: int = 2
    seed: int = 0
    jitter: float = 0.35


@dataclass
class ProviderConfig:
    backend: str = "mock"
    base_url: Optional[str] = None
    api_key_env: str = DEFAULT_KEY_ENV
    chat_model: str = "chat-default"
    embed_model: str = "embed-default"
    timeout: float = 30.0
    max_retries: int = 3
    requests_per_minute: int = 60
    embed_batch_size: int = 64
    cache_dir: Optional[str] = None
    mock: MockSpec = field(default_factory=MockSpec)

    def __post_init__(self):
        if isinstance(self.mock, dict):
            self.mock = MockSpec(**self.mock)
        if self.backend not in ("mock", "http"):
            raise ProviderConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "http" and not self.base_url:
            raise ProviderConfigError("http backend requires base_url")

    def to_dict(self) -> dict:
        return asdict(self)


def render_prompt(node: str, scenario: str) -> str:
    return PROMPT_TEMPLATE.format(node=node, scenario=scenario)


_LIST_ITEM = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+(.+?)\s*$")


def parse_completion(text: str) -> list:
    """Child names from a completion: a JSON array, or a dash/numbered list."""
    stripped = text.strip()
    if stripped.startswith("```"):
        stripped = stripped.strip("`").split("\n", 1)[-1]
    start, end = stripped.find("["), stripped.rfind("]")
    if start != -1 and end > start:
        try:
            items = json.loads(stripped[start:end + 1])
        except json.JSONDecodeError:
            items = None
        if isinstance(items, list) and all(isinstance(x, str) for x in items):
            return [x.strip() for x in items if x.strip()]
    lines = [ln for ln in stripped.splitlines() if ln.strip()]
    matches = [_LIST_ITEM.match(ln) for ln in lines]
    if lines and all(matches):
        return [m.group(1) for m in matches]
    raise ProviderFormatError("completion is neither a JSON array nor a list", raw=text)


def _digest(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms)


class MockProvider:
    """Offline stand-in. Pure functions of (spec, input)."""

    def __init__(self, spec: Optional[MockSpec] = None):
        self.spec = spec or MockSpec()
        rng = np.random.default_rng(self.spec.seed)
        self.centers = _unit_rows(rng.standard_normal((self.spec.cluster_count, self.spec.embedding_dim)))
        self.calls = 0

    def subdivide(self, node: str, scenario: str = "") -> list:
        if not node:
            raise ValueError("node text must be non-empty")
        self.calls += 1
        return [f"{node}/sub-{i}" for i in range(self.spec.children_per_node)]

    def cluster_of(self, text: str) -> int:
        return _digest(self.spec.seed, "cluster", text) % self.spec.cluster_count

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            raise ValueError("embed needs at least one text")
        rows = []
        for t in texts:
            jitter = np.random.default_rng(_digest(self.spec.seed, "jitter", t)).standard_normal(
                self.spec.embedding_dim)
            scale = self.spec.jitter / np.sqrt(self.spec.embedding_dim)
            rows.append(self.centers[self.cluster_of(t)] + scale * jitter)
        return _unit_rows(np.asarray(rows))


class RateLimiter:
    """At most ``limit`` acquisitions in any sliding ``window`` seconds."""

    def __init__(self, limit: int, window: float = 60.0, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if limit < 1:
            raise ProviderConfigError("requests_per_minute must be >= 1")
        self.limit, self.window = limit, window
        self.clock, self.sleep = clock, sleep
        self.stamps: deque = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self.clock()
                while self.stamps and now >= self.stamps[0] + self.window:
                    self.stamps.popleft()
                if len(self.stamps) < self.limit:
                    self.stamps.append(now)
                    return
                self.sleep((self.stamps[0] + self.window) - now)


class ResponseCache:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(endpoint: str, body: dict) -> str:
        blob = json.dumps({"endpoint": endpoint, "body": body}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def get(self, key: str):
        path = self.root / f"{key}.json"
        return json.loads(path.read_text()) if path.exists() else None

    def put(self, key: str, payload) -> None:
        tmp = self.root / f"{key}.tmp"
        tmp.write_text(json.dumps(payload))
        os.replace(tmp, self.root / f"{key}.json")


class HttpProvider:
    RETRYABLE = {408, 429, 500, 502, 503, 504}

    def __init__(self, config: ProviderConfig, client: Optional[httpx.Client] = None,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep,
                 backoff: float = 1.0):
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)
        self.limiter = RateLimiter(config.requests_per_minute, clock=clock, sleep=sleep)
        self.cache = ResponseCache(config.cache_dir) if config.cache_dir else None
        self.sleep = sleep
        self.backoff = backoff
        self.retries = 0

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise ProviderConfigError(f"environment variable {self.config.api_key_env} is not set")
        return key

    def _post(self, endpoint: str, body: dict):
        cache_key = ResponseCache.key(endpoint, body) if self.cache else None
        if self.cache:
            hit = self.cache.get(cache_key)
            if hit is not None:
                return hit
        url = self.config.base_url.rstrip("/") + endpoint
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.retries += 1
                self.sleep(self.backoff * 2 ** (attempt - 1))
            self.limiter.acquire()
            try:
                resp = self.client.post(url, json=body, headers=headers, timeout=self.config.timeout)
            except httpx.TransportError as e:  # includes timeouts
                last = f"{type(e).__name__}"
                log.warning("%s attempt %d failed: %s", endpoint, attempt + 1, last)
                continue
            if resp.status_code in self.RETRYABLE:
                last = f"HTTP {resp.status_code}"
                log.warning("%s attempt %d failed: %s", endpoint, attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"{endpoint}: HTTP {resp.status_code}")
            payload = resp.json()
            if self.cache:
                self.cache.put(cache_key, payload)
            return payload
        raise ProviderError(f"{endpoint}: gave up after {self.config.max_retries + 1} attempts ({last})")

    def subdivide(self, node: str, scenario: str = "") -> list:
        if not node:
            raise ValueError("node text must be non-empty")
        body = {"model": self.config.chat_model,
                "messages": [{"role": "user", "content": render_prompt(node, scenario)}]}
        payload = self._post("/chat/completions", body)
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProviderFormatError("unexpected chat response shape", raw=json.dumps(payload)[:2000])
        return parse_completion(content)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            raise ValueError("embed needs at least one text")
        out = []
        step = self.config.embed_batch_size
        for i in range(0, len(texts), step):
            chunk = list(texts[i:i + step])
            payload = self._post("/embeddings", {"model": self.config.embed_model, "input": chunk})
            data = sorted(payload.get("data", []), key=lambda d: d["index"])
            if len(data) != len(chunk):
                raise ProviderError(f"embedding batch returned {len(data)} rows for {len(chunk)} inputs")
            out.extend(d["embedding"] for d in data)
        return np.asarray(out, dtype=np.float64)


def make_provider(config: ProviderConfig, **kwargs):
    if config.backend == "mock":
        return MockProvider(config.mock)
    return HttpProvider(config, **kwargs)
