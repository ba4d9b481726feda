"""Chat-completion access: one HTTP request shape, retry with exponential
backoff, the include-on-failure policy, rate limiting and a record/replay
response cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping
from urllib.parse import urlparse

import httpx

from .protocol import Verdict, parse_verdict

log = logging.getLogger(__name__)

CACHE_FORMAT = "llmscreen-response-cache"
CACHE_VERSION = 1


class GatewayError(Exception):
    pass


class ConfigError(GatewayError):
    pass


class CacheMiss(GatewayError):
    pass


class CorruptCache(GatewayError):
    pass


class Status(str, Enum):
    OK = "Ok"
    TRANSPORT_ERROR = "TransportError"
    RATE_LIMITED = "RateLimited"
    CONTENT_VIOLATION = "ContentViolation"
    INVALID_OUTPUT = "InvalidOutput"


class CacheMode(str, Enum):
    OFF = "off"
    REPLAY = "replay"
    RECORD_REPLAY = "record-replay"

    @property
    def may_call_network(self) -> bool:
        return self is not CacheMode.REPLAY


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str
    model_id: str
    temperature: float = 0.2
    max_tokens: int = 5
    request_timeout: float = 60.0
    special_token_wrap: tuple[str, str] | None = None
    credentials_env_var: str = "OPENAI_API_KEY"
    auth_header: str = "Authorization"
    auth_prefix: str = "Bearer "
    extra_headers: Mapping[str, str] = field(default_factory=dict)
    concurrency: int = 1
    requests_per_second: float | None = None
    burst: int = 1

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")

    @classmethod
    def from_json(cls, obj: Mapping) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known - {"name"}
        if unknown:
            raise ConfigError(f"unknown backend config keys: {sorted(unknown)}")
        kwargs = {k: v for k, v in obj.items() if k in known}
        if kwargs.get("special_token_wrap") is not None:
            kwargs["special_token_wrap"] = tuple(kwargs["special_token_wrap"])
        return cls(**kwargs)

    def check_url(self) -> None:
        parsed = urlparse(self.endpoint_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ConfigError(f"malformed endpoint URL {self.endpoint_url!r}")

    def resolve_api_key(self) -> str:
        key = os.environ.get(self.credentials_env_var, "").strip()
        if not key:
            raise ConfigError(f"environment variable {self.credentials_env_var} is not set")
        return key

    def validate_live(self) -> None:
        """Fail fast on anything that would stop a live request."""
        self.check_url()
        self.resolve_api_key()


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 1.0
    multiplier: float = 2.0
    max_delay: float = 60.0
    jitter_fraction: float = 0.1
    # re-queries allowed for an Ok response that parses to no verdict
    invalid_output_retries: int = 1

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if self.multiplier < 1:
            raise ConfigError("multiplier must be >= 1")
        if not 0 <= self.jitter_fraction <= 1:
            raise ConfigError("jitter_fraction must lie in [0, 1]")

    def delay(self, retry: int, rng: random.Random | None = None) -> float:
        """Seconds to wait before retry number ``retry`` (1 for the second attempt)."""
        d = min(self.max_delay, self.base_delay * self.multiplier ** (retry - 1))
        if self.jitter_fraction and rng is not None:
            d *= 1 + rng.uniform(-self.jitter_fraction, self.jitter_fraction)
        return min(self.max_delay, d)

    def schedule(self) -> list[float]:
        return [self.delay(k) for k in range(1, self.max_attempts)]


@dataclass(frozen=True)
class CompletionOutcome:
    status: Status
    raw_text: str | None = None
    attempts: int = 1
    latency: float = 0.0
    recorded_at: str | None = None

    def __post_init__(self):
        if self.status is Status.OK and self.raw_text is None:
            raise ValueError("Ok outcome needs raw_text")


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


# --------------------------------------------------------------------------
# transport

Sender = Callable[[str], CompletionOutcome]


def _looks_like_content_filter(body: object) -> bool:
    text = json.dumps(body).lower() if not isinstance(body, str) else body.lower()
    return "content_filter" in text or "content_policy" in text or "responsibleaipolicy" in text


class HttpChatBackend:
    """One request, one outcome. Retrying is the caller's business."""

    def __init__(self, cfg: BackendConfig, client: httpx.Client | None = None):
        cfg.check_url()
        self.cfg = cfg
        self._client = client or httpx.Client(timeout=cfg.request_timeout)

    def request_body(self, prompt: str) -> dict:
        return {
            "model": self.cfg.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        }

    def send(self, prompt: str) -> CompletionOutcome:
        headers = {self.cfg.auth_header: self.cfg.auth_prefix + self.cfg.resolve_api_key()}
        headers.update(self.cfg.extra_headers)
        try:
            resp = self._client.post(self.cfg.endpoint_url, json=self.request_body(prompt), headers=headers)
        except httpx.HTTPError as exc:
            log.debug("transport error: %s", type(exc).__name__)
            return CompletionOutcome(Status.TRANSPORT_ERROR)
        return self.interpret(resp)

    @staticmethod
    def interpret(resp: httpx.Response) -> CompletionOutcome:
        try:
            body = resp.json()
        except ValueError:
            body = resp.text
        if resp.status_code == 429:
            return CompletionOutcome(Status.RATE_LIMITED)
        if resp.status_code >= 400:
            if resp.status_code == 400 and _looks_like_content_filter(body):
                return CompletionOutcome(Status.CONTENT_VIOLATION)
            return CompletionOutcome(Status.TRANSPORT_ERROR)
        try:
            choice = body["choices"][0]
        except (KeyError, IndexError, TypeError):
            return CompletionOutcome(Status.INVALID_OUTPUT)
        if choice.get("finish_reason") == "content_filter":
            return CompletionOutcome(Status.CONTENT_VIOLATION)
        content = (choice.get("message") or {}).get("content")
        return CompletionOutcome(Status.OK, content if isinstance(content, str) else "")

    def close(self) -> None:
        self._client.close()


def complete_with_retry(
    cfg: BackendConfig,
    policy: RetryPolicy,
    prompt: str,
    send: Sender | None = None,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
    clock: Callable[[], float] = time.monotonic,
) -> CompletionOutcome:
    """Query until a usable answer, a content violation, or the attempt budget runs out.

    An Ok response whose text has no verdict is re-queried at most
    ``policy.invalid_output_retries`` times and then returned as
    InvalidOutput. Content violations are returned at once.
    """
    if not prompt:
        raise ValueError("empty prompt")
    if send is None:
        cfg.validate_live()
        send = HttpChatBackend(cfg).send
    rng = rng or random.Random()
    started = clock()
    last = CompletionOutcome(Status.TRANSPORT_ERROR)
    invalid = 0
    attempt = 0
    while attempt < policy.max_attempts:
        attempt += 1
        if attempt > 1:
            sleep(policy.delay(attempt - 1, rng))
        out = send(prompt)
        if out.status is Status.OK:
            if parse_verdict(out.raw_text) is not Verdict.UNINTERPRETABLE:
                return _finish(out, attempt, started, clock)
            last = CompletionOutcome(Status.INVALID_OUTPUT, out.raw_text)
            invalid += 1
            if invalid > policy.invalid_output_retries:
                break
            continue
        if out.status is Status.CONTENT_VIOLATION:
            return _finish(out, attempt, started, clock)
        last = out
        log.debug("attempt %d/%d: %s", attempt, policy.max_attempts, out.status.value)
    return _finish(last, attempt, started, clock)


def _finish(out: CompletionOutcome, attempts: int, started: float, clock) -> CompletionOutcome:
    return CompletionOutcome(out.status, out.raw_text, attempts, clock() - started, utc_now())


def apply_include_fallback(outcome: CompletionOutcome) -> tuple[Verdict, bool]:
    """Binary verdict plus whether the include-on-failure rule fired."""
    if outcome.status is Status.OK:
        verdict = parse_verdict(outcome.raw_text)
        if verdict is not Verdict.UNINTERPRETABLE:
            return verdict, False
    return Verdict.INCLUDE, True


# --------------------------------------------------------------------------
# rate limiting


class TokenBucket:
    """Thread-safe token bucket; ``acquire`` blocks until a token is free."""

    def __init__(
        self,
        rate: float,
        burst: int = 1,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0 or burst < 1:
            raise ValueError("rate must be > 0 and burst >= 1")
        self.rate = rate
        self.burst = burst
        self._clock = clock
        self._sleep = sleep
        self._tokens = float(burst)
        self._last = clock()
        self._lock = threading.Lock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
        self._last = now

    def acquire(self) -> None:
        with self._lock:
            self._refill()
            while self._tokens < 1:
                self._sleep((1 - self._tokens) / self.rate)
                self._refill()
            self._tokens -= 1


# --------------------------------------------------------------------------
# cache


def cache_key(model_id: str, prompt: str, temperature: float, max_tokens: int) -> str:
    payload = json.dumps(
        [model_id, prompt, float(temperature), int(max_tokens)], ensure_ascii=False, separators=(",", ":")
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CacheEntry:
    key: str
    model_id: str
    status: Status
    raw_text: str | None
    attempts: int
    recorded_at: str

    def body(self) -> dict:
        d = asdict(self)
        d["status"] = self.status.value
        return d

    def digest(self) -> str:
        blob = json.dumps(self.body(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_line(self) -> str:
        return json.dumps({**self.body(), "digest": self.digest()}, ensure_ascii=False) + "\n"

    def outcome(self) -> CompletionOutcome:
        return CompletionOutcome(self.status, self.raw_text, self.attempts, 0.0, self.recorded_at)


class ResponseCache:
    """Append-only JSONL cache of completion outcomes.

    The first line is a header naming the format and version. Every entry
    carries a SHA-256 of its own fields; a mismatch raises CorruptCache.
    A partial last line (an interrupted append) is ignored with a warning.
    Without a path the cache lives in memory only.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists() and self.path.stat().st_size:
            self._load()

    def _load(self) -> None:
        raw = self.path.read_text(encoding="utf-8")
        lines = raw.split("\n")
        try:
            header = json.loads(lines[0])
        except ValueError:
            raise CorruptCache(f"{self.path}: unreadable header") from None
        if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
            raise CorruptCache(f"{self.path}: unsupported header {header}")
        body = lines[1:]
        tail_partial = not raw.endswith("\n")
        for i, line in enumerate(body, start=2):
            if not line:
                continue
            try:
                obj = json.loads(line)
            except ValueError:
                if tail_partial and i == len(lines):
                    log.warning("%s: ignoring truncated final line %d", self.path, i)
                    continue
                raise CorruptCache(f"{self.path}:{i}: unparseable entry") from None
            digest = obj.pop("digest", None)
            try:
                entry = CacheEntry(**{**obj, "status": Status(obj["status"])})
            except (TypeError, KeyError, ValueError):
                raise CorruptCache(f"{self.path}:{i}: malformed entry") from None
            if entry.digest() != digest:
                raise CorruptCache(f"{self.path}:{i}: digest mismatch")
            self._entries.setdefault(entry.key, entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> CacheEntry | None:
        return self._entries.get(key)

    def put(self, entry: CacheEntry) -> CacheEntry:
        """Store an entry unless the key exists; returns the entry that is kept."""
        with self._lock:
            existing = self._entries.get(entry.key)
            if existing is not None:
                return existing
            if self.path is not None:
                new_file = not self.path.exists() or self.path.stat().st_size == 0
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    if new_file:
                        fh.write(json.dumps({"format": CACHE_FORMAT, "version": CACHE_VERSION}) + "\n")
                    fh.write(entry.to_line())
            self._entries[entry.key] = entry
            return entry


def replay_complete(
    cache: ResponseCache,
    cfg: BackendConfig,
    prompt: str,
    mode: CacheMode = CacheMode.REPLAY,
    live: Callable[[str], CompletionOutcome] | None = None,
) -> CompletionOutcome:
    """Serve an outcome from the cache, calling ``live`` on a miss in record-replay mode."""
    key = cache_key(cfg.model_id, prompt, cfg.temperature, cfg.max_tokens)
    hit = cache.get(key)
    if hit is not None:
        return hit.outcome()
    if mode is CacheMode.REPLAY:
        raise CacheMiss(f"no recorded outcome for key {key[:16]}")
    if live is None:
        raise ConfigError("record-replay needs a live completion function")
    out = live(prompt)
    entry = CacheEntry(key, cfg.model_id, out.status, out.raw_text, out.attempts, out.recorded_at or utc_now())
    kept = cache.put(entry)
    return CompletionOutcome(kept.status, kept.raw_text, kept.attempts, out.latency, kept.recorded_at)


class ModelClient:
    """A backend ready for screening: retry policy, rate limit and optional cache.

    ``send`` replaces the HTTP transport (tests, offline stubs). In replay
    mode no transport is ever built, so credentials are not needed.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        policy: RetryPolicy = RetryPolicy(),
        cache: ResponseCache | None = None,
        mode: CacheMode = CacheMode.OFF,
        send: Sender | None = None,
        limiter: TokenBucket | None = None,
        sleep: Callable[[float], None] = time.sleep,
        seed: int | None = None,
    ):
        if mode is not CacheMode.OFF and cache is None:
            raise ConfigError(f"cache mode {mode.value} needs a cache")
        self.cfg = cfg
        self.policy = policy
        self.cache = cache
        self.mode = mode
        self.sleep = sleep
        self.network_calls = 0
        self._count_lock = threading.Lock()
        self._rng = random.Random(seed)
        if limiter is None and cfg.requests_per_second:
            limiter = TokenBucket(cfg.requests_per_second, cfg.burst)
        self.limiter = limiter
        self._send = send
        if send is None and mode.may_call_network:
            cfg.validate_live()
            self._send = HttpChatBackend(cfg).send

    @property
    def concurrency(self) -> int:
        return self.cfg.concurrency

    @property
    def wrap(self) -> tuple[str, str] | None:
        return self.cfg.special_token_wrap

    def _one_request(self, prompt: str) -> CompletionOutcome:
        if self.limiter is not None:
            self.limiter.acquire()
        with self._count_lock:
            self.network_calls += 1
        return self._send(prompt)

    def _live(self, prompt: str) -> CompletionOutcome:
        return complete_with_retry(
            self.cfg, self.policy, prompt, send=self._one_request, sleep=self.sleep, rng=self._rng
        )

    def complete(self, prompt: str) -> CompletionOutcome:
        if self.mode is CacheMode.OFF:
            return self._live(prompt)
        return replay_complete(self.cache, self.cfg, prompt, self.mode, self._live)


def load_backend_file(path: str | Path) -> tuple[dict[str, BackendConfig], RetryPolicy]:
    """Read a JSON backend file: ``{"backends": {name: {...}}, "retry": {...}}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    backends_raw = data.get("backends", {})
    if isinstance(backends_raw, list):
        backends_raw = {b["name"]: b for b in backends_raw}
    backends = {name: BackendConfig.from_json(obj) for name, obj in backends_raw.items()}
    retry = RetryPolicy(**data.get("retry", {}))
    return backends, retry
