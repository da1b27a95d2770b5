"""Completion providers: HTTP chat-completion client, deterministic mock,
replay cache and a thin wrapper around plain callables."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import socket
import threading
import time
import urllib.error
import urllib.request
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..text import estimate_tokens

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.2
API_KEY_ENV = "COPS_API_KEY"
ENDPOINT_ENV = "COPS_ENDPOINT"


class ProviderError(RuntimeError):
    """A completion could not be obtained; callers degrade gracefully."""


class TransientProviderError(ProviderError):
    """Retryable failure (timeout, rate limit, 5xx)."""


class PromptTooLong(ProviderError):
    """Prompt estimate exceeds the configured input budget; never sent."""


@dataclass
class ProviderConfig:
    endpoint: str = ""
    model: str = "gpt-3.5-turbo"
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = 512
    input_budget: int = 2048
    timeout: float = 30.0
    retries: int = 2
    concurrency: int = 4

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.input_budget <= 0 or self.max_output_tokens <= 0:
            raise ValueError("token budgets must be positive")
        if self.retries < 0 or self.concurrency < 1 or self.timeout <= 0:
            raise ValueError("retries >= 0, concurrency >= 1 and timeout > 0 required")


@dataclass
class CompletionRecord:
    prompt: str
    reply: str
    latency: float
    provider: str
    prompt_tokens: int
    reply_tokens: int
    cached: bool = False
    error: str | None = None

    def to_dict(self, include_latency: bool = True) -> dict:
        d = asdict(self)
        if not include_latency:
            del d["latency"]
        return d


class TraceSink:
    """Thread-safe collector of completion records."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.records: list[CompletionRecord] = []

    def add(self, record: CompletionRecord) -> None:
        with self._lock:
            self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)


def prompt_key(prompt: str, model: str = "", temperature: float | None = None) -> str:
    payload = json.dumps([model, temperature, prompt], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ReplyCache:
    """JSONL cache of replies keyed by prompt hash."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._data: dict[str, str] = {}
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._data[rec["key"]] = rec["reply"]

    def get(self, key: str) -> str | None:
        return self._data.get(key)

    def put(self, key: str, prompt: str, reply: str) -> None:
        with self._lock:
            if key in self._data:
                return
            self._data[key] = reply
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "prompt": prompt, "reply": reply},
                                        ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self._data)


class Provider:
    """Base provider: budget check, cache, retries, concurrency cap, records.

    Subclasses implement :meth:`_send`.
    """

    name = "provider"

    def __init__(
        self,
        config: ProviderConfig | None = None,
        *,
        cache: ReplyCache | str | Path | None = None,
        sink: TraceSink | None = None,
    ) -> None:
        self.config = config or ProviderConfig()
        self.cache = cache if isinstance(cache, ReplyCache) or cache is None else ReplyCache(cache)
        self.sink = sink if sink is not None else TraceSink()
        self._slots = threading.BoundedSemaphore(self.config.concurrency)

    def _send(self, prompt: str) -> str:
        raise NotImplementedError

    def complete(self, prompt: str) -> str:
        n_tokens = estimate_tokens(prompt)
        if n_tokens > self.config.input_budget:
            raise PromptTooLong(
                f"prompt estimate {n_tokens} exceeds input budget {self.config.input_budget}"
            )
        key = prompt_key(prompt, self.config.model, self.config.temperature)
        start = time.perf_counter()
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                self._record(prompt, hit, start, cached=True)
                return hit

        with self._slots:
            reply = self._send_with_retries(prompt, start)
        if self.cache is not None:
            self.cache.put(key, prompt, reply)
        self._record(prompt, reply, start)
        return reply

    def _send_with_retries(self, prompt: str, start: float) -> str:
        last: ProviderError | None = None
        for attempt in range(self.config.retries + 1):
            try:
                return self._send(prompt)
            except TransientProviderError as exc:
                last = exc
                log.debug("%s attempt %d failed: %s", self.name, attempt + 1, exc)
            except ProviderError as exc:
                last = exc
                break
        assert last is not None
        self._record(prompt, "", start, error=str(last))
        raise last

    def _record(self, prompt: str, reply: str, start: float, cached: bool = False,
                error: str | None = None) -> None:
        self.sink.add(
            CompletionRecord(
                prompt=prompt,
                reply=reply,
                latency=time.perf_counter() - start,
                provider=self.name,
                prompt_tokens=estimate_tokens(prompt),
                reply_tokens=estimate_tokens(reply),
                cached=cached,
                error=error,
            )
        )



class FunctionProvider(Provider):
    """Wrap any ``prompt -> reply`` callable."""

    name = "function"

    def __init__(self, fn: Callable[[str], str], config: ProviderConfig | None = None, **kw) -> None:
        super().__init__(config, **kw)
        self._fn = fn

    def _send(self, prompt: str) -> str:
        return self._fn(prompt)


_SECTION_RE = re.compile(r"^\[([^\]\n]+)\][ \t]*$", re.MULTILINE)


def last_section(prompt: str) -> str:
    """Body of the last ``[Header]`` section, up to the next blank line."""
    headers = list(_SECTION_RE.finditer(prompt))
    if not headers:
        return prompt.strip()
    body = prompt[headers[-1].end():].lstrip("\n")
    return body.split("\n\n", 1)[0].strip()


@dataclass
class MockRule:
    """``match`` is a substring unless ``regex`` is set; regex replies may use
    ``\\g<name>`` group references. A list of replies is picked from
    deterministically by (prompt, seed). ``error`` simulates a provider failure."""

    match: str
    reply: str | list[str] = ""
    regex: bool = False
    error: str | None = None
    _pattern: re.Pattern | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.regex:
            self._pattern = re.compile(self.match, re.DOTALL)

    def apply(self, prompt: str, seed: int) -> str | None:
        if self._pattern is not None:
            m = self._pattern.search(prompt)
            if m is None:
                return None
        else:
            m = None
            if self.match not in prompt:
                return None
        if self.error is not None:
            raise ProviderError(self.error)
        reply = self.reply
        if isinstance(reply, list):
            digest = hashlib.sha256(f"{seed}\x00{prompt}".encode()).digest()
            reply = reply[int.from_bytes(digest[:4], "big") % len(reply)] if reply else ""
        return m.expand(reply) if m is not None else reply


class MockProvider(Provider):
    """Deterministic rule-based provider; falls back to echoing the prompt's
    last bracketed section."""

    name = "mock"

    def __init__(
        self,
        rules: Sequence[MockRule | dict] = (),
        seed: int = 0,
        config: ProviderConfig | None = None,
        **kw,
    ) -> None:
        super().__init__(config, **kw)
        self.rules = [r if isinstance(r, MockRule) else MockRule(**r) for r in rules]
        self.seed = seed

    @classmethod
    def from_file(cls, path: str | Path, seed: int = 0, config: ProviderConfig | None = None,
                  **kw) -> MockProvider:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = data["rules"] if isinstance(data, dict) else data
        return cls(rules, seed=seed, config=config, **kw)

    def _send(self, prompt: str) -> str:
        for rule in self.rules:
            reply = rule.apply(prompt, self.seed)
            if reply is not None:
                return reply
        return last_section(prompt)


class ReplayProvider(Provider):
    """Serves replies from a cache file only; a miss is a provider error."""

    name = "cached"

    def _send(self, prompt: str) -> str:
        raise ProviderError("prompt not present in replay cache")


class HttpProvider(Provider):
    """Chat-completion client: POST {model, temperature, messages} and read
    ``choices[0].message.content``."""

    name = "http"

    def __init__(self, config: ProviderConfig | None = None, api_key: str | None = None, **kw) -> None:
        super().__init__(config, **kw)
        self.endpoint = self.config.endpoint or os.environ.get(ENDPOINT_ENV, "")
        if not self.endpoint:
            raise ProviderError(f"no endpoint configured (set {ENDPOINT_ENV})")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")

    def _send(self, prompt: str) -> str:
        body = json.dumps({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
            "messages": [{"role": "user", "content": prompt}],
        }).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code == 429 or exc.code >= 500:
                raise TransientProviderError(f"HTTP {exc.code}") from exc
            raise ProviderError(f"HTTP {exc.code}") from exc
        except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
            raise TransientProviderError(str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise ProviderError(f"invalid JSON reply: {exc}") from exc
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError("reply lacks choices[0].message.content") from exc
        return content or ""
