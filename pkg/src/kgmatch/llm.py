"""Chat-completion client with a record/replay cache.

``mode`` selects the behaviour:

* ``live``   - every call goes to the HTTP endpoint
* ``record`` - cached answers are reused, misses go live and are appended
* ``replay`` - cache only; a miss raises :class:`CacheMissError`

Cache keys hash (model, system text, user text, sampling params), so a
replayed evaluation is deterministic and needs no network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import asdict
from pathlib import Path
from typing import Protocol

import httpx

from .errors import CacheMissError, ConfigurationError, TransportError
from .generation import PromptPayload

logger = logging.getLogger(__name__)

MODES = ("live", "record", "replay")


class ChatClient(Protocol):
    def complete(self, payload: PromptPayload) -> str: ...


def request_key(model: str, payload: PromptPayload) -> str:
    blob = json.dumps(
        {
            "model": model,
            "system": payload.system_text,
            "user": payload.user_text,
            "params": asdict(payload.params),
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class RateLimiter:
    """Spaces request starts at least ``1 / rate`` seconds apart across threads."""

    def __init__(self, rate: float | None):
        self.interval = 1.0 / rate if rate else 0.0
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            time.sleep(start - now)


class HttpChatClient:
    """OpenAI-compatible chat completions over HTTP."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 1.0,
        rate_limit: float | None = None,
        send_top_k: bool = False,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.retries = retries
        self.backoff = backoff
        self.send_top_k = send_top_k
        self.limiter = RateLimiter(rate_limit)
        self._client = client or httpx.Client(timeout=timeout)
        key = os.environ.get(api_key_env)
        self._headers = {"Authorization": f"Bearer {key}"} if key else {}

    def body(self, payload: PromptPayload) -> dict:
        messages = []
        if payload.system_text:
            messages.append({"role": "system", "content": payload.system_text})
        messages.append({"role": "user", "content": payload.user_text})
        p = payload.params
        body = {
            "model": self.model,
            "messages": messages,
            "temperature": p.temperature,
            "top_p": p.top_p,
            "max_tokens": p.max_new_tokens,
        }
        if self.send_top_k:
            body["top_k"] = p.top_k
        return body

    def complete(self, payload: PromptPayload) -> str:
        body = self.body(payload)
        last: object = None
        for attempt in range(self.retries + 1):
            self.limiter.wait()
            try:
                resp = self._client.post(self.endpoint, json=body, headers=self._headers)
            except httpx.HTTPError as exc:
                last = exc
                logger.warning("chat request failed (attempt %d): %s", attempt + 1, exc)
                self._sleep(attempt, None)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                logger.warning("chat endpoint returned %d (attempt %d)", resp.status_code, attempt + 1)
                self._sleep(attempt, resp.headers.get("retry-after"))
                continue
            if resp.status_code >= 400:
                raise ConfigurationError(f"chat endpoint rejected request: {resp.status_code} {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise TransportError(f"malformed chat response: {exc}") from exc
        raise TransportError(f"chat request failed after {self.retries + 1} attempts: {last}")

    def _sleep(self, attempt: int, retry_after: str | None) -> None:
        if attempt >= self.retries:
            return
        delay = self.backoff * 2**attempt
        if retry_after:
            try:
                delay = max(delay, float(retry_after))
            except ValueError:
                pass
        time.sleep(delay)


class ReplayStore:
    """Append-only JSONL file of ``{"key", "model", "request", "response"}`` records."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._cache: dict[str, str] = {}
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        self._cache[rec["key"]] = rec["response"]
                    except (ValueError, KeyError):
                        logger.warning("%s:%d: ignoring corrupt replay record", self.path, lineno)

    def __len__(self) -> int:
        return len(self._cache)

    def get(self, key: str) -> str | None:
        return self._cache.get(key)

    def put(self, key: str, model: str, payload: PromptPayload, response: str) -> None:
        rec = {
            "key": key,
            "model": model,
            "request": {
                "system": payload.system_text,
                "user": payload.user_text,
                "params": asdict(payload.params),
            },
            "response": response,
        }
        line = json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n"
        with self._lock:
            if key in self._cache:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line)
            self._cache[key] = response


class LLMClient:
    """Front door used by the pipeline; wraps a live client and a replay store."""

    def __init__(
        self,
        mode: str,
        model: str,
        *,
        live: ChatClient | None = None,
        store: ReplayStore | None = None,
    ):
        if mode not in MODES:
            raise ConfigurationError(f"LLM mode must be one of {MODES}, got {mode!r}")
        if mode in ("live", "record") and live is None:
            raise ConfigurationError(f"LLM mode {mode!r} needs a live endpoint")
        if mode in ("record", "replay") and store is None:
            raise ConfigurationError(f"LLM mode {mode!r} needs a replay store path")
        self.mode = mode
        self.model = model
        self.live = live
        self.store = store

    def complete(self, payload: PromptPayload) -> str:
        if self.mode == "live":
            return self.live.complete(payload)
        key = request_key(self.model, payload)
        hit = self.store.get(key)
        if hit is not None:
            return hit
        if self.mode == "replay":
            raise CacheMissError(f"no recorded response for request {key[:12]}")
        text = self.live.complete(payload)
        self.store.put(key, self.model, payload, text)
        return text


def complete(client: ChatClient, payload: PromptPayload) -> str:
    return client.complete(payload)
