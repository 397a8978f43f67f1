"""Minimal chat-completions HTTP client with retry, used by the judge and the annotator."""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

log = logging.getLogger(__name__)


class ChatError(RuntimeError):
    pass


def request_body(model: str, messages: list[dict], temperature: float | None = None) -> bytes:
    """Wire bytes of one request: compact JSON, keys in a fixed order."""
    body: dict = {"model": model, "messages": [{"role": m["role"], "content": m["content"]} for m in messages]}
    if temperature is not None:
        body["temperature"] = temperature
    return json.dumps(body, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


@dataclass
class ChatSettings:
    base_url: str = "http://localhost:8000/v1"
    model: str = "gpt-3.5-turbo"
    api_key_env: str = "MOTIONLM_API_KEY"
    timeout: float = 30.0
    attempts: int = 2
    backoff: float = 0.5


class ChatClient:
    """POSTs to ``{base_url}/chat/completions`` and returns the first choice's message content."""

    def __init__(self, settings: ChatSettings | None = None, transport: httpx.BaseTransport | None = None,
                 log_path: str | Path | None = None, sleep=time.sleep):
        self.settings = settings or ChatSettings()
        self._http = httpx.Client(transport=transport, timeout=self.settings.timeout)
        self._log_path = Path(log_path) if log_path else None
        self._log_lock = threading.Lock()
        self._sleep = sleep

    def _headers(self) -> dict:
        h = {"Content-Type": "application/json"}
        key = os.environ.get(self.settings.api_key_env)
        if key:
            h["Authorization"] = f"Bearer {key}"
        return h

    def _record(self, body: bytes, response: str | None, error: str | None) -> None:
        if self._log_path is None:
            return
        entry = {"request": json.loads(body), "response": response, "error": error,
                 "headers": {k: ("<redacted>" if k == "Authorization" else v) for k, v in self._headers().items()}}
        with self._log_lock, self._log_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(entry, ensure_ascii=False) + "\n")

    def complete(self, messages: list[dict], temperature: float | None = None) -> str:
        body = request_body(self.settings.model, messages, temperature)
        url = self.settings.base_url.rstrip("/") + "/chat/completions"
        last = None
        for attempt in range(self.settings.attempts):
            if attempt:
                self._sleep(self.settings.backoff * 2 ** (attempt - 1))
            try:
                r = self._http.post(url, content=body, headers=self._headers())
                r.raise_for_status()
                text = r.text
                content = json.loads(text)["choices"][0]["message"]["content"]
                self._record(body, text, None)
                return content
            except (httpx.HTTPError, KeyError, IndexError, TypeError, json.JSONDecodeError) as e:
                last = e
                self._record(body, None, repr(e))
                log.warning("chat request failed (attempt %d): %s", attempt + 1, e)
        raise ChatError(f"chat request failed after {self.settings.attempts} attempts: {last}") from last

    def close(self) -> None:
        self._http.close()
