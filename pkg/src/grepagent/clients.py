"""Chat-completion clients: the abstract contract, a deterministic scripted
client for offline tests, and an HTTP client for hosted models."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .context import ToolCallRecord


class ClientError(Exception):
    """Transport or protocol failure talking to a model."""


@dataclass(frozen=True)
class ChatResponse:
    text: str | None
    tool_calls: tuple[ToolCallRecord, ...] = ()
    input_tokens: int = 0
    output_tokens: int = 0


class ChatClient(Protocol):
    def complete(self, messages: list[dict], tools: Sequence[dict]) -> ChatResponse:
        ...


def _estimate(text: str) -> int:
    return math.ceil(len(text) / 4)


@dataclass
class ScriptedClient:
    """Plays back a fixed list of steps; deterministic given identical inputs.

    Each step is either {"tool_calls": [{"name":..., "args": {...}}, ...]}
    (optionally with "text" kept as reasoning content) or {"text": "..."}.
    Token usage is estimated from content so replays are bit-stable.
    """

    steps: list[dict]
    exhausted_text: str = "(no further scripted steps)"
    calls_made: int = 0
    _seq: int = field(default=0, init=False)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedClient":
        steps = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    steps.append(json.loads(line))
        return cls(steps=steps)

    def complete(self, messages: list[dict], tools: Sequence[dict]) -> ChatResponse:
        input_tokens = _estimate("".join(m.get("content") or "" for m in messages))
        if self.calls_made >= len(self.steps):
            self.calls_made += 1
            return ChatResponse(
                text=self.exhausted_text,
                input_tokens=input_tokens,
                output_tokens=_estimate(self.exhausted_text),
            )
        step = self.steps[self.calls_made]
        self.calls_made += 1
        if step.get("error"):
            raise ClientError(str(step.get("error")))
        calls = []
        for req in step.get("tool_calls", []):
            self._seq += 1
            calls.append(ToolCallRecord(seq=self._seq, name=req["name"], args=dict(req.get("args", {}))))
        text = step.get("text")
        out_len = len(text or "") + sum(len(json.dumps(c.args)) for c in calls)
        return ChatResponse(
            text=text,
            tool_calls=tuple(calls),
            input_tokens=input_tokens,
            output_tokens=_estimate("x" * out_len) if out_len else 0,
        )


@dataclass
class FailingClient:
    """Always raises; used to script summarization failures."""

    reason: str = "scripted failure"
    calls_made: int = 0

    def complete(self, messages: list[dict], tools: Sequence[dict]) -> ChatResponse:
        self.calls_made += 1
        raise ClientError(self.reason)


DEFAULT_API_KEY_ENV = "GREPAGENT_API_KEY"


@dataclass
class HttpChatClient:
    """OpenAI-style chat-completions client with tool support.

    Credentials come from an environment variable (name configurable).
    Transport errors are retried up to ``max_retries`` times with
    exponential backoff before raising ClientError.
    """

    endpoint: str
    model: str
    api_key_env: str = DEFAULT_API_KEY_ENV
    reasoning_effort: str | None = None
    max_retries: int = 3
    backoff_seconds: float = 1.0
    timeout_seconds: float = 600.0

    def _headers(self) -> dict:
        key = os.environ.get(self.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, messages: list[dict], tools: Sequence[dict]) -> ChatResponse:
        import requests

        payload: dict = {"model": self.model, "messages": messages}
        if tools:
            payload["tools"] = list(tools)
        if self.reasoning_effort:
            payload["reasoning_effort"] = self.reasoning_effort
        url = self.endpoint.rstrip("/") + "/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = requests.post(
                    url, json=payload, headers=self._headers(), timeout=self.timeout_seconds
                )
                if resp.status_code >= 500:
                    raise ClientError(f"server error {resp.status_code}")
                resp.raise_for_status()
                return self._parse(resp.json())
            except (requests.RequestException, ClientError) as exc:
                last_error = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff_seconds * (2**attempt))
        raise ClientError(f"request failed after {self.max_retries} attempts: {last_error}")

    def _parse(self, body: dict) -> ChatResponse:
        try:
            choice = body["choices"][0]
            message = choice["message"]
        except (KeyError, IndexError) as exc:
            raise ClientError(f"malformed completion response: {exc}") from exc
        calls = []
        for i, tc in enumerate(message.get("tool_calls") or [], start=1):
            fn = tc.get("function", {})
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError:
                args = {}
            calls.append(ToolCallRecord(seq=i, name=fn.get("name", ""), args=args))
        usage = body.get("usage") or {}
        return ChatResponse(
            text=message.get("content"),
            tool_calls=tuple(calls),
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
        )
