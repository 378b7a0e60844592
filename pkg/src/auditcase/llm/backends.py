"""Language-model backends: a scripted test double and an HTTP chat-completion client."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import httpx

from auditcase.errors import BackendError, UnscriptedRequest

logger = logging.getLogger(__name__)


def request_key(rendered_prompt: str) -> str:
    return hashlib.sha256(rendered_prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatRequest:
    rendered_prompt: str
    max_output_tokens: int
    temperature: float = 0.0
    template_id: str | None = None
    request_key: str = ""

    def __post_init__(self) -> None:
        if not self.request_key:
            object.__setattr__(self, "request_key", request_key(self.rendered_prompt))


@dataclass(frozen=True)
class ChatResponse:
    text: str
    tokens_in: int
    tokens_out: int
    latency_ms: int = 0


class LlmBackend(Protocol):
    def complete(self, req: ChatRequest) -> ChatResponse: ...


@dataclass
class ScriptEntry:
    response: str
    key: str | None = None
    template: str | None = None
    contains: Sequence[str] = ()
    excludes: Sequence[str] = ()

    def matches(self, req: ChatRequest) -> bool:
        if self.key is not None:
            return self.key == req.request_key
        if self.template is not None and self.template != req.template_id:
            return False
        prompt = req.rendered_prompt
        return all(s in prompt for s in self.contains) and not any(s in prompt for s in self.excludes)


@dataclass
class ScriptedTranscript:
    """Canned responses, looked up by exact request key or by ordered patterns.

    Exact keys win; otherwise the first pattern whose template id matches, whose
    ``contains`` substrings all occur in the prompt and whose ``excludes`` do not.
    """

    entries: list[ScriptEntry] = field(default_factory=list)

    @classmethod
    def from_json(cls, data: Mapping[str, Any] | Sequence[Mapping[str, Any]]) -> ScriptedTranscript:
        rows = data["entries"] if isinstance(data, Mapping) else data
        entries = []
        for row in rows:
            response = row["response"]
            if isinstance(response, list):
                response = "\n".join(response)
            entries.append(
                ScriptEntry(
                    response=response,
                    key=row.get("key"),
                    template=row.get("template"),
                    contains=tuple(row.get("contains", ())),
                    excludes=tuple(row.get("excludes", ())),
                )
            )
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> ScriptedTranscript:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def lookup(self, req: ChatRequest) -> str:
        for entry in self.entries:
            if entry.key is not None and entry.matches(req):
                return entry.response
        for entry in self.entries:
            if entry.key is None and entry.matches(req):
                return entry.response
        raise UnscriptedRequest(req.template_id, req.request_key, req.rendered_prompt[:160])


class ScriptedBackend:
    """Deterministic backend keyed by request content; reports zero latency."""

    def __init__(self, transcript: ScriptedTranscript, count_tokens: Callable[[str], int] | None = None):
        self.transcript = transcript
        self._count = count_tokens or (lambda s: -(-len(s) // 4))

    def complete(self, req: ChatRequest) -> ChatResponse:
        text = self.transcript.lookup(req)
        return ChatResponse(text, self._count(req.rendered_prompt), self._count(text), 0)


class HttpBackend:
    """OpenAI-style chat-completion client.

    The bearer token is read from the environment variable named by
    ``token_env`` at call time; it is never stored in config files.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        token_env: str = "AUDITCASE_LLM_TOKEN",
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def complete(self, req: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": req.rendered_prompt}],
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
        }
        start = time.monotonic()
        try:
            resp = self._client.post(self.endpoint, json=payload, headers=headers)
        except httpx.HTTPError as exc:
            raise BackendError(f"transport error: {exc}") from exc
        latency = int((time.monotonic() - start) * 1000)
        if resp.status_code >= 500 or resp.status_code == 429:
            raise BackendError(f"HTTP {resp.status_code} from {self.endpoint}")
        if resp.status_code >= 400:
            # client errors are content errors, never retried
            raise ValueError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        text = body["choices"][0]["message"]["content"]
        usage = body.get("usage", {})
        return ChatResponse(
            text,
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
            latency,
        )
