"""The single entry point stages use to reach a language model."""

from __future__ import annotations

import contextlib
import logging
import threading
import time
from collections.abc import Callable, Iterator, Mapping
from dataclasses import asdict, dataclass

from auditcase.errors import BackendError, BudgetExceeded
from auditcase.llm.backends import ChatRequest, ChatResponse, LlmBackend
from auditcase.llm.templates import ApproxTokenizer, PromptTemplate, Tokenizer, render_prompt, truncate_to_budget

logger = logging.getLogger(__name__)

DEFAULT_CONTEXT_BUDGET = 32_000
DEFAULT_MAX_OUTPUT_TOKENS = 1_024


@dataclass(frozen=True)
class AuditRecord:
    stage: str
    request_key: str
    tokens_in: int
    tokens_out: int
    latency_ms: int

    def to_dict(self) -> dict:
        return asdict(self)


class RateLimiter:
    """Spaces requests at least ``60 / per_minute`` seconds apart."""

    def __init__(self, per_minute: float | None, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep) -> None:
        self.interval = 60.0 / per_minute if per_minute else 0.0
        self._clock = clock
        self._sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            wait = self._next - now
            self._next = max(now, self._next) + self.interval
        if wait > 0:
            self._sleep(wait)


class Gateway:
    def __init__(
        self,
        backend: LlmBackend,
        *,
        context_budget: int = DEFAULT_CONTEXT_BUDGET,
        max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS,
        temperature: float = 0.0,
        tokenizer: Tokenizer | None = None,
        attempts: int = 3,
        backoff_s: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
        requests_per_minute: float | None = None,
        prices_per_1k: Mapping[str, float] | None = None,
    ) -> None:
        if max_output_tokens >= context_budget:
            raise ValueError("max_output_tokens must leave room for the prompt")
        self.backend = backend
        self.context_budget = context_budget
        self.max_output_tokens = max_output_tokens
        self.temperature = temperature
        self.tokenizer = tokenizer or ApproxTokenizer()
        self.attempts = attempts
        self.backoff_s = backoff_s
        self._sleep = sleep
        self.limiter = RateLimiter(requests_per_minute, sleep=sleep)
        self.prices = dict(prices_per_1k or {})
        self.records: list[AuditRecord] = []
        self._stage = "unscoped"
        self._lock = threading.Lock()

    # -- budgeting --

    @property
    def prompt_budget(self) -> int:
        return self.context_budget - self.max_output_tokens

    def count(self, text: str) -> int:
        return self.tokenizer.count(text)

    def fit(self, text: str, reserve_tokens: int) -> str:
        """Truncate ``text`` so that it plus ``reserve_tokens`` fits in the prompt budget."""
        return truncate_to_budget(text, max(1, self.prompt_budget - reserve_tokens), self.tokenizer)

    def request(self, prompt: str, *, template_id: str | None = None,
                max_output_tokens: int | None = None) -> ChatRequest:
        out = max_output_tokens or self.max_output_tokens
        used = self.count(prompt) + out
        if used > self.context_budget:
            raise BudgetExceeded(
                f"{template_id or 'prompt'}: {used} tokens exceeds budget {self.context_budget}"
            )
        return ChatRequest(prompt, out, self.temperature, template_id)

    # -- completion --

    @contextlib.contextmanager
    def stage(self, name: str) -> Iterator[None]:
        previous, self._stage = self._stage, name
        try:
            yield
        finally:
            self._stage = previous

    def complete(self, req: ChatRequest, stage: str | None = None) -> ChatResponse:
        if self.count(req.rendered_prompt) + req.max_output_tokens > self.context_budget:
            raise BudgetExceeded("request exceeds the context budget")
        delay = self.backoff_s
        for attempt in range(1, self.attempts + 1):
            self.limiter.acquire()
            try:
                resp = self.backend.complete(req)
                break
            except BackendError as exc:
                if attempt == self.attempts:
                    raise
                logger.warning("backend error (attempt %d/%d): %s", attempt, self.attempts, exc)
                self._sleep(delay)
                delay *= 2
        record = AuditRecord(stage or self._stage, req.request_key, resp.tokens_in,
                             resp.tokens_out, resp.latency_ms)
        with self._lock:
            self.records.append(record)
        return resp

    def ask(self, template: PromptTemplate, variables: Mapping[str, str], *,
            stage: str | None = None, max_output_tokens: int | None = None) -> str:
        prompt = render_prompt(template, variables)
        req = self.request(prompt, template_id=template.template_id, max_output_tokens=max_output_tokens)
        return self.complete(req, stage).text

    def ask_raw(self, prompt: str, template_id: str, *, stage: str | None = None) -> str:
        return self.complete(self.request(prompt, template_id=template_id), stage).text

    # -- accounting --

    def drain(self) -> list[AuditRecord]:
        with self._lock:
            out, self.records = self.records, []
        return out

    @property
    def total_tokens(self) -> int:
        return sum(r.tokens_in + r.tokens_out for r in self.records)

    def estimate_cost(self, records: list[AuditRecord]) -> float:
        cin = self.prices.get("input", 0.0)
        cout = self.prices.get("output", 0.0)
        return sum(r.tokens_in * cin + r.tokens_out * cout for r in records) / 1000.0
