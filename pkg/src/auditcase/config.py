"""Pipeline configuration from a single TOML or JSON file.

Relative paths resolve against the config file's directory. Secrets never
live here: the HTTP backend reads its token from the environment variable
named by ``backend.token_env``.
"""

from __future__ import annotations

import hashlib
import json
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from auditcase.errors import ConfigError
from auditcase.extraction import DEFAULT_ALLEGATION_EXAMPLE, FormSchema
from auditcase.llm.backends import HttpBackend, LlmBackend, ScriptedBackend, ScriptedTranscript
from auditcase.llm.gateway import DEFAULT_CONTEXT_BUDGET, DEFAULT_MAX_OUTPUT_TOKENS, Gateway
from auditcase.precautionary import DEFAULT_CONTRACT_KEYWORDS, DEFAULT_PER_DOC_CALLS
from auditcase.recommendations import Guidelines
from auditcase.retrieval import CorpusId

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MIN_CONTEXT_BUDGET = 1024


@dataclass(frozen=True)
class BackendConfig:
    kind: str  # "scripted" or "http"
    transcript: Path | None = None
    endpoint: str | None = None
    model: str | None = None
    token_env: str = "AUDITCASE_LLM_TOKEN"

    def fingerprint(self) -> str:
        """Identity of the model behind the backend; part of every LLM stage's inputs."""
        if self.kind == "scripted":
            assert self.transcript is not None
            return "scripted:" + hashlib.sha256(self.transcript.read_bytes()).hexdigest()
        return f"http:{self.endpoint}:{self.model}"

    def build(self) -> LlmBackend:
        if self.kind == "scripted":
            assert self.transcript is not None
            return ScriptedBackend(ScriptedTranscript.load(self.transcript))
        assert self.endpoint and self.model
        return HttpBackend(self.endpoint, self.model, token_env=self.token_env)


@dataclass
class PipelineConfig:
    backend: BackendConfig
    corpora: dict[CorpusId, Path] = field(default_factory=dict)
    context_budget: int = DEFAULT_CONTEXT_BUDGET
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    form_schema: Path | None = None
    crafted_queries: dict[str, str] = field(default_factory=dict)
    contract_keywords: list[str] = field(default_factory=lambda: list(DEFAULT_CONTRACT_KEYWORDS))
    allegation_example: str = DEFAULT_ALLEGATION_EXAMPLE
    guidelines: Guidelines = field(default_factory=Guidelines)
    top_k: int = 5
    admissibility_steps: int = 6
    fumus_steps: int = 6
    per_doc_calls: int = DEFAULT_PER_DOC_CALLS
    max_invalid_ratio: float | None = None
    requests_per_minute: float | None = None
    prices_per_1k: dict[str, float] = field(default_factory=dict)
    workers: int = 1
    source: Path | None = None

    def __post_init__(self) -> None:
        if self.context_budget < MIN_CONTEXT_BUDGET:
            raise ConfigError(f"context_budget must be >= {MIN_CONTEXT_BUDGET}")
        if self.max_output_tokens >= self.context_budget:
            raise ConfigError("max_output_tokens must be smaller than context_budget")
        for corpus, path in self.corpora.items():
            if not path.is_file():
                raise ConfigError(f"corpus {corpus.slug} file not found: {path}")
        if self.form_schema is not None and not self.form_schema.is_file():
            raise ConfigError(f"form schema not found: {self.form_schema}")
        if self.backend.kind == "scripted":
            if self.backend.transcript is None or not self.backend.transcript.is_file():
                raise ConfigError(f"scripted transcript not found: {self.backend.transcript}")
        elif self.backend.kind == "http":
            if not self.backend.endpoint or not self.backend.model:
                raise ConfigError("http backend needs endpoint and model")
        else:
            raise ConfigError(f"unknown backend kind {self.backend.kind!r}")

    def schema(self) -> FormSchema:
        return FormSchema.load(self.form_schema)

    def gateway(self) -> Gateway:
        return Gateway(
            self.backend.build(),
            context_budget=self.context_budget,
            max_output_tokens=self.max_output_tokens,
            requests_per_minute=self.requests_per_minute,
            prices_per_1k=self.prices_per_1k,
        )

    @classmethod
    def from_dict(cls, data: Mapping, base: Path | None = None) -> PipelineConfig:
        base = base or Path.cwd()

        def resolve(p: str | None) -> Path | None:
            return None if p is None else (base / p).resolve()

        raw_backend = dict(data.get("backend") or {})
        if not raw_backend:
            raise ConfigError("config needs a [backend] table")
        try:
            backend = BackendConfig(
                kind=raw_backend.get("kind", "scripted"),
                transcript=resolve(raw_backend.get("transcript")),
                endpoint=raw_backend.get("endpoint"),
                model=raw_backend.get("model"),
                token_env=raw_backend.get("token_env", "AUDITCASE_LLM_TOKEN"),
            )
            corpora = {CorpusId.from_slug(k): resolve(v) for k, v in (data.get("corpora") or {}).items()}
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

        guidelines_raw = data.get("guidelines")
        if isinstance(guidelines_raw, str):
            guidelines_raw = json.loads(resolve(guidelines_raw).read_text(encoding="utf-8"))
        example = data.get("allegation_example", DEFAULT_ALLEGATION_EXAMPLE)
        if "allegation_example_file" in data:
            example = resolve(data["allegation_example_file"]).read_text(encoding="utf-8")

        known = {
            "context_budget", "max_output_tokens", "top_k", "admissibility_steps", "fumus_steps",
            "per_doc_calls", "max_invalid_ratio", "requests_per_minute", "workers",
        }
        scalars = {k: data[k] for k in known if k in data}
        if "context_budget" in scalars and "max_output_tokens" not in scalars:
            # small budgets keep a quarter of the window for the reply
            scalars["max_output_tokens"] = min(DEFAULT_MAX_OUTPUT_TOKENS, int(scalars["context_budget"]) // 4)
        return cls(
            backend=backend,
            corpora=corpora,
            form_schema=resolve(data.get("form_schema")),
            crafted_queries=dict(data.get("crafted_queries") or {}),
            contract_keywords=list(data.get("contract_keywords") or DEFAULT_CONTRACT_KEYWORDS),
            allegation_example=example,
            guidelines=Guidelines.from_json(guidelines_raw) if guidelines_raw else Guidelines(),
            prices_per_1k=dict(data.get("prices_per_1k") or {}),
            source=None,
            **scalars,
        )

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            data = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        cfg = cls.from_dict(data, base=path.parent.resolve())
        cfg.source = path.resolve()
        return cfg
