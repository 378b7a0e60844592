from __future__ import annotations

import math
import string
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Protocol

from auditcase.errors import MissingVariable

_FORMATTER = string.Formatter()


def placeholders(body: str) -> frozenset[str]:
    names = set()
    for _, name, spec, conv in _FORMATTER.parse(body):
        if name is None:
            continue
        if not name.isidentifier() or spec or conv:
            raise ValueError(f"unsupported placeholder {{{name}}} in template")
        names.add(name)
    return frozenset(names)


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt body with ``{name}`` placeholders; literal braces are doubled."""

    template_id: str
    body: str
    required_vars: frozenset[str] = field(default=frozenset())

    def __post_init__(self) -> None:
        found = placeholders(self.body)
        if not self.required_vars:
            object.__setattr__(self, "required_vars", found)
        elif frozenset(self.required_vars) != found:
            raise ValueError(
                f"template {self.template_id}: required_vars {sorted(self.required_vars)} "
                f"do not match placeholders {sorted(found)}"
            )


def render_prompt(template: PromptTemplate, variables: Mapping[str, str]) -> str:
    for name in sorted(template.required_vars):
        if name not in variables:
            raise MissingVariable(name)
    return template.body.format_map({k: variables[k] for k in template.required_vars})


class Tokenizer(Protocol):
    def encode(self, text: str) -> list[str]: ...

    def count(self, text: str) -> int: ...


class ApproxTokenizer:
    """Upper-bound estimate: one token per four characters."""

    chars_per_token = 4

    def encode(self, text: str) -> list[str]:
        n = self.chars_per_token
        return [text[i : i + n] for i in range(0, len(text), n)]

    def count(self, text: str) -> int:
        return math.ceil(len(text) / self.chars_per_token)


def truncate_to_budget(text: str, budget_tokens: int, tokenizer: Tokenizer | None = None) -> str:
    if budget_tokens < 1:
        raise ValueError("budget_tokens must be >= 1")
    tokenizer = tokenizer or ApproxTokenizer()
    if tokenizer.count(text) <= budget_tokens:
        return text
    return "".join(tokenizer.encode(text)[:budget_tokens])
