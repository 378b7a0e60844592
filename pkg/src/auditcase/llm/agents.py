"""Agent-loop primitives: a line-protocol ReAct loop and chain-of-thought answering.

ReAct replies must contain one ``Thought:`` line and one ``Action:`` line, where
the action is either ``search[<corpus>] <query>`` or ``conclude <answer>``.
Every step is an independent completion whose prompt replays the scratchpad.
"""

from __future__ import annotations

import enum
import logging
import re
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

from auditcase.errors import EmptyQuery, MalformedAction, ParseError
from auditcase.llm.gateway import Gateway
from auditcase.llm.templates import PromptTemplate, render_prompt
from auditcase.retrieval import CorpusId, SearchHit

logger = logging.getLogger(__name__)

OBSERVATION_CHARS = 700

REACT_TEMPLATE = PromptTemplate(
    "react",
    """{task}

Available corpora: {corpora}.
Reply with exactly two lines:
Thought: <your reasoning>
Action: search[<corpus>] <query>
or, when you have enough information:
Thought: <your reasoning>
Action: conclude <answer>
{scratchpad}""",
)

FORMAT_REMINDER = (
    "\n\nFORMAT REMINDER: your previous reply could not be parsed. "
    "Answer with one 'Thought:' line followed by one 'Action:' line."
)

COT_TEMPLATE = PromptTemplate(
    "cot",
    """Question: {question}

Evidence:
{evidence}

Think step by step and write one paragraph explaining how the evidence supports your answer.
Finish with a final line of the form "ANSWER: <answer>".""",
)

_THOUGHT_RE = re.compile(r"^\s*thought\s*:\s*(.*)$", re.IGNORECASE)
_ACTION_RE = re.compile(r"^\s*action\s*:\s*(.*)$", re.IGNORECASE)
_SEARCH_RE = re.compile(r"^search\s*\[\s*([\w ]+?)\s*\]\s*(.+)$", re.IGNORECASE)
_CONCLUDE_RE = re.compile(r"^conclude\b\s*:?\s*(.+)$", re.IGNORECASE)
_ANSWER_RE = re.compile(r"^\s*answer\s*:\s*(.+?)\s*$", re.IGNORECASE)


class ActionKind(str, enum.Enum):
    SEARCH = "search"
    CONCLUDE = "conclude"


class TraceStatus(str, enum.Enum):
    CONCLUDED = "Concluded"
    BUDGET_EXHAUSTED = "BudgetExhausted"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    corpus: CorpusId | None = None
    query: str = ""
    answer: str = ""

    def render(self) -> str:
        if self.kind is ActionKind.SEARCH:
            return f"search[{self.corpus.slug}] {self.query}"
        return f"conclude {self.answer}"


@dataclass
class AgentStep:
    thought: str
    action: Action
    observation: str | None = None
    hits: list[SearchHit] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "thought": self.thought,
            "action": self.action.render(),
            "observation": self.observation,
            "hits": [h.to_dict() for h in self.hits],
        }


@dataclass
class AgentTrace:
    steps: list[AgentStep]
    status: TraceStatus

    def __post_init__(self) -> None:
        if not self.steps or self.steps[-1].action.kind is not ActionKind.CONCLUDE:
            raise ValueError("trace must end with a conclude step")
        for step in self.steps:
            if step.action.kind is ActionKind.SEARCH and step.observation is None:
                raise ValueError("search step without observation")

    @property
    def answer(self) -> str:
        return self.steps[-1].action.answer

    @property
    def search_count(self) -> int:
        return sum(1 for s in self.steps if s.action.kind is ActionKind.SEARCH)

    def hits(self) -> list[SearchHit]:
        """Distinct retrieved passages in first-seen order."""
        seen: set[tuple[CorpusId, str]] = set()
        out = []
        for step in self.steps:
            for h in step.hits:
                if (h.corpus, h.passage_id) not in seen:
                    seen.add((h.corpus, h.passage_id))
                    out.append(h)
        return out

    def to_dict(self) -> dict:
        return {"status": self.status.value, "steps": [s.to_dict() for s in self.steps]}


def parse_react_reply(text: str, allowed: Sequence[CorpusId]) -> tuple[str, Action]:
    thought: str | None = None
    action_text: str | None = None
    for line in text.splitlines():
        if action_text is None and (m := _THOUGHT_RE.match(line)):
            thought = m.group(1).strip()
        elif (m := _ACTION_RE.match(line)):
            action_text = m.group(1).strip()
            break
    if thought is None or action_text is None:
        raise MalformedAction(f"missing Thought/Action lines in {text[:120]!r}")
    if (m := _SEARCH_RE.match(action_text)):
        try:
            corpus = CorpusId.from_slug(m.group(1))
        except ValueError as exc:
            raise MalformedAction(str(exc)) from None
        if corpus not in allowed:
            raise MalformedAction(f"corpus {corpus.slug} is not available here")
        return thought, Action(ActionKind.SEARCH, corpus=corpus, query=m.group(2).strip())
    if (m := _CONCLUDE_RE.match(action_text)):
        return thought, Action(ActionKind.CONCLUDE, answer=m.group(1).strip())
    raise MalformedAction(f"unknown action {action_text!r}")


def format_hits(hits: Sequence[SearchHit]) -> str:
    if not hits:
        return "No results."
    return "\n".join(f"[{h.label()}] {h.text[:OBSERVATION_CHARS]}" for h in hits)


def _scratchpad(steps: Sequence[AgentStep]) -> str:
    parts = []
    for i, step in enumerate(steps, start=1):
        parts.append(f"\nStep {i}\nThought: {step.thought}\nAction: {step.action.render()}")
        if step.observation is not None:
            parts.append(f"Observation:\n{step.observation}")
    return "\n".join(parts)


def react_loop(
    gateway: Gateway,
    tools: Mapping[CorpusId, Callable[[str], list[SearchHit]]],
    task_prompt: str,
    max_steps: int,
    *,
    template_id: str = "react",
    stage: str | None = None,
) -> AgentTrace:
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    allowed = [c for c in CorpusId if c in tools]
    corpora = ", ".join(c.slug for c in allowed) or "none"
    template = PromptTemplate(template_id, REACT_TEMPLATE.body)
    steps: list[AgentStep] = []

    while len(steps) < max_steps:
        prompt = render_prompt(
            template, {"task": task_prompt, "corpora": corpora, "scratchpad": _scratchpad(steps)}
        )
        reply = gateway.ask_raw(prompt, template_id, stage=stage)
        try:
            thought, action = parse_react_reply(reply, allowed)
        except MalformedAction:
            reply = gateway.ask_raw(prompt + FORMAT_REMINDER, template_id, stage=stage)
            thought, action = parse_react_reply(reply, allowed)

        if action.kind is ActionKind.CONCLUDE:
            steps.append(AgentStep(thought, action))
            return AgentTrace(steps, TraceStatus.CONCLUDED)

        try:
            hits = tools[action.corpus](action.query)
        except EmptyQuery:
            hits = []
        steps.append(AgentStep(thought, action, format_hits(hits), hits))

    logger.info("agent %s hit its step budget (%d)", template_id, max_steps)
    steps.append(AgentStep("Step budget exhausted.", Action(ActionKind.CONCLUDE)))
    return AgentTrace(steps, TraceStatus.BUDGET_EXHAUSTED)


@dataclass(frozen=True)
class Reasoning:
    answer: str
    rationale_paragraph: str


def parse_cot_reply(text: str) -> Reasoning:
    lines = [ln for ln in text.strip().splitlines()]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines or not (m := _ANSWER_RE.match(lines[-1])):
        raise ParseError("reasoning reply lacks a final 'ANSWER:' line")
    rationale = "\n".join(lines[:-1]).strip()
    if not rationale:
        raise ParseError("reasoning reply has no rationale paragraph")
    return Reasoning(m.group(1), rationale)


def cot_reason(
    gateway: Gateway,
    question: str,
    evidence: Sequence[str],
    *,
    template_id: str = "cot",
    stage: str | None = None,
) -> Reasoning:
    if not evidence:
        raise ValueError("cot_reason needs at least one evidence passage")
    template = PromptTemplate(template_id, COT_TEMPLATE.body)
    numbered = "\n".join(f"[{i}] {text}" for i, text in enumerate(evidence, start=1))
    skeleton = render_prompt(template, {"question": question, "evidence": ""})
    numbered = gateway.fit(numbered, gateway.count(skeleton))
    prompt = render_prompt(template, {"question": question, "evidence": numbered})
    return parse_cot_reply(gateway.ask_raw(prompt, template_id, stage=stage))
