"""Precautionary-measure analyses.

Danger in delay (periculum in mora) follows a fixed rule flow; the model only
reports whether an active contract or a delay event exists. Legal plausibility
(fumus boni iuris) is classified per allegation by a search agent.
"""

from __future__ import annotations

import enum
import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

from auditcase.admissibility import Citation
from auditcase.errors import DraftMismatch
from auditcase.extraction import Item
from auditcase.ingest import ExtractedDocument
from auditcase.llm.agents import TraceStatus, react_loop
from auditcase.llm.gateway import Gateway
from auditcase.llm.templates import PromptTemplate, render_prompt
from auditcase.retrieval import CorpusId, SearchService

logger = logging.getLogger(__name__)

DRAFT_CONTRACT_PHRASE = "minuta de contrato"
MIN_DOCS_FOR_EXCLUSION = 5
DEFAULT_CONTRACT_KEYWORDS = ("contrato assinado", "contrato vigente", "contrato nº")
DEFAULT_CONTRACT_QUERY = "contrato assinado vigente vigência assinatura do contrato"
DEFAULT_PER_DOC_CALLS = 8
DELAY_BATCH_SIZE = 5
FUMUS_STEP_BUDGET = 6


class PericulumVerdict(str, enum.Enum):
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


@dataclass
class Signal:
    present: bool
    evidence_doc_ids: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.present and not self.evidence_doc_ids:
            raise ValueError("a positive signal needs evidence documents")

    def to_dict(self) -> dict:
        return {"present": self.present, "evidence_doc_ids": list(self.evidence_doc_ids)}


@dataclass
class DraftFlagResult:
    flagged: list[str]
    considered: list[str]


@dataclass
class PericulumFinding:
    draft_contract_doc_ids: list[str]
    considered_doc_ids: list[str]
    active_contract: Signal
    delay_event: Signal
    verdict: PericulumVerdict
    flags: list[str] = field(default_factory=list)
    draft_text: str = ""

    def __post_init__(self) -> None:
        if self.verdict is not decide_periculum(self.active_contract.present, self.delay_event.present):
            raise ValueError("verdict disagrees with the decision rules")

    def to_dict(self) -> dict:
        return {
            "draft_contract_doc_ids": list(self.draft_contract_doc_ids),
            "considered_doc_ids": list(self.considered_doc_ids),
            "active_contract": self.active_contract.to_dict(),
            "delay_event": self.delay_event.to_dict(),
            "verdict": self.verdict.value,
            "flags": list(self.flags),
            "draft_text": self.draft_text,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> PericulumFinding:
        return cls(
            list(data["draft_contract_doc_ids"]),
            list(data["considered_doc_ids"]),
            Signal(data["active_contract"]["present"], list(data["active_contract"]["evidence_doc_ids"])),
            Signal(data["delay_event"]["present"], list(data["delay_event"]["evidence_doc_ids"])),
            PericulumVerdict(data["verdict"]),
            list(data.get("flags", [])),
            data.get("draft_text", ""),
        )


def flag_draft_contract_docs(docs: Sequence[ExtractedDocument]) -> DraftFlagResult:
    """Set aside documents quoting a draft contract, unless the case is small."""
    ids = [d.doc_id for d in docs]
    if len(docs) < MIN_DOCS_FOR_EXCLUSION:
        return DraftFlagResult([], ids)
    phrase = DRAFT_CONTRACT_PHRASE.casefold()
    flagged = [d.doc_id for d in docs if phrase in d.text.casefold()]
    return DraftFlagResult(flagged, [i for i in ids if i not in flagged])


def decide_periculum(active: bool, delay: bool) -> PericulumVerdict:
    if active:
        # a signed or active contract cannot be stopped from entering into force
        return PericulumVerdict.REJECTED
    if delay:
        # execution is already halted
        return PericulumVerdict.REJECTED
    return PericulumVerdict.ACCEPTED


# -- model-backed signals --------------------------------------------------

ACTIVE_CONTRACT_TEMPLATE = PromptTemplate(
    "periculum.active_contract",
    """## Task
Read the passages retrieved from the case documents and decide whether a contract for the provision of goods or services has already been signed or is in force.
Reply with two lines:
ACTIVE_CONTRACT: yes or no
EVIDENCE: comma-separated document ids supporting a yes answer (empty for no)

## Passages
{passages}""",
)

DELAY_TEMPLATE = PromptTemplate(
    "periculum.delay",
    """## Task
Read the case document below and decide whether it reports an event that delays, cancels, suspends or otherwise impedes the contracting (for example a suspended or revoked bidding process).
Reply with two lines:
DELAY_EVENT: yes or no
EVIDENCE: the document id when the answer is yes

## Document {doc_id}
{document}""",
)

DELAY_BATCH_TEMPLATE = PromptTemplate(
    "periculum.delay_batch",
    """## Task
Read the summaries of the case documents below and decide whether any of them reports an event that delays, cancels, suspends or otherwise impedes the contracting.
Reply with two lines:
DELAY_EVENT: yes or no
EVIDENCE: comma-separated ids of the documents reporting such an event

## Documents
{documents}""",
)

DRAFT_TEMPLATE = PromptTemplate(
    "periculum.draft",
    """## Task
Write the paragraph on danger in delay (periculum in mora) for the initial instruction of an audit case.

## Decision rules
1. If a contract has been signed or is active, there is no danger in delay, because the court cannot prevent a contract from coming into force. The request is rejected.
2. If there are events that delay, cancel or impede the contracting, there is no danger in delay, because the execution of the contract has been halted. The request is rejected.
3. Otherwise the danger in delay is accepted.

## Findings
Active contract: {active}
Delay or impediment event: {delay}
Decision: {verdict}

Write one paragraph that states the decision using the word "{verdict_word}" and cites the document ids above.""",
)

DRAFT_REMINDER = '\n\nREMINDER: the decision is "{verdict_word}"; the paragraph must state exactly that decision.'

_EVIDENCE_RE = re.compile(r"^[ \t]*evidence[ \t]*:[ \t]*(.*)$", re.IGNORECASE | re.MULTILINE)


def _parse_signal(reply: str, key: str) -> tuple[bool, list[str]] | None:
    m = re.search(rf"^\s*{key}\s*:\s*(yes|no|sim|não|nao)\b", reply, re.IGNORECASE | re.MULTILINE)
    if not m:
        return None
    present = m.group(1).lower() in ("yes", "sim")
    ev = _EVIDENCE_RE.search(reply)
    ids = [x.strip() for x in re.split(r"[,\s]+", ev.group(1)) if x.strip()] if ev else []
    return present, ids


def detect_active_contract(
    considered_docs: Sequence[ExtractedDocument],
    search: SearchService,
    gateway: Gateway,
    *,
    keywords: Sequence[str] = DEFAULT_CONTRACT_KEYWORDS,
    query: str = DEFAULT_CONTRACT_QUERY,
    stage: str = "periculum",
) -> Signal:
    if not considered_docs:
        raise ValueError("no documents to examine")
    ids = [d.doc_id for d in considered_docs]
    lowered = [k.casefold() for k in keywords]
    keyword_docs = [d.doc_id for d in considered_docs if any(k in d.text.casefold() for k in lowered)]

    flags: list[str] = []
    llm_docs: list[str] = []
    hits = search.search(CorpusId.CASE_DOCUMENTS, query, only_docs=ids)
    if hits:
        passages = "\n".join(f"[document {h.doc_id}] {h.text}" for h in hits)
        skeleton = render_prompt(ACTIVE_CONTRACT_TEMPLATE, {"passages": ""})
        passages = gateway.fit(passages, gateway.count(skeleton))
        reply = gateway.ask(ACTIVE_CONTRACT_TEMPLATE, {"passages": passages}, stage=stage)
        parsed = _parse_signal(reply, "ACTIVE_CONTRACT")
        if parsed is None:
            logger.warning("active-contract reply unparseable; ignoring the indirect signal")
            flags.append("active_contract_unparseable")
        elif parsed[0]:
            cited = [i for i in parsed[1] if i in ids]
            llm_docs = cited or list(dict.fromkeys(h.doc_id for h in hits))

    evidence = [i for i in ids if i in set(keyword_docs) | set(llm_docs)]
    return Signal(bool(evidence), evidence, flags)


def _ask_signal(gateway: Gateway, template: PromptTemplate, variables: Mapping[str, str],
                stage: str) -> tuple[bool, list[str]] | None:
    prompt = render_prompt(template, variables)
    for suffix in ("", "\n\nFORMAT REMINDER: answer with 'DELAY_EVENT: yes' or 'DELAY_EVENT: no'."):
        parsed = _parse_signal(gateway.ask_raw(prompt + suffix, template.template_id, stage=stage), "DELAY_EVENT")
        if parsed is not None:
            return parsed
    return None


def detect_delay_events(
    considered_docs: Sequence[ExtractedDocument],
    gateway: Gateway,
    *,
    per_doc_calls: int = DEFAULT_PER_DOC_CALLS,
    stage: str = "periculum",
) -> Signal:
    """Ask the model about each document; no keyword path is used here."""
    if not considered_docs:
        raise ValueError("no documents to examine")
    evidence: list[str] = []
    flags: list[str] = []

    single, rest = list(considered_docs[:per_doc_calls]), list(considered_docs[per_doc_calls:])
    for doc in single:
        skeleton = render_prompt(DELAY_TEMPLATE, {"doc_id": doc.doc_id, "document": ""})
        text = gateway.fit(doc.text, gateway.count(skeleton))
        parsed = _ask_signal(gateway, DELAY_TEMPLATE, {"doc_id": doc.doc_id, "document": text}, stage)
        if parsed is None:
            flags.append(f"delay_unparseable:{doc.doc_id}")
        elif parsed[0]:
            evidence.append(doc.doc_id)

    for start in range(0, len(rest), DELAY_BATCH_SIZE):
        batch = rest[start : start + DELAY_BATCH_SIZE]
        share = max(1, (gateway.prompt_budget - 500) // len(batch))
        summaries = "\n\n".join(
            f"### Document {d.doc_id}\n{gateway.fit(d.text, gateway.prompt_budget - share)}" for d in batch
        )
        parsed = _ask_signal(gateway, DELAY_BATCH_TEMPLATE, {"documents": summaries}, stage)
        batch_ids = [d.doc_id for d in batch]
        if parsed is None:
            flags.append("delay_unparseable:" + ",".join(batch_ids))
        elif parsed[0]:
            evidence.extend([i for i in parsed[1] if i in batch_ids] or batch_ids)

    return Signal(bool(evidence), evidence, flags)


_VERDICT_WORDS = {PericulumVerdict.ACCEPTED: "accepted", PericulumVerdict.REJECTED: "rejected"}


def _states_verdict(text: str, verdict: PericulumVerdict) -> bool:
    lowered = text.lower()
    other = PericulumVerdict.ACCEPTED if verdict is PericulumVerdict.REJECTED else PericulumVerdict.REJECTED
    return (re.search(rf"\b{_VERDICT_WORDS[verdict]}\b", lowered) is not None
            and re.search(rf"\b{_VERDICT_WORDS[other]}\b", lowered) is None)


def draft_periculum_text(finding: PericulumFinding, gateway: Gateway, *, stage: str = "periculum") -> str:
    def describe(sig: Signal) -> str:
        if sig.present:
            return "yes (documents " + ", ".join(sig.evidence_doc_ids) + ")"
        return "no"

    word = _VERDICT_WORDS[finding.verdict]
    variables = {
        "active": describe(finding.active_contract),
        "delay": describe(finding.delay_event),
        "verdict": finding.verdict.value,
        "verdict_word": word,
    }
    prompt = render_prompt(DRAFT_TEMPLATE, variables)
    text = gateway.ask_raw(prompt, DRAFT_TEMPLATE.template_id, stage=stage).strip()
    if _states_verdict(text, finding.verdict):
        return text
    logger.info("periculum draft contradicts the decision; regenerating")
    text = gateway.ask_raw(prompt + DRAFT_REMINDER.format(verdict_word=word),
                           DRAFT_TEMPLATE.template_id, stage=stage).strip()
    if _states_verdict(text, finding.verdict):
        return text
    raise DraftMismatch(f"drafted paragraph does not state the decision {word!r}")


def analyse_periculum(
    docs: Sequence[ExtractedDocument],
    search: SearchService,
    gateway: Gateway,
    *,
    keywords: Sequence[str] = DEFAULT_CONTRACT_KEYWORDS,
    per_doc_calls: int = DEFAULT_PER_DOC_CALLS,
    stage: str = "periculum",
) -> PericulumFinding:
    """Run the rule flow step by step: flag drafts, active contract, delay events, decide, draft."""
    split = flag_draft_contract_docs(docs)
    considered = [d for d in docs if d.doc_id in set(split.considered)]
    active = detect_active_contract(considered, search, gateway, keywords=keywords, stage=stage)
    delay = detect_delay_events(considered, gateway, per_doc_calls=per_doc_calls, stage=stage)
    finding = PericulumFinding(
        split.flagged, split.considered, active, delay,
        decide_periculum(active.present, delay.present),
        active.flags + delay.flags,
    )
    finding.draft_text = draft_periculum_text(finding, gateway, stage=stage)
    return finding


# -- fumus boni iuris ------------------------------------------------------


class FumusLabel(str, enum.Enum):
    GROUNDED_IN_LAW = "GroundedInLaw"
    NOT_GROUNDED = "NotGrounded"
    INCONCLUSIVE = "Inconclusive"


_FUMUS_WORDS = [
    ("not grounded", FumusLabel.NOT_GROUNDED),
    ("não fundamentada", FumusLabel.NOT_GROUNDED),
    ("grounded", FumusLabel.GROUNDED_IN_LAW),
    ("fundamentada", FumusLabel.GROUNDED_IN_LAW),
    ("inconclusive", FumusLabel.INCONCLUSIVE),
    ("inconclusiva", FumusLabel.INCONCLUSIVE),
]

FUMUS_CORPORA = (CorpusId.STATUTES_FEDERAL_LAW, CorpusId.JURISPRUDENCE, CorpusId.CASE_DOCUMENTS)

FUMUS_TASK = """You are an intelligent agent capable of reasoning and interpreting legal documents.
Classify the allegation below as grounded in law, not grounded in law, or inconclusive.
Search the statutes and federal law corpus for the laws the allegation invokes, and the jurisprudence corpus for precedents on the same issue.
When you conclude, the answer must start with one of: grounded, not grounded, inconclusive; then give a short justification.

Allegation {index}: {text}"""


def parse_fumus_label(answer: str) -> tuple[FumusLabel, str] | None:
    text = answer.strip()
    lowered = text.lower()
    for word, label in _FUMUS_WORDS:
        if lowered.startswith(word):
            rest = text[len(word):].lstrip(" .,:;-")
            return label, rest
    return None


@dataclass
class FumusClassification:
    allegation_index: int
    label: FumusLabel
    rationale: str
    citations: list[Citation] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    trace: dict | None = None

    def to_dict(self) -> dict:
        return {
            "allegation_index": self.allegation_index,
            "label": self.label.value,
            "rationale": self.rationale,
            "citations": [c.to_dict() for c in self.citations],
            "flags": list(self.flags),
            "trace": self.trace,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> FumusClassification:
        return cls(data["allegation_index"], FumusLabel(data["label"]), data["rationale"],
                   [Citation.from_dict(c) for c in data["citations"]], list(data.get("flags", [])),
                   data.get("trace"))


@dataclass
class FumusReport:
    classifications: list[FumusClassification]
    summary: str

    def to_dict(self) -> dict:
        return {"summary": self.summary, "classifications": [c.to_dict() for c in self.classifications]}

    @classmethod
    def from_dict(cls, data: Mapping) -> FumusReport:
        return cls([FumusClassification.from_dict(c) for c in data["classifications"]], data["summary"])


def classify_allegation_fumus(
    allegation: Item,
    search: SearchService,
    gateway: Gateway,
    *,
    max_steps: int = FUMUS_STEP_BUDGET,
    stage: str = "fumus",
) -> FumusClassification:
    if not allegation.text.strip():
        raise ValueError("allegation text is empty")
    task = FUMUS_TASK.format(index=allegation.index, text=allegation.text)
    trace = react_loop(gateway, search.tools(FUMUS_CORPORA), task, max_steps,
                       template_id="fumus.react", stage=stage)
    citations = [Citation(h.corpus, h.doc_id, h.passage_id) for h in trace.hits()]

    if trace.status is TraceStatus.BUDGET_EXHAUSTED:
        return FumusClassification(
            allegation.index, FumusLabel.INCONCLUSIVE,
            f"The agent reached its limit of {max_steps} steps without a conclusion.",
            citations, ["budget_exhausted"], trace.to_dict(),
        )

    flags: list[str] = []
    parsed = parse_fumus_label(trace.answer)
    if parsed is None:
        label, justification = FumusLabel.INCONCLUSIVE, trace.answer
        flags.append("unparseable_label")
    else:
        label, justification = parsed
    if label is not FumusLabel.INCONCLUSIVE and trace.search_count == 0:
        flags.append("concluded_without_search")
        label = FumusLabel.INCONCLUSIVE

    thought = trace.steps[-1].thought
    rationale = " ".join(p for p in (thought, justification) if p).strip() or "No justification given."
    return FumusClassification(allegation.index, label, rationale, citations, flags, trace.to_dict())


def summarize_fumus(classifications: Sequence[FumusClassification]) -> str:
    counts = {label: sum(1 for c in classifications if c.label is label) for label in FumusLabel}
    n = len(classifications)
    return (
        f"Of {n} allegation{'s' if n != 1 else ''}, {counts[FumusLabel.GROUNDED_IN_LAW]} "
        f"appear grounded in law, {counts[FumusLabel.NOT_GROUNDED]} not grounded, and "
        f"{counts[FumusLabel.INCONCLUSIVE]} inconclusive."
    )


def analyse_fumus(
    allegations: Sequence[Item],
    search: SearchService,
    gateway: Gateway,
    *,
    max_steps: int = FUMUS_STEP_BUDGET,
    stage: str = "fumus",
) -> FumusReport:
    out = [classify_allegation_fumus(a, search, gateway, max_steps=max_steps, stage=stage) for a in allegations]
    return FumusReport(out, summarize_fumus(out))
