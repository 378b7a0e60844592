"""Admissibility examination: one search-and-reason agent per criterion."""

from __future__ import annotations

import enum
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

from auditcase.errors import AuditCaseError
from auditcase.llm.agents import AgentTrace, TraceStatus, cot_reason, react_loop
from auditcase.llm.gateway import Gateway
from auditcase.retrieval import CorpusId, SearchService

logger = logging.getLogger(__name__)

DEFAULT_STEP_BUDGET = 6
# prompt room kept free for the growing scratchpad of search observations
SCRATCHPAD_RESERVE = 8_000


class Criterion(str, enum.Enum):
    LEGITIMACY = "Legitimacy"
    COMPETENCY = "Competency"
    EXISTENCE_OF_EVIDENCE = "ExistenceOfEvidence"
    PUBLIC_INTEREST = "PublicInterest"
    CLEAR_WRITING = "ClearWriting"


CRITERION_DEFINITIONS = {
    Criterion.LEGITIMACY: "the case must be submitted by a plaintiff entitled to file it under the court's bylaws.",
    Criterion.COMPETENCY: "the alleged wrongdoing must fall within the court's jurisdiction over federal funds.",
    Criterion.EXISTENCE_OF_EVIDENCE: "there must be enough evidence supporting the plaintiff's claims.",
    Criterion.PUBLIC_INTEREST: "the case must be of public interest, given potential monetary or non-monetary damage to the federal government.",
    Criterion.CLEAR_WRITING: "the main document must be written clearly and objectively.",
}

CRITERION_TITLES = {
    Criterion.LEGITIMACY: "Legitimacy",
    Criterion.COMPETENCY: "Competency",
    Criterion.EXISTENCE_OF_EVIDENCE: "Existence of evidence",
    Criterion.PUBLIC_INTEREST: "Existence of public interest",
    Criterion.CLEAR_WRITING: "Clear writing and language",
}


class VerdictLabel(str, enum.Enum):
    YES = "Yes"
    NO = "No"
    PARTIAL = "Partial"
    NOT_APPLICABLE = "NotApplicable"


# longest alternatives first so "not applicable" is not read as "no"
_LABEL_WORDS = [
    ("not applicable", VerdictLabel.NOT_APPLICABLE),
    ("não se aplica", VerdictLabel.NOT_APPLICABLE),
    ("n/a", VerdictLabel.NOT_APPLICABLE),
    ("partially", VerdictLabel.PARTIAL),
    ("partial", VerdictLabel.PARTIAL),
    ("parcial", VerdictLabel.PARTIAL),
    ("yes", VerdictLabel.YES),
    ("sim", VerdictLabel.YES),
    ("não", VerdictLabel.NO),
    ("nao", VerdictLabel.NO),
    ("no", VerdictLabel.NO),
]


def parse_verdict_label(answer: str) -> VerdictLabel | None:
    text = answer.strip().lower()
    for word, label in _LABEL_WORDS:
        if text.startswith(word) and (len(text) == len(word) or not text[len(word)].isalnum()):
            return label
    return None


@dataclass(frozen=True)
class Citation:
    corpus: CorpusId
    doc_id: str
    passage_id: str

    def to_dict(self) -> dict:
        return {"corpus": self.corpus.value, "doc_id": self.doc_id, "passage_id": self.passage_id}

    @classmethod
    def from_dict(cls, data: Mapping) -> Citation:
        return cls(CorpusId(data["corpus"]), data["doc_id"], data["passage_id"])


@dataclass
class CriterionVerdict:
    criterion: Criterion
    label: VerdictLabel
    rationale: str
    citations: list[Citation] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    trace: dict | None = None

    def __post_init__(self) -> None:
        if not self.rationale.strip():
            raise ValueError("verdict rationale must be nonempty")

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion.value,
            "label": self.label.value,
            "rationale": self.rationale,
            "citations": [c.to_dict() for c in self.citations],
            "flags": list(self.flags),
            "trace": self.trace,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> CriterionVerdict:
        return cls(Criterion(data["criterion"]), VerdictLabel(data["label"]), data["rationale"],
                   [Citation.from_dict(c) for c in data["citations"]], list(data.get("flags", [])),
                   data.get("trace"))


def is_admissible(verdicts: list[CriterionVerdict]) -> bool:
    """Aggregation policy: admissible unless some criterion is labelled No."""
    return all(v.label is not VerdictLabel.NO for v in verdicts)


@dataclass
class AdmissibilityReport:
    verdicts: list[CriterionVerdict]
    overall_admissible: bool
    review_required: bool = False

    def __post_init__(self) -> None:
        if [v.criterion for v in self.verdicts] != list(Criterion):
            raise ValueError("report must hold exactly one verdict per criterion, in order")

    def verdict(self, criterion: Criterion) -> CriterionVerdict:
        return next(v for v in self.verdicts if v.criterion is criterion)

    def to_dict(self) -> dict:
        return {
            "overall_admissible": self.overall_admissible,
            "review_required": self.review_required,
            "verdicts": [v.to_dict() for v in self.verdicts],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> AdmissibilityReport:
        return cls([CriterionVerdict.from_dict(v) for v in data["verdicts"]],
                   data["overall_admissible"], data.get("review_required", False))


@dataclass(frozen=True)
class CaseContext:
    case_id: str
    excerpt: str


TASK_TEMPLATE = """You are an intelligent agent capable of reasoning and interpreting legal documents.
You are examining whether an audit case meets one admissibility criterion.
Criterion: {title}
Definition: {definition}
Search the case documents and the external corpora (jurisprudence, statutes and federal law, internal codes) for information that confirms or refutes the criterion.
When you conclude, the answer must start with one of: yes, no, partial, not applicable.

Case: {case_id}
Main document excerpt:
{excerpt}"""


def examine_criterion(
    criterion: Criterion,
    context: CaseContext,
    search: SearchService,
    gateway: Gateway,
    *,
    max_steps: int = DEFAULT_STEP_BUDGET,
    stage: str = "admissibility",
) -> CriterionVerdict:
    title = CRITERION_TITLES[criterion]
    task = TASK_TEMPLATE.format(
        title=title, definition=CRITERION_DEFINITIONS[criterion],
        case_id=context.case_id, excerpt=context.excerpt,
    )
    task = gateway.fit(task, SCRATCHPAD_RESERVE)
    trace: AgentTrace = react_loop(
        gateway, search.tools(), task, max_steps, template_id="admissibility.react", stage=stage
    )
    hits = trace.hits()
    citations = [Citation(h.corpus, h.doc_id, h.passage_id) for h in hits]
    flags: list[str] = []

    if trace.status is TraceStatus.BUDGET_EXHAUSTED:
        logger.warning("admissibility %s: agent exhausted its step budget", criterion.value)
        return CriterionVerdict(
            criterion, VerdictLabel.NOT_APPLICABLE,
            f"The agent reached its limit of {max_steps} steps without concluding on {title.lower()}; "
            "the criterion needs manual review.",
            citations, ["budget_exhausted"], trace.to_dict(),
        )

    label = parse_verdict_label(trace.answer)
    if label is None:
        flags.append("unparseable_label")
        label = VerdictLabel.NOT_APPLICABLE

    if hits:
        question = f"Does the case meet the admissibility criterion '{title}'? Definition: {CRITERION_DEFINITIONS[criterion]}"
        reasoning = cot_reason(gateway, question, [h.text for h in hits],
                               template_id="admissibility.cot", stage=stage)
        rationale = reasoning.rationale_paragraph
    else:
        rationale = trace.steps[-1].thought or "The agent concluded without retrieving evidence."
        if label in (VerdictLabel.YES, VerdictLabel.NO):
            # a yes/no verdict must rest on retrieved passages
            flags.append("unsupported_verdict")
            label = VerdictLabel.NOT_APPLICABLE

    return CriterionVerdict(criterion, label, rationale, citations, flags, trace.to_dict())


def examine_all(
    context: CaseContext,
    search: SearchService,
    gateway: Gateway,
    *,
    max_steps: int = DEFAULT_STEP_BUDGET,
    stage: str = "admissibility",
) -> AdmissibilityReport:
    verdicts = []
    for criterion in Criterion:
        try:
            verdicts.append(examine_criterion(criterion, context, search, gateway,
                                              max_steps=max_steps, stage=stage))
        except AuditCaseError as exc:
            logger.error("admissibility %s failed: %s", criterion.value, exc)
            verdicts.append(CriterionVerdict(
                criterion, VerdictLabel.NOT_APPLICABLE,
                f"The examination of this criterion failed ({type(exc).__name__}); it needs manual review.",
                flags=[f"error:{type(exc).__name__}"],
            ))
    review = any(v.label in (VerdictLabel.PARTIAL, VerdictLabel.NOT_APPLICABLE) or v.flags for v in verdicts)
    return AdmissibilityReport(verdicts, is_admissible(verdicts), review)
