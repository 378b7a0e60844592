"""Instruction drafting: one independently generated section per stage group.

Each section records a digest of the stage outputs it consumed, so a section
can be regenerated alone when one of its inputs changes.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace

from auditcase.admissibility import CRITERION_TITLES, AdmissibilityReport
from auditcase.errors import AssemblyError, MissingStage, ParseError
from auditcase.extraction import AllegationList, FilledForm
from auditcase.llm.gateway import Gateway
from auditcase.llm.templates import PromptTemplate, render_prompt
from auditcase.precautionary import FumusLabel, FumusReport, PericulumFinding, PericulumVerdict
from auditcase.validation import (
    ADMISSIBILITY_LABEL_TEXT,
    SECTION_TITLES,
    PrecautionaryCriterion,
    PrecautionaryValue,
    SectionId,
    admissibility_label_lines,
    precautionary_label_lines,
)

SCHEMA_VERSION = 1

SECTION_DEPENDENCIES: dict[SectionId, tuple[str, ...]] = {
    SectionId.BASIC_INFO: ("basic_info",),
    SectionId.CLAIMS_REQUESTS: ("allegations",),
    SectionId.ADMISSIBILITY: ("admissibility",),
    SectionId.PRECAUTIONARY: ("periculum", "fumus"),
    SectionId.RECOMMENDATIONS: ("admissibility", "periculum", "fumus", "allegations"),
}

SECTION_TEMPLATE = PromptTemplate(
    "instruction.section",
    """## Task
You are drafting the "{title}" section of the initial instruction of an audit case.
Follow the guidelines and the examples written by experienced auditors.

## Guidelines
{guidelines}

## Examples
{examples}

## Inputs
{inputs}

Write the text of the section in one or more paragraphs, without a heading.""",
)


@dataclass
class Guidelines:
    """Auditor guidelines and exemplar texts, global or per section."""

    text: str = "Write in formal, objective language. State conclusions and the facts supporting them."
    examples: list[str] = field(default_factory=list)
    per_section: dict[SectionId, tuple[str | None, list[str]]] = field(default_factory=dict)

    def for_section(self, section: SectionId) -> tuple[str, list[str]]:
        text, examples = self.per_section.get(section, (None, []))
        return text or self.text, list(examples) or list(self.examples)

    def to_json(self) -> dict:
        return {
            "guidelines": self.text,
            "examples": list(self.examples),
            "sections": {
                sid.value: {"guidelines": text, "examples": list(examples)}
                for sid, (text, examples) in sorted(self.per_section.items())
            },
        }

    @classmethod
    def from_json(cls, data: Mapping) -> Guidelines:
        g = cls(data.get("guidelines", cls.text), list(data.get("examples", [])))
        for name, entry in data.get("sections", {}).items():
            g.per_section[SectionId(name)] = (entry.get("guidelines"), list(entry.get("examples", [])))
        return g


def canonical_json(data) -> str:
    return json.dumps(data, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def inputs_digest(section: SectionId, stage_outputs: Mapping[str, dict]) -> str:
    consumed = {name: stage_outputs[name] for name in SECTION_DEPENDENCIES[section]}
    return hashlib.sha256(canonical_json(consumed).encode("utf-8")).hexdigest()


# -- input rendering --------------------------------------------------------


def _basic_info_inputs(outputs: Mapping[str, dict]) -> str:
    form = FilledForm.from_dict(outputs["basic_info"])
    return "\n".join(f"{k}: {v}" for k, v in form.values().items() if v is not None)


def _claims_inputs(outputs: Mapping[str, dict]) -> str:
    alleg = AllegationList.from_dict(outputs["allegations"])
    lines = ["Allegations:"] + [f"{i.index}. {i.text}" for i in alleg.allegations]
    lines += ["Requests:"] + [f"{i.index}. {i.text}" for i in alleg.requests]
    return "\n".join(lines)


def _admissibility_inputs(outputs: Mapping[str, dict]) -> str:
    report = AdmissibilityReport.from_dict(outputs["admissibility"])
    lines = [f"Overall: {'admissible' if report.overall_admissible else 'not admissible'}"]
    for v in report.verdicts:
        lines.append(f"{CRITERION_TITLES[v.criterion]}: {ADMISSIBILITY_LABEL_TEXT[v.label]}. {v.rationale}")
    return "\n".join(lines)


def _precautionary_inputs(outputs: Mapping[str, dict]) -> str:
    finding = PericulumFinding.from_dict(outputs["periculum"])
    fumus = FumusReport.from_dict(outputs["fumus"])
    lines = [f"Danger in delay: {finding.verdict.value}. {finding.draft_text}", f"Plausibility: {fumus.summary}"]
    lines += [f"Allegation {c.allegation_index}: {c.label.value}" for c in fumus.classifications]
    return "\n".join(lines)


def _recommendation_inputs(outputs: Mapping[str, dict]) -> str:
    # merits material: allegations paired with their plausibility rationale
    alleg = AllegationList.from_dict(outputs["allegations"])
    fumus = {c.allegation_index: c for c in FumusReport.from_dict(outputs["fumus"]).classifications}
    merits = []
    for item in alleg.allegations:
        c = fumus.get(item.index)
        verdict = f" [{c.label.value}] {c.rationale}" if c else ""
        merits.append(f"{item.index}. {item.text}{verdict}")
    return "\n".join([
        "Admissibility:", _admissibility_inputs(outputs),
        "", "Precautionary analyses:", _precautionary_inputs(outputs),
        "", "Merits:", *merits,
    ])


_RENDERERS = {
    SectionId.BASIC_INFO: _basic_info_inputs,
    SectionId.CLAIMS_REQUESTS: _claims_inputs,
    SectionId.ADMISSIBILITY: _admissibility_inputs,
    SectionId.PRECAUTIONARY: _precautionary_inputs,
    SectionId.RECOMMENDATIONS: _recommendation_inputs,
}


def fumus_overall(report: FumusReport) -> PrecautionaryValue:
    labels = [c.label for c in report.classifications]
    if any(lbl is FumusLabel.GROUNDED_IN_LAW for lbl in labels):
        return PrecautionaryValue.CONFIGURED
    if labels and all(lbl is FumusLabel.NOT_GROUNDED for lbl in labels):
        return PrecautionaryValue.DISMISSED
    return PrecautionaryValue.INCONCLUSIVE


def _label_block(section: SectionId, outputs: Mapping[str, dict]) -> str:
    """Standardized label lines appended to the drafted text, so drafts parse like reference instructions."""
    if section is SectionId.ADMISSIBILITY:
        report = AdmissibilityReport.from_dict(outputs["admissibility"])
        return admissibility_label_lines({v.criterion: v.label for v in report.verdicts})
    if section is SectionId.PRECAUTIONARY:
        finding = PericulumFinding.from_dict(outputs["periculum"])
        periculum = (PrecautionaryValue.CONFIGURED if finding.verdict is PericulumVerdict.ACCEPTED
                     else PrecautionaryValue.DISMISSED)
        return precautionary_label_lines({
            PrecautionaryCriterion.PERICULUM: periculum,
            PrecautionaryCriterion.REVERSE_PERICULUM: PrecautionaryValue.NOT_ANALYZED,
            PrecautionaryCriterion.FUMUS: fumus_overall(FumusReport.from_dict(outputs["fumus"])),
        })
    return ""


# -- sections and drafts ----------------------------------------------------


@dataclass(frozen=True)
class InstructionSection:
    section_id: SectionId
    text: str
    inputs_digest: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"section {self.section_id.value} has empty text")

    def to_dict(self) -> dict:
        return {"section_id": self.section_id.value, "text": self.text, "inputs_digest": self.inputs_digest}

    @classmethod
    def from_dict(cls, data: Mapping) -> InstructionSection:
        return cls(SectionId(data["section_id"]), data["text"], data["inputs_digest"])


def generate_section(
    section: SectionId,
    stage_outputs: Mapping[str, dict],
    guidelines: Guidelines,
    gateway: Gateway,
    *,
    stage: str = "recommendations",
) -> InstructionSection:
    for dep in SECTION_DEPENDENCIES[section]:
        if dep not in stage_outputs or stage_outputs[dep] is None:
            raise MissingStage(section.value, dep)
    text, examples = guidelines.for_section(section)
    variables = {
        "title": SECTION_TITLES[section],
        "guidelines": text,
        "examples": "\n\n".join(f"Example {i}:\n{e}" for i, e in enumerate(examples, start=1)) or "(none)",
        "inputs": "",
    }
    skeleton = render_prompt(SECTION_TEMPLATE, variables)
    variables["inputs"] = gateway.fit(_RENDERERS[section](stage_outputs), gateway.count(skeleton))
    prompt = render_prompt(SECTION_TEMPLATE, variables)
    body = gateway.ask_raw(prompt, f"instruction.{section.value}", stage=stage).strip()
    if not body:
        raise ParseError(f"model returned an empty {section.value} section")
    block = _label_block(section, stage_outputs)
    if block:
        body = f"{body}\n\n{block}"
    return InstructionSection(section, body, inputs_digest(section, stage_outputs))


@dataclass(frozen=True)
class InstructionDraft:
    case_id: str
    sections: tuple[InstructionSection, ...]
    generated_at: str

    def __post_init__(self) -> None:
        if [s.section_id for s in self.sections] != list(SectionId):
            raise AssemblyError("draft sections must be the five canonical sections in order")

    def section(self, section_id: SectionId) -> InstructionSection:
        return next(s for s in self.sections if s.section_id is section_id)

    def to_markdown(self) -> str:
        parts = [f"# Initial Instruction: case {self.case_id}", "", f"Generated at: {self.generated_at}", ""]
        for s in self.sections:
            parts += [f"## {SECTION_TITLES[s.section_id]}", "", s.text.strip(), ""]
        return "\n".join(parts)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "case_id": self.case_id,
            "generated_at": self.generated_at,
            "sections": [s.to_dict() for s in self.sections],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> InstructionDraft:
        return cls(data["case_id"], tuple(InstructionSection.from_dict(s) for s in data["sections"]),
                   data["generated_at"])


def assemble_instruction(case_id: str, sections: Sequence[InstructionSection], generated_at: str) -> InstructionDraft:
    ids = [s.section_id for s in sections]
    dupes = sorted({i.value for i in ids if ids.count(i) > 1})
    if dupes:
        raise AssemblyError(f"duplicate sections: {dupes}")
    missing = [s.value for s in SectionId if s not in ids]
    if missing:
        raise AssemblyError(f"missing sections: {missing}")
    by_id = {s.section_id: s for s in sections}
    return InstructionDraft(case_id, tuple(by_id[s] for s in SectionId), generated_at)


def regenerate_section(
    draft: InstructionDraft,
    section: SectionId,
    stage_outputs: Mapping[str, dict],
    guidelines: Guidelines,
    gateway: Gateway,
    *,
    stage: str = "recommendations",
) -> InstructionDraft:
    new = generate_section(section, stage_outputs, guidelines, gateway, stage=stage)
    sections = tuple(new if s.section_id is section else s for s in draft.sections)
    return replace(draft, sections=sections)


def draft_instruction(
    case_id: str,
    stage_outputs: Mapping[str, dict],
    guidelines: Guidelines,
    gateway: Gateway,
    generated_at: str,
    *,
    previous: InstructionDraft | None = None,
    stage: str = "recommendations",
) -> InstructionDraft:
    """Generate every section, reusing sections of ``previous`` whose inputs are unchanged."""
    sections = []
    for sid in SectionId:
        if previous is not None:
            old = previous.section(sid)
            if old.inputs_digest == inputs_digest(sid, stage_outputs):
                sections.append(old)
                continue
        sections.append(generate_section(sid, stage_outputs, guidelines, gateway, stage=stage))
    return assemble_instruction(case_id, sections, generated_at)
