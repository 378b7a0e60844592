"""Validation table construction from standardized instruction documents.

Instruction documents carry five canonical section headers. Sections are
isolated with regular expressions, and the admissibility and precautionary
labels are read from ``Criterion: Label`` lines inside their sections.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from auditcase.admissibility import CRITERION_TITLES, Criterion, VerdictLabel
from auditcase.errors import (
    AuditCaseError,
    FormParseError,
    LabelParseError,
    MalformedInstruction,
    SectionNotFound,
)
from auditcase.extraction import FormSchema, parse_form_lines

logger = logging.getLogger(__name__)


class SectionId(str, enum.Enum):
    BASIC_INFO = "BasicInfo"
    CLAIMS_REQUESTS = "ClaimsRequests"
    ADMISSIBILITY = "Admissibility"
    PRECAUTIONARY = "Precautionary"
    RECOMMENDATIONS = "Recommendations"


SECTION_TITLES = {
    SectionId.BASIC_INFO: "Basic Information",
    SectionId.CLAIMS_REQUESTS: "Claims and Requests",
    SectionId.ADMISSIBILITY: "Admissibility Examination",
    SectionId.PRECAUTIONARY: "Precautionary Measures",
    SectionId.RECOMMENDATIONS: "Recommendations",
}

DEFAULT_HEADER_PATTERNS: dict[SectionId, list[str]] = {
    SectionId.BASIC_INFO: [r"basic information", r"informa[çc][õo]es b[áa]sicas"],
    SectionId.CLAIMS_REQUESTS: [r"claims and requests", r"alega[çc][õo]es e pedidos"],
    SectionId.ADMISSIBILITY: [r"admissibility examination", r"exame de admissibilidade"],
    SectionId.PRECAUTIONARY: [r"precautionary measures?(?: analysis)?", r"an[áa]lise (?:da|de) medida cautelar"],
    SectionId.RECOMMENDATIONS: [r"recommendations", r"proposta de encaminhamento"],
}


class PrecautionaryCriterion(str, enum.Enum):
    PERICULUM = "Periculum"
    REVERSE_PERICULUM = "ReversePericulum"
    FUMUS = "Fumus"


class PrecautionaryValue(str, enum.Enum):
    DISMISSED = "Dismissed"
    CONFIGURED = "Configured"
    INCONCLUSIVE = "Inconclusive"
    NOT_ANALYZED = "NotAnalyzed"


PRECAUTIONARY_TITLES = {
    PrecautionaryCriterion.PERICULUM: "Periculum in mora",
    PrecautionaryCriterion.REVERSE_PERICULUM: "Reverse periculum in mora",
    PrecautionaryCriterion.FUMUS: "Fumus boni iuris",
}

ADMISSIBILITY_LABEL_TEXT = {
    VerdictLabel.YES: "Yes (met)",
    VerdictLabel.NO: "No (not met)",
    VerdictLabel.PARTIAL: "Partial (partially met)",
    VerdictLabel.NOT_APPLICABLE: "Not applicable",
}

PRECAUTIONARY_LABEL_TEXT = {
    PrecautionaryValue.DISMISSED: "Dismissed (rejected)",
    PrecautionaryValue.CONFIGURED: "Configured (accepted)",
    PrecautionaryValue.INCONCLUSIVE: "Inconclusive",
    PrecautionaryValue.NOT_ANALYZED: "Not analyzed",
}

DEFAULT_CRITERION_PATTERNS: dict[Criterion, list[str]] = {
    Criterion.LEGITIMACY: [r"legitimacy", r"legitimidade"],
    Criterion.COMPETENCY: [r"competency", r"compet[êe]ncia"],
    Criterion.EXISTENCE_OF_EVIDENCE: [r"existence of evidence", r"(?:exist[êe]ncia de )?ind[íi]cios"],
    Criterion.PUBLIC_INTEREST: [r"(?:existence of )?public interest", r"interesse p[úu]blico"],
    Criterion.CLEAR_WRITING: [r"clear writing(?: and language)?", r"reda[çc][ãa]o clara"],
}

DEFAULT_PRECAUTIONARY_PATTERNS: dict[PrecautionaryCriterion, list[str]] = {
    PrecautionaryCriterion.PERICULUM: [r"periculum in mora"],
    PrecautionaryCriterion.REVERSE_PERICULUM: [r"reverse periculum in mora", r"periculum in mora reverso"],
    PrecautionaryCriterion.FUMUS: [r"fumus boni [ij]uris"],
}

DEFAULT_ADMISSIBILITY_VALUES: dict[VerdictLabel, list[str]] = {
    VerdictLabel.YES: [r"yes(?: \(met\))?", r"sim", r"atendido"],
    VerdictLabel.NO: [r"no(?: \(not met\))?", r"n[ãa]o", r"n[ãa]o atendido"],
    VerdictLabel.PARTIAL: [r"partial(?: \(partially met\))?", r"parcial(?:mente atendido)?"],
    VerdictLabel.NOT_APPLICABLE: [r"not applicable", r"n[ãa]o se aplica", r"n/a"],
}

DEFAULT_PRECAUTIONARY_VALUES: dict[PrecautionaryValue, list[str]] = {
    PrecautionaryValue.DISMISSED: [r"dismissed(?: \(rejected\))?", r"n[ãa]o configurado", r"afastado"],
    PrecautionaryValue.CONFIGURED: [r"configured(?: \(accepted\))?", r"configurado"],
    PrecautionaryValue.INCONCLUSIVE: [r"inconclusive", r"inconclusivo"],
    PrecautionaryValue.NOT_ANALYZED: [r"not analy[sz]ed", r"n[ãa]o analisado"],
}

_CLAIMS_SUBHEAD = r"^[ \t]*(?:#+[ \t]*)?(?:claims|allegations|alega[çc][õo]es)[ \t]*:?[ \t]*$"
_REQUESTS_SUBHEAD = r"^[ \t]*(?:#+[ \t]*)?(?:requests|pedidos)[ \t]*:?[ \t]*$"


def _alternation(patterns: Iterable[str]) -> str:
    return "(?:" + "|".join(patterns) + ")"


@dataclass
class ParserConfig:
    """Header and label patterns; the defaults cover English and Portuguese forms."""

    headers: dict[SectionId, list[str]] = field(default_factory=lambda: dict(DEFAULT_HEADER_PATTERNS))
    criteria: dict[Criterion, list[str]] = field(default_factory=lambda: dict(DEFAULT_CRITERION_PATTERNS))
    precautionary: dict[PrecautionaryCriterion, list[str]] = field(
        default_factory=lambda: dict(DEFAULT_PRECAUTIONARY_PATTERNS))
    admissibility_values: dict[VerdictLabel, list[str]] = field(
        default_factory=lambda: dict(DEFAULT_ADMISSIBILITY_VALUES))
    precautionary_values: dict[PrecautionaryValue, list[str]] = field(
        default_factory=lambda: dict(DEFAULT_PRECAUTIONARY_VALUES))

    def header_re(self, section: SectionId) -> re.Pattern[str]:
        return re.compile(
            r"^[ \t]*(?:#{1,6}[ \t]*)?(?:\d+(?:\.\d+)*[.)]?[ \t]+)?"
            + _alternation(self.headers[section]) + r"[ \t]*:?[ \t]*$",
            re.IGNORECASE | re.MULTILINE,
        )

    @classmethod
    def from_json(cls, data: Mapping) -> ParserConfig:
        cfg = cls()
        for key, target, enum_cls in (
            ("headers", cfg.headers, SectionId),
            ("criteria", cfg.criteria, Criterion),
            ("precautionary", cfg.precautionary, PrecautionaryCriterion),
            ("admissibility_values", cfg.admissibility_values, VerdictLabel),
            ("precautionary_values", cfg.precautionary_values, PrecautionaryValue),
        ):
            for name, pats in data.get(key, {}).items():
                target[enum_cls(name)] = list(pats)
        return cfg


DEFAULT_PARSER = ParserConfig()


@dataclass(frozen=True)
class StandardInstruction:
    case_id: str
    full_text: str


def _locate_headers(doc: StandardInstruction, config: ParserConfig) -> dict[SectionId, list[re.Match[str]]]:
    return {sid: list(config.header_re(sid).finditer(doc.full_text)) for sid in SectionId}


def section_spans(
    doc: StandardInstruction, config: ParserConfig = DEFAULT_PARSER, *, require_all: bool = True
) -> dict[SectionId, tuple[int, int]]:
    """Character spans of each section body, from after its header line to the next header."""
    found = _locate_headers(doc, config)
    for sid, matches in found.items():
        if len(matches) > 1:
            raise MalformedInstruction(f"{doc.case_id}: header for {sid.value} appears {len(matches)} times")
    text = doc.full_text
    # a header line owns its terminating newline
    present = sorted(
        ((m[0].start(), m[0].end() + (text[m[0].end():m[0].end() + 1] == "\n"), sid)
         for sid, m in found.items() if m),
        key=lambda t: t[0],
    )
    order = [sid for _, _, sid in present]
    if order != [sid for sid in SectionId if found[sid]]:
        raise MalformedInstruction(f"{doc.case_id}: sections out of order: {[s.value for s in order]}")
    if require_all:
        missing = [sid.value for sid in SectionId if not found[sid]]
        if missing:
            raise SectionNotFound(f"{doc.case_id}: missing sections {missing}")
    spans = {}
    for i, (_, end, sid) in enumerate(present):
        stop = present[i + 1][0] if i + 1 < len(present) else len(doc.full_text)
        spans[sid] = (end, stop)
    return spans


def isolate_section(
    doc: StandardInstruction, section: SectionId, config: ParserConfig = DEFAULT_PARSER
) -> str:
    spans = section_spans(doc, config, require_all=False)
    if section not in spans:
        raise SectionNotFound(f"{doc.case_id}: no {section.value} header")
    start, stop = spans[section]
    return doc.full_text[start:stop]


def _read_labels(text: str, names: Mapping, values: Mapping, kind: str) -> dict:
    out = {}
    for criterion, patterns in names.items():
        line_re = re.compile(
            r"^[ \t]*(?:[-*][ \t]*)?" + _alternation(patterns) + r"[ \t]*:[ \t]*(.*?)[ \t]*$",
            re.IGNORECASE | re.MULTILINE,
        )
        m = line_re.search(text)
        if not m:
            raise LabelParseError(criterion.value, f"no {kind} line")
        token = m.group(1).strip().rstrip(".")
        for label, pats in values.items():
            if re.fullmatch(_alternation(pats), token, re.IGNORECASE):
                out[criterion] = label
                break
        else:
            raise LabelParseError(criterion.value, f"unknown label {token!r}")
    return out


def extract_labels(doc: StandardInstruction, config: ParserConfig = DEFAULT_PARSER) -> dict:
    adm_text = isolate_section(doc, SectionId.ADMISSIBILITY, config)
    prec_text = isolate_section(doc, SectionId.PRECAUTIONARY, config)
    return {
        "admissibility": _read_labels(adm_text, config.criteria, config.admissibility_values, "admissibility"),
        "precautionary": _read_labels(prec_text, config.precautionary, config.precautionary_values,
                                      "precautionary"),
    }


def split_claims_requests(text: str) -> tuple[str, str]:
    claims = re.search(_CLAIMS_SUBHEAD, text, re.IGNORECASE | re.MULTILINE)
    requests = re.search(_REQUESTS_SUBHEAD, text, re.IGNORECASE | re.MULTILINE)
    if not claims and not requests:
        return text.strip(), ""
    if claims and requests and claims.start() < requests.start():
        return text[claims.end():requests.start()].strip(), text[requests.end():].strip()
    if claims and requests:
        return text[claims.end():].strip(), text[requests.end():claims.start()].strip()
    if claims:
        return text[claims.end():].strip(), ""
    return "", text[requests.end():].strip()


def parse_basic_info(text: str, schema: FormSchema) -> dict[str, str | None]:
    try:
        parsed = parse_form_lines(text, schema.names)
    except FormParseError:
        return {n: None for n in schema.names}
    return {n: v for n, (v, _) in parsed.items()}


@dataclass
class ValidationRecord:
    case_id: str
    basic_info: dict[str, str | None]
    claims_text: str
    requests_text: str
    admissibility: dict[Criterion, VerdictLabel]
    precautionary: dict[PrecautionaryCriterion, PrecautionaryValue]
    recommendations_text: str

    def __post_init__(self) -> None:
        if set(self.admissibility) != set(Criterion):
            raise ValueError("record needs all five admissibility labels")
        if set(self.precautionary) != set(PrecautionaryCriterion):
            raise ValueError("record needs all three precautionary labels")

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "basic_info": dict(self.basic_info),
            "claims_text": self.claims_text,
            "requests_text": self.requests_text,
            "admissibility": {c.value: self.admissibility[c].value for c in Criterion},
            "precautionary": {c.value: self.precautionary[c].value for c in PrecautionaryCriterion},
            "recommendations_text": self.recommendations_text,
        }

    def label_row(self) -> dict[str, str]:
        row = {"case_id": self.case_id}
        row.update({c.value: self.admissibility[c].value for c in Criterion})
        row.update({c.value: self.precautionary[c].value for c in PrecautionaryCriterion})
        return row

    @classmethod
    def from_dict(cls, data: Mapping) -> ValidationRecord:
        return cls(
            data["case_id"],
            dict(data["basic_info"]),
            data["claims_text"],
            data["requests_text"],
            {Criterion(k): VerdictLabel(v) for k, v in data["admissibility"].items()},
            {PrecautionaryCriterion(k): PrecautionaryValue(v) for k, v in data["precautionary"].items()},
            data["recommendations_text"],
        )


def parse_instruction(
    doc: StandardInstruction,
    schema: FormSchema,
    config: ParserConfig = DEFAULT_PARSER,
    basic_info_extractor=None,
) -> ValidationRecord:
    """Parse one instruction into a record.

    ``basic_info_extractor`` optionally replaces the line parser for the basic
    information section (e.g. a model-backed form filler); it receives the
    section text and returns the field map.
    """
    spans = section_spans(doc, config)
    text = {sid: doc.full_text[a:b] for sid, (a, b) in spans.items()}
    labels = extract_labels(doc, config)
    claims, requests = split_claims_requests(text[SectionId.CLAIMS_REQUESTS])
    if not claims and not requests:
        raise MalformedInstruction(f"{doc.case_id}: empty claims and requests section")
    recommendations = text[SectionId.RECOMMENDATIONS].strip()
    if not recommendations:
        raise MalformedInstruction(f"{doc.case_id}: empty recommendations section")
    if basic_info_extractor is None:
        basic = parse_basic_info(text[SectionId.BASIC_INFO], schema)
    else:
        basic = basic_info_extractor(text[SectionId.BASIC_INFO])
    return ValidationRecord(doc.case_id, basic, claims, requests, labels["admissibility"],
                            labels["precautionary"], recommendations)


@dataclass
class TableError:
    case_id: str
    error: str
    message: str

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "error": self.error, "message": self.message}


def build_validation_table(
    docs: Sequence[StandardInstruction],
    schema: FormSchema,
    config: ParserConfig = DEFAULT_PARSER,
    basic_info_extractor=None,
) -> tuple[list[ValidationRecord], list[TableError]]:
    if not docs:
        logger.warning("no instruction documents given; the validation table is empty")
    records, errors = [], []
    for doc in docs:
        try:
            records.append(parse_instruction(doc, schema, config, basic_info_extractor))
        except (AuditCaseError, ValueError) as exc:
            logger.warning("skipping %s: %s", doc.case_id, exc)
            errors.append(TableError(doc.case_id, type(exc).__name__, str(exc)))
    return records, errors


# -- rendering --------------------------------------------------------------


def admissibility_label_lines(labels: Mapping[Criterion, VerdictLabel]) -> str:
    return "\n".join(f"{CRITERION_TITLES[c]}: {ADMISSIBILITY_LABEL_TEXT[labels[c]]}" for c in Criterion)


def precautionary_label_lines(labels: Mapping[PrecautionaryCriterion, PrecautionaryValue]) -> str:
    return "\n".join(
        f"{PRECAUTIONARY_TITLES[c]}: {PRECAUTIONARY_LABEL_TEXT[labels[c]]}" for c in PrecautionaryCriterion
    )


def render_instruction(record: ValidationRecord) -> StandardInstruction:
    """Write a record back out as a standardized instruction document."""
    basic = "\n".join(f"{k}: {v}" for k, v in record.basic_info.items() if v is not None)
    claims_block = f"Claims:\n{record.claims_text}\n\nRequests:\n{record.requests_text}"
    bodies = {
        SectionId.BASIC_INFO: basic,
        SectionId.CLAIMS_REQUESTS: claims_block,
        SectionId.ADMISSIBILITY: admissibility_label_lines(record.admissibility),
        SectionId.PRECAUTIONARY: precautionary_label_lines(record.precautionary),
        SectionId.RECOMMENDATIONS: record.recommendations_text,
    }
    parts = [f"# Instruction {record.case_id}\n"]
    for sid in SectionId:
        parts.append(f"## {SECTION_TITLES[sid]}\n\n{bodies[sid]}\n")
    return StandardInstruction(record.case_id, "\n".join(parts))


# -- serialization ------------------------------------------------------------


def write_jsonl(records: Iterable[ValidationRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[ValidationRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ValidationRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


LABEL_COLUMNS = ["case_id"] + [c.value for c in Criterion] + [c.value for c in PrecautionaryCriterion]


def write_labels_csv(records: Iterable[ValidationRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LABEL_COLUMNS)
        writer.writeheader()
        writer.writerows(rec.label_row() for rec in records)


def load_instruction_dir(path: str | Path) -> list[StandardInstruction]:
    root = Path(path)
    files = sorted(p for p in root.iterdir() if p.suffix in (".md", ".txt") and p.is_file())
    return [StandardInstruction(p.stem, p.read_text(encoding="utf-8")) for p in files]
