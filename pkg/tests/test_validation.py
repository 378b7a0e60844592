from __future__ import annotations

import csv
import logging

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from auditcase.admissibility import Criterion, VerdictLabel
from auditcase.errors import LabelParseError, MalformedInstruction, SectionNotFound
from auditcase.extraction import FormSchema
from auditcase.validation import (
    SECTION_TITLES,
    ParserConfig,
    PrecautionaryCriterion,
    PrecautionaryValue,
    SectionId,
    StandardInstruction,
    ValidationRecord,
    build_validation_table,
    extract_labels,
    isolate_section,
    load_instruction_dir,
    parse_instruction,
    read_jsonl,
    render_instruction,
    section_spans,
    write_jsonl,
    write_labels_csv,
)
from conftest import GOLDEN_INSTRUCTION

SCHEMA = FormSchema.load()

ADM_LINES = """Legitimacy: Yes (met)
Competency: No (not met)
Existence of evidence: Partial (partially met)
Existence of public interest: Not applicable
Clear writing and language: Yes (met)"""

PREC_LINES = """Periculum in mora: Dismissed (rejected)
Reverse periculum in mora: Not analyzed
Fumus boni iuris: Inconclusive"""

BODIES = {
    SectionId.BASIC_INFO: "case_id: TC-1\nstate: PR\n",
    SectionId.CLAIMS_REQUESTS: "Claims:\n1. A clause restricts competition.\n\nRequests:\n1. Suspend the bid.\n",
    SectionId.ADMISSIBILITY: f"Reasoning text.\n\n{ADM_LINES}\n",
    SectionId.PRECAUTIONARY: f"Analysis.\n\n{PREC_LINES}\n",
    SectionId.RECOMMENDATIONS: "We propose to admit the representation.",
}


def build_doc(bodies=BODIES, case_id="TC-1", skip=(), extra="") -> tuple[StandardInstruction, dict]:
    """Compose a document and remember the exact span of every body."""
    text = "# Instruction\n\n"
    spans = {}
    for sid in SectionId:
        if sid in skip:
            continue
        text += f"## {SECTION_TITLES[sid]}\n"
        start = len(text)
        text += bodies[sid]
        spans[sid] = (start, len(text))
        text += extra if sid is SectionId.BASIC_INFO else ""
    return StandardInstruction(case_id, text), spans


def test_each_isolation_returns_exact_span():
    doc, spans = build_doc()
    for sid, (a, b) in spans.items():
        assert isolate_section(doc, sid) == doc.full_text[a:b]
    assert section_spans(doc) == spans


def test_last_section_runs_to_eof():
    doc, _ = build_doc()
    assert isolate_section(doc, SectionId.RECOMMENDATIONS) == BODIES[SectionId.RECOMMENDATIONS]


def test_spans_disjoint_and_cover_body():
    doc, _ = build_doc()
    spans = sorted(section_spans(doc).values())
    for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
        assert b1 <= a2
        # the gap between spans is exactly one header line
        assert doc.full_text[b1:a2].startswith("## ") and doc.full_text[b1:a2].count("\n") == 1
    assert spans[-1][1] == len(doc.full_text)


def test_missing_header():
    doc, _ = build_doc(skip=(SectionId.RECOMMENDATIONS,))
    with pytest.raises(SectionNotFound):
        isolate_section(doc, SectionId.RECOMMENDATIONS)
    with pytest.raises(SectionNotFound):
        parse_instruction(doc, SCHEMA)


def test_duplicate_header():
    doc, _ = build_doc(extra="## Recommendations\nearly\n")
    with pytest.raises(MalformedInstruction):
        isolate_section(doc, SectionId.BASIC_INFO)


def test_out_of_order_headers():
    text = "## Claims and Requests\nx\n## Basic Information\ny\n"
    with pytest.raises(MalformedInstruction):
        section_spans(StandardInstruction("X", text), require_all=False)


def test_label_examples():
    doc, _ = build_doc()
    labels = extract_labels(doc)
    assert labels["admissibility"][Criterion.LEGITIMACY] is VerdictLabel.YES
    assert labels["admissibility"][Criterion.COMPETENCY] is VerdictLabel.NO
    assert labels["admissibility"][Criterion.EXISTENCE_OF_EVIDENCE] is VerdictLabel.PARTIAL
    assert labels["admissibility"][Criterion.PUBLIC_INTEREST] is VerdictLabel.NOT_APPLICABLE
    assert labels["precautionary"][PrecautionaryCriterion.PERICULUM] is PrecautionaryValue.DISMISSED
    assert labels["precautionary"][PrecautionaryCriterion.REVERSE_PERICULUM] is PrecautionaryValue.NOT_ANALYZED
    assert labels["precautionary"][PrecautionaryCriterion.FUMUS] is PrecautionaryValue.INCONCLUSIVE


def test_unknown_label_token():
    bodies = dict(BODIES)
    bodies[SectionId.ADMISSIBILITY] = ADM_LINES.replace("Legitimacy: Yes (met)", "Legitimacy: Maybe") + "\n"
    doc, _ = build_doc(bodies)
    with pytest.raises(LabelParseError) as exc:
        extract_labels(doc)
    assert exc.value.criterion == "Legitimacy"


def test_missing_label_line():
    bodies = dict(BODIES)
    bodies[SectionId.PRECAUTIONARY] = "Fumus boni iuris: Configured\n"
    with pytest.raises(LabelParseError):
        extract_labels(build_doc(bodies)[0])


def test_portuguese_forms():
    text = """## Informações Básicas
case_id: TC-9
## Alegações e Pedidos
Alegações:
Sobrepreço.
Pedidos:
Suspensão.
## Exame de Admissibilidade
Legitimidade: Sim
Competência: Sim
Indícios: Parcial
Interesse público: Não
Redação clara: Não se aplica
## Análise de Medida Cautelar
Periculum in mora: Configurado
Periculum in mora reverso: Não analisado
Fumus boni iuris: Não configurado
## Proposta de Encaminhamento
Conhecer da representação.
"""
    rec = parse_instruction(StandardInstruction("TC-9", text), SCHEMA)
    assert rec.admissibility[Criterion.PUBLIC_INTEREST] is VerdictLabel.NO
    assert rec.admissibility[Criterion.CLEAR_WRITING] is VerdictLabel.NOT_APPLICABLE
    assert rec.precautionary[PrecautionaryCriterion.PERICULUM] is PrecautionaryValue.CONFIGURED
    assert rec.precautionary[PrecautionaryCriterion.FUMUS] is PrecautionaryValue.DISMISSED
    assert (rec.claims_text, rec.requests_text) == ("Sobrepreço.", "Suspensão.")


def test_custom_parser_config():
    cfg = ParserConfig.from_json({"headers": {"Recommendations": ["next steps"]}})
    bodies = dict(BODIES)
    text = build_doc(bodies)[0].full_text.replace("## Recommendations", "## Next Steps")
    rec = parse_instruction(StandardInstruction("TC-1", text), SCHEMA, cfg)
    assert rec.recommendations_text == BODIES[SectionId.RECOMMENDATIONS]


def test_golden_instruction_parses():
    text = GOLDEN_INSTRUCTION.read_text(encoding="utf-8")
    rec = parse_instruction(StandardInstruction("TC-2024-0117", text), SCHEMA)
    assert rec.admissibility[Criterion.EXISTENCE_OF_EVIDENCE] is VerdictLabel.PARTIAL
    assert rec.precautionary[PrecautionaryCriterion.PERICULUM] is PrecautionaryValue.CONFIGURED
    assert rec.claims_text.startswith("1. Item 9.4")


def test_basic_info_extractor_hook():
    doc, _ = build_doc()
    rec = parse_instruction(doc, SCHEMA, basic_info_extractor=lambda text: {"seen": text.strip()})
    assert rec.basic_info == {"seen": "case_id: TC-1\nstate: PR"}


def test_line_parser_reads_schema_fields():
    rec = parse_instruction(build_doc()[0], SCHEMA)
    assert rec.basic_info["case_id"] == "TC-1" and rec.basic_info["state"] == "PR"
    assert rec.basic_info["municipality"] is None
    assert set(rec.basic_info) == set(SCHEMA.names)


# -- table ---------------------------------------------------------------------------------


def test_three_docs_three_records():
    docs = [build_doc(case_id=f"TC-{i}")[0] for i in range(3)]
    records, errors = build_validation_table(docs, SCHEMA)
    assert [r.case_id for r in records] == ["TC-0", "TC-1", "TC-2"] and errors == []


def test_one_malformed_of_three():
    docs = [build_doc(case_id="A")[0], build_doc(case_id="B", skip=(SectionId.PRECAUTIONARY,))[0],
            build_doc(case_id="C")[0]]
    records, errors = build_validation_table(docs, SCHEMA)
    assert [r.case_id for r in records] == ["A", "C"]
    assert len(errors) == 1 and errors[0].case_id == "B" and errors[0].error == "SectionNotFound"


def test_empty_table_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="auditcase.validation"):
        assert build_validation_table([], SCHEMA) == ([], [])
    assert "empty" in caplog.text


# -- round trip ----------------------------------------------------------------------------

_WORDS = st.sampled_from(["bid", "value", "school", "term", "clause", "price", "R$", "10", "2024", "notice",
                          "suspension", "ata", "lote", "ordem", "n.º", "área"])
_line = st.lists(_WORDS, min_size=1, max_size=8).map(" ".join)
_text = st.lists(_line, min_size=1, max_size=4).map("\n".join)


@st.composite
def records(draw) -> ValidationRecord:
    chosen = draw(st.lists(st.sampled_from(SCHEMA.names), min_size=1, max_size=6, unique=True))
    basic = {n: (draw(_line) if n in chosen else None) for n in SCHEMA.names}
    return ValidationRecord(
        case_id=draw(st.from_regex(r"TC-[0-9]{3,6}", fullmatch=True)),
        basic_info=basic,
        claims_text=draw(_text),
        requests_text=draw(_text),
        admissibility={c: draw(st.sampled_from(list(VerdictLabel))) for c in Criterion},
        precautionary={c: draw(st.sampled_from(list(PrecautionaryValue))) for c in PrecautionaryCriterion},
        recommendations_text=draw(_text),
    )


@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(records())
def test_round_trip(record):
    doc = render_instruction(record)
    assert parse_instruction(doc, SCHEMA) == record


def test_jsonl_and_csv(tmp_path):
    rec = parse_instruction(build_doc()[0], SCHEMA)
    write_jsonl([rec, rec], tmp_path / "r.jsonl")
    assert read_jsonl(tmp_path / "r.jsonl") == [rec, rec]
    write_labels_csv([rec], tmp_path / "labels.csv")
    with open(tmp_path / "labels.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["Periculum"] == "Dismissed" and rows[0]["case_id"] == "TC-1"
    assert len(rows[0]) == 9


def test_record_needs_all_labels():
    rec = parse_instruction(build_doc()[0], SCHEMA)
    with pytest.raises(ValueError):
        ValidationRecord(rec.case_id, rec.basic_info, "c", "r", {}, rec.precautionary, "x")


def test_load_instruction_dir(tmp_path):
    (tmp_path / "b.md").write_text("x", encoding="utf-8")
    (tmp_path / "a.txt").write_text("y", encoding="utf-8")
    (tmp_path / "skip.json").write_text("{}", encoding="utf-8")
    assert [d.case_id for d in load_instruction_dir(tmp_path)] == ["a", "b"]
