from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from auditcase.errors import AllegationParseError, FormParseError
from auditcase.extraction import (
    BasicInfoConfig,
    FormField,
    FormSchema,
    Provenance,
    extract_allegations_requests,
    extract_basic_info,
    first_pages_text,
    parse_allegations,
    parse_form_lines,
)
from auditcase.ingest import ExtractedDocument, ExtractorUsed
from auditcase.retrieval import CorpusId, SearchService, build_index, chunk_document
from conftest import scripted


def _doc(doc_id: str, text: str) -> ExtractedDocument:
    return ExtractedDocument(doc_id, text, text.count("\f") + 1, 0, len(text), ExtractorUsed.PRIMARY_TEXT)


MAIN = _doc("rep", "REPRESENTAÇÃO\nCase TC-9 filed by Alfa Ltda.\fPage two text.\fPage three: contract value R$ 1.")
PROCUREMENT = _doc("edital", "Edital do Pregão 5/2024. O valor total do contrato é R$ 2.500.000,00.")
OTHER = _doc("ata", "Ata da sessão pública do pregão.")

SCHEMA = FormSchema((
    FormField("case_id", "case number"),
    FormField("plaintiff_name", "who filed"),
    FormField("contract_value", "total contract value"),
))


def _service(*docs: ExtractedDocument) -> SearchService:
    passages = [p for d in docs for p in chunk_document(CorpusId.CASE_DOCUMENTS, d.doc_id, d.text)]
    return SearchService({CorpusId.CASE_DOCUMENTS: build_index(passages)})


def test_default_schema_has_26_unique_fields():
    schema = FormSchema.load()
    assert len(schema.names) == 26 == len(set(schema.names))
    for required in ("case_id", "case_type", "plaintiff_name", "plaintiff_id", "amount_involved",
                     "contract_duration", "case_summary"):
        assert required in schema.names


def test_first_pages_only_first_two():
    assert first_pages_text(MAIN) == "REPRESENTAÇÃO\nCase TC-9 filed by Alfa Ltda.\fPage two text."
    long = _doc("x", "a" * 9000)
    assert first_pages_text(long) == "a" * 6000


def test_all_fields_on_first_pages_means_no_searches():
    schema = FormSchema.load()
    reply = "\n".join(f"{n}: value of {n}" for n in schema.names)
    gw = scripted([{"template": "basic_info.first_pages", "response": reply}])
    svc = _service(MAIN, PROCUREMENT)
    form = extract_basic_info(MAIN, schema, svc, gw)
    assert svc.calls == []
    assert len(gw.records) == 1
    assert set(form.fields) == set(schema.names)
    assert all(fv.provenance is Provenance.FIRST_PAGES and fv.source_doc_id == "rep" for fv in form.fields.values())


def test_missing_value_found_by_rag_search():
    gw = scripted([
        {"template": "basic_info.first_pages",
         "response": "case_id: TC-9\nplaintiff_name: Alfa Ltda.\ncontract_value: UNKNOWN"},
        {"template": "basic_info.query", "response": "QUERY: valor total do contrato"},
        {"template": "basic_info.rag", "contains": ["valor total do contrato"],
         "response": "contract_value: R$ 2.500.000,00 [source: 1]"},
    ])
    svc = _service(MAIN, PROCUREMENT, OTHER)
    form = extract_basic_info(MAIN, SCHEMA, svc, gw)
    fv = form.fields["contract_value"]
    assert fv.value == "R$ 2.500.000,00"
    assert fv.provenance is Provenance.RAG_SEARCH
    assert fv.source_doc_id == "edital"
    assert svc.calls == [(CorpusId.CASE_DOCUMENTS, "valor total do contrato")]


def test_crafted_query_phase_and_final_pass():
    gw = scripted([
        {"template": "basic_info.first_pages",
         "response": "case_id: TC-9\nplaintiff_name: UNKNOWN\ncontract_value: UNKNOWN"},
        {"template": "basic_info.query", "response": "QUERY: zzz nothing"},
        {"template": "basic_info.rag", "response": "plaintiff_name: UNKNOWN\ncontract_value: UNKNOWN"},
        {"template": "basic_info.final", "contains": ["valor total"],
         "response": "contract_value: R$ 2.500.000,00 [source: 1]"},
    ])
    svc = _service(MAIN, PROCUREMENT, OTHER)
    cfg = BasicInfoConfig(crafted_queries={"contract_value": "valor total do contrato {case_id}"})
    form = extract_basic_info(MAIN, SCHEMA, svc, gw, cfg)
    assert form.fields["contract_value"].provenance is Provenance.CRAFTED_QUERY
    assert form.fields["contract_value"].source_doc_id == "edital"
    assert (CorpusId.CASE_DOCUMENTS, "valor total do contrato TC-9") in svc.calls
    # absent only after all three phases
    assert form.fields["plaintiff_name"].value is None
    assert form.fields["plaintiff_name"].provenance is None
    assert set(form.fields) == set(SCHEMA.names)


def test_extraction_is_deterministic():
    entries = [{"template": "basic_info.first_pages", "response": "case_id: TC-9\nplaintiff_name: A\ncontract_value: 1"}]
    a = extract_basic_info(MAIN, SCHEMA, _service(MAIN), scripted(entries))
    b = extract_basic_info(MAIN, SCHEMA, _service(MAIN), scripted(entries))
    assert a.to_dict() == b.to_dict()


def test_form_parse_error_after_reprompt():
    gw = scripted([{"template": "basic_info.first_pages", "response": "I cannot help."}])
    with pytest.raises(FormParseError):
        extract_basic_info(MAIN, SCHEMA, _service(MAIN), gw)
    assert len(gw.records) == 2


def test_form_reprompt_recovers():
    gw = scripted([
        {"template": "basic_info.first_pages", "contains": ["FORMAT REMINDER"],
         "response": "case_id: TC-9\nplaintiff_name: A\ncontract_value: 1"},
        {"template": "basic_info.first_pages", "response": "Sure! Here you go."},
    ])
    form = extract_basic_info(MAIN, SCHEMA, _service(MAIN), gw)
    assert form.values() == {"case_id": "TC-9", "plaintiff_name": "A", "contract_value": "1"}


def test_empty_main_document_rejected():
    with pytest.raises(ValueError):
        extract_basic_info(_doc("rep", "   "), SCHEMA, _service(MAIN), scripted([]))


def test_parse_form_lines_variants():
    out = parse_form_lines("- Case ID: X-1\nplaintiff_name:  UNKNOWN \nnoise line\ncontract_value: 5 [source: 2]",
                           ["case_id", "plaintiff_name", "contract_value"])
    assert out == {"case_id": ("X-1", None), "plaintiff_name": (None, None), "contract_value": ("5", 2)}


# -- allegations -----------------------------------------------------------------------


def test_three_allegations_two_requests():
    reply = "ALLEGATIONS:\n1. A one\n2. A two\n3. A three\nREQUESTS:\n1. R one\n2. R two"
    result = extract_allegations_requests("main text", scripted([{"template": "allegations", "response": reply}]))
    assert [i.index for i in result.allegations] == [1, 2, 3]
    assert [i.index for i in result.requests] == [1, 2]
    assert result.allegations[2].text == "A three"


def test_requests_before_allegations():
    result = parse_allegations("REQUESTS:\n1. R one\n2. R two\n\nALLEGATIONS:\n1. A one")
    assert [i.text for i in result.requests] == ["R one", "R two"]
    assert [i.text for i in result.allegations] == ["A one"]


def test_no_sections_is_error():
    with pytest.raises(AllegationParseError):
        parse_allegations("no allegations found")


def test_continuation_lines_join():
    result = parse_allegations("Alegações:\n1. first line\n   continues here\n2) second")
    assert [i.text for i in result.allegations] == ["first line continues here", "second"]


def test_empty_main_text_rejected():
    with pytest.raises(ValueError):
        extract_allegations_requests("  ", scripted([]))


_item_text = st.text(alphabet=st.characters(whitelist_categories=("L", "N"), whitelist_characters=" ,;"),
                     min_size=1, max_size=30).map(str.strip).filter(bool)


@given(st.lists(_item_text, max_size=8), st.lists(_item_text, max_size=8), st.booleans())
def test_parser_property(allegations, requests, requests_first):
    blocks = [
        "ALLEGATIONS:\n" + "\n".join(f"{i}. {t}" for i, t in enumerate(allegations, 1)),
        "REQUESTS:\n" + "\n".join(f"{i}. {t}" for i, t in enumerate(requests, 1)),
    ]
    if requests_first:
        blocks.reverse()
    result = parse_allegations("\n".join(blocks))
    assert [i.text for i in result.allegations] == allegations
    assert [i.text for i in result.requests] == requests
    assert [i.index for i in result.allegations] == list(range(1, len(allegations) + 1))
    assert [i.index for i in result.requests] == list(range(1, len(requests) + 1))
