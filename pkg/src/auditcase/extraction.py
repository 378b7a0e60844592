"""Basic-information form filling and allegation/request extraction."""

from __future__ import annotations

import enum
import json
import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from auditcase.errors import AllegationParseError, FormParseError
from auditcase.ingest import PAGE_BREAK, ExtractedDocument
from auditcase.llm.gateway import Gateway
from auditcase.llm.templates import PromptTemplate, render_prompt
from auditcase.retrieval import CorpusId, SearchHit, SearchService

logger = logging.getLogger(__name__)

UNKNOWN = "UNKNOWN"
FIRST_PAGES = 2


class Provenance(str, enum.Enum):
    FIRST_PAGES = "FirstPages"
    RAG_SEARCH = "RagSearch"
    CRAFTED_QUERY = "CraftedQuery"


@dataclass(frozen=True)
class FormField:
    name: str
    description: str
    required: bool = False


@dataclass(frozen=True)
class FormSchema:
    fields: tuple[FormField, ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.fields]
        if len(names) != len(set(names)):
            raise ValueError("form field names must be unique")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def get(self, name: str) -> FormField:
        return next(f for f in self.fields if f.name == name)

    @classmethod
    def from_json(cls, data: Mapping) -> FormSchema:
        return cls(tuple(FormField(f["name"], f.get("description", ""), bool(f.get("required", False)))
                         for f in data["fields"]))

    @classmethod
    def load(cls, path: str | Path | None = None) -> FormSchema:
        if path is None:
            text = resources.files("auditcase.data").joinpath("form_schema.json").read_text("utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_json(json.loads(text))


@dataclass(frozen=True)
class FieldValue:
    value: str | None = None
    provenance: Provenance | None = None
    source_doc_id: str | None = None

    def __post_init__(self) -> None:
        if self.value is not None and self.provenance is None:
            raise ValueError("a filled value needs a provenance")


@dataclass
class FilledForm:
    fields: dict[str, FieldValue]

    def missing(self) -> list[str]:
        return [name for name, fv in self.fields.items() if fv.value is None]

    def values(self) -> dict[str, str | None]:
        return {name: fv.value for name, fv in self.fields.items()}

    def to_dict(self) -> dict:
        return {
            name: {
                "value": fv.value,
                "provenance": fv.provenance.value if fv.provenance else None,
                "source_doc_id": fv.source_doc_id,
            }
            for name, fv in self.fields.items()
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> FilledForm:
        return cls({
            name: FieldValue(v["value"], Provenance(v["provenance"]) if v["provenance"] else None,
                             v["source_doc_id"])
            for name, v in data.items()
        })


# -- prompts --------------------------------------------------------------

FIRST_PAGES_TEMPLATE = PromptTemplate(
    "basic_info.first_pages",
    """## Task
You are filling the registration form of an audit case. Use only the document excerpt below.
Answer with one line per field, formatted as "field_name: value".
Write "field_name: UNKNOWN" when the excerpt does not contain the information.

## Fields
{fields}

## Main document (first pages)
{document}""",
)

QUERY_TEMPLATE = PromptTemplate(
    "basic_info.query",
    """## Task
The form field below could not be found in the first pages of the main document.
Write one search query to find it in the other case documents.
Reply with a single line "QUERY: <query>".

## Field
{field}""",
)

RAG_TEMPLATE = PromptTemplate(
    "basic_info.rag",
    """## Task
Extract the form fields below from the retrieved passages.
Answer with one line per field, formatted as "field_name: value [source: n]" where n is the passage number.
Write "field_name: UNKNOWN" when no passage contains the information.

## Fields
{fields}

## Passages
{passages}""",
)

FINAL_TEMPLATE = PromptTemplate(
    "basic_info.final",
    """## Task
Final extraction pass. Extract the remaining form fields from the passages retrieved with the standard queries.
Answer with one line per field, formatted as "field_name: value [source: n]" where n is the passage number.
Write "field_name: UNKNOWN" when no passage contains the information.

## Fields
{fields}

## Passages
{passages}""",
)

FORM_REMINDER = (
    '\n\nFORMAT REMINDER: reply only with "field_name: value" lines, one per field listed above.'
)

_FORM_LINE_RE = re.compile(r"^\s*(?:[-*]\s*)?([A-Za-z_][\w ]*?)\s*:\s*(.*?)\s*$")
_SOURCE_RE = re.compile(r"\s*\[source:\s*(\d+)\]\s*$", re.IGNORECASE)
_QUERY_RE = re.compile(r"^\s*query\s*:\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)


def _field_block(schema: FormSchema, names: Sequence[str]) -> str:
    return "\n".join(f"- {n}: {schema.get(n).description}" for n in names)


def _passage_block(hits: Sequence[SearchHit]) -> str:
    return "\n".join(f"[{i}] (document {h.doc_id}) {h.text}" for i, h in enumerate(hits, start=1))


def parse_form_lines(text: str, names: Sequence[str]) -> dict[str, tuple[str | None, int | None]]:
    """Parse ``name: value [source: n]`` lines for the requested field names.

    Fields the reply does not mention are returned as unknown. A reply that
    mentions none of the requested fields is a parse error.
    """
    wanted = set(names)
    found: dict[str, tuple[str | None, int | None]] = {}
    for line in text.splitlines():
        m = _FORM_LINE_RE.match(line)
        if not m:
            continue
        name = m.group(1).strip().lower().replace(" ", "_")
        if name not in wanted or name in found:
            continue
        value = m.group(2)
        source = None
        if (sm := _SOURCE_RE.search(value)):
            source = int(sm.group(1))
            value = value[: sm.start()].rstrip()
        if not value or value.upper() == UNKNOWN:
            found[name] = (None, None)
        else:
            found[name] = (value, source)
    if not found:
        raise FormParseError("reply contains no recognizable field lines")
    return {n: found.get(n, (None, None)) for n in names}


def _ask_form(gateway: Gateway, template: PromptTemplate, variables: Mapping[str, str],
              names: Sequence[str], stage: str) -> dict[str, tuple[str | None, int | None]]:
    prompt = render_prompt(template, variables)
    reply = gateway.ask_raw(prompt, template.template_id, stage=stage)
    try:
        return parse_form_lines(reply, names)
    except FormParseError:
        reply = gateway.ask_raw(prompt + FORM_REMINDER, template.template_id, stage=stage)
        return parse_form_lines(reply, names)


def first_pages_text(doc: ExtractedDocument, pages: int = FIRST_PAGES) -> str:
    # synthetic character windows are rejoined without inserting a page break
    sep = PAGE_BREAK if PAGE_BREAK in doc.text else ""
    return sep.join(doc.pages()[:pages]).strip()


class _Blank(dict):
    def __missing__(self, key: str) -> str:
        return ""


@dataclass
class BasicInfoConfig:
    crafted_queries: dict[str, str] = field(default_factory=dict)
    top_k: int = 5


def extract_basic_info(
    main: ExtractedDocument,
    schema: FormSchema,
    search: SearchService,
    gateway: Gateway,
    config: BasicInfoConfig | None = None,
    *,
    stage: str = "basic_info",
) -> FilledForm:
    """Fill the form in three phases: first pages, model-composed searches, crafted queries."""
    config = config or BasicInfoConfig()
    excerpt = first_pages_text(main)
    if not excerpt:
        raise ValueError("main document has no text")

    names = schema.names
    skeleton = render_prompt(FIRST_PAGES_TEMPLATE, {"fields": _field_block(schema, names), "document": ""})
    excerpt = gateway.fit(excerpt, gateway.count(skeleton))
    answers = _ask_form(
        gateway, FIRST_PAGES_TEMPLATE,
        {"fields": _field_block(schema, names), "document": excerpt}, names, stage,
    )
    form = FilledForm({
        n: FieldValue(v, Provenance.FIRST_PAGES, main.doc_id) if v is not None else FieldValue()
        for n, (v, _) in answers.items()
    })

    # phase 2: one composed query per missing field
    for name in form.missing():
        block = _field_block(schema, [name])
        reply = gateway.ask(QUERY_TEMPLATE, {"field": block}, stage=stage)
        m = _QUERY_RE.search(reply)
        query = m.group(1) if m else schema.get(name).description or name
        hits = search.search(CorpusId.CASE_DOCUMENTS, query, k=config.top_k)
        if not hits:
            continue
        found = _ask_form(gateway, RAG_TEMPLATE,
                          {"fields": block, "passages": _fit_passages(gateway, RAG_TEMPLATE, block, hits)},
                          [name], stage)
        value, source = found[name]
        if value is not None:
            form.fields[name] = FieldValue(value, Provenance.RAG_SEARCH, _source_doc(hits, source))

    # phase 3: crafted queries, then one final extraction pass
    remaining = [n for n in form.missing() if n in config.crafted_queries]
    if remaining:
        known = _Blank({k: v for k, v in form.values().items() if v is not None})
        hits: list[SearchHit] = []
        seen: set[str] = set()
        for name in remaining:
            query = config.crafted_queries[name].format_map(known)
            for h in search.search(CorpusId.CASE_DOCUMENTS, query, k=config.top_k):
                if h.passage_id not in seen:
                    seen.add(h.passage_id)
                    hits.append(h)
        if hits:
            block = _field_block(schema, remaining)
            found = _ask_form(gateway, FINAL_TEMPLATE,
                              {"fields": block, "passages": _fit_passages(gateway, FINAL_TEMPLATE, block, hits)},
                              remaining, stage)
            for name, (value, source) in found.items():
                if value is not None:
                    form.fields[name] = FieldValue(value, Provenance.CRAFTED_QUERY, _source_doc(hits, source))
    return form


def _fit_passages(gateway: Gateway, template: PromptTemplate, block: str, hits: Sequence[SearchHit]) -> str:
    skeleton = render_prompt(template, {"fields": block, "passages": ""})
    return gateway.fit(_passage_block(hits), gateway.count(skeleton))


def _source_doc(hits: Sequence[SearchHit], source: int | None) -> str:
    if source is not None and 1 <= source <= len(hits):
        return hits[source - 1].doc_id
    return hits[0].doc_id


# -- allegations and requests ---------------------------------------------

DEFAULT_ALLEGATION_EXAMPLE = """ALLEGATIONS:
1. The bidding notice requires a technical certificate not provided for in law, restricting competition.
2. The winning bid was accepted without the mandatory price survey.
REQUESTS:
1. Suspend the bidding process as a precautionary measure.
2. Annul the restrictive clause of the bidding notice."""

ALLEGATIONS_TEMPLATE = PromptTemplate(
    "allegations",
    """## Instructions

You are an intelligent agent capable of reasoning and interpreting legal documents. You are given a case main document and an example of the allegations and requests to be extracted from the case main document. You must extract the allegations and requests from the case's main document.

## Example

You must provide a list of allegations and requests similar to the example provided below:

{example}

## Rules

You must follow the rules below:
1. Identify the allegations and requests presented by the plaintiff. They can be related to various aspects, including, but not limited to, the violation of a law, regulation, or contract.
2. Enumerate the allegations and requests in the same order as they appear in the case main document.
3. Write the allegations under a line "ALLEGATIONS:" and the requests under a line "REQUESTS:", one numbered item per line.

## Case main document

{document}""",
)


@dataclass(frozen=True)
class Item:
    index: int
    text: str


@dataclass
class AllegationList:
    allegations: list[Item]
    requests: list[Item]

    def __post_init__(self) -> None:
        for items in (self.allegations, self.requests):
            if [i.index for i in items] != list(range(1, len(items) + 1)):
                raise ValueError("item indices must be 1..n")

    def to_dict(self) -> dict:
        return {
            "allegations": [{"index": i.index, "text": i.text} for i in self.allegations],
            "requests": [{"index": i.index, "text": i.text} for i in self.requests],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> AllegationList:
        return cls([Item(i["index"], i["text"]) for i in data["allegations"]],
                   [Item(i["index"], i["text"]) for i in data["requests"]])


_SECTION_RE = re.compile(
    r"^\s*(?:#+\s*)?(allegations|alega[çc][õo]es|requests|pedidos|requerimentos)\s*:?\s*$",
    re.IGNORECASE,
)
_ITEM_RE = re.compile(r"^\s*(?:\d+\s*[.)-]|[-*•])\s+(.*\S)\s*$")


def parse_allegations(text: str) -> AllegationList:
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in text.splitlines():
        if (m := _SECTION_RE.match(line)):
            key = "allegations" if m.group(1).lower().startswith(("alleg", "aleg")) else "requests"
            current = sections.setdefault(key, [])
            continue
        if current is None or not line.strip():
            continue
        if (m := _ITEM_RE.match(line)):
            current.append(m.group(1))
        elif current:
            current[-1] = f"{current[-1]} {line.strip()}"
    if not sections:
        raise AllegationParseError("reply has neither an allegations nor a requests section")
    return AllegationList(
        [Item(i, t) for i, t in enumerate(sections.get("allegations", []), start=1)],
        [Item(i, t) for i, t in enumerate(sections.get("requests", []), start=1)],
    )


def extract_allegations_requests(
    main_text: str,
    gateway: Gateway,
    example: str = DEFAULT_ALLEGATION_EXAMPLE,
    *,
    stage: str = "allegations",
) -> AllegationList:
    if not main_text.strip():
        raise ValueError("main document text is empty")
    skeleton = render_prompt(ALLEGATIONS_TEMPLATE, {"example": example, "document": ""})
    document = gateway.fit(main_text.strip(), gateway.count(skeleton))
    reply = gateway.ask(ALLEGATIONS_TEMPLATE, {"example": example, "document": document}, stage=stage)
    return parse_allegations(reply)
