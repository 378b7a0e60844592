"""Case bundle loading, text extraction with OCR fallback, and extraction quality.

A case bundle is a directory holding ``manifest.json`` and the files it lists::

    {
        "case_id": "TC-001",
        "submitted_at": "2024-03-01T00:00:00Z",      # optional
        "documents": [
            {"doc_id": "rep", "path": "rep.txt", "declared_kind": "Main"},
            {"doc_id": "d1", "path": "docs/contract.txt", "declared_kind": "Supporting"}
        ]
    }
"""

from __future__ import annotations

import enum
import json
import logging
import math
import threading
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

from auditcase.errors import ExtractionFailed, IoError, ManifestError, QualityUndefined

logger = logging.getLogger(__name__)

CHARS_PER_PAGE = 3000
PAGE_BREAK = "\f"
REPLACEMENT_CHAR = "�"
_ALLOWED_CONTROLS = frozenset("\n\r\t")


class DocKind(str, enum.Enum):
    MAIN = "Main"
    SUPPORTING = "Supporting"


class Searchability(str, enum.Enum):
    SEARCHABLE = "Searchable"
    UNSEARCHABLE = "Unsearchable"


class ExtractorUsed(str, enum.Enum):
    PRIMARY_TEXT = "PrimaryText"
    OCR_FALLBACK = "OcrFallback"


class DifficultyClass(str, enum.Enum):
    EASY = "Easy"
    MEDIUM = "Medium"
    HARD = "Hard"


@dataclass(frozen=True)
class RawDocument:
    doc_id: str
    source_path: Path
    byte_size: int
    declared_kind: DocKind


@dataclass(frozen=True)
class CaseBundle:
    case_id: str
    root: Path
    documents: tuple[RawDocument, ...]
    submitted_at: str | None = None

    @property
    def main(self) -> RawDocument:
        return next(d for d in self.documents if d.declared_kind is DocKind.MAIN)

    def get(self, doc_id: str) -> RawDocument:
        for doc in self.documents:
            if doc.doc_id == doc_id:
                return doc
        raise KeyError(doc_id)


@dataclass(frozen=True)
class ExtractedDocument:
    doc_id: str
    text: str
    page_count: int
    invalid_char_count: int
    total_char_count: int
    extractor_used: ExtractorUsed

    def __post_init__(self) -> None:
        if self.invalid_char_count > self.total_char_count:
            raise ValueError("invalid_char_count exceeds total_char_count")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["extractor_used"] = self.extractor_used.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> ExtractedDocument:
        return cls(
            doc_id=data["doc_id"],
            text=data["text"],
            page_count=int(data["page_count"]),
            invalid_char_count=int(data["invalid_char_count"]),
            total_char_count=int(data["total_char_count"]),
            extractor_used=ExtractorUsed(data["extractor_used"]),
        )

    def pages(self) -> list[str]:
        return split_pages(self.text)


def load_bundle(path: str | Path) -> CaseBundle:
    root = Path(path)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"no manifest.json in {root}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest.json is not valid JSON: {exc}") from exc

    case_id = manifest.get("case_id") or root.name
    entries = manifest.get("documents")
    if not isinstance(entries, list) or not entries:
        raise ManifestError("manifest lists no documents")

    docs: list[RawDocument] = []
    seen: set[str] = set()
    for entry in entries:
        try:
            doc_id = str(entry["doc_id"])
            rel = entry["path"]
            kind = DocKind(entry["declared_kind"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad manifest entry {entry!r}") from exc
        if doc_id in seen:
            raise ManifestError(f"duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        src = root / rel
        size = src.stat().st_size if src.exists() else 0
        docs.append(RawDocument(doc_id, src, size, kind))

    mains = [d for d in docs if d.declared_kind is DocKind.MAIN]
    if len(mains) != 1:
        raise ManifestError(f"expected exactly one Main document, found {len(mains)}")
    return CaseBundle(str(case_id), root, tuple(docs), manifest.get("submitted_at"))


# -- character accounting -------------------------------------------------


def is_invalid_char(ch: str) -> bool:
    if ch == REPLACEMENT_CHAR:
        return True
    return unicodedata.category(ch) == "Cc" and ch not in _ALLOWED_CONTROLS and ch != PAGE_BREAK


def count_invalid_chars(text: str) -> int:
    return sum(1 for ch in text if is_invalid_char(ch))


def count_searchable_chars(text: str) -> int:
    return sum(1 for ch in text if not ch.isspace() and not is_invalid_char(ch))


def classify_searchability(doc: RawDocument, probe_text: str) -> Searchability:
    if not doc.source_path.exists():
        raise IoError(f"cannot read {doc.source_path}")
    if count_searchable_chars(probe_text) == 0:
        return Searchability.UNSEARCHABLE
    return Searchability.SEARCHABLE


def split_pages(text: str) -> list[str]:
    """Split on form feeds when present, otherwise into fixed-size character windows."""
    if PAGE_BREAK in text:
        return text.split(PAGE_BREAK)
    if not text:
        return [""]
    return [text[i : i + CHARS_PER_PAGE] for i in range(0, len(text), CHARS_PER_PAGE)]


def estimate_page_count(text: str) -> int:
    if PAGE_BREAK in text:
        return text.count(PAGE_BREAK) + 1
    return max(1, math.ceil(len(text) / CHARS_PER_PAGE))


def extraction_quality(doc: ExtractedDocument) -> float:
    """Fraction of invalid characters among all extracted characters."""
    if doc.total_char_count == 0:
        raise QualityUndefined(f"{doc.doc_id}: no characters extracted")
    return doc.invalid_char_count / doc.total_char_count


def classify_difficulty(
    page_count: int, has_structured: bool, has_images_or_handwriting: bool
) -> DifficultyClass:
    if page_count < 0:
        raise ValueError("page_count must be >= 0")
    if page_count > 25:
        return DifficultyClass.HARD
    if page_count <= 10 and not has_structured and not has_images_or_handwriting:
        return DifficultyClass.EASY
    # up to 25 pages with structured content, or 11-25 plain pages
    return DifficultyClass.MEDIUM


def has_structured_content(text: str) -> bool:
    """Cheap table detector: any line with two or more column separators."""
    return any(line.count("|") >= 2 or line.count("\t") >= 2 for line in text.splitlines())


# -- extractors -----------------------------------------------------------


@dataclass
class ExtractorResult:
    text: str
    page_count: int | None = None


class TextExtractor(Protocol):
    name: str
    concurrent_safe: bool

    def extract(self, path: Path) -> ExtractorResult: ...


class PlainTextExtractor:
    """Primary extractor for text-bearing files; undecodable bytes become U+FFFD."""

    name = "plain-text"
    concurrent_safe = True

    def extract(self, path: Path) -> ExtractorResult:
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        return ExtractorResult(raw.decode("utf-8", errors="replace"))


class StubOcrExtractor:
    """Stand-in for an OCR service.

    Returns text configured per file name, or read from a ``<file>.ocr.txt``
    sidecar. Anything else is an extraction failure.
    """

    name = "stub-ocr"
    concurrent_safe = False

    def __init__(self, texts: dict[str, str] | None = None) -> None:
        self.texts = dict(texts or {})

    def extract(self, path: Path) -> ExtractorResult:
        if path.name in self.texts:
            return ExtractorResult(self.texts[path.name])
        sidecar = path.with_name(path.name + ".ocr.txt")
        if sidecar.exists():
            return ExtractorResult(sidecar.read_text(encoding="utf-8"))
        raise IoError(f"OCR backend has no result for {path.name}")


def _build_document(
    doc: RawDocument, result: ExtractorResult, used: ExtractorUsed
) -> ExtractedDocument:
    text = result.text
    pages = result.page_count if result.page_count is not None else estimate_page_count(text)
    return ExtractedDocument(
        doc_id=doc.doc_id,
        text=text,
        page_count=pages,
        invalid_char_count=count_invalid_chars(text),
        total_char_count=len(text),
        extractor_used=used,
    )


def extract_text(
    doc: RawDocument,
    primary: TextExtractor,
    fallback: TextExtractor,
    max_invalid_ratio: float | None = None,
) -> ExtractedDocument:
    """Extract with ``primary``; fall back to OCR when it yields nothing searchable.

    ``max_invalid_ratio`` optionally vetoes a nonempty primary extraction whose
    invalid-character ratio exceeds the threshold. ``None`` disables the veto.
    """
    primary_cause = ""
    try:
        result = primary.extract(doc.source_path)
    except Exception as exc:  # any backend failure routes to the fallback
        primary_cause = f"{type(exc).__name__}: {exc}"
    else:
        if count_searchable_chars(result.text) > 0:
            extracted = _build_document(doc, result, ExtractorUsed.PRIMARY_TEXT)
            if max_invalid_ratio is None or extraction_quality(extracted) <= max_invalid_ratio:
                return extracted
            primary_cause = f"invalid-char ratio {extraction_quality(extracted):.3f} over threshold"
        else:
            primary_cause = "zero searchable characters"

    logger.info("doc %s: primary extraction unusable (%s), using OCR", doc.doc_id, primary_cause)
    try:
        result = fallback.extract(doc.source_path)
    except Exception as exc:
        raise ExtractionFailed(doc.doc_id, primary_cause, f"{type(exc).__name__}: {exc}") from exc
    if count_searchable_chars(result.text) == 0:
        raise ExtractionFailed(doc.doc_id, primary_cause, "zero searchable characters")
    return _build_document(doc, result, ExtractorUsed.OCR_FALLBACK)


class _Serialized:
    """Wraps an extractor that is not safe for concurrent use behind a lock."""

    def __init__(self, inner: TextExtractor) -> None:
        self._inner = inner
        self._lock = threading.Lock()
        self.name = inner.name
        self.concurrent_safe = True

    def extract(self, path: Path) -> ExtractorResult:
        with self._lock:
            return self._inner.extract(path)


@dataclass
class IngestResult:
    documents: list[ExtractedDocument]
    difficulty: dict[str, DifficultyClass] = field(default_factory=dict)
    quality: dict[str, float] = field(default_factory=dict)


def ingest_bundle(
    bundle: CaseBundle,
    primary: TextExtractor | None = None,
    fallback: TextExtractor | None = None,
    *,
    max_invalid_ratio: float | None = None,
    workers: int = 1,
) -> IngestResult:
    primary = primary or PlainTextExtractor()
    fallback = fallback or StubOcrExtractor()
    if not primary.concurrent_safe:
        primary = _Serialized(primary)
    if not fallback.concurrent_safe:
        fallback = _Serialized(fallback)

    def run(doc: RawDocument) -> ExtractedDocument:
        return extract_text(doc, primary, fallback, max_invalid_ratio)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            docs = list(pool.map(run, bundle.documents))
    else:
        docs = [run(d) for d in bundle.documents]

    result = IngestResult(docs)
    for doc in docs:
        result.difficulty[doc.doc_id] = classify_difficulty(
            doc.page_count,
            has_structured_content(doc.text),
            doc.extractor_used is ExtractorUsed.OCR_FALLBACK,
        )
        result.quality[doc.doc_id] = extraction_quality(doc)
    return result
